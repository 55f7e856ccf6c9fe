#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "mvfa/tensor.hpp"

namespace mvfa {

struct BackboneConfig {
    std::uint32_t image_size = 64;
    std::uint32_t patch_size = 8;
    std::uint32_t dim = 64;
    std::uint32_t stages = 4;
    std::uint32_t blocks_per_stage = 2;
    std::uint32_t heads = 4;
    std::uint32_t channels = 1;
    std::uint32_t mlp_ratio = 4;
    std::uint64_t seed = 0;

    // Throws ConfigError on inconsistent fields.
    void validate() const;
    std::size_t grid_side() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid_side() * grid_side(); }

    bool operator==(const BackboneConfig&) const = default;
};

// Raw stage outputs: levels[l-1] is the output of stage S_l for l = 1..3,
// f_vis the output of S_4. All are G x d.
struct StageFeatures {
    std::array<Tensor, 3> levels;
    Tensor f_vis;
};

// Transform applied to the output of stage l (1..3) before it enters stage
// l+1. Must return a G x d tensor.
using StageHook = std::function<Tensor(int level, const Tensor& features)>;

struct EncoderBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_up, mlp_down;
};

// Pre-norm ViT encoder with fixed random weights and sinusoidal positions.
// No class token; tokens are patches only.
class FrozenBackbone {
public:
    static FrozenBackbone init(const BackboneConfig& config, Precision precision = Precision::f32);

    const BackboneConfig& config() const { return config_; }
    Precision precision() const { return precision_; }

    // Image is h x w x c with h = w = image_size.
    StageFeatures forward(const Tensor& image) const;
    StageFeatures forward_with_hooks(const Tensor& image, const StageHook& hook) const;

    // Patch tokens with positions added (input to stage 1).
    Tensor embed(const Tensor& image) const;
    Tensor run_stage(std::size_t stage, Tensor x) const;

    // Every weight tensor, in a fixed order.
    std::vector<Tensor> weights() const;

private:
    Tensor run_block(const EncoderBlock& block, const Tensor& x) const;

    BackboneConfig config_;
    Precision precision_ = Precision::f32;
    Tensor patch_embed_;
    Tensor positions_;
    std::vector<EncoderBlock> blocks_;
};

// Patch flattening: G x (patch_size^2 * c), patches in row-major grid order,
// pixels row-major within a patch, channels innermost.
Tensor patchify(const Tensor& image, std::size_t patch_size);

Tensor sinusoidal_positions(std::size_t tokens, std::size_t dim, Precision precision);

}  // namespace mvfa
