#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mvfa/backbone.hpp"
#include "mvfa/tensor.hpp"

namespace mvfa {

// Bottleneck transform relu(f * w1) * w2 with w1: d x r, w2: r x d.
struct Adapter {
    Tensor w1;
    Tensor w2;

    Tensor apply(const Tensor& f) const;
};

struct DualAdapter {
    Adapter cls;
    Adapter seg;
};

struct Projector {
    Tensor w_cls;
    Tensor w_seg;
};

// Which adapted output is mixed into the feature handed to the next stage.
enum class FeedMode : std::uint8_t { mean = 0, cls = 1, seg = 2 };

// adapter: adapted features feed the following backbone stages.
// projector: per-level outputs are computed in isolation and the backbone
// runs on its own frozen features.
enum class Architecture : std::uint8_t { adapter = 0, projector = 1 };

struct ArchitectureFlags {
    FeedMode feed = FeedMode::mean;
    bool single_adapter = false;  // seg branch reuses the cls adapter
    Architecture architecture = Architecture::adapter;

    bool operator==(const ArchitectureFlags&) const = default;
};

std::string to_string(FeedMode mode);
std::string to_string(Architecture arch);
FeedMode parse_feed_mode(const std::string& s);
Architecture parse_architecture(const std::string& s);

// The complete trainable state: dual adapters for levels 1..3 and the
// level-4 projector.
struct MVFAParams {
    std::array<DualAdapter, 3> dual;
    Projector proj;
    double gamma = 0.1;
    ArchitectureFlags flags;

    // w1 seeded normal * 1/sqrt(d), w2 zero, projector seeded normal *
    // 1/sqrt(d); bottleneck r = d / 4.
    static MVFAParams init(std::size_t dim, std::uint64_t seed, Precision precision = Precision::f32,
                           double gamma = 0.1, ArchitectureFlags flags = {});

    const Adapter& cls_adapter(int level) const { return dual.at(level - 1).cls; }
    const Adapter& seg_adapter(int level) const {
        return flags.single_adapter ? dual.at(level - 1).cls : dual.at(level - 1).seg;
    }

    // Trainable tensors in checkpoint order (seg adapters omitted in
    // single-adapter mode).
    std::vector<Tensor> tensors() const;
    std::size_t dim() const { return proj.w_cls.rows(); }
    std::size_t bottleneck() const { return dual[0].cls.w1.cols(); }
    MVFAParams clone() const;
};

// Per-level features: index 0..3 holds levels 1..4.
struct AdaptedFeatures {
    std::array<Tensor, 4> cls;
    std::array<Tensor, 4> seg;
};

Tensor apply_adapter(const Tensor& f, const Adapter& adapter);

// gamma * adapted + (1 - gamma) * f.
Tensor residual_mix(const Tensor& f, const Tensor& adapted, double gamma);

std::pair<AdaptedFeatures, StageFeatures> adapt_forward(const FrozenBackbone& backbone, const MVFAParams& params,
                                                        const Tensor& image);

// Cosine logits of each feature row against the normal/abnormal text rows,
// divided by tau. Result is G x 2.
Tensor similarity_logits(const Tensor& features, const Tensor& text, double tau);

constexpr double kDefaultTau = 0.07;

// ---- checkpoint ------------------------------------------------------------

struct Checkpoint {
    BackboneConfig backbone;
    MVFAParams params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const BackboneConfig& backbone, const MVFAParams& params);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const BackboneConfig& backbone, const MVFAParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mvfa
