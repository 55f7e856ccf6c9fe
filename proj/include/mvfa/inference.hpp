#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mvfa/adaptation.hpp"
#include "mvfa/backbone.hpp"
#include "mvfa/objective.hpp"
#include "mvfa/tensor.hpp"

namespace mvfa {

// Unit-norm features of normal reference images, per level (index 0 is
// level 1). Each store is N x d with N = K * G.
struct MemoryBank {
    std::array<Tensor, 4> cls;
    std::array<Tensor, 4> seg;

    bool empty() const { return !cls[0].defined(); }
    std::size_t dim() const { return cls[0].cols(); }
};

MemoryBank build_memory_bank(std::span<const Tensor> normal_images, const FrozenBackbone& backbone,
                             const MVFAParams& params);

// Row-wise l2 normalization used for both bank rows and queries: computed in
// double and rounded to float.
std::vector<float> unit_rows(const Tensor& features);

// For each query row, 1 - max cosine against every store row (clamped at 0).
// Store rows must already be unit norm.
std::vector<double> nearest_distances(const Tensor& query, const Tensor& store);

// Output of one scoring branch. level_c / level_maps are kept for every
// enabled level; disabled levels stay undefined / zero.
struct BranchScores {
    std::array<double, 4> level_c{};
    std::array<Tensor, 4> level_maps;  // h x w
    double c = 0.0;
    Tensor map;  // h x w, mean of enabled level maps
};

BranchScores zero_shot(const AdaptedFeatures& features, const Tensor& text, double tau, std::size_t h,
                       std::size_t w, const LevelMask& levels = kAllLevels);

BranchScores few_shot(const AdaptedFeatures& features, const MemoryBank& bank, std::size_t h, std::size_t w,
                      const LevelMask& levels = kAllLevels);

struct AnomalyResult {
    double c_pred = 0.0;
    Tensor s_pred;
    double c_zero = 0.0;
    Tensor s_zero;
    double c_few = 0.0;
    Tensor s_few;
};

// c_pred = beta1 c_zero + beta2 c_few; s_pred likewise elementwise.
AnomalyResult fuse(double c_zero, double c_few, const Tensor& s_zero, const Tensor& s_few, double beta1,
                   double beta2);

struct InferenceConfig {
    double beta1 = 0.5;
    double beta2 = 0.5;
    double tau = kDefaultTau;
    LevelMask levels = kAllLevels;
    bool normalize_few = false;  // min-max scale the few-shot map per image before fusion

    void validate() const;
};

struct ScoredImage {
    AnomalyResult result;
    BranchScores zero;
    BranchScores few;  // empty when the bank is absent
};

// Full test-time path for one image. bank may be null only when beta2 == 0.
ScoredImage score_image(const FrozenBackbone& backbone, const MVFAParams& params, const Tensor& text,
                        const MemoryBank* bank, const Tensor& image, const InferenceConfig& config);

// ---- file formats ----------------------------------------------------------

inline constexpr std::uint32_t kBankVersion = 1;

std::vector<std::uint8_t> encode_bank(const MemoryBank& bank);
MemoryBank decode_bank(std::span<const std::uint8_t> bytes);
void save_bank(const std::filesystem::path& path, const MemoryBank& bank);
MemoryBank load_bank(const std::filesystem::path& path);

struct AnomalyMap {
    std::uint32_t h = 0;
    std::uint32_t w = 0;
    std::vector<float> values;  // row-major
};

AnomalyMap to_anomaly_map(const Tensor& map);
std::vector<std::uint8_t> encode_map(const AnomalyMap& map);
AnomalyMap decode_map(std::span<const std::uint8_t> bytes);
// 8-bit rendering, min-max scaled per map (constant maps render as 0).
std::vector<std::uint8_t> render_map_pixels(const AnomalyMap& map);

}  // namespace mvfa
