#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvfa/adaptation.hpp"
#include "mvfa/backbone.hpp"
#include "mvfa/tensor.hpp"

namespace mvfa {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

struct LossWeights {
    double dice = 1.0;
    double focal = 1.0;
    double bce = 1.0;
};

// Which of the four levels contribute; index 0 is level 1.
using LevelMask = std::array<bool, 4>;
inline constexpr LevelMask kAllLevels{true, true, true, true};

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 50;
    std::uint64_t seed = 42;
    double gamma = 0.1;
    LossWeights weights;
    double tau = kDefaultTau;
    LevelMask levels = kAllLevels;

    void validate() const;
};

// 1 - (2 sum(p s) + 1) / (sum(p) + sum(s) + 1).
Tensor dice_loss(const Tensor& prob, const Tensor& mask);

// Mean over pixels of -(1 - p_t)^2 log(p_t), p_t = p where s = 1 else 1 - p.
Tensor focal_loss(const Tensor& prob, const Tensor& mask);

// -[c log(p) + (1 - c) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
Tensor bce_image(const Tensor& prob, int label);

// Anomaly-channel probabilities of the G x 2 softmax over text logits.
Tensor anomaly_probability(const Tensor& features, const Tensor& text, double tau);

// Alignment loss of one level. The seg terms are skipped when mask is null
// (classification-only samples); mask is h x w at image resolution.
Tensor level_loss(const Tensor& cls, const Tensor& seg, const Tensor& text, int label, const Tensor* mask,
                  const LossWeights& weights, double tau = kDefaultTau);

Tensor total_loss(const AdaptedFeatures& features, const Tensor& text, int label, const Tensor* mask,
                  const LossWeights& weights, double tau = kDefaultTau, const LevelMask& levels = kAllLevels);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

// Bias-corrected Adam over params. Every param must have a gradient entry.
void adam_step(std::span<const Tensor> params, const GradientMap& grads, AdamState& state, double lr);

struct TrainingSample {
    Tensor image;               // h x w x c
    int label = 0;              // 0 normal, 1 anomalous
    std::optional<Tensor> mask; // h x w in {0, 1}; absent for classification-only data
    Tensor text;                // 2 x d text features for the sample's modality
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
    std::uint64_t steps = 0;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Seeded mini-batch Adam over the trainable tensors of params (updated in
// place). Throws NumericError on a non-finite loss.
TrainResult train(const std::vector<TrainingSample>& data, const FrozenBackbone& backbone, MVFAParams& params,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

std::string loss_log_csv(const TrainResult& result);

}  // namespace mvfa
