#include "mvfa/objective.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "mvfa/rng.hpp"

namespace mvfa {

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be a finite non-negative number");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("train: gamma outside [0, 1]");
    if (!(tau > 0.0)) throw ConfigError("train: tau must be positive");
    if (weights.dice < 0.0 || weights.focal < 0.0 || weights.bce < 0.0) {
        throw ConfigError("train: loss weights must be non-negative");
    }
    if (levels == LevelMask{}) throw ConfigError("train: at least one level must be enabled");
}

namespace {

void require_map_pair(const char* op, const Tensor& prob, const Tensor& mask) {
    if (prob.shape() != mask.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(prob.shape()) + " vs " +
                         shape_str(mask.shape()));
    }
}

}  // namespace

Tensor dice_loss(const Tensor& prob, const Tensor& mask) {
    require_map_pair("dice_loss", prob, mask);
    Tensor inter = sum(mul(prob, mask));
    Tensor numer = add_scalar(scale(inter, 2.0), kDiceSmooth);
    double mask_sum = 0.0;
    for (double v : mask.data()) mask_sum += v;
    Tensor denom = add_scalar(sum(prob), mask_sum + kDiceSmooth);
    return add_scalar(scale(div(numer, denom), -1.0), 1.0);
}

Tensor focal_loss(const Tensor& prob, const Tensor& mask) {
    require_map_pair("focal_loss", prob, mask);
    Tensor p = clamp(prob, kProbClamp, 1.0 - kProbClamp);
    Tensor inv_mask = add_scalar(scale(mask, -1.0), 1.0);
    Tensor pt = add(mul(mask, p), mul(inv_mask, add_scalar(scale(p, -1.0), 1.0)));
    Tensor one_minus = add_scalar(scale(pt, -1.0), 1.0);
    return scale(mean(mul(mul(one_minus, one_minus), log(pt))), -1.0);
}

Tensor bce_image(const Tensor& prob, int label) {
    if (prob.numel() != 1) throw ShapeError("bce_image: expected a scalar probability, got " + shape_str(prob.shape()));
    if (label != 0 && label != 1) throw ContractError("bce_image: label must be 0 or 1");
    Tensor p = clamp(prob, kProbClamp, 1.0 - kProbClamp);
    if (label == 1) return scale(log(p), -1.0);
    return scale(log(add_scalar(scale(p, -1.0), 1.0)), -1.0);
}

Tensor anomaly_probability(const Tensor& features, const Tensor& text, double tau) {
    return slice_cols(softmax_rows(similarity_logits(features, text, tau)), 1, 1);
}

Tensor level_loss(const Tensor& cls, const Tensor& seg, const Tensor& text, int label, const Tensor* mask,
                  const LossWeights& w, double tau) {
    Tensor total;
    auto accumulate = [&](const Tensor& term, double weight) {
        Tensor t = scale(term, weight);
        total = total.defined() ? add(total, t) : t;
    };

    if (mask && (w.dice > 0.0 || w.focal > 0.0)) {
        if (mask->rank() != 2) throw ShapeError("level_loss: mask must be h x w, got " + shape_str(mask->shape()));
        Tensor grid = anomaly_probability(seg, text, tau);
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(grid.rows()))));
        if (side * side != grid.rows()) throw ShapeError("level_loss: token count is not a square grid");
        Tensor prob = bilinear_upsample(reshape(grid, {side, side}), mask->rows(), mask->cols());
        if (w.dice > 0.0) accumulate(dice_loss(prob, *mask), w.dice);
        if (w.focal > 0.0) accumulate(focal_loss(prob, *mask), w.focal);
    }
    if (w.bce > 0.0 || !total.defined()) {
        Tensor score = max_all(anomaly_probability(cls, text, tau));
        accumulate(bce_image(score, label), w.bce);
    }
    return total;
}

Tensor total_loss(const AdaptedFeatures& features, const Tensor& text, int label, const Tensor* mask,
                  const LossWeights& weights, double tau, const LevelMask& levels) {
    Tensor total;
    for (std::size_t l = 0; l < 4; ++l) {
        if (!levels[l]) continue;
        Tensor term = level_loss(features.cls[l], features.seg[l], text, label, mask, weights, tau);
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) throw ConfigError("total_loss: no level enabled");
    return total;
}

void adam_step(std::span<const Tensor> params, const GradientMap& grads, AdamState& state, double lr) {
    for (const Tensor& p : params) {
        if (!grads.contains(p)) throw ContractError("adam_step: missing gradient for parameter '" + p.name() + "'");
        if (grads.at(p).shape() != p.shape()) {
            throw ShapeError("adam_step: gradient shape mismatch for '" + p.name() + "'");
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (const Tensor& p : params) {
        auto g = grads.at(p).data();
        auto& [m, v] = state.moments[p.name()];
        if (m.empty()) {
            m.assign(p.numel(), 0.0);
            v.assign(p.numel(), 0.0);
        }
        std::vector<double> updated(p.data().begin(), p.data().end());
        for (std::size_t i = 0; i < updated.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            updated[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        Tensor leaf = p;
        leaf.assign(updated);
    }
}

TrainResult train(const std::vector<TrainingSample>& data, const FrozenBackbone& backbone, MVFAParams& params,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (data.empty()) throw DataError("train: dataset is empty");
    params.gamma = config.gamma;

    const std::vector<Tensor> trainable = params.tensors();
    AdamState adam;
    TrainResult result;
    std::vector<std::size_t> order(data.size());

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(config.seed, 0xE90C0000ULL + epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
            std::swap(order[i - 1], order[j]);
        }

        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            std::unordered_map<const TensorImpl*, std::vector<double>> acc;
            for (std::size_t k = start; k < end; ++k) {
                const TrainingSample& s = data[order[k]];
                const std::string where = "epoch " + std::to_string(epoch + 1) + ", step " +
                                          std::to_string(result.steps + 1) + ", sample " + std::to_string(order[k]);
                Tensor loss;
                try {
                    auto [features, stages] = adapt_forward(backbone, params, s.image);
                    loss = total_loss(features, s.text, s.label, s.mask ? &*s.mask : nullptr, config.weights,
                                      config.tau, config.levels);
                } catch (const NumericError& e) {
                    // Diverged parameters can break the forward pass before the loss exists.
                    throw NumericError("train: " + std::string(e.what()) + " at " + where);
                }
                const double value = loss.item();
                if (!std::isfinite(value)) throw NumericError("train: non-finite loss at " + where);
                epoch_sum += value;
                GradientMap g = backward(loss);
                for (const auto& e : g.entries()) {
                    auto& slot = acc[e.leaf.id()];
                    if (slot.empty()) slot.assign(e.leaf.numel(), 0.0);
                    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += e.grad[i] * inv_batch;
                }
            }
            // Parameters disconnected from every enabled level (ablation
            // masks) have no gradient and are left untouched.
            GradientMap batch_grads;
            std::vector<Tensor> active;
            for (const Tensor& p : trainable) {
                auto it = acc.find(p.id());
                if (it == acc.end()) continue;
                batch_grads.add(p, Tensor::from(p.shape(), std::move(it->second), Precision::f64));
                active.push_back(p);
            }
            adam_step(active, batch_grads, adam, config.lr);
            ++result.steps;
        }
        const double epoch_mean = epoch_sum / static_cast<double>(data.size());
        result.epoch_loss.push_back(epoch_mean);
        if (on_epoch) on_epoch(epoch + 1, epoch_mean);
    }
    return result;
}

std::string loss_log_csv(const TrainResult& result) {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,mean_loss\n";
    for (std::size_t i = 0; i < result.epoch_loss.size(); ++i) os << (i + 1) << ',' << result.epoch_loss[i] << '\n';
    return os.str();
}

}  // namespace mvfa
