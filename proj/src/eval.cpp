#include "mvfa/eval.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mvfa {

double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        // Ranks i+1 .. j+1 share their mean.
        const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) {
                rank_sum_pos += midrank;
                ++n_pos;
            } else if (labels[order[k]] != 0) {
                throw DataError("auc: labels must be 0 or 1");
            }
        }
        i = j + 1;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw DataError("auc: undefined with a single class present");
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

std::size_t threads_from_env() {
    if (const char* v = std::getenv("MVFA_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(v, &end, 10);
        if (end != v && n > 0) return static_cast<std::size_t>(n);
    }
    return 1;
}

std::vector<ScoredSample> score_samples(const FrozenBackbone& backbone, const MVFAParams& params,
                                        const TextTable& text, const MemoryBank* bank,
                                        std::span<const Sample> samples, const InferenceConfig& config,
                                        std::size_t threads) {
    config.validate();
    if (config.beta2 > 0.0 && (!bank || bank->empty())) {
        throw ConfigError("evaluate: beta2 > 0 requires a memory bank (build one or set beta2 to 0)");
    }
    for (const Sample& s : samples) {
        if (!text.contains(s.modality)) throw DataError("evaluate: no text features for modality '" + s.modality + "'");
    }
    std::vector<ScoredSample> out(samples.size());
    auto work = [&](std::size_t i) {
        const Sample& s = samples[i];
        const Tensor image = image_to_tensor(read_pgm(s.image));
        out[i].sample = &s;
        out[i].scores = score_image(backbone, params, text.at(s.modality), bank, image, config);
        if (s.mask) out[i].mask = mask_to_tensor(read_pgm(*s.mask));
    };
    threads = std::max<std::size_t>(1, std::min(threads, samples.size()));
    if (threads == 1) {
        for (std::size_t i = 0; i < samples.size(); ++i) work(i);
        return out;
    }
    // Each worker handles a fixed stride of indices; results land in place.
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < samples.size(); i += threads) work(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

namespace {

struct Pools {
    std::vector<double> image_scores;
    std::vector<int> image_labels;
    std::array<std::vector<double>, 4> level_image_scores;
    std::vector<double> pixel_scores;
    std::vector<int> pixel_labels;
    std::array<std::vector<double>, 4> level_pixel_scores;
    std::vector<double> per_image_pixel_auc;
    bool any_mask = false;
};

std::optional<double> try_auc(std::span<const double> s, std::span<const int> l) {
    const bool pos = std::find(l.begin(), l.end(), 1) != l.end();
    const bool neg = std::find(l.begin(), l.end(), 0) != l.end();
    if (!pos || !neg) return std::nullopt;
    return auc(s, l);
}

MetricGroup group_metrics(const std::string& name, std::span<const ScoredSample* const> items,
                          const InferenceConfig& config, const EvalOptions& options) {
    Pools p;
    for (const ScoredSample* it : items) {
        const ScoredImage& sc = it->scores;
        p.image_scores.push_back(sc.result.c_pred);
        p.image_labels.push_back(it->sample->label);
        for (std::size_t l = 0; l < 4; ++l) {
            if (!config.levels[l]) continue;
            const double few = sc.few.map.defined() && sc.few.level_maps[l].defined() ? sc.few.level_c[l] : 0.0;
            p.level_image_scores[l].push_back(config.beta1 * sc.zero.level_c[l] + config.beta2 * few);
        }
        if (!it->mask) continue;
        p.any_mask = true;
        const Tensor& mask = *it->mask;
        const Tensor& pred = sc.result.s_pred;
        if (mask.shape() != pred.shape()) throw ShapeError("evaluate: mask and anomaly map differ in shape");
        std::vector<int> labels(mask.numel());
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = mask[i] > 0.5 ? 1 : 0;
        p.pixel_scores.insert(p.pixel_scores.end(), pred.data().begin(), pred.data().end());
        p.pixel_labels.insert(p.pixel_labels.end(), labels.begin(), labels.end());
        if (options.pixel_auc_per_image) {
            if (auto a = try_auc(pred.data(), labels)) p.per_image_pixel_auc.push_back(*a);
        }
        for (std::size_t l = 0; l < 4; ++l) {
            if (!config.levels[l]) continue;
            const Tensor& zm = sc.zero.level_maps[l];
            const Tensor* fm = sc.few.level_maps[l].defined() ? &sc.few.level_maps[l] : nullptr;
            for (std::size_t i = 0; i < zm.numel(); ++i) {
                p.level_pixel_scores[l].push_back(config.beta1 * zm[i] + config.beta2 * (fm ? (*fm)[i] : 0.0));
            }
        }
    }

    MetricGroup g;
    g.name = name;
    g.images = items.size();
    g.anomalous = static_cast<std::size_t>(std::count(p.image_labels.begin(), p.image_labels.end(), 1));
    g.image_auc = auc(p.image_scores, p.image_labels);
    for (std::size_t l = 0; l < 4; ++l) {
        if (config.levels[l]) g.level_image_auc[l] = auc(p.level_image_scores[l], p.image_labels);
    }
    if (p.any_mask) {
        if (options.pixel_auc_per_image) {
            if (!p.per_image_pixel_auc.empty()) {
                g.pixel_auc = std::accumulate(p.per_image_pixel_auc.begin(), p.per_image_pixel_auc.end(), 0.0) /
                              static_cast<double>(p.per_image_pixel_auc.size());
            }
        } else {
            g.pixel_auc = try_auc(p.pixel_scores, p.pixel_labels);
        }
        for (std::size_t l = 0; l < 4; ++l) {
            if (config.levels[l]) g.level_pixel_auc[l] = try_auc(p.level_pixel_scores[l], p.pixel_labels);
        }
    }
    return g;
}

nlohmann::ordered_json group_json(const MetricGroup& g) {
    auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    };
    nlohmann::ordered_json j;
    j["name"] = g.name;
    j["images"] = g.images;
    j["anomalous"] = g.anomalous;
    j["image_auc"] = g.image_auc;
    if (g.pixel_auc) j["pixel_auc"] = *g.pixel_auc;
    nlohmann::ordered_json levels = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < 4; ++l) {
        nlohmann::ordered_json lj;
        lj["level"] = l + 1;
        lj["image_auc"] = opt(g.level_image_auc[l]);
        lj["pixel_auc"] = opt(g.level_pixel_auc[l]);
        levels.push_back(lj);
    }
    j["levels"] = levels;
    return j;
}

}  // namespace

Report summarize(std::span<const ScoredSample> scored, const InferenceConfig& config, const EvalOptions& options,
                 const std::string& mode, const std::string& target) {
    if (scored.empty()) throw DataError("evaluate: test set is empty");
    Report r;
    r.mode = mode;
    r.target = target;
    std::vector<std::string> names;
    for (const ScoredSample& s : scored) {
        if (std::find(names.begin(), names.end(), s.sample->modality) == names.end()) names.push_back(s.sample->modality);
    }
    std::vector<const ScoredSample*> all;
    for (const ScoredSample& s : scored) all.push_back(&s);
    for (const std::string& name : names) {
        std::vector<const ScoredSample*> subset;
        for (const ScoredSample* s : all) {
            if (s->sample->modality == name) subset.push_back(s);
        }
        r.modalities.push_back(group_metrics(name, subset, config, options));
    }
    r.overall = group_metrics("overall", all, config, options);
    return r;
}

Report evaluate(const FrozenBackbone& backbone, const MVFAParams& params, const TextTable& text,
                const MemoryBank* bank, std::span<const Sample> test, const InferenceConfig& config,
                const EvalOptions& options, const std::string& mode, const std::string& target) {
    if (test.empty()) throw DataError("evaluate: test set is empty");
    auto scored = score_samples(backbone, params, text, bank, test, config, options.threads);
    return summarize(scored, config, options, mode, target);
}

std::string Report::to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    j["target"] = target;
    j["overall"] = group_json(overall);
    nlohmann::ordered_json mods = nlohmann::ordered_json::array();
    for (const MetricGroup& g : modalities) mods.push_back(group_json(g));
    j["modalities"] = mods;
    return j.dump(2) + "\n";
}

std::string Report::to_csv_line() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    os << target << ',' << overall.image_auc << ',';
    if (overall.pixel_auc) {
        os << *overall.pixel_auc;
    } else {
        os << "NA";
    }
    os << ',' << overall.images << ',' << overall.anomalous;
    for (const auto& a : overall.level_image_auc) {
        os << ',';
        if (a) {
            os << *a;
        } else {
            os << "NA";
        }
    }
    os << '\n';
    return os.str();
}

}  // namespace mvfa
