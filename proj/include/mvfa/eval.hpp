#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvfa/adaptation.hpp"
#include "mvfa/backbone.hpp"
#include "mvfa/data.hpp"
#include "mvfa/inference.hpp"

namespace mvfa {

// Mann-Whitney AUC with midranks for ties. Throws DataError unless both
// classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct MetricGroup {
    std::string name;
    std::size_t images = 0;
    std::size_t anomalous = 0;
    double image_auc = 0.0;
    std::optional<double> pixel_auc;  // absent when no sample carries a mask
    std::array<std::optional<double>, 4> level_image_auc;
    std::array<std::optional<double>, 4> level_pixel_auc;
};

struct Report {
    std::string mode;
    std::string target;
    std::vector<MetricGroup> modalities;
    MetricGroup overall;

    std::string to_json() const;
    // Single line: target,image_auc,pixel_auc,images,anomalous,level1_image_auc..level4_image_auc
    std::string to_csv_line() const;
};

struct EvalOptions {
    bool pixel_auc_per_image = false;  // average per-image pixel AUCs instead of pooling
    std::size_t threads = 1;
};

struct ScoredSample {
    const Sample* sample = nullptr;
    ScoredImage scores;
    std::optional<Tensor> mask;
};

// Text features per modality name.
using TextTable = std::map<std::string, Tensor>;

std::vector<ScoredSample> score_samples(const FrozenBackbone& backbone, const MVFAParams& params,
                                        const TextTable& text, const MemoryBank* bank,
                                        std::span<const Sample> samples, const InferenceConfig& config,
                                        std::size_t threads = 1);

Report summarize(std::span<const ScoredSample> scored, const InferenceConfig& config, const EvalOptions& options,
                 const std::string& mode, const std::string& target);

Report evaluate(const FrozenBackbone& backbone, const MVFAParams& params, const TextTable& text,
                const MemoryBank* bank, std::span<const Sample> test, const InferenceConfig& config,
                const EvalOptions& options = {}, const std::string& mode = "", const std::string& target = "");

// Worker count from MVFA_THREADS (default 1).
std::size_t threads_from_env();

}  // namespace mvfa
