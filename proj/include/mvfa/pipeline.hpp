#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvfa/config.hpp"
#include "mvfa/eval.hpp"
#include "mvfa/textbank.hpp"

namespace mvfa {

// Text features for each modality, using the modality name as the object.
TextTable build_text_table(const RunConfig& config, const std::vector<std::string>& modality_names);

std::vector<Tensor> load_images(std::span<const Sample> samples);
std::vector<TrainingSample> load_training_samples(std::span<const Sample> samples, const TextTable& text);

MVFAParams initial_params(const RunConfig& config);

struct ExperimentOutcome {
    DataSplit split;
    MVFAParams params;
    TrainResult training;
    std::optional<MemoryBank> bank;
    Report report;
};

// split -> train -> bank (few-shot) -> evaluate. With train_adapters unset
// the initial parameters are evaluated as-is (untrained baseline).
ExperimentOutcome run_experiment(const RunConfig& config, const std::vector<Sample>& manifest,
                                 bool train_adapters = true, const EpochCallback& on_epoch = {});

}  // namespace mvfa
