#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "mvfa/adaptation.hpp"
#include "mvfa/backbone.hpp"
#include "mvfa/data.hpp"
#include "mvfa/inference.hpp"
#include "mvfa/objective.hpp"

namespace mvfa {

struct TextConfig {
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> prompts;  // prompt file; defaults built in
};

// Everything a subcommand needs. Levels and architecture flags apply to
// both training and inference.
struct RunConfig {
    BackboneConfig backbone;
    TrainConfig train;
    InferenceConfig inference;
    SplitParams experiment{SplitMode::few_shot, "texture-c", 4, 42};
    ArchitectureFlags arch;
    TextConfig text;
    SynthConfig synth = SynthConfig::defaults();
    bool pixel_auc_per_image = false;

    // Applies one seed to data generation, training and sampling.
    void set_seed(std::uint64_t seed);
    void set_levels(const LevelMask& levels);
    void validate() const;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::ordered_json to_json() const;
};

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// "1,2,4" -> {true, true, false, true}.
LevelMask parse_levels(const std::string& text);
std::string levels_to_string(const LevelMask& levels);

std::string to_string(SplitMode mode);
SplitMode parse_split_mode(const std::string& s);

}  // namespace mvfa
