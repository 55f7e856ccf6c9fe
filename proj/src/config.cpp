#include "mvfa/config.hpp"

#include <fstream>
#include <sstream>

namespace mvfa {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(SplitMode mode) { return mode == SplitMode::zero_shot ? "zero-shot" : "few-shot"; }

SplitMode parse_split_mode(const std::string& s) {
    if (s == "zero-shot") return SplitMode::zero_shot;
    if (s == "few-shot") return SplitMode::few_shot;
    throw ConfigError("unknown mode '" + s + "' (expected zero-shot or few-shot)");
}

LevelMask parse_levels(const std::string& text) {
    LevelMask m{};
    std::istringstream in(text);
    for (std::string tok; std::getline(in, tok, ',');) {
        if (tok != "1" && tok != "2" && tok != "3" && tok != "4") {
            throw ConfigError("levels: expected a comma-separated subset of 1,2,3,4, got '" + text + "'");
        }
        m[static_cast<std::size_t>(tok[0] - '1')] = true;
    }
    if (m == LevelMask{}) throw ConfigError("levels: at least one level is required");
    return m;
}

std::string levels_to_string(const LevelMask& levels) {
    std::string s;
    for (std::size_t l = 0; l < 4; ++l) {
        if (!levels[l]) continue;
        if (!s.empty()) s += ',';
        s += static_cast<char>('1' + l);
    }
    return s;
}

void RunConfig::set_seed(std::uint64_t seed) {
    synth.seed = seed;
    train.seed = seed;
    experiment.seed = seed;
}

void RunConfig::set_levels(const LevelMask& levels) {
    train.levels = levels;
    inference.levels = levels;
}

void RunConfig::validate() const {
    backbone.validate();
    train.validate();
    inference.validate();
    synth.validate();
    if (synth.image_size != backbone.image_size) {
        throw ConfigError("config: synth.image_size must equal backbone.image_size");
    }
    if (experiment.mode == SplitMode::few_shot && experiment.k < 1) throw ConfigError("config: few-shot requires k >= 1");
    if (experiment.target.empty()) throw ConfigError("config: experiment.target is empty");
    if (backbone.dim < 4) throw ConfigError("config: backbone.dim must be at least 4");
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (!j.contains(key) || j[key].is_null()) return;
    try {
        out = j[key].get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

const json& section(const json& j, const char* key) {
    static const json empty = json::object();
    if (!j.contains(key)) return empty;
    if (!j[key].is_object()) throw ConfigError(std::string("config: '") + key + "' must be an object");
    return j[key];
}

}  // namespace

TrainConfig train_config_from_json(const json& j, TrainConfig t) {
    read(j, "lr", t.lr);
    read(j, "batch_size", t.batch_size);
    read(j, "epochs", t.epochs);
    read(j, "seed", t.seed);
    read(j, "gamma", t.gamma);
    read(j, "tau", t.tau);
    const json& w = section(j, "loss_weights");
    read(w, "dice", t.weights.dice);
    read(w, "focal", t.weights.focal);
    read(w, "bce", t.weights.bce);
    return t;
}

RunConfig RunConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    RunConfig c;

    const json& b = section(j, "backbone");
    read(b, "image_size", c.backbone.image_size);
    read(b, "patch_size", c.backbone.patch_size);
    read(b, "dim", c.backbone.dim);
    read(b, "blocks_per_stage", c.backbone.blocks_per_stage);
    read(b, "heads", c.backbone.heads);
    read(b, "channels", c.backbone.channels);
    read(b, "mlp_ratio", c.backbone.mlp_ratio);
    read(b, "seed", c.backbone.seed);

    c.train = train_config_from_json(section(j, "train"), c.train);

    const json& inf = section(j, "inference");
    read(inf, "beta1", c.inference.beta1);
    read(inf, "beta2", c.inference.beta2);
    read(inf, "tau", c.inference.tau);
    read(inf, "normalize_few", c.inference.normalize_few);
    read(inf, "pixel_auc_per_image", c.pixel_auc_per_image);

    const json& e = section(j, "experiment");
    std::string mode = to_string(c.experiment.mode);
    read(e, "mode", mode);
    c.experiment.mode = parse_split_mode(mode);
    read(e, "target", c.experiment.target);
    read(e, "k", c.experiment.k);
    read(e, "seed", c.experiment.seed);

    const json& a = section(j, "ablation");
    if (a.contains("levels")) {
        LevelMask m{};
        std::vector<int> levels;
        read(a, "levels", levels);
        for (int l : levels) {
            if (l < 1 || l > 4) throw ConfigError("config: ablation.levels entries must be in 1..4");
            m[static_cast<std::size_t>(l - 1)] = true;
        }
        c.set_levels(m);
    }
    std::string adapter = "dual", architecture = "adapter", feed = "mean";
    read(a, "adapter", adapter);
    read(a, "architecture", architecture);
    read(a, "feed", feed);
    if (adapter != "dual" && adapter != "single") throw ConfigError("config: ablation.adapter must be dual or single");
    c.arch.single_adapter = adapter == "single";
    c.arch.architecture = parse_architecture(architecture);
    c.arch.feed = parse_feed_mode(feed);

    const json& t = section(j, "text");
    read(t, "seed", c.text.seed);
    if (t.contains("prompts") && t["prompts"].is_string()) c.text.prompts = t["prompts"].get<std::string>();

    const json& s = section(j, "synth");
    read(s, "seed", c.synth.seed);
    read(s, "image_size", c.synth.image_size);
    read(s, "normals", c.synth.normals);
    read(s, "labeled", c.synth.labeled);
    read(s, "test", c.synth.test);
    if (s.contains("modalities")) {
        if (!s["modalities"].is_array()) throw ConfigError("config: synth.modalities must be an array");
        c.synth.modalities.clear();
        for (const json& m : s["modalities"]) {
            TextureProfile p;
            read(m, "name", p.name);
            read(m, "base_frequency", p.base_frequency);
            read(m, "contrast", p.contrast);
            read(m, "noise", p.noise);
            read(m, "orientation", p.orientation);
            read(m, "masks", p.masks);
            c.synth.modalities.push_back(p);
        }
    }
    const json& d = section(s, "defects");
    read(d, "min_count", c.synth.defects.min_count);
    read(d, "max_count", c.synth.defects.max_count);
    read(d, "min_radius", c.synth.defects.min_radius);
    read(d, "max_radius", c.synth.defects.max_radius);
    read(d, "min_delta", c.synth.defects.min_delta);
    read(d, "max_delta", c.synth.defects.max_delta);

    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    return from_json(j);
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["backbone"] = {{"image_size", backbone.image_size}, {"patch_size", backbone.patch_size},
                     {"dim", backbone.dim},               {"blocks_per_stage", backbone.blocks_per_stage},
                     {"heads", backbone.heads},           {"channels", backbone.channels},
                     {"mlp_ratio", backbone.mlp_ratio},   {"seed", backbone.seed}};
    j["train"] = {{"lr", train.lr},
                  {"batch_size", train.batch_size},
                  {"epochs", train.epochs},
                  {"seed", train.seed},
                  {"gamma", train.gamma},
                  {"tau", train.tau},
                  {"loss_weights",
                   {{"dice", train.weights.dice}, {"focal", train.weights.focal}, {"bce", train.weights.bce}}}};
    j["inference"] = {{"beta1", inference.beta1},
                      {"beta2", inference.beta2},
                      {"tau", inference.tau},
                      {"normalize_few", inference.normalize_few},
                      {"pixel_auc_per_image", pixel_auc_per_image}};
    j["experiment"] = {{"mode", to_string(experiment.mode)},
                       {"target", experiment.target},
                       {"k", experiment.k},
                       {"seed", experiment.seed}};
    std::vector<int> levels;
    for (std::size_t l = 0; l < 4; ++l) {
        if (train.levels[l]) levels.push_back(static_cast<int>(l + 1));
    }
    j["ablation"] = {{"levels", levels},
                     {"adapter", arch.single_adapter ? "single" : "dual"},
                     {"architecture", to_string(arch.architecture)},
                     {"feed", to_string(arch.feed)}};
    j["text"] = {{"seed", text.seed},
                 {"prompts", text.prompts ? ordered_json(text.prompts->string()) : ordered_json(nullptr)}};
    ordered_json mods = ordered_json::array();
    for (const TextureProfile& p : synth.modalities) {
        mods.push_back({{"name", p.name},
                        {"base_frequency", p.base_frequency},
                        {"contrast", p.contrast},
                        {"noise", p.noise},
                        {"orientation", p.orientation},
                        {"masks", p.masks}});
    }
    j["synth"] = {{"seed", synth.seed},
                  {"image_size", synth.image_size},
                  {"normals", synth.normals},
                  {"labeled", synth.labeled},
                  {"test", synth.test},
                  {"modalities", mods},
                  {"defects",
                   {{"min_count", synth.defects.min_count},
                    {"max_count", synth.defects.max_count},
                    {"min_radius", synth.defects.min_radius},
                    {"max_radius", synth.defects.max_radius},
                    {"min_delta", synth.defects.min_delta},
                    {"max_delta", synth.defects.max_delta}}}};
    return j;
}

}  // namespace mvfa
