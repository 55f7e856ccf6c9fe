#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "mvfa/config.hpp"
#include "mvfa/io.hpp"
#include "mvfa/pipeline.hpp"

using namespace mvfa;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// Flags shared by every subcommand. Unset optionals leave the config value alone.
struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> k;
    std::optional<std::string> target;
    std::optional<std::string> mode;
    std::optional<double> beta1;
    std::optional<double> beta2;
    std::optional<std::string> levels;
    std::optional<std::size_t> epochs;
    std::optional<std::string> adapter;
    std::optional<std::string> architecture;
    std::optional<std::string> feed;
    bool normalize_few = false;
};

struct Paths {
    std::string out;
    std::string data;
    std::string checkpoint;
    std::string bank;
};

void log(const std::string& msg) { std::cerr << "mvfa: " << msg << '\n'; }

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    if (o.seed) c.set_seed(*o.seed);
    if (o.k) c.experiment.k = *o.k;
    if (o.target) c.experiment.target = *o.target;
    if (o.mode) c.experiment.mode = parse_split_mode(*o.mode);
    if (o.beta1) c.inference.beta1 = *o.beta1;
    if (o.beta2) c.inference.beta2 = *o.beta2;
    if (o.levels) c.set_levels(parse_levels(*o.levels));
    if (o.epochs) c.train.epochs = *o.epochs;
    if (o.adapter) {
        if (*o.adapter != "dual" && *o.adapter != "single") throw ConfigError("--adapter must be dual or single");
        c.arch.single_adapter = *o.adapter == "single";
    }
    if (o.architecture) c.arch.architecture = parse_architecture(*o.architecture);
    if (o.feed) c.arch.feed = parse_feed_mode(*o.feed);
    if (o.normalize_few) c.inference.normalize_few = true;
    c.validate();
    return c;
}

fs::path manifest_path(const std::string& data) {
    const fs::path p(data);
    return fs::is_directory(p) ? p / "manifest.jsonl" : p;
}

fs::path need_out(const Paths& p) {
    if (p.out.empty()) throw ConfigError("--out is required");
    return p.out;
}

fs::path need_data(const Paths& p) {
    if (p.data.empty()) throw ConfigError("--data is required");
    return manifest_path(p.data);
}

struct Model {
    BackboneConfig backbone;
    MVFAParams params;
};

// Parameters from --checkpoint when given, otherwise the seeded initialization.
Model load_model(const RunConfig& c, const Paths& p) {
    if (p.checkpoint.empty()) return {c.backbone, initial_params(c)};
    Checkpoint ck = load_checkpoint(p.checkpoint);
    return {ck.backbone, std::move(ck.params)};
}

int cmd_gen_data(const Overrides& o, const Paths& p) {
    const RunConfig c = resolve(o);
    const fs::path out = need_out(p);
    fs::create_directories(out);
    const GenerationStats s = gen_dataset(c.synth, out);
    std::cout << "images " << s.images << " anomalies " << s.anomalies << " min_contrast_gap " << s.min_contrast_gap
              << '\n';
    return kOk;
}

int cmd_train(const Overrides& o, const Paths& p) {
    const RunConfig c = resolve(o);
    const fs::path out = need_out(p);
    const auto manifest = load_manifest(need_data(p));
    const DataSplit s = split(manifest, c.experiment);
    const FrozenBackbone backbone = FrozenBackbone::init(c.backbone);
    const TextTable text = build_text_table(c, modalities(manifest));
    MVFAParams params = initial_params(c);
    const auto samples = load_training_samples(s.train, text);
    log("training on " + std::to_string(samples.size()) + " samples for " + std::to_string(c.train.epochs) +
        " epochs");
    const TrainResult r = train(samples, backbone, params, c.train, [](std::size_t epoch, double loss) {
        std::ostringstream msg;
        msg << "epoch " << epoch << " mean_loss " << loss;
        log(msg.str());
    });
    fs::create_directories(out);
    save_checkpoint(out / "checkpoint.mvfa", c.backbone, params);
    io::write_text_atomic(out / "loss.csv", loss_log_csv(r));
    io::write_text_atomic(out / "config.json", c.to_json().dump(2) + "\n");
    std::cout << "wrote " << (out / "checkpoint.mvfa").string() << '\n';
    return kOk;
}

MemoryBank bank_from_split(const RunConfig& c, const Model& m, const std::vector<Sample>& manifest) {
    SplitParams sp = c.experiment;
    sp.mode = SplitMode::few_shot;
    const DataSplit s = split(manifest, sp);
    const FrozenBackbone backbone = FrozenBackbone::init(m.backbone);
    return build_memory_bank(load_images(s.bank), backbone, m.params);
}

int cmd_build_bank(const Overrides& o, const Paths& p) {
    const RunConfig c = resolve(o);
    const fs::path out = need_out(p);
    const Model m = load_model(c, p);
    const MemoryBank bank = bank_from_split(c, m, load_manifest(need_data(p)));
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_bank(out, bank);
    std::cout << "bank rows per level " << bank.cls[0].rows() << '\n';
    return kOk;
}

InferenceConfig inference_for(const RunConfig& c) {
    InferenceConfig ic = c.inference;
    if (c.experiment.mode == SplitMode::zero_shot) ic.beta2 = 0.0;
    return ic;
}

int cmd_predict(const Overrides& o, const Paths& p) {
    const RunConfig c = resolve(o);
    const fs::path out = need_out(p);
    const InferenceConfig ic = inference_for(c);
    std::optional<MemoryBank> bank;
    if (!p.bank.empty()) bank = load_bank(p.bank);
    if (!bank && ic.beta2 > 0.0) {
        throw ConfigError("predict: beta2 > 0 needs a memory bank; pass --bank (see build-bank) or set --beta2 0");
    }
    const Model m = load_model(c, p);
    const auto manifest = load_manifest(need_data(p));
    const DataSplit s = split(manifest, c.experiment);
    const FrozenBackbone backbone = FrozenBackbone::init(m.backbone);
    const TextTable text = build_text_table(c, modalities(manifest));
    const auto scored = score_samples(backbone, m.params, text, bank ? &*bank : nullptr, s.test, ic, threads_from_env());

    fs::create_directories(out / "maps");
    std::ostringstream csv;
    csv << "image,modality,label,c_pred,c_zero,c_few\n";
    csv.precision(9);
    for (const ScoredSample& x : scored) {
        const fs::path& img = x.sample->image;
        const std::string stem = x.sample->modality + "_" + to_string(x.sample->split) + "_" + img.stem().string();
        const AnomalyMap map = to_anomaly_map(x.scores.result.s_pred);
        io::write_file_atomic(out / "maps" / (stem + ".map"), encode_map(map));
        write_pgm(out / "maps" / (stem + ".pgm"), GrayImage{map.w, map.h, render_map_pixels(map)});
        const AnomalyResult& r = x.scores.result;
        csv << img.generic_string() << ',' << x.sample->modality << ',' << x.sample->label << ',' << r.c_pred << ','
            << r.c_zero << ',' << r.c_few << '\n';
    }
    io::write_text_atomic(out / "scores.csv", csv.str());
    std::cout << "scored " << scored.size() << " images\n";
    return kOk;
}

int cmd_eval(const Overrides& o, const Paths& p) {
    const RunConfig c = resolve(o);
    const fs::path out = need_out(p);
    const InferenceConfig ic = inference_for(c);
    const Model m = load_model(c, p);
    const auto manifest = load_manifest(need_data(p));
    const DataSplit s = split(manifest, c.experiment);
    std::optional<MemoryBank> bank;
    if (!p.bank.empty()) {
        bank = load_bank(p.bank);
    } else if (ic.beta2 > 0.0) {
        log("no --bank given; building one from the split's normal references");
        bank = bank_from_split(c, m, manifest);
    }
    const FrozenBackbone backbone = FrozenBackbone::init(m.backbone);
    const TextTable text = build_text_table(c, modalities(manifest));
    EvalOptions opts;
    opts.pixel_auc_per_image = c.pixel_auc_per_image;
    opts.threads = threads_from_env();
    const Report r = evaluate(backbone, m.params, text, bank ? &*bank : nullptr, s.test, ic, opts,
                              to_string(c.experiment.mode), c.experiment.target);
    fs::create_directories(out);
    io::write_text_atomic(out / "report.json", r.to_json() + "\n");
    io::write_text_atomic(out / "report.csv",
                          "target,image_auc,pixel_auc,images,anomalous,level1_image_auc,level2_image_auc,"
                          "level3_image_auc,level4_image_auc\n" +
                              r.to_csv_line());
    std::cout << r.to_csv_line();
    return kOk;
}

std::string cell(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream s;
    s.precision(6);
    s << std::fixed << *v;
    return s.str();
}

// Trains and evaluates every architecture/adapter combination under the
// same config; only the two ablation flags vary between rows.
int cmd_ablate(const Overrides& o, const Paths& p) {
    const RunConfig base = resolve(o);
    const fs::path out = need_out(p);
    const auto manifest = load_manifest(need_data(p));
    std::ostringstream table, configs;
    table << "architecture,adapter,levels,ensemble_image_auc,ensemble_pixel_auc";
    for (int l = 1; l <= 4; ++l) table << ",level" << l << "_image_auc";
    for (int l = 1; l <= 4; ++l) table << ",level" << l << "_pixel_auc";
    table << '\n';
    for (Architecture a : {Architecture::adapter, Architecture::projector}) {
        for (bool single : {false, true}) {
            RunConfig c = base;
            c.arch.architecture = a;
            c.arch.single_adapter = single;
            log("ablate: " + to_string(a) + (single ? " single" : " dual"));
            const ExperimentOutcome r = run_experiment(c, manifest);
            const MetricGroup& g = r.report.overall;
            table << to_string(a) << ',' << (single ? "single" : "dual") << ','
                  << '"' << levels_to_string(c.inference.levels) << '"' << ',' << cell(g.image_auc) << ','
                  << cell(g.pixel_auc);
            for (const auto& v : g.level_image_auc) table << ',' << cell(v);
            for (const auto& v : g.level_pixel_auc) table << ',' << cell(v);
            table << '\n';
            configs << c.to_json().dump() << '\n';
        }
    }
    fs::create_directories(out);
    io::write_text_atomic(out / "ablation.csv", table.str());
    io::write_text_atomic(out / "ablation_configs.jsonl", configs.str());
    std::cout << table.str();
    return kOk;
}

void add_common(CLI::App* cmd, Overrides& o, Paths& p) {
    cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "seed for data, split and training");
    cmd->add_option("--k", o.k, "few-shot references / labeled samples");
    cmd->add_option("--target", o.target, "held-out target modality");
    cmd->add_option("--mode", o.mode, "zero-shot | few-shot");
    cmd->add_option("--beta1", o.beta1, "zero-shot branch weight");
    cmd->add_option("--beta2", o.beta2, "few-shot branch weight");
    cmd->add_option("--levels", o.levels, "comma-separated subset of 1,2,3,4");
    cmd->add_option("--epochs", o.epochs, "training epochs");
    cmd->add_option("--adapter", o.adapter, "dual | single");
    cmd->add_option("--architecture", o.architecture, "adapter | projector");
    cmd->add_option("--feed", o.feed, "mean | cls | seg");
    cmd->add_flag("--normalize-few", o.normalize_few, "min-max scale few-shot maps before fusion");
    cmd->add_option("--out", p.out, "output file or directory");
    cmd->add_option("--data", p.data, "dataset directory or manifest.jsonl");
    cmd->add_option("--checkpoint", p.checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
    cmd->add_option("--bank", p.bank, "memory bank file")->check(CLI::ExistingFile);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-level visual feature adaptation for anomaly detection"};
    app.require_subcommand(1);
    Overrides o;
    Paths p;
    struct Sub {
        const char* name;
        const char* help;
        int (*run)(const Overrides&, const Paths&);
    };
    const Sub subs[] = {
        {"gen-data", "generate the synthetic dataset and manifest", cmd_gen_data},
        {"train", "train adapters and projector; writes checkpoint and loss CSV", cmd_train},
        {"build-bank", "build the few-shot memory bank", cmd_build_bank},
        {"predict", "write anomaly maps, heatmaps and per-image scores", cmd_predict},
        {"eval", "write the AUC report", cmd_eval},
        {"ablate", "compare level subsets, adapter modes and architectures", cmd_ablate},
    };
    std::vector<std::pair<CLI::App*, const Sub*>> cmds;
    for (const Sub& s : subs) {
        CLI::App* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, o, p);
        cmds.emplace_back(cmd, &s);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }
    try {
        for (auto& [cmd, s] : cmds)
            if (cmd->parsed()) return s->run(o, p);
    } catch (const ConfigError& e) {
        log(std::string("config error: ") + e.what());
        return kUsage;
    } catch (const NumericError& e) {
        log(std::string("numeric failure: ") + e.what());
        return kNumeric;
    } catch (const DataError& e) {
        log(std::string("data error: ") + e.what());
        return kData;
    } catch (const std::exception& e) {
        log(std::string("error: ") + e.what());
        return kData;
    }
    return kUsage;
}
