#include "mvfa/pipeline.hpp"

namespace mvfa {

TextTable build_text_table(const RunConfig& config, const std::vector<std::string>& modality_names) {
    const PromptSet prompts = config.text.prompts ? PromptSet::load(*config.text.prompts) : PromptSet::defaults();
    TextTable table;
    for (const std::string& name : modality_names) {
        table[name] = build_text_features(prompts, name, config.text.seed, config.backbone.dim).f_text;
    }
    return table;
}

std::vector<Tensor> load_images(std::span<const Sample> samples) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) out.push_back(image_to_tensor(read_pgm(s.image)));
    return out;
}

std::vector<TrainingSample> load_training_samples(std::span<const Sample> samples, const TextTable& text) {
    std::vector<TrainingSample> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        auto it = text.find(s.modality);
        if (it == text.end()) throw DataError("no text features for modality '" + s.modality + "'");
        TrainingSample t;
        t.image = image_to_tensor(read_pgm(s.image));
        t.label = s.label;
        if (s.mask) t.mask = mask_to_tensor(read_pgm(*s.mask));
        t.text = it->second;
        out.push_back(std::move(t));
    }
    return out;
}

MVFAParams initial_params(const RunConfig& config) {
    return MVFAParams::init(config.backbone.dim, config.train.seed, Precision::f32, config.train.gamma, config.arch);
}

ExperimentOutcome run_experiment(const RunConfig& config, const std::vector<Sample>& manifest, bool train_adapters,
                                 const EpochCallback& on_epoch) {
    config.validate();
    ExperimentOutcome out;
    out.split = split(manifest, config.experiment);
    const FrozenBackbone backbone = FrozenBackbone::init(config.backbone);
    const TextTable text = build_text_table(config, modalities(manifest));

    out.params = initial_params(config);
    if (train_adapters) {
        const auto samples = load_training_samples(out.split.train, text);
        out.training = train(samples, backbone, out.params, config.train, on_epoch);
    }

    InferenceConfig inference = config.inference;
    if (config.experiment.mode == SplitMode::few_shot) {
        const auto refs = load_images(out.split.bank);
        out.bank = build_memory_bank(refs, backbone, out.params);
    } else {
        inference.beta2 = 0.0;
        inference.beta1 = config.inference.beta1 > 0.0 ? config.inference.beta1 : 1.0;
    }
    EvalOptions options;
    options.pixel_auc_per_image = config.pixel_auc_per_image;
    options.threads = threads_from_env();
    out.report = evaluate(backbone, out.params, text, out.bank ? &*out.bank : nullptr, out.split.test, inference,
                          options, to_string(config.experiment.mode), config.experiment.target);
    return out;
}

}  // namespace mvfa
