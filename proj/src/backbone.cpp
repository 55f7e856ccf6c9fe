#include "mvfa/backbone.hpp"

#include <cmath>
#include <string>

#include "mvfa/rng.hpp"

namespace mvfa {

void BackboneConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || dim == 0 || heads == 0 || blocks_per_stage == 0 || mlp_ratio == 0) {
        throw ConfigError("backbone: all sizes must be positive");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("backbone: image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (dim % heads != 0) {
        throw ConfigError("backbone: dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    }
    if (stages != 4) throw ConfigError("backbone: exactly 4 stages are supported, got " + std::to_string(stages));
    if (channels != 1 && channels != 3) {
        throw ConfigError("backbone: channels must be 1 or 3, got " + std::to_string(channels));
    }
}

namespace {

Tensor random_matrix(std::uint64_t seed, std::uint64_t stream, std::size_t fan_in, std::size_t fan_out,
                     Precision precision) {
    Rng rng(mix_seed(seed, stream));
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(fan_in * fan_out);
    for (double& v : data) v = rng.normal() * s;
    return Tensor::from({fan_in, fan_out}, std::move(data), precision);
}

}  // namespace

Tensor sinusoidal_positions(std::size_t tokens, std::size_t dim, Precision precision) {
    std::vector<double> data(tokens * dim);
    for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t i = 0; i < dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
            data[t * dim + i] = std::sin(static_cast<double>(t) * freq);
            if (i + 1 < dim) data[t * dim + i + 1] = std::cos(static_cast<double>(t) * freq);
        }
    }
    return Tensor::from({tokens, dim}, std::move(data), precision);
}

Tensor patchify(const Tensor& image, std::size_t patch_size) {
    if (image.rank() != 3) throw ShapeError("patchify: expected h x w x c image, got " + shape_str(image.shape()));
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (h % patch_size != 0 || w % patch_size != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch_size));
    }
    const std::size_t gh = h / patch_size, gw = w / patch_size;
    const std::size_t width = patch_size * patch_size * c;
    std::vector<double> out(gh * gw * width);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            double* dst = out.data() + (py * gw + px) * width;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        *dst++ = image[((py * patch_size + y) * w + (px * patch_size + x)) * c + ch];
        }
    return Tensor::from({gh * gw, width}, std::move(out), image.precision());
}

FrozenBackbone FrozenBackbone::init(const BackboneConfig& config, Precision precision) {
    config.validate();
    FrozenBackbone b;
    b.config_ = config;
    b.precision_ = precision;
    const std::size_t d = config.dim;
    const std::size_t patch_width = std::size_t{config.patch_size} * config.patch_size * config.channels;
    std::uint64_t stream = 0;
    b.patch_embed_ = random_matrix(config.seed, stream++, patch_width, d, precision);
    b.positions_ = sinusoidal_positions(config.tokens(), d, precision);
    const std::size_t hidden = d * config.mlp_ratio;
    const std::size_t total = std::size_t{config.stages} * config.blocks_per_stage;
    for (std::size_t i = 0; i < total; ++i) {
        EncoderBlock blk;
        blk.ln1_gain = Tensor::full({1, d}, 1.0, precision);
        blk.ln1_bias = Tensor::zeros({1, d}, precision);
        blk.wq = random_matrix(config.seed, stream++, d, d, precision);
        blk.wk = random_matrix(config.seed, stream++, d, d, precision);
        blk.wv = random_matrix(config.seed, stream++, d, d, precision);
        blk.wo = random_matrix(config.seed, stream++, d, d, precision);
        blk.ln2_gain = Tensor::full({1, d}, 1.0, precision);
        blk.ln2_bias = Tensor::zeros({1, d}, precision);
        blk.mlp_up = random_matrix(config.seed, stream++, d, hidden, precision);
        blk.mlp_down = random_matrix(config.seed, stream++, hidden, d, precision);
        b.blocks_.push_back(std::move(blk));
    }
    return b;
}

std::vector<Tensor> FrozenBackbone::weights() const {
    std::vector<Tensor> out{patch_embed_, positions_};
    for (const EncoderBlock& blk : blocks_) {
        for (const Tensor& t : {blk.ln1_gain, blk.ln1_bias, blk.wq, blk.wk, blk.wv, blk.wo, blk.ln2_gain,
                                blk.ln2_bias, blk.mlp_up, blk.mlp_down}) {
            out.push_back(t);
        }
    }
    return out;
}

Tensor FrozenBackbone::embed(const Tensor& image) const {
    const std::size_t s = config_.image_size;
    if (image.rank() != 3 || image.dim(0) != s || image.dim(1) != s || image.dim(2) != config_.channels) {
        throw ShapeError("backbone: image shape " + shape_str(image.shape()) + " does not match configured " +
                         shape_str({s, s, config_.channels}));
    }
    Tensor patches = patchify(image.precision() == precision_ ? image : image.with_precision(precision_),
                              config_.patch_size);
    return add(matmul(patches, patch_embed_), positions_);
}

Tensor FrozenBackbone::run_block(const EncoderBlock& blk, const Tensor& x) const {
    const std::size_t d = config_.dim;
    const std::size_t dh = d / config_.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    Tensor q = matmul(h, blk.wq);
    Tensor k = matmul(h, blk.wk);
    Tensor v = matmul(h, blk.wv);
    std::vector<Tensor> heads;
    heads.reserve(config_.heads);
    for (std::size_t i = 0; i < config_.heads; ++i) {
        Tensor qh = slice_cols(q, i * dh, dh);
        Tensor kh = slice_cols(k, i * dh, dh);
        Tensor vh = slice_cols(v, i * dh, dh);
        Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
        heads.push_back(matmul(attn, vh));
    }
    Tensor attended = config_.heads == 1 ? heads[0] : concat_cols(heads);
    Tensor y = add(x, matmul(attended, blk.wo));

    Tensor m = layer_norm(y, blk.ln2_gain, blk.ln2_bias);
    return add(y, matmul(relu(matmul(m, blk.mlp_up)), blk.mlp_down));
}

Tensor FrozenBackbone::run_stage(std::size_t stage, Tensor x) const {
    const std::size_t per = config_.blocks_per_stage;
    for (std::size_t i = stage * per; i < (stage + 1) * per; ++i) x = run_block(blocks_[i], x);
    return x;
}

StageFeatures FrozenBackbone::forward(const Tensor& image) const {
    return forward_with_hooks(image, [](int, const Tensor& f) { return f; });
}

StageFeatures FrozenBackbone::forward_with_hooks(const Tensor& image, const StageHook& hook) const {
    StageFeatures out;
    Tensor x = embed(image);
    for (int level = 1; level <= 3; ++level) {
        x = run_stage(static_cast<std::size_t>(level - 1), x);
        out.levels[level - 1] = x;
        Tensor next = hook(level, x);
        if (!next.defined() || next.shape() != x.shape()) {
            throw ContractError("backbone: hook at level " + std::to_string(level) + " returned shape " +
                                (next.defined() ? shape_str(next.shape()) : std::string("<undefined>")) +
                                ", expected " + shape_str(x.shape()));
        }
        x = next;
    }
    out.f_vis = run_stage(3, x);
    return out;
}

}  // namespace mvfa
