#include "mvfa/adaptation.hpp"

#include <cmath>
#include <map>

#include "mvfa/io.hpp"
#include "mvfa/rng.hpp"

namespace mvfa {

std::string to_string(FeedMode mode) {
    switch (mode) {
        case FeedMode::mean: return "mean";
        case FeedMode::cls: return "cls";
        case FeedMode::seg: return "seg";
    }
    return "?";
}

std::string to_string(Architecture arch) { return arch == Architecture::adapter ? "adapter" : "projector"; }

FeedMode parse_feed_mode(const std::string& s) {
    if (s == "mean") return FeedMode::mean;
    if (s == "cls") return FeedMode::cls;
    if (s == "seg") return FeedMode::seg;
    throw ConfigError("unknown feed mode '" + s + "' (expected mean, cls or seg)");
}

Architecture parse_architecture(const std::string& s) {
    if (s == "adapter") return Architecture::adapter;
    if (s == "projector") return Architecture::projector;
    throw ConfigError("unknown architecture '" + s + "' (expected adapter or projector)");
}

Tensor Adapter::apply(const Tensor& f) const { return apply_adapter(f, *this); }

Tensor apply_adapter(const Tensor& f, const Adapter& a) { return matmul(relu(matmul(f, a.w1)), a.w2); }

Tensor residual_mix(const Tensor& f, const Tensor& adapted, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) {
        throw ConfigError("residual_mix: gamma " + std::to_string(gamma) + " outside [0, 1]");
    }
    return add(scale(adapted, gamma), scale(f, 1.0 - gamma));
}

namespace {

Tensor seeded(std::string name, std::uint64_t seed, std::uint64_t stream, std::size_t rows, std::size_t cols,
              double s, Precision precision) {
    Rng rng(mix_seed(seed, stream));
    std::vector<double> data(rows * cols);
    for (double& v : data) v = rng.normal() * s;
    return Tensor::parameter(std::move(name), {rows, cols}, std::move(data), precision);
}

std::string adapter_name(int level, const char* branch, const char* w) {
    return "level" + std::to_string(level) + "." + branch + "." + w;
}

}  // namespace

MVFAParams MVFAParams::init(std::size_t dim, std::uint64_t seed, Precision precision, double gamma,
                            ArchitectureFlags flags) {
    if (dim < 4) throw ConfigError("adapter: dim must be at least 4");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("adapter: gamma outside [0, 1]");
    const std::size_t r = dim / 4;
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    MVFAParams p;
    p.gamma = gamma;
    p.flags = flags;
    std::uint64_t stream = 1000;
    for (int level = 1; level <= 3; ++level) {
        DualAdapter& da = p.dual[level - 1];
        da.cls.w1 = seeded(adapter_name(level, "cls", "w1"), seed, stream++, dim, r, s, precision);
        da.cls.w2 = Tensor::parameter(adapter_name(level, "cls", "w2"), {r, dim}, std::vector<double>(r * dim, 0.0),
                                      precision);
        da.seg.w1 = seeded(adapter_name(level, "seg", "w1"), seed, stream++, dim, r, s, precision);
        da.seg.w2 = Tensor::parameter(adapter_name(level, "seg", "w2"), {r, dim}, std::vector<double>(r * dim, 0.0),
                                      precision);
    }
    p.proj.w_cls = seeded("proj.w_cls", seed, stream++, dim, dim, s, precision);
    p.proj.w_seg = seeded("proj.w_seg", seed, stream++, dim, dim, s, precision);
    return p;
}

std::vector<Tensor> MVFAParams::tensors() const {
    std::vector<Tensor> out;
    for (const DualAdapter& da : dual) {
        out.push_back(da.cls.w1);
        out.push_back(da.cls.w2);
        if (!flags.single_adapter) {
            out.push_back(da.seg.w1);
            out.push_back(da.seg.w2);
        }
    }
    out.push_back(proj.w_cls);
    out.push_back(proj.w_seg);
    return out;
}

MVFAParams MVFAParams::clone() const {
    MVFAParams p = *this;
    for (DualAdapter& da : p.dual) {
        da.cls.w1 = da.cls.w1.clone();
        da.cls.w2 = da.cls.w2.clone();
        da.seg.w1 = da.seg.w1.clone();
        da.seg.w2 = da.seg.w2.clone();
    }
    p.proj.w_cls = proj.w_cls.clone();
    p.proj.w_seg = proj.w_seg.clone();
    return p;
}

std::pair<AdaptedFeatures, StageFeatures> adapt_forward(const FrozenBackbone& backbone, const MVFAParams& params,
                                                        const Tensor& image) {
    AdaptedFeatures out;
    const double gamma = params.gamma;
    auto hook = [&](int level, const Tensor& f) -> Tensor {
        Tensor a_cls = params.cls_adapter(level).apply(f);
        Tensor a_seg = params.flags.single_adapter ? a_cls : params.seg_adapter(level).apply(f);
        out.cls[level - 1] = residual_mix(f, a_cls, gamma);
        out.seg[level - 1] = params.flags.single_adapter ? out.cls[level - 1] : residual_mix(f, a_seg, gamma);
        if (params.flags.architecture == Architecture::projector) return f;
        switch (params.flags.feed) {
            case FeedMode::cls: return out.cls[level - 1];
            case FeedMode::seg: return out.seg[level - 1];
            case FeedMode::mean: break;
        }
        if (params.flags.single_adapter) return out.cls[level - 1];
        return residual_mix(f, scale(add(a_cls, a_seg), 0.5), gamma);
    };
    StageFeatures stages = backbone.forward_with_hooks(image, hook);
    out.cls[3] = matmul(stages.f_vis, params.proj.w_cls);
    out.seg[3] = matmul(stages.f_vis, params.proj.w_seg);
    return {std::move(out), std::move(stages)};
}

Tensor similarity_logits(const Tensor& features, const Tensor& text, double tau) {
    if (!(tau > 0.0)) throw ConfigError("similarity_logits: tau must be positive");
    if (text.rank() != 2 || text.rows() != 2) {
        throw ShapeError("similarity_logits: text features must be 2 x d, got " + shape_str(text.shape()));
    }
    if (features.rank() != 2 || features.cols() != text.cols()) {
        throw ShapeError("similarity_logits: shape mismatch " + shape_str(features.shape()) + " vs " +
                         shape_str(text.shape()));
    }
    return scale(matmul(l2_normalize_rows(features), transpose(l2_normalize_rows(text))), 1.0 / tau);
}

// ---- checkpoint ------------------------------------------------------------

namespace {

constexpr std::string_view kCheckpointMagic{"MVFA-CKPT\0", 10};

void write_tensor(io::ByteWriter& w, const std::string& name, const Shape& dims, std::span<const double> values) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(dims.size()));
    for (std::size_t d : dims) w.u32(static_cast<std::uint32_t>(d));
    for (double v : values) w.f32(static_cast<float>(v));
}

struct RawTensor {
    Shape dims;
    std::vector<double> values;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const BackboneConfig& b, const MVFAParams& params) {
    io::ByteWriter w;
    w.raw(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    for (std::uint32_t v : {b.image_size, b.patch_size, b.dim, b.stages, b.blocks_per_stage, b.heads, b.channels,
                            b.mlp_ratio}) {
        w.u32(v);
    }
    w.u64(b.seed);

    const std::vector<Tensor> tensors = params.tensors();
    w.u32(static_cast<std::uint32_t>(tensors.size() + 2));
    const double gamma = params.gamma;
    write_tensor(w, "gamma", {}, std::span(&gamma, 1));
    const std::vector<double> arch{static_cast<double>(params.flags.feed),
                                   params.flags.single_adapter ? 1.0 : 0.0,
                                   static_cast<double>(params.flags.architecture)};
    write_tensor(w, "arch", {3}, arch);
    for (const Tensor& t : tensors) write_tensor(w, t.name(), t.shape(), t.data());
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect(kCheckpointMagic, "checkpoint");
    const std::size_t version_at = r.offset();
    if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
    Checkpoint ck;
    BackboneConfig& b = ck.backbone;
    for (std::uint32_t* field : {&b.image_size, &b.patch_size, &b.dim, &b.stages, &b.blocks_per_stage, &b.heads,
                                 &b.channels, &b.mlp_ratio}) {
        *field = r.u32();
    }
    b.seed = r.u64();
    try {
        b.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("invalid backbone in checkpoint: ") + e.what(), r.offset());
    }

    std::map<std::string, RawTensor> raw;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t at = r.offset();
        const std::string name = r.str(r.u16());
        RawTensor t;
        const std::uint8_t rank = r.u8();
        std::size_t n = 1;
        for (std::uint8_t k = 0; k < rank; ++k) {
            t.dims.push_back(r.u32());
            n *= t.dims.back();
        }
        if (n > bytes.size()) throw FormatError("tensor '" + name + "' larger than file", at);
        t.values.resize(n);
        for (double& v : t.values) v = r.f32();
        if (!raw.emplace(name, std::move(t)).second) throw FormatError("duplicate tensor '" + name + "'", at);
    }
    r.expect_end("checkpoint");

    auto take = [&](const std::string& name) -> RawTensor& {
        auto it = raw.find(name);
        if (it == raw.end()) throw FormatError("checkpoint is missing tensor '" + name + "'", bytes.size());
        return it->second;
    };
    const std::size_t d = b.dim;
    auto param = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        RawTensor& t = take(name);
        if (t.dims != Shape{rows, cols}) {
            throw FormatError("tensor '" + name + "' has shape " + shape_str(t.dims) + ", expected " +
                              shape_str({rows, cols}),
                              bytes.size());
        }
        return Tensor::parameter(name, t.dims, t.values);
    };

    MVFAParams& p = ck.params;
    p.gamma = take("gamma").values.at(0);
    const RawTensor& arch = take("arch");
    if (arch.values.size() != 3) throw FormatError("arch tensor must hold 3 values", bytes.size());
    p.flags.feed = static_cast<FeedMode>(static_cast<int>(arch.values[0]));
    p.flags.single_adapter = arch.values[1] != 0.0;
    p.flags.architecture = static_cast<Architecture>(static_cast<int>(arch.values[2]));

    const std::size_t r_dim = d / 4;
    for (int level = 1; level <= 3; ++level) {
        DualAdapter& da = p.dual[level - 1];
        da.cls.w1 = param(adapter_name(level, "cls", "w1"), d, r_dim);
        da.cls.w2 = param(adapter_name(level, "cls", "w2"), r_dim, d);
        if (p.flags.single_adapter) {
            da.seg = da.cls;
        } else {
            da.seg.w1 = param(adapter_name(level, "seg", "w1"), d, r_dim);
            da.seg.w2 = param(adapter_name(level, "seg", "w2"), r_dim, d);
        }
    }
    p.proj.w_cls = param("proj.w_cls", d, d);
    p.proj.w_seg = param("proj.w_seg", d, d);
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const BackboneConfig& backbone, const MVFAParams& params) {
    io::write_file_atomic(path, encode_checkpoint(backbone, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace mvfa
