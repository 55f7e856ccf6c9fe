#include "mvfa/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mvfa/io.hpp"

namespace mvfa {

std::vector<float> unit_rows(const Tensor& features) {
    const std::size_t r = features.rows(), c = features.cols();
    std::vector<float> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += features[i * c + j] * features[i * c + j];
        const double n = std::sqrt(ss);
        if (!(n > 0.0)) throw NumericError("unit_rows: row " + std::to_string(i) + " has zero norm");
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = static_cast<float>(features[i * c + j] / n);
    }
    return out;
}

namespace {

std::size_t grid_side(std::size_t tokens) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(tokens))));
    if (side * side != tokens) throw ShapeError("inference: token count " + std::to_string(tokens) + " is not square");
    return side;
}

Tensor restore(std::vector<double> grid_values, std::size_t h, std::size_t w) {
    const std::size_t side = grid_side(grid_values.size());
    return bilinear_upsample(Tensor::from({side, side}, std::move(grid_values), Precision::f64), h, w);
}

void finish_branch(BranchScores& out, const LevelMask& levels, std::size_t h, std::size_t w) {
    std::size_t active = 0;
    std::vector<double> acc(h * w, 0.0);
    double c = 0.0;
    for (std::size_t l = 0; l < 4; ++l) {
        if (!levels[l]) continue;
        ++active;
        c += out.level_c[l];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += out.level_maps[l][i];
    }
    if (active == 0) throw ConfigError("inference: no level enabled");
    for (double& v : acc) v /= static_cast<double>(active);
    out.c = c / static_cast<double>(active);
    out.map = Tensor::from({h, w}, std::move(acc), Precision::f64);
}

}  // namespace

MemoryBank build_memory_bank(std::span<const Tensor> normal_images, const FrozenBackbone& backbone,
                             const MVFAParams& params) {
    if (normal_images.empty()) throw DataError("memory bank: no normal reference images");
    NoGradGuard no_grad;
    std::array<std::vector<double>, 4> cls_rows, seg_rows;
    std::size_t d = 0;
    for (const Tensor& image : normal_images) {
        auto [features, stages] = adapt_forward(backbone, params, image);
        for (std::size_t l = 0; l < 4; ++l) {
            d = features.cls[l].cols();
            const std::vector<float> c = unit_rows(features.cls[l]);
            const std::vector<float> s = unit_rows(features.seg[l]);
            cls_rows[l].insert(cls_rows[l].end(), c.begin(), c.end());
            seg_rows[l].insert(seg_rows[l].end(), s.begin(), s.end());
        }
    }
    MemoryBank bank;
    for (std::size_t l = 0; l < 4; ++l) {
        const std::size_t n = cls_rows[l].size() / d;
        bank.cls[l] = Tensor::from({n, d}, std::move(cls_rows[l]), Precision::f32);
        bank.seg[l] = Tensor::from({n, d}, std::move(seg_rows[l]), Precision::f32);
    }
    return bank;
}

std::vector<double> nearest_distances(const Tensor& query, const Tensor& store) {
    if (query.cols() != store.cols()) {
        throw ShapeError("nearest_distances: shape mismatch " + shape_str(query.shape()) + " vs " +
                         shape_str(store.shape()));
    }
    const std::vector<float> q = unit_rows(query);
    const std::size_t d = query.cols(), n = store.rows();
    auto s = store.data();
    std::vector<double> out(query.rows());
    for (std::size_t i = 0; i < query.rows(); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < n; ++m) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(q[i * d + k]) * s[m * d + k];
            if (dot > best) best = dot;
        }
        out[i] = std::max(0.0, 1.0 - best);
    }
    return out;
}

BranchScores zero_shot(const AdaptedFeatures& features, const Tensor& text, double tau, std::size_t h, std::size_t w,
                       const LevelMask& levels) {
    NoGradGuard no_grad;
    BranchScores out;
    for (std::size_t l = 0; l < 4; ++l) {
        if (!levels[l]) continue;
        Tensor cls_prob = anomaly_probability(features.cls[l], text, tau);
        out.level_c[l] = max_all(cls_prob).item();
        Tensor seg_prob = anomaly_probability(features.seg[l], text, tau);
        out.level_maps[l] = restore(std::vector<double>(seg_prob.data().begin(), seg_prob.data().end()), h, w);
    }
    finish_branch(out, levels, h, w);
    return out;
}

BranchScores few_shot(const AdaptedFeatures& features, const MemoryBank& bank, std::size_t h, std::size_t w,
                      const LevelMask& levels) {
    if (bank.empty()) throw ContractError("few_shot: memory bank is empty; the few-shot branch is disabled");
    NoGradGuard no_grad;
    BranchScores out;
    for (std::size_t l = 0; l < 4; ++l) {
        if (!levels[l]) continue;
        const std::vector<double> cls_dist = nearest_distances(features.cls[l], bank.cls[l]);
        out.level_c[l] = *std::max_element(cls_dist.begin(), cls_dist.end());
        out.level_maps[l] = restore(nearest_distances(features.seg[l], bank.seg[l]), h, w);
    }
    finish_branch(out, levels, h, w);
    return out;
}

AnomalyResult fuse(double c_zero, double c_few, const Tensor& s_zero, const Tensor& s_few, double beta1,
                   double beta2) {
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("fuse: branch weights must be non-negative");
    if (s_zero.shape() != s_few.shape()) {
        throw ShapeError("fuse: shape mismatch " + shape_str(s_zero.shape()) + " vs " + shape_str(s_few.shape()));
    }
    AnomalyResult r;
    r.c_zero = c_zero;
    r.c_few = c_few;
    r.s_zero = s_zero;
    r.s_few = s_few;
    r.c_pred = beta1 * c_zero + beta2 * c_few;
    std::vector<double> s(s_zero.numel());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = beta1 * s_zero[i] + beta2 * s_few[i];
    r.s_pred = Tensor::from(s_zero.shape(), std::move(s), Precision::f64);
    return r;
}

void InferenceConfig::validate() const {
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("inference: beta1 and beta2 must be non-negative");
    if (!(tau > 0.0)) throw ConfigError("inference: tau must be positive");
    if (levels == LevelMask{}) throw ConfigError("inference: at least one level must be enabled");
}

ScoredImage score_image(const FrozenBackbone& backbone, const MVFAParams& params, const Tensor& text,
                        const MemoryBank* bank, const Tensor& image, const InferenceConfig& config) {
    config.validate();
    if (config.beta2 > 0.0 && (!bank || bank->empty())) {
        throw ConfigError("inference: beta2 > 0 requires a memory bank (build one or set beta2 to 0)");
    }
    NoGradGuard no_grad;
    const std::size_t h = image.dim(0), w = image.dim(1);
    auto [features, stages] = adapt_forward(backbone, params, image);
    ScoredImage out;
    out.zero = zero_shot(features, text, config.tau, h, w, config.levels);
    if (bank && !bank->empty()) {
        out.few = few_shot(features, *bank, h, w, config.levels);
        if (config.normalize_few) {
            auto v = out.few.map.data();
            const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
            const double span = *hi - *lo;
            std::vector<double> scaled(v.size(), 0.0);
            if (span > 0.0)
                for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = (v[i] - *lo) / span;
            out.few.map = Tensor::from(out.few.map.shape(), std::move(scaled), Precision::f64);
        }
    } else {
        out.few.map = Tensor::zeros({h, w}, Precision::f64);
    }
    out.result = fuse(out.zero.c, out.few.c, out.zero.map, out.few.map, config.beta1, config.beta2);
    return out;
}

// ---- file formats ----------------------------------------------------------

namespace {

constexpr std::string_view kBankMagic{"MVFA-BANK\0", 10};
constexpr std::string_view kMapMagic{"MVFA-MAP\0", 9};

void write_store(io::ByteWriter& w, std::uint8_t role, const Tensor& store) {
    w.u8(role);
    w.u32(static_cast<std::uint32_t>(store.rows()));
    w.u32(static_cast<std::uint32_t>(store.cols()));
    for (double v : store.data()) w.f32(static_cast<float>(v));
}

Tensor read_store(io::ByteReader& r, std::uint8_t expected_role, std::size_t total) {
    const std::size_t at = r.offset();
    const std::uint8_t role = r.u8();
    if (role != expected_role) throw FormatError("unexpected bank role " + std::to_string(role), at);
    const std::uint32_t rows = r.u32();
    const std::uint32_t d = r.u32();
    if (rows == 0 || d == 0) throw FormatError("empty bank store", at);
    if (std::uint64_t{rows} * d * 4 > total) throw FormatError("bank store larger than file", at);
    std::vector<double> v(std::size_t{rows} * d);
    for (double& x : v) x = r.f32();
    return Tensor::from({rows, d}, std::move(v), Precision::f32);
}

}  // namespace

// Layout: magic, version u32, levels u8, then per level a cls record and a
// seg record, each: role u8, rows u32, d u32, rows*d f32.
std::vector<std::uint8_t> encode_bank(const MemoryBank& bank) {
    if (bank.empty()) throw ContractError("encode_bank: bank is empty");
    io::ByteWriter w;
    w.raw(kBankMagic);
    w.u32(kBankVersion);
    w.u8(4);
    for (std::size_t l = 0; l < 4; ++l) {
        write_store(w, 0, bank.cls[l]);
        write_store(w, 1, bank.seg[l]);
    }
    return w.take();
}

MemoryBank decode_bank(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect(kBankMagic, "memory bank");
    const std::size_t version_at = r.offset();
    if (r.u32() != kBankVersion) throw FormatError("unsupported memory bank version", version_at);
    const std::size_t levels_at = r.offset();
    if (r.u8() != 4) throw FormatError("memory bank must have 4 levels", levels_at);
    MemoryBank bank;
    for (std::size_t l = 0; l < 4; ++l) {
        bank.cls[l] = read_store(r, 0, bytes.size());
        bank.seg[l] = read_store(r, 1, bytes.size());
    }
    r.expect_end("memory bank");
    return bank;
}

void save_bank(const std::filesystem::path& path, const MemoryBank& bank) {
    io::write_file_atomic(path, encode_bank(bank));
}

MemoryBank load_bank(const std::filesystem::path& path) { return decode_bank(io::read_file(path)); }

AnomalyMap to_anomaly_map(const Tensor& map) {
    AnomalyMap m;
    m.h = static_cast<std::uint32_t>(map.rows());
    m.w = static_cast<std::uint32_t>(map.cols());
    m.values.reserve(map.numel());
    for (double v : map.data()) m.values.push_back(static_cast<float>(v));
    return m;
}

std::vector<std::uint8_t> encode_map(const AnomalyMap& map) {
    if (map.values.size() != std::size_t{map.h} * map.w) throw ContractError("encode_map: size mismatch");
    io::ByteWriter w;
    w.raw(kMapMagic);
    w.u32(map.h);
    w.u32(map.w);
    for (float v : map.values) w.f32(v);
    return w.take();
}

AnomalyMap decode_map(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect(kMapMagic, "anomaly map");
    AnomalyMap m;
    const std::size_t at = r.offset();
    m.h = r.u32();
    m.w = r.u32();
    if (std::uint64_t{m.h} * m.w * 4 != bytes.size() - r.offset()) {
        throw FormatError("anomaly map payload size does not match " + std::to_string(m.h) + "x" +
                              std::to_string(m.w),
                          at);
    }
    m.values.resize(std::size_t{m.h} * m.w);
    for (float& v : m.values) v = r.f32();
    return m;
}

std::vector<std::uint8_t> render_map_pixels(const AnomalyMap& map) {
    std::vector<std::uint8_t> px(map.values.size(), 0);
    if (map.values.empty()) return px;
    const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
    const double span = static_cast<double>(*hi) - static_cast<double>(*lo);
    if (span <= 0.0) return px;
    for (std::size_t i = 0; i < px.size(); ++i) {
        const double t = (static_cast<double>(map.values[i]) - *lo) / span;
        px[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
    }
    return px;
}

}  // namespace mvfa
