#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mvfa/inference.hpp"
#include "oracles.hpp"

using namespace mvfa;

namespace {

constexpr auto F64 = Precision::f64;

BackboneConfig small_config() {
    BackboneConfig c;
    c.image_size = 32;
    c.dim = 32;
    c.seed = 4;
    return c;
}

Tensor random_image(std::uint32_t size, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::from({size, size, 1}, oracle::uniform(std::size_t{size} * size, -2, 2, rng));
}

Tensor unit_store(std::size_t rows, std::size_t d, Rng& rng) {
    std::vector<double> v(rows * d);
    for (double& x : v) x = rng.normal();
    const std::vector<float> u = unit_rows(Tensor::from({rows, d}, v, F64));
    return Tensor::from({rows, d}, std::vector<double>(u.begin(), u.end()));
}

Tensor gaussian(std::size_t rows, std::size_t d, Rng& rng) {
    std::vector<double> v(rows * d);
    for (double& x : v) x = rng.normal();
    return Tensor::from({rows, d}, v);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("memory bank size and normalization") {
    const BackboneConfig c = small_config();
    const auto bb = FrozenBackbone::init(c);
    const MVFAParams p = MVFAParams::init(c.dim, 1);
    const std::vector<Tensor> one{random_image(32, 1)};
    const MemoryBank b1 = build_memory_bank(one, bb, p);
    CHECK(b1.cls[0].rows() == c.tokens());

    std::vector<Tensor> four;
    for (std::uint64_t s = 0; s < 4; ++s) four.push_back(random_image(32, 10 + s));
    const MemoryBank b4 = build_memory_bank(four, bb, p);
    for (int l = 0; l < 4; ++l) {
        CHECK(b4.cls[l].rows() == 4 * c.tokens());
        CHECK(b4.seg[l].rows() == 4 * c.tokens());
        for (const Tensor* store : {&b4.cls[l], &b4.seg[l]}) {
            for (std::size_t r = 0; r < store->rows(); ++r) {
                double n = 0.0;
                for (std::size_t k = 0; k < store->cols(); ++k) n += store->at(r, k) * store->at(r, k);
                CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
            }
        }
    }
    CHECK_THROWS_AS(build_memory_bank(std::vector<Tensor>{}, bb, p), DataError);
}

TEST_CASE("zero-shot branch on text-aligned features") {
    const double tau = 0.07;
    Rng rng(3);
    const Tensor text = unit_store(2, 8, rng).with_precision(F64);
    std::vector<double> abnormal(text.data().begin() + 8, text.data().end());
    std::vector<double> rows;
    for (int g = 0; g < 4; ++g) rows.insert(rows.end(), abnormal.begin(), abnormal.end());
    AdaptedFeatures f;
    for (int l = 0; l < 4; ++l) {
        f.cls[l] = Tensor::from({4, 8}, rows, F64);
        f.seg[l] = Tensor::from({4, 8}, rows, F64);
    }
    double cos_na = 0.0;
    for (std::size_t k = 0; k < 8; ++k) cos_na += text[k] * text[8 + k];
    const double expected = oracle::logistic((1.0 - cos_na) / tau);
    const BranchScores z = zero_shot(f, text, tau, 8, 8);
    CHECK(z.c == doctest::Approx(expected).epsilon(1e-9));
    for (double v : z.map.data()) CHECK(v == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("zero-shot probabilities and maps stay in [0, 1]") {
    Rng rng(4);
    const Tensor text = unit_store(2, 16, rng);
    AdaptedFeatures f;
    for (int l = 0; l < 4; ++l) {
        f.cls[l] = gaussian(16, 16, rng);
        f.seg[l] = gaussian(16, 16, rng);
    }
    const Tensor logits = similarity_logits(f.seg[0], text, kDefaultTau);
    const Tensor prob = softmax_rows(logits);
    for (std::size_t r = 0; r < 16; ++r) CHECK(prob.at(r, 0) + prob.at(r, 1) == doctest::Approx(1.0).epsilon(1e-6));
    const BranchScores z = zero_shot(f, text, kDefaultTau, 12, 12);
    CHECK(z.c >= 0.0);
    CHECK(z.c <= 1.0);
    for (double v : z.map.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    // The fused map is the mean of the per-level maps.
    for (std::size_t i = 0; i < z.map.numel(); ++i) {
        double m = 0.0;
        for (int l = 0; l < 4; ++l) m += z.level_maps[l][i];
        CHECK(z.map[i] == doctest::Approx(m / 4.0).epsilon(1e-12));
    }
    // Identical levels average to any one of them.
    AdaptedFeatures same;
    for (int l = 0; l < 4; ++l) {
        same.cls[l] = f.cls[0];
        same.seg[l] = f.seg[0];
    }
    const BranchScores s = zero_shot(same, text, kDefaultTau, 12, 12);
    for (std::size_t i = 0; i < s.map.numel(); ++i) CHECK(s.map[i] == doctest::Approx(s.level_maps[0][i]).epsilon(1e-12));
}

TEST_CASE("few-shot branch matches the exhaustive oracle exactly") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 8, g = 4, rows = 4;
        MemoryBank bank;
        AdaptedFeatures f;
        for (int l = 0; l < 4; ++l) {
            bank.cls[l] = unit_store(rows, d, rng);
            bank.seg[l] = unit_store(rows, d, rng);
            f.cls[l] = gaussian(g, d, rng);
            f.seg[l] = gaussian(g, d, rng);
        }
        const BranchScores got = few_shot(f, bank, 6, 6);
        double c = 0.0;
        std::vector<double> map(36, 0.0);
        for (int l = 0; l < 4; ++l) {
            const auto cls = oracle::nearest_distances(values(f.cls[l]), g, values(bank.cls[l]), rows, d);
            const auto seg = oracle::nearest_distances(values(f.seg[l]), g, values(bank.seg[l]), rows, d);
            const double level_c = *std::max_element(cls.begin(), cls.end());
            CHECK(got.level_c[l] == level_c);
            const Tensor restored = bilinear_upsample(Tensor::from({2, 2}, seg, F64), 6, 6);
            for (std::size_t i = 0; i < 36; ++i) CHECK(got.level_maps[l][i] == restored[i]);
            c += level_c;
        }
        CHECK(got.c == c / 4.0);
    }
}

TEST_CASE("few-shot special cases") {
    SUBCASE("an image scored against its own bank has zero distance") {
        const BackboneConfig c = small_config();
        const auto bb = FrozenBackbone::init(c);
        const MVFAParams p = MVFAParams::init(c.dim, 1);
        const Tensor img = random_image(32, 7);
        const MemoryBank bank = build_memory_bank(std::vector<Tensor>{img}, bb, p);
        const BranchScores s = few_shot(adapt_forward(bb, p, img).first, bank, 32, 32);
        CHECK(s.c <= 1e-6);
        for (double v : s.map.data()) CHECK(v <= 1e-6);
    }
    SUBCASE("a single orthogonal row gives distance 1 everywhere") {
        MemoryBank bank;
        AdaptedFeatures f;
        std::vector<double> row(8, 0.0);
        row[7] = 1.0;
        Rng rng(1);
        for (int l = 0; l < 4; ++l) {
            bank.cls[l] = Tensor::from({1, 8}, row);
            bank.seg[l] = Tensor::from({1, 8}, row);
            std::vector<double> q(4 * 8, 0.0);
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t k = 0; k < 7; ++k) q[i * 8 + k] = rng.normal();
            f.cls[l] = Tensor::from({4, 8}, q);
            f.seg[l] = Tensor::from({4, 8}, q);
        }
        const BranchScores s = few_shot(f, bank, 4, 4);
        CHECK(s.c == 1.0);
        for (double v : s.map.data()) CHECK(v == 1.0);
    }
    SUBCASE("empty bank disables the branch") {
        CHECK_THROWS_AS(few_shot(AdaptedFeatures{}, MemoryBank{}, 4, 4), ContractError);
    }
}

TEST_CASE("adding bank rows never increases a distance and distances lie in [0, 2]") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor q = gaussian(6, 8, rng);
        const Tensor small = unit_store(3, 8, rng);
        const Tensor extra = unit_store(5, 8, rng);
        std::vector<double> both = values(small);
        both.insert(both.end(), extra.data().begin(), extra.data().end());
        const auto a = nearest_distances(q, small);
        const auto b = nearest_distances(q, Tensor::from({8, 8}, both));
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(b[i] <= a[i]);
            CHECK(a[i] >= 0.0);
            CHECK(a[i] <= 2.0);
        }
    }
}

TEST_CASE("fusion") {
    const Tensor sz = Tensor::from({2, 2}, {0.1, 0.2, 0.3, 0.4}, F64);
    const Tensor sf = Tensor::from({2, 2}, {1.0, 0.5, 0.25, 0.0}, F64);
    const AnomalyResult zero = fuse(0.8, 0.4, sz, sf, 1.0, 0.0);
    CHECK(zero.c_pred == 0.8);
    for (std::size_t i = 0; i < 4; ++i) CHECK(zero.s_pred[i] == sz[i]);
    const AnomalyResult few = fuse(0.8, 0.4, sz, sf, 0.0, 1.0);
    CHECK(few.c_pred == 0.4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(few.s_pred[i] == sf[i]);
    CHECK(fuse(0.8, 0.4, sz, sf, 0.5, 0.5).c_pred == doctest::Approx(0.6));
    const AnomalyResult none = fuse(0.8, 0.4, sz, sf, 0.0, 0.0);
    CHECK(none.c_pred == 0.0);
    for (double v : none.s_pred.data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(fuse(0.8, 0.4, sz, sf, -0.1, 0.5), ConfigError);
}

TEST_CASE("rescaling both weights preserves the ranking") {
    Rng rng(9);
    const Tensor s = Tensor::zeros({1, 1}, F64);
    std::vector<std::pair<double, double>> pairs;
    for (int i = 0; i < 50; ++i) pairs.emplace_back(rng.uniform(), rng.uniform(0, 2));
    auto ranking = [&](double b1, double b2) {
        std::vector<std::size_t> idx(pairs.size());
        std::vector<double> c(pairs.size());
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            idx[i] = i;
            c[i] = fuse(pairs[i].first, pairs[i].second, s, s, b1, b2).c_pred;
        }
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return c[a] < c[b]; });
        return idx;
    };
    CHECK(ranking(0.5, 0.5) == ranking(2.0, 2.0));
    CHECK(ranking(0.3, 0.7) == ranking(0.9, 2.1));
}

TEST_CASE("full scoring path") {
    const BackboneConfig c = small_config();
    const auto bb = FrozenBackbone::init(c);
    const MVFAParams p = MVFAParams::init(c.dim, 2);
    Rng rng(5);
    const Tensor text = unit_store(2, c.dim, rng);
    const Tensor img = random_image(32, 3);
    const MemoryBank bank = build_memory_bank(std::vector<Tensor>{random_image(32, 4)}, bb, p);

    InferenceConfig cfg;
    CHECK_THROWS_AS(score_image(bb, p, text, nullptr, img, cfg), ConfigError);

    const ScoredImage both = score_image(bb, p, text, &bank, img, cfg);
    CHECK(both.result.c_pred == doctest::Approx(0.5 * both.zero.c + 0.5 * both.few.c).epsilon(1e-12));
    CHECK(both.result.s_pred.shape() == Shape{32, 32});

    cfg.beta1 = 1.0;
    cfg.beta2 = 0.0;
    const ScoredImage zero = score_image(bb, p, text, nullptr, img, cfg);
    CHECK(zero.result.c_pred == zero.zero.c);
    for (std::size_t i = 0; i < zero.zero.map.numel(); ++i) CHECK(zero.result.s_pred[i] == zero.zero.map[i]);

    InferenceConfig norm;
    norm.normalize_few = true;
    const ScoredImage scaled = score_image(bb, p, text, &bank, img, norm);
    const auto [lo, hi] = std::minmax_element(scaled.result.s_few.data().begin(), scaled.result.s_few.data().end());
    CHECK(*lo == 0.0);
    CHECK(*hi == doctest::Approx(1.0));

    InferenceConfig one_level;
    one_level.levels = {false, true, false, false};
    const ScoredImage l2 = score_image(bb, p, text, &bank, img, one_level);
    CHECK(l2.zero.c == l2.zero.level_c[1]);
    CHECK(l2.few.c == l2.few.level_c[1]);
}

TEST_CASE("bank and map files round-trip byte-exactly") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        MemoryBank bank;
        const std::size_t rows = static_cast<std::size_t>(rng.uniform_int(1, 40));
        const std::size_t d = static_cast<std::size_t>(rng.uniform_int(1, 12));
        for (int l = 0; l < 4; ++l) {
            bank.cls[l] = Tensor::from({rows, d}, oracle::uniform(rows * d, -1, 1, rng));
            bank.seg[l] = Tensor::from({rows, d}, oracle::uniform(rows * d, -1, 1, rng));
        }
        const auto bytes = encode_bank(bank);
        CHECK(std::string(bytes.begin(), bytes.begin() + 10) == std::string("MVFA-BANK\0", 10));
        const MemoryBank back = decode_bank(bytes);
        for (int l = 0; l < 4; ++l) CHECK(values(back.cls[l]) == values(bank.cls[l]));
        CHECK(encode_bank(back) == bytes);

        const std::size_t h = static_cast<std::size_t>(rng.uniform_int(1, 20));
        const std::size_t w = static_cast<std::size_t>(rng.uniform_int(1, 20));
        const AnomalyMap map = to_anomaly_map(Tensor::from({h, w}, oracle::uniform(h * w, -5, 5, rng)));
        const auto mb = encode_map(map);
        CHECK(std::string(mb.begin(), mb.begin() + 9) == std::string("MVFA-MAP\0", 9));
        const AnomalyMap mback = decode_map(mb);
        CHECK(mback.values == map.values);
        CHECK(encode_map(mback) == mb);
    }
    auto truncated = encode_map(to_anomaly_map(Tensor::zeros({3, 3})));
    truncated.pop_back();
    CHECK_THROWS_AS(decode_map(truncated), FormatError);
}

TEST_CASE("map rendering is min-max scaled") {
    AnomalyMap m{1, 3, {2.0f, 3.0f, 4.0f}};
    const auto px = render_map_pixels(m);
    CHECK(px == std::vector<std::uint8_t>{0, 128, 255});
    AnomalyMap flat{1, 2, {1.0f, 1.0f}};
    CHECK(render_map_pixels(flat) == std::vector<std::uint8_t>{0, 0});
}
