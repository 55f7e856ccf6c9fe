#include <doctest.h>

#include <cmath>
#include <set>

#include "mvfa/adaptation.hpp"
#include "mvfa/io.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace mvfa;

namespace {

constexpr auto F64 = Precision::f64;

Tensor image_for(const BackboneConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::from({c.image_size, c.image_size, 1}, oracle::uniform(std::size_t{c.image_size} * c.image_size, -2, 2, rng));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void zero_out(const Tensor& t) {
    Tensor m = t;
    m.assign(std::vector<double>(t.numel(), 0.0));
}

}  // namespace

TEST_CASE("adapter output") {
    Rng rng(1);
    Adapter a{Tensor::parameter("w1", {4, 2}, oracle::uniform(8, -1, 1, rng), F64),
              Tensor::parameter("w2", {2, 4}, std::vector<double>(8, 0.0), F64)};
    Tensor f = Tensor::from({2, 4}, oracle::uniform(8, -2, 2, rng), F64);

    SUBCASE("zero w2 gives zero") {
        const Tensor y = apply_adapter(f, a);
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("zero input gives zero") {
        a.w2.assign(oracle::uniform(8, -1, 1, rng));
        const Tensor y = apply_adapter(Tensor::zeros({2, 4}, F64), a);
        for (double v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("hand-set weights match manual matrix arithmetic") {
        a.w1.assign(std::vector<double>{1, 0, 0, 1, -1, 2, 0.5, -0.5});
        a.w2.assign(std::vector<double>{1, 2, 3, 4, -1, 0, 1, 0.5});
        Tensor x = Tensor::from({2, 4}, {1, -2, 0.5, 3, -1, 1, 2, 0}, F64);
        // Row-by-row: h = relu(x w1), y = h w2.
        const double xv[2][4] = {{1, -2, 0.5, 3}, {-1, 1, 2, 0}};
        const double w1[4][2] = {{1, 0}, {0, 1}, {-1, 2}, {0.5, -0.5}};
        const double w2[2][4] = {{1, 2, 3, 4}, {-1, 0, 1, 0.5}};
        Tensor y = apply_adapter(x, a);
        for (int i = 0; i < 2; ++i) {
            double h[2];
            for (int j = 0; j < 2; ++j) {
                h[j] = 0.0;
                for (int k = 0; k < 4; ++k) h[j] += xv[i][k] * w1[k][j];
                h[j] = std::max(h[j], 0.0);
            }
            for (int k = 0; k < 4; ++k) CHECK(y.at(i, k) == doctest::Approx(h[0] * w2[0][k] + h[1] * w2[1][k]));
        }
    }
    SUBCASE("dimension mismatch") { CHECK_THROWS_AS(apply_adapter(Tensor::zeros({2, 5}, F64), a), ShapeError); }
}

TEST_CASE("residual mix limits") {
    Rng rng(2);
    Tensor f = Tensor::from({3, 4}, oracle::uniform(12, -2, 2, rng));
    Tensor a = Tensor::from({3, 4}, oracle::uniform(12, -2, 2, rng));
    CHECK(bit_equal(residual_mix(f, a, 0.0), f));
    CHECK(bit_equal(residual_mix(f, a, 1.0), a));
    Tensor z = residual_mix(f, Tensor::zeros({3, 4}), 0.1);
    for (std::size_t i = 0; i < 12; ++i) CHECK(z[i] == doctest::Approx(0.9 * f[i]).epsilon(1e-6));
    CHECK_THROWS_AS(residual_mix(f, a, 1.5), ConfigError);
    CHECK_THROWS_AS(residual_mix(f, a, -0.1), ConfigError);
}

TEST_CASE("parameter set: shapes, counts and names") {
    const MVFAParams p = MVFAParams::init(64, 1);
    CHECK(p.bottleneck() == 16);
    CHECK(p.gamma == doctest::Approx(0.1));
    std::set<std::string> names;
    for (const Tensor& t : p.tensors()) {
        CHECK(t.requires_grad());
        names.insert(t.name());
    }
    CHECK(names.size() == 14);
    // 2 d r per adapter, independent of the grid.
    for (const DualAdapter& da : p.dual) CHECK(da.cls.w1.numel() + da.cls.w2.numel() == 2 * 64 * 16);
    for (const DualAdapter& da : p.dual) {
        for (double v : da.cls.w2.data()) CHECK(v == 0.0);
        CHECK(da.cls.w1.shape() == da.seg.w1.shape());
        CHECK_FALSE(bit_equal(da.cls.w1, da.seg.w1));
    }
    CHECK(p.proj.w_cls.shape() == Shape{64, 64});
    ArchitectureFlags single;
    single.single_adapter = true;
    CHECK(MVFAParams::init(64, 1, Precision::f32, 0.1, single).tensors().size() == 8);
}

TEST_CASE("zero weights and gamma 0 pass the raw features through") {
    BackboneConfig c;
    const auto bb = FrozenBackbone::init(c);
    MVFAParams p = MVFAParams::init(64, 3, Precision::f32, 0.0);
    for (const Tensor& t : p.tensors()) zero_out(t);
    const Tensor img = image_for(c, 4);
    auto [adapted, stages] = adapt_forward(bb, p, img);
    const StageFeatures frozen = bb.forward(img);
    for (int l = 0; l < 3; ++l) {
        CHECK(bit_equal(adapted.cls[l], frozen.levels[l]));
        CHECK(bit_equal(adapted.seg[l], frozen.levels[l]));
    }
    for (double v : adapted.cls[3].data()) CHECK(v == 0.0);
    for (double v : adapted.seg[3].data()) CHECK(v == 0.0);
}

TEST_CASE("gamma 0 with nonzero adapters still equals the frozen pass at levels 1-3") {
    BackboneConfig c;
    const auto bb = FrozenBackbone::init(c);
    MVFAParams p = MVFAParams::init(64, 3, Precision::f32, 0.0);
    Rng rng(5);
    for (const Tensor& t : p.tensors()) {
        Tensor m = t;
        m.assign(oracle::uniform(t.numel(), -0.5, 0.5, rng));
    }
    const Tensor img = image_for(c, 6);
    auto [adapted, stages] = adapt_forward(bb, p, img);
    const StageFeatures frozen = bb.forward(img);
    for (int l = 0; l < 3; ++l) {
        CHECK(bit_equal(adapted.cls[l], frozen.levels[l]));
        CHECK(bit_equal(stages.levels[l], frozen.levels[l]));
    }
    CHECK(bit_equal(stages.f_vis, frozen.f_vis));
}

TEST_CASE("fresh adapters with gamma 0.1 forward 0.9 times the stage output") {
    BackboneConfig c;
    const auto bb = FrozenBackbone::init(c);
    const MVFAParams p = MVFAParams::init(64, 3);
    const Tensor img = image_for(c, 7);
    auto [adapted, stages] = adapt_forward(bb, p, img);
    for (int l = 0; l < 3; ++l) {
        Tensor expected = scale(stages.levels[l], 0.9);
        CHECK(max_abs_diff(adapted.cls[l], expected) <= 1e-6);
        CHECK(max_abs_diff(adapted.seg[l], expected) <= 1e-6);
        const Tensor next = l < 2 ? stages.levels[l + 1] : stages.f_vis;
        CHECK(max_abs_diff(next, bb.run_stage(static_cast<std::size_t>(l + 1), expected)) <= 1e-6);
    }
}

TEST_CASE("cls features do not depend on the seg adapters when gamma is 0") {
    BackboneConfig c;
    const auto bb = FrozenBackbone::init(c);
    MVFAParams p = MVFAParams::init(64, 8, Precision::f32, 0.0);
    Rng rng(9);
    for (const Tensor& t : p.tensors()) {
        Tensor m = t;
        m.assign(oracle::uniform(t.numel(), -0.5, 0.5, rng));
    }
    const Tensor img = image_for(c, 10);
    const AdaptedFeatures before = adapt_forward(bb, p, img).first;
    for (const DualAdapter& da : p.dual) {
        zero_out(da.seg.w1);
        zero_out(da.seg.w2);
    }
    const AdaptedFeatures after = adapt_forward(bb, p, img).first;
    for (int l = 0; l < 3; ++l) CHECK(bit_equal(before.cls[l], after.cls[l]));
}

TEST_CASE("gradient map covers exactly the trainable tensors") {
    for (bool single : {false, true}) {
        ArchitectureFlags flags;
        flags.single_adapter = single;
        toy::Model m = toy::make(2, flags);
        const GradientMap g = backward(toy::loss(m));
        std::set<std::string> expected, got;
        for (const Tensor& t : m.params.tensors()) expected.insert(t.name());
        for (const std::string& n : g.names()) got.insert(n);
        CHECK(got == expected);
        for (const Tensor& w : m.backbone.weights()) CHECK_FALSE(g.contains(w));
    }
}

TEST_CASE("level-1 seg adapter receives gradient through the later stages") {
    toy::Model m = toy::make(4);
    const Tensor w1 = m.params.dual[0].seg.w1;
    // Only the level-4 terms remain: any gradient on level-1 weights must
    // travel through stages 2-4.
    auto fn = [&] {
        auto f = adapt_forward(m.backbone, m.params, m.image).first;
        return level_loss(f.cls[3], f.seg[3], m.text, 1, &m.mask, LossWeights{});
    };
    const GradientMap g = backward(fn());
    REQUIRE(g.contains(w1));
    double largest = 0.0;
    std::size_t at = 0;
    for (std::size_t i = 0; i < w1.numel(); ++i) {
        if (std::abs(g.at(w1)[i]) > largest) {
            largest = std::abs(g.at(w1)[i]);
            at = i;
        }
    }
    CHECK(largest > 0.0);
    Tensor leaf = w1;
    const double x = leaf[at];
    leaf.set(at, x + 1e-3);
    const double up = fn().item();
    leaf.set(at, x - 1e-3);
    const double down = fn().item();
    leaf.set(at, x);
    const double numeric = (up - down) / 2e-3;
    CHECK(numeric != 0.0);
    CHECK(numeric == doctest::Approx(g.at(w1)[at]).epsilon(1e-4));
}

TEST_CASE("similarity logits") {
    const double tau = 0.07;
    Tensor text = l2_normalize_rows(Tensor::from({2, 3}, {1, 0, 0, 0.6, 0.8, 0}, F64));
    SUBCASE("row equal to the normal text") {
        Tensor l = similarity_logits(Tensor::from({1, 3}, {2, 0, 0}, F64), text, tau);
        CHECK(l[0] == doctest::Approx(1.0 / tau));
        CHECK(l[1] == doctest::Approx(0.6 / tau));
    }
    SUBCASE("row orthogonal to both text rows") {
        Tensor l = similarity_logits(Tensor::from({1, 3}, {0, 0, 5}, F64), text, tau);
        CHECK(l[0] == 0.0);
        CHECK(l[1] == 0.0);
        Tensor s = softmax_rows(l);
        CHECK(s[1] == doctest::Approx(0.5));
    }
    SUBCASE("cosine gap of 0.1 gives anomaly probability of about 0.807") {
        // Unit feature with cos 0.3 to normal and 0.4 to abnormal.
        Tensor t = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0}, F64);
        Tensor f = Tensor::from({1, 3}, {0.3, 0.4, std::sqrt(1 - 0.25)}, F64);
        Tensor s = softmax_rows(similarity_logits(f, t, tau));
        CHECK(s[1] == doctest::Approx(oracle::logistic(0.1 / 0.07)).epsilon(1e-12));
        CHECK(s[1] == doctest::Approx(0.807).epsilon(1e-3));
    }
    SUBCASE("zero row is reported") {
        CHECK_THROWS_AS(similarity_logits(Tensor::from({2, 3}, {1, 1, 1, 0, 0, 0}, F64), text, tau), NumericError);
    }
}

TEST_CASE("checkpoint round-trips byte-exactly") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        BackboneConfig c;
        c.dim = 16;
        c.heads = 2;
        c.seed = rng.next_u64();
        ArchitectureFlags flags;
        flags.single_adapter = trial % 2 == 1;
        flags.architecture = trial == 2 ? Architecture::projector : Architecture::adapter;
        flags.feed = static_cast<FeedMode>(trial % 3);
        MVFAParams p = MVFAParams::init(16, rng.next_u64(), Precision::f32, 0.25, flags);
        for (const Tensor& t : p.tensors()) {
            Tensor m = t;
            m.assign(oracle::uniform(t.numel(), -3, 3, rng));
        }
        const auto bytes = encode_checkpoint(c, p);
        const Checkpoint back = decode_checkpoint(bytes);
        CHECK(back.backbone == c);
        CHECK(back.params.flags == flags);
        CHECK(back.params.gamma == doctest::Approx(0.25));
        CHECK(encode_checkpoint(back.backbone, back.params) == bytes);
    }
}

TEST_CASE("checkpoint header layout and corruption") {
    BackboneConfig c;
    const auto bytes = encode_checkpoint(c, MVFAParams::init(64, 1));
    REQUIRE(bytes.size() > 10);
    CHECK(std::string(bytes.begin(), bytes.begin() + 10) == std::string("MVFA-CKPT\0", 10));
    io::ByteReader r(bytes);
    r.str(10);
    CHECK(r.u32() == kCheckpointVersion);
    CHECK(r.u32() == 64);  // image_size

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3);
    try {
        (void)decode_checkpoint(truncated);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset() <= truncated.size());
    }
}
