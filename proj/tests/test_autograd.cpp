#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

#include "mvfa/tensor.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"

using namespace mvfa;

namespace {

constexpr auto F64 = Precision::f64;

}  // namespace

TEST_CASE("relu, softmax and row normalization on small vectors") {
    Tensor x = Tensor::from({1, 3}, {-1, 0, 2});
    Tensor r = relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    Tensor s = softmax_rows(Tensor::from({1, 2}, {0, 0}));
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));

    Tensor n = l2_normalize_rows(Tensor::from({1, 2}, {3, 4}, F64));
    CHECK(n[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(n[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("shape mismatch names the op and both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
        (void)matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), ShapeError);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("relu derivative is 1 above zero and 0 below and at zero") {
    for (auto [x, expected] : {std::pair{2.0, 1.0}, std::pair{-1.0, 0.0}, std::pair{0.0, 0.0}}) {
        Tensor p = Tensor::parameter("x", {1}, {x}, F64);
        GradientMap g = backward(sum(relu(p)));
        CHECK(g.at("x")[0] == expected);
    }
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
    Tensor p = Tensor::parameter("p", {2}, {1, 2}, F64);
    CHECK_THROWS_AS(backward(scale(p, 2.0)), ContractError);
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("gradients accumulate across repeated uses of a leaf") {
    Tensor p = Tensor::parameter("p", {1, 1}, {3.0}, F64);
    // p*p + p -> 2p + 1
    GradientMap g = backward(sum(add(mul(p, p), p)));
    CHECK(g.at(p)[0] == doctest::Approx(7.0));
}

TEST_CASE("graph is freed after backward and not recorded under NoGradGuard") {
    Tensor p = Tensor::parameter("p", {2, 2}, {1, 2, 3, 4}, F64);
    Tensor y = relu(p);
    CHECK_FALSE(y.is_leaf());
    (void)backward(sum(y));
    {
        NoGradGuard guard;
        Tensor z = relu(p);
        CHECK(z.is_leaf());
        CHECK_FALSE(z.requires_grad());
    }
    CHECK(grad_enabled());
}

TEST_CASE("f32 tensors store values rounded to binary32") {
    Tensor t = Tensor::from({1}, {0.1});
    CHECK(t[0] == static_cast<double>(0.1f));
    Tensor u = Tensor::from({1}, {0.1}, F64);
    CHECK(u[0] == 0.1);
    CHECK(add(t, u).precision() == F64);
}

TEST_CASE("per-op gradients match central differences") {
    for (const gradcases::Case& c : gradcases::op_cases()) {
        const oracle::GradCheck r = oracle::grad_check(c.loss, c.leaves);
        CHECK(r.checked > 0);
        CHECK_MESSAGE(r.failures == 0, c.name << ": max rel error " << r.max_rel_error);
    }
}

TEST_CASE("softmax rows sum to one with entries in (0, 1)") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::from({5, 6}, oracle::uniform(30, -8.0, 8.0, rng));
        Tensor s = softmax_rows(x);
        for (std::size_t r = 0; r < 5; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                CHECK(s.at(r, c) > 0.0);
                CHECK(s.at(r, c) < 1.0);
                total += s.at(r, c);
            }
            CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("max gradient goes to the argmax and ties route to the lowest index") {
    Tensor p = Tensor::parameter("p", {2, 3}, {1, 5, 5, 2, 0, 2}, F64);
    GradientMap g = backward(sum(max(p, 1)));
    const std::vector<double> expected{0, 1, 0, 1, 0, 0};
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(g.at(p)[i] == expected[i]);

    Tensor q = Tensor::parameter("q", {2, 2}, {3, 3, 3, 3}, F64);
    GradientMap h = backward(max_all(q));
    CHECK(h.at(q)[0] == 1.0);
    CHECK(h.at(q)[1] == 0.0);
    CHECK(h.at(q)[3] == 0.0);
}

TEST_CASE("l2 normalization of a zero row reports the row") {
    Tensor x = Tensor::from({3, 2}, {1, 0, 0, 0, 2, 2});
    try {
        (void)l2_normalize_rows(x);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
}

TEST_CASE("bilinear upsampling") {
    SUBCASE("constant 1x1 field") {
        Tensor out = bilinear_upsample(Tensor::from({1, 1}, {0.7}, F64), 5, 3);
        CHECK(out.shape() == Shape{5, 3});
        for (double v : out.data()) CHECK(v == 0.7);
    }
    SUBCASE("2x2 to 3x3 has the midpoint in the centre") {
        Tensor out = bilinear_upsample(Tensor::from({2, 2}, {0, 1, 1, 0}, F64), 3, 3);
        CHECK(out.at(1, 1) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(out.at(0, 0) == 0.0);
        CHECK(out.at(0, 2) == 1.0);
    }
    SUBCASE("2x2 to 4x4 matches the scalar oracle") {
        const std::vector<double> grid{0, 1, 1, 0};
        Tensor out = bilinear_upsample(Tensor::from({2, 2}, grid, F64), 4, 4);
        const std::vector<double> expected = oracle::bilinear(grid, 2, 4, 4);
        for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
    SUBCASE("random grids stay within the input range") {
        Rng rng(11);
        for (int trial = 0; trial < 10; ++trial) {
            const std::vector<double> grid = oracle::uniform(16, -3.0, 3.0, rng);
            Tensor out = bilinear_upsample(Tensor::from({4, 4}, grid, F64), 13, 9);
            const auto [lo, hi] = std::minmax_element(grid.begin(), grid.end());
            const std::vector<double> expected = oracle::bilinear(grid, 4, 13, 9);
            for (std::size_t i = 0; i < out.numel(); ++i) {
                CHECK(out[i] >= *lo - 1e-12);
                CHECK(out[i] <= *hi + 1e-12);
                CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("repeated forward passes are bit-identical") {
    Rng rng(5);
    const std::vector<double> xs = oracle::uniform(24, -2.0, 2.0, rng);
    const std::vector<double> ws = oracle::uniform(36, -1.0, 1.0, rng);
    auto run = [&] {
        Tensor x = Tensor::from({4, 6}, xs);
        Tensor w = Tensor::from({6, 6}, ws);
        return softmax_rows(matmul(l2_normalize_rows(x), w));
    };
    Tensor a = run(), b = run();
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}
