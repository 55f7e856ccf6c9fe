#pragma once

// Finite-difference cases covering every differentiable op, the loss
// primitives and the composed alignment loss on the toy model.

#include <functional>
#include <string>
#include <vector>

#include "mvfa/objective.hpp"
#include "mvfa/tensor.hpp"
#include "oracles.hpp"
#include "toy.hpp"

namespace gradcases {

struct Case {
    std::string name;
    std::function<mvfa::Tensor()> loss;
    std::vector<mvfa::Tensor> leaves;
};

inline mvfa::Tensor param(const std::string& name, mvfa::Shape shape, mvfa::Rng& rng, double lo = -2.0,
                          double hi = 2.0) {
    const std::size_t n = mvfa::shape_numel(shape);
    return mvfa::Tensor::parameter(name, std::move(shape), oracle::uniform(n, lo, hi, rng), mvfa::Precision::f64);
}

// Weighted sum so that every output element carries a distinct upstream
// gradient.
inline mvfa::Tensor probe(const mvfa::Tensor& y, std::uint64_t seed) {
    mvfa::Rng rng(seed);
    return mvfa::sum(
        mvfa::mul(y, mvfa::Tensor::from(y.shape(), oracle::uniform(y.numel(), -1.0, 1.0, rng), mvfa::Precision::f64)));
}

inline std::vector<Case> op_cases() {
    using namespace mvfa;
    Rng rng(7);
    Tensor a = param("a", {3, 4}, rng);
    Tensor b = param("b", {4, 2}, rng);
    Tensor c = param("c", {3, 4}, rng);
    Tensor pos = param("pos", {3, 4}, rng, 0.5, 2.0);
    Tensor gain = param("gain", {1, 4}, rng);
    Tensor bias = param("bias", {1, 4}, rng);
    Tensor grid = param("grid", {3, 3}, rng);
    Tensor unit = param("unit", {3, 4}, rng, 0.05, 0.95);

    // Keep relu and clamp inputs away from their kinks.
    Rng kr(8);
    std::vector<double> kinked(12);
    for (double& v : kinked) v = (kr.uniform() < 0.5 ? -1.0 : 1.0) * kr.uniform(0.05, 2.0);
    Tensor k = Tensor::parameter("k", {3, 4}, kinked, Precision::f64);
    const Tensor target = Tensor::from({3, 4}, {1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1}, Precision::f64);

    return {
        {"matmul", [=] { return probe(matmul(a, b), 1); }, {a, b}},
        {"add", [=] { return probe(add(a, c), 2); }, {a, c}},
        {"sub", [=] { return probe(sub(a, c), 3); }, {a, c}},
        {"mul", [=] { return probe(mul(a, c), 4); }, {a, c}},
        {"div", [=] { return probe(div(a, pos), 5); }, {a, pos}},
        {"scale", [=] { return probe(scale(a, -1.7), 6); }, {a}},
        {"add_scalar", [=] { return probe(add_scalar(a, 0.3), 7); }, {a}},
        {"relu", [=] { return probe(relu(k), 8); }, {k}},
        {"exp", [=] { return probe(exp(a), 9); }, {a}},
        {"log", [=] { return probe(log(pos), 10); }, {pos}},
        {"clamp", [=] { return probe(clamp(k, -1.0, 1.0), 11); }, {k}},
        {"sum", [=] { return scale(sum(a), 0.5); }, {a}},
        {"mean", [=] { return mean(mul(a, a)); }, {a}},
        {"max axis 0", [=] { return probe(max(a, 0), 12); }, {a}},
        {"max axis 1", [=] { return probe(max(a, 1), 13); }, {a}},
        {"max_all", [=] { return max_all(a); }, {a}},
        {"transpose", [=] { return probe(transpose(a), 14); }, {a}},
        {"softmax_rows", [=] { return probe(softmax_rows(a), 15); }, {a}},
        {"l2_normalize_rows", [=] { return probe(l2_normalize_rows(a), 16); }, {a}},
        {"reshape", [=] { return probe(reshape(a, {2, 6}), 17); }, {a}},
        {"slice_cols", [=] { return probe(slice_cols(a, 1, 2), 18); }, {a}},
        {"concat_cols",
         [=] {
             const Tensor parts[] = {a, c};
             return probe(concat_cols(parts), 19);
         },
         {a, c}},
        {"layer_norm", [=] { return probe(layer_norm(a, gain, bias), 20); }, {a, gain, bias}},
        {"bilinear_upsample", [=] { return probe(bilinear_upsample(grid, 5, 7), 21); }, {grid}},
        {"dice_loss", [=] { return dice_loss(unit, target); }, {unit}},
        {"focal_loss", [=] { return focal_loss(unit, target); }, {unit}},
        {"bce_image", [=] { return bce_image(max_all(unit), 1); }, {unit}},
    };
}

// The composed alignment loss on the toy model, with and without a mask.
inline std::vector<Case> model_cases() {
    std::vector<Case> out;
    for (bool with_mask : {true, false}) {
        auto m = std::make_shared<toy::Model>(toy::make(1));
        out.push_back({with_mask ? "L_adapt with mask" : "L_adapt without mask",
                       [m, with_mask] { return toy::loss(*m, 1, with_mask); }, m->params.tensors()});
    }
    return out;
}

}  // namespace gradcases
