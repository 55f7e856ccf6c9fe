#pragma once

// A 2x2-grid model in 64-bit precision for gradient checks: image 16,
// patch 8, d 8, two heads, one block per stage.

#include <vector>

#include "mvfa/adaptation.hpp"
#include "mvfa/backbone.hpp"
#include "mvfa/objective.hpp"
#include "mvfa/rng.hpp"
#include "mvfa/tensor.hpp"

namespace toy {

struct Model {
    mvfa::FrozenBackbone backbone;
    mvfa::MVFAParams params;
    mvfa::Tensor image;  // 16 x 16 x 1
    mvfa::Tensor mask;   // 16 x 16
    mvfa::Tensor text;   // 2 x 8, unit rows
};

inline mvfa::BackboneConfig config() {
    mvfa::BackboneConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.dim = 8;
    c.heads = 2;
    c.blocks_per_stage = 1;
    c.seed = 3;
    return c;
}

// w2 is randomized (it starts at zero in a fresh model) so that every
// parameter receives a gradient.
inline Model make(std::uint64_t seed = 1, mvfa::ArchitectureFlags flags = {}) {
    using namespace mvfa;
    constexpr auto F64 = Precision::f64;
    Model m{FrozenBackbone::init(config(), F64), MVFAParams::init(8, seed, F64, 0.1, flags), {}, {}, {}};
    Rng rng(mix_seed(seed, 99));
    for (Tensor t : m.params.tensors()) {
        if (t.name().find("w2") == std::string::npos) continue;
        std::vector<double> v(t.numel());
        for (double& x : v) x = rng.normal() * 0.5;
        t.assign(v);
    }
    std::vector<double> px(256), mk(256, 0.0);
    for (double& x : px) x = rng.normal();
    for (std::size_t y = 3; y < 9; ++y)
        for (std::size_t x = 6; x < 13; ++x) mk[y * 16 + x] = 1.0;
    m.image = Tensor::from({16, 16, 1}, px, F64);
    m.mask = Tensor::from({16, 16}, mk, F64);
    std::vector<double> t(16);
    for (double& x : t) x = rng.normal();
    m.text = l2_normalize_rows(Tensor::from({2, 8}, t, F64));
    return m;
}

inline mvfa::Tensor loss(const Model& m, int label = 1, bool with_mask = true) {
    auto features = mvfa::adapt_forward(m.backbone, m.params, m.image).first;
    return mvfa::total_loss(features, m.text, label, with_mask ? &m.mask : nullptr, mvfa::LossWeights{});
}

}  // namespace toy
