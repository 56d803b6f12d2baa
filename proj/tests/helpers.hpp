#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "soap/attacks.hpp"
#include "soap/data.hpp"
#include "soap/nn.hpp"
#include "soap/train.hpp"

namespace testutil {

using namespace soap;

inline bool isclose(float got, double want, double rtol = 1e-3, double atol = 1e-5) {
    return std::fabs(static_cast<double>(got) - want) <= atol + rtol * std::fabs(want);
}

// element-wise |got - want| <= atol + rtol*|want|; reports the worst offender
inline bool isclose_all(const Tensor& got, const Tensor& want, double rtol = 1e-3,
                        double atol = 1e-5, std::string* msg = nullptr) {
    if (got.shape != want.shape) {
        if (msg) *msg = "shape mismatch " + shape_str(got.shape) + " vs " + shape_str(want.shape);
        return false;
    }
    double worst = 0.0;
    size_t worst_i = 0;
    bool ok = true;
    for (size_t i = 0; i < got.data.size(); ++i) {
        const double err = std::fabs(static_cast<double>(got.data[i]) -
                                     static_cast<double>(want.data[i]));
        const double bound = atol + rtol * std::fabs(static_cast<double>(want.data[i]));
        if (err > bound) {
            ok = false;
            if (err - bound > worst) {
                worst = err - bound;
                worst_i = i;
            }
        }
    }
    if (!ok && msg) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "element %zu: got %.8g want %.8g", worst_i,
                      static_cast<double>(got.data[worst_i]),
                      static_cast<double>(want.data[worst_i]));
        *msg = buf;
    }
    return ok;
}

// avoid relu/clamp kinks so central differences stay on one linear piece
inline Tensor uniform_away_from(std::vector<int> shape, float lo, float hi, Rng& rng,
                                std::initializer_list<float> kinks, float margin = 0.05f) {
    Tensor t = uniform_tensor(std::move(shape), lo, hi, rng);
    for (auto& v : t.data) {
        for (float k : kinks) {
            if (std::fabs(v - k) < margin) v = k + (v >= k ? margin : -margin);
        }
    }
    return t;
}

// tiny architectures for gradient checks and fast trend tests
inline nn::ArchitectureSpec tiny_cnn_spec(nn::AuxKind aux) {
    nn::ArchitectureSpec s;
    s.name = "custom";
    s.input_shape = {1, 8, 8};
    s.num_classes = 10;
    s.encoder = {nn::LayerSpec::conv(1, 4, 3, 2, 1), nn::LayerSpec::relu(),
                 nn::LayerSpec::batch_norm(4), nn::LayerSpec::flatten()};
    s.classifier = {nn::LayerSpec::linear(64, 16), nn::LayerSpec::relu(),
                    nn::LayerSpec::linear(16, 10)};
    switch (aux) {
        case nn::AuxKind::DR:
            s.aux_head = {nn::LayerSpec::linear(64, 32), nn::LayerSpec::relu(),
                          nn::LayerSpec::linear(32, 64), nn::LayerSpec::sigmoid(),
                          nn::LayerSpec::reshape({1, 8, 8})};
            break;
        case nn::AuxKind::RP: s.aux_head = {nn::LayerSpec::linear(64, 4)}; break;
        case nn::AuxKind::LC: s.aux_head = {}; break;
    }
    return s;
}

inline nn::ArchitectureSpec tiny_fcn_spec(nn::AuxKind aux, int side = 8) {
    nn::ArchitectureSpec s;
    s.name = "custom";
    s.input_shape = {1, side, side};
    s.num_classes = 10;
    const int pixels = side * side;
    s.encoder = {nn::LayerSpec::flatten(), nn::LayerSpec::linear(pixels, 24),
                 nn::LayerSpec::relu()};
    s.classifier = {nn::LayerSpec::linear(24, 10)};
    switch (aux) {
        case nn::AuxKind::DR:
            s.aux_head = {nn::LayerSpec::linear(24, pixels), nn::LayerSpec::sigmoid(),
                          nn::LayerSpec::reshape({1, side, side})};
            break;
        case nn::AuxKind::RP: s.aux_head = {nn::LayerSpec::linear(24, 4)}; break;
        case nn::AuxKind::LC: s.aux_head = {}; break;
    }
    return s;
}

// A small DR model trained on procedural digits: shared across the attack and
// purification trend tests (built once). Mini version of the cnn preset (BN
// keeps the joint objective stable, as in the full-size recipe).
struct TrainedFixture {
    nn::ModelBundle model;
    data::Dataset train_ds;
    data::Dataset test_ds;
};

inline nn::ArchitectureSpec mini_cnn_dr_spec() {
    nn::ArchitectureSpec s;
    s.name = "custom";
    s.input_shape = {1, 28, 28};
    s.encoder = {nn::LayerSpec::conv(1, 16, 3, 2, 1), nn::LayerSpec::relu(),
                 nn::LayerSpec::conv(16, 32, 3, 2, 1), nn::LayerSpec::relu(),
                 nn::LayerSpec::batch_norm(32), nn::LayerSpec::flatten()};
    s.classifier = {nn::LayerSpec::linear(32 * 7 * 7, 64), nn::LayerSpec::relu(),
                    nn::LayerSpec::batch_norm(64), nn::LayerSpec::linear(64, 10)};
    s.aux_head = {nn::LayerSpec::linear(32 * 7 * 7, 16 * 7 * 7), nn::LayerSpec::relu(),
                  nn::LayerSpec::batch_norm(16 * 7 * 7), nn::LayerSpec::reshape({16, 7, 7}),
                  nn::LayerSpec::convT(16, 16, 4, 2, 1), nn::LayerSpec::relu(),
                  nn::LayerSpec::batch_norm(16), nn::LayerSpec::convT(16, 1, 4, 2, 1),
                  nn::LayerSpec::sigmoid()};
    return s;
}

inline TrainedFixture& trained_digits_dr() {
    static TrainedFixture* fx = [] {
        auto* f = new TrainedFixture{nn::ModelBundle{}, data::gen_digits(2000, 11),
                                     data::gen_digits(400, 12)};
        train::TrainConfig cfg;
        cfg.epochs = 5;
        cfg.batch_size = 64;
        cfg.lr.initial = 0.1f;
        cfg.lr.milestones = {4};
        cfg.momentum = 0.9f;
        cfg.aux_kind = nn::AuxKind::DR;
        cfg.alpha = 20.0f;
        cfg.noise_sigma = 0.5f;
        cfg.clip_norm = 5.0f;
        cfg.seed = 5;
        auto [m, log] = train::train_soap(f->train_ds, f->test_ds, mini_cnn_dr_spec(), cfg);
        f->model = std::move(m);
        return f;
    }();
    return *fx;
}

}  // namespace testutil
