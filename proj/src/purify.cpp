#include "soap/purify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "soap/tasks.hpp"

namespace soap::purify {

void validate_grid(const std::vector<float>& grid) {
    require(!grid.empty(), ErrorKind::Config, "purify: eps grid must not be empty");
    require(grid[0] == 0.0f, ErrorKind::Config, "purify: eps grid must start at 0");
    for (size_t i = 1; i < grid.size(); ++i)
        require(grid[i] > grid[i - 1], ErrorKind::Config,
                "purify: eps grid must be strictly increasing");
}

namespace {

void check_model(nn::ModelBundle& m) {
    require(m.is_eval(), ErrorKind::Invalid, "purify: model must be in eval mode");
    require(m.aux_kind == nn::AuxKind::LC || !m.spec.aux_head.empty(), ErrorKind::Invalid,
            "purify: model has no compatible auxiliary head");
}

std::vector<float> per_example_aux(nn::ModelBundle& m, const Tensor& x, bool rp_mse) {
    ad::Tape tape;
    ad::Value xv = tape.constant(x);
    ad::Value aux = tasks::purification_loss_per_sample(m, tape, xv, rp_mse);
    return aux.tensor().data;
}

}  // namespace

std::pair<Tensor, std::vector<float>> purify_with_loss(nn::ModelBundle& m, const Tensor& x,
                                                       float eps, float gamma, int steps,
                                                       bool rp_mse) {
    check_model(m);
    require(eps >= 0.0f, ErrorKind::Config, "purify: eps must be >= 0");
    require(gamma > 0.0f, ErrorKind::Config, "purify: gamma must be > 0");
    require(steps >= 1, ErrorKind::Config, "purify: steps must be >= 1");

    if (eps == 0.0f) return {x, per_example_aux(m, x, rp_mse)};

    Tensor delta = Tensor::zeros(x.shape);
    Tensor xd_val = Tensor::zeros(x.shape);
    for (int t = 0; t < steps; ++t) {
        kernels::add(x.ptr(), delta.ptr(), xd_val.ptr(), x.numel());
        ad::Tape tape;
        ad::Value xd = tape.leaf(xd_val);
        ad::Value objective = ad::mean(tasks::purification_loss_per_sample(m, tape, xd, rp_mse));
        tape.backward(objective);
        const Tensor step = ad::sign(tape.grad(xd));
        // descent, then ball projection, then box projection (Alg. 2 order)
        kernels::axpy(-gamma, step.ptr(), delta.ptr(), delta.numel());
        kernels::clamp_forward(delta.ptr(), delta.ptr(), delta.numel(), -eps, eps);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const float v = std::min(
                std::max(x.data[static_cast<size_t>(i)] + delta.data[static_cast<size_t>(i)],
                         0.0f),
                1.0f);
            delta.data[static_cast<size_t>(i)] = v - x.data[static_cast<size_t>(i)];
        }
    }
    Tensor x_pfy = Tensor::zeros(x.shape);
    kernels::add(x.ptr(), delta.ptr(), x_pfy.ptr(), x.numel());
    check_finite(x_pfy, "purified output");
    return {std::move(x_pfy), per_example_aux(m, x_pfy, rp_mse)};
}

Tensor purify_fixed(nn::ModelBundle& m, const Tensor& x, float eps, float gamma, int steps,
                    bool rp_mse) {
    check_model(m);
    require(eps >= 0.0f, ErrorKind::Config, "purify: eps must be >= 0");
    require(gamma > 0.0f, ErrorKind::Config, "purify: gamma must be > 0");
    require(steps >= 1, ErrorKind::Config, "purify: steps must be >= 1");
    if (eps == 0.0f) return x;
    return purify_with_loss(m, x, eps, gamma, steps, rp_mse).first;
}

GridPurifyResult purify_grid(nn::ModelBundle& m, const Tensor& x,
                             const std::vector<float>& grid, float gamma, int steps,
                             bool rp_mse) {
    validate_grid(grid);
    GridPurifyResult out;
    out.x_pfy.reserve(grid.size());
    out.aux.reserve(grid.size());
    for (float eps : grid) {
        auto [xp, losses] = purify_with_loss(m, x, eps, gamma, steps, rp_mse);
        out.x_pfy.push_back(std::move(xp));
        out.aux.push_back(std::move(losses));
    }
    return out;
}

int argmin_first(const std::vector<float>& losses) {
    int best = 0;
    for (size_t i = 1; i < losses.size(); ++i)
        if (losses[i] < losses[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

namespace {

PurifyOutcome assemble(const GridPurifyResult& g, const std::vector<float>& grid,
                       const std::vector<int>& choice) {
    const Tensor& base = g.x_pfy[0];
    const int n = base.shape[0];
    const int64_t block = base.numel() / n;
    PurifyOutcome out;
    out.x_pfy = Tensor::zeros(base.shape);
    out.chosen_eps.resize(static_cast<size_t>(n));
    out.aux_before.resize(static_cast<size_t>(n));
    out.aux_after.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int k = choice[static_cast<size_t>(i)];
        std::memcpy(out.x_pfy.ptr() + i * block, g.x_pfy[static_cast<size_t>(k)].ptr() + i * block,
                    static_cast<size_t>(block) * sizeof(float));
        out.chosen_eps[static_cast<size_t>(i)] = grid[static_cast<size_t>(k)];
        out.aux_before[static_cast<size_t>(i)] = g.aux[0][static_cast<size_t>(i)];
        out.aux_after[static_cast<size_t>(i)] = g.aux[static_cast<size_t>(k)][static_cast<size_t>(i)];
    }
    return out;
}

}  // namespace

PurifyOutcome select_min_aux_from(const GridPurifyResult& g, const std::vector<float>& grid) {
    const int n = g.x_pfy.at(0).shape[0];
    std::vector<int> choice(static_cast<size_t>(n));
    std::vector<float> losses(grid.size());
    for (int i = 0; i < n; ++i) {
        for (size_t k = 0; k < grid.size(); ++k) losses[k] = g.aux[k][static_cast<size_t>(i)];
        choice[static_cast<size_t>(i)] = argmin_first(losses);
    }
    return assemble(g, grid, choice);
}

PurifyOutcome select_oracle_from(const GridPurifyResult& g, nn::ModelBundle& m,
                                 const std::vector<float>& grid, const std::vector<int>& y) {
    const int n = g.x_pfy.at(0).shape[0];
    require(static_cast<int>(y.size()) == n, ErrorKind::Shape,
            "oracle selection: label count does not match batch");
    std::vector<std::vector<int>> preds(grid.size());
    for (size_t k = 0; k < grid.size(); ++k) preds[k] = nn::predict(m, g.x_pfy[k]);
    std::vector<float> losses(grid.size());
    std::vector<int> choice(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int pick = -1;
        for (size_t k = 0; k < grid.size(); ++k) {
            if (preds[k][static_cast<size_t>(i)] == y[static_cast<size_t>(i)]) {
                pick = static_cast<int>(k);
                break;
            }
        }
        if (pick < 0) {
            // no grid point classifies correctly: fall back to the min-aux choice
            for (size_t k = 0; k < grid.size(); ++k) losses[k] = g.aux[k][static_cast<size_t>(i)];
            pick = argmin_first(losses);
        }
        choice[static_cast<size_t>(i)] = pick;
    }
    return assemble(g, grid, choice);
}

PurifyOutcome select_eps_min_aux(nn::ModelBundle& m, const Tensor& x, const PurifyConfig& cfg) {
    require(cfg.mode == PurifyConfig::Mode::MinAux, ErrorKind::Config,
            "select_eps_min_aux: config mode must be MinAux");
    const auto g = purify_grid(m, x, cfg.eps_grid, cfg.gamma, cfg.steps, cfg.rp_mse);
    return select_min_aux_from(g, cfg.eps_grid);
}

PurifyOutcome select_eps_oracle(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                                const PurifyConfig& cfg) {
    require(cfg.mode == PurifyConfig::Mode::Oracle, ErrorKind::Config,
            "select_eps_oracle: config mode must be Oracle");
    const auto g = purify_grid(m, x, cfg.eps_grid, cfg.gamma, cfg.steps, cfg.rp_mse);
    return select_oracle_from(g, m, cfg.eps_grid, y);
}

float elbow_estimate(const std::vector<float>& grid, const std::vector<float>& purified) {
    require(grid.size() == purified.size() && !grid.empty(), ErrorKind::Config,
            "elbow_estimate: grid/curve size mismatch");
    const float total = purified[0] - *std::min_element(purified.begin(), purified.end());
    for (size_t k = 1; k < purified.size(); ++k) {
        const float decrease = purified[k - 1] - purified[k];
        if (decrease < 0.05f * total) return grid[k];
    }
    return grid.back();
}

SweepResult sweep_aux_curve(nn::ModelBundle& m, const Tensor& x_clean, const Tensor& x_adv,
                            const std::vector<float>& grid, float gamma, int steps,
                            bool rp_mse) {
    validate_grid(grid);
    check_model(m);
    auto mean_of = [](const std::vector<float>& v) {
        double s = 0.0;
        for (float f : v) s += f;
        return static_cast<float>(s / static_cast<double>(v.size()));
    };
    const float clean_aux = mean_of(per_example_aux(m, x_clean, rp_mse));
    const float adv_aux = mean_of(per_example_aux(m, x_adv, rp_mse));
    SweepResult out;
    std::vector<float> purified;
    for (float eps : grid) {
        auto [xp, losses] = purify_with_loss(m, x_adv, eps, gamma, steps, rp_mse);
        purified.push_back(mean_of(losses));
        out.rows.push_back({eps, clean_aux, adv_aux, purified.back()});
    }
    out.elbow = elbow_estimate(grid, purified);
    return out;
}

SweepResult sweep_aux_curve(nn::ModelBundle& m, const Tensor& x_clean,
                            const std::vector<int>& y, const attack::AttackFn& attack_fn,
                            const std::vector<float>& grid, float gamma, int steps,
                            bool rp_mse) {
    const Tensor x_adv = attack_fn(m, x_clean, y);
    return sweep_aux_curve(m, x_clean, x_adv, grid, gamma, steps, rp_mse);
}

std::string sweep_csv(const SweepResult& result) {
    std::string out = "eps,clean_aux,adv_aux,purified_aux\n";
    char buf[128];
    for (const auto& r : result.rows) {
        std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.6g,%.6g\n", static_cast<double>(r.eps),
                      static_cast<double>(r.clean_aux), static_cast<double>(r.adv_aux),
                      static_cast<double>(r.purified_aux));
        out += buf;
    }
    return out;
}

}  // namespace soap::purify
