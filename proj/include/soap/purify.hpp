#pragma once

#include <string>
#include <vector>

#include "soap/attacks.hpp"
#include "soap/nn.hpp"
#include "soap/tensor.hpp"

namespace soap::purify {

struct PurifyConfig {
    enum class Mode { Fixed, MinAux, Oracle };
    Mode mode = Mode::MinAux;
    float fixed_eps = 0.0f;
    std::vector<float> eps_grid;  // strictly increasing, first element 0
    float gamma = 0.1f;
    int steps = 5;
    bool rp_mse = true;  // RP test-time MSE variant
};

void validate_grid(const std::vector<float>& grid);

struct PurifyOutcome {
    Tensor x_pfy;
    std::vector<float> chosen_eps;
    std::vector<float> aux_before;  // final aux loss at eps = 0 (identity purification)
    std::vector<float> aux_after;   // final aux loss at the chosen eps
};

// Alg. 2: T sign-descent steps on the test-time auxiliary loss, with the
// l-inf ball and [0,1] box projections applied in that order each step.
Tensor purify_fixed(nn::ModelBundle& m, const Tensor& x, float eps, float gamma, int steps,
                    bool rp_mse = true);
// Same, also returning the per-example auxiliary loss of the purified output.
std::pair<Tensor, std::vector<float>> purify_with_loss(nn::ModelBundle& m, const Tensor& x,
                                                       float eps, float gamma, int steps,
                                                       bool rp_mse);

// All grid purifications of one batch, reusable by both selection rules.
struct GridPurifyResult {
    std::vector<Tensor> x_pfy;             // one per grid point
    std::vector<std::vector<float>> aux;   // [grid point][example]
};
GridPurifyResult purify_grid(nn::ModelBundle& m, const Tensor& x,
                             const std::vector<float>& grid, float gamma, int steps,
                             bool rp_mse);

// smallest index attaining the minimum (ties broken toward smaller eps)
int argmin_first(const std::vector<float>& losses);

PurifyOutcome select_min_aux_from(const GridPurifyResult& grid_result,
                                  const std::vector<float>& grid);
PurifyOutcome select_oracle_from(const GridPurifyResult& grid_result, nn::ModelBundle& m,
                                 const std::vector<float>& grid, const std::vector<int>& y);

PurifyOutcome select_eps_min_aux(nn::ModelBundle& m, const Tensor& x, const PurifyConfig& cfg);
PurifyOutcome select_eps_oracle(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                                const PurifyConfig& cfg);

struct SweepRow {
    float eps;
    float clean_aux;
    float adv_aux;
    float purified_aux;
};
struct SweepResult {
    std::vector<SweepRow> rows;
    float elbow = 0.0f;
};

// Fig. 3 curves: constant clean/adversarial levels plus the purified curve
// over the grid, with the elbow estimate of the unknown attack budget.
SweepResult sweep_aux_curve(nn::ModelBundle& m, const Tensor& x_clean, const Tensor& x_adv,
                            const std::vector<float>& grid, float gamma, int steps,
                            bool rp_mse);
// Spec-facing wrapper that crafts the adversarial set itself.
SweepResult sweep_aux_curve(nn::ModelBundle& m, const Tensor& x_clean,
                            const std::vector<int>& y, const attack::AttackFn& attack_fn,
                            const std::vector<float>& grid, float gamma, int steps,
                            bool rp_mse);

// first grid point where the per-step decrease drops below 5% of the total
float elbow_estimate(const std::vector<float>& grid, const std::vector<float>& purified);

std::string sweep_csv(const SweepResult& result);  // eps,clean_aux,adv_aux,purified_aux

}  // namespace soap::purify
