#pragma once

#include <functional>
#include <vector>

#include "soap/nn.hpp"
#include "soap/tasks.hpp"
#include "soap/tensor.hpp"

namespace soap::attack {

enum class Norm { Linf, L2 };

struct AttackConfig {
    Norm norm = Norm::Linf;
    float eps = 0.3f;    // perturbation budget
    float gamma = 0.01f; // step size
    int steps = 40;
    float beta = 0.0f;   // auxiliary-aware trade-off; 0 = canonical attack
    bool random_start = false;
    uint64_t seed = 0;
    bool rp_mse = true;  // aux-loss variant for the auxiliary-aware objective
};

// Projected gradient ascent on mean cross-entropy (beta forced to 0).
Tensor pgd_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg);
// Single step of size eps; identical to pgd with steps=1, gamma=eps.
Tensor fgsm_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y, float eps);
// Ascent on L_cls - beta * L_aux; degrades to pgd_attack when beta == 0.
Tensor aux_aware_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg);

using AttackFn =
    std::function<Tensor(nn::ModelBundle&, const Tensor&, const std::vector<int>&)>;

// Attacks crafted against `source`, accuracy measured on `target`.
double transfer_eval(nn::ModelBundle& source, nn::ModelBundle& target, const AttackFn& fn,
                     const Tensor& x, const std::vector<int>& y);

}  // namespace soap::attack
