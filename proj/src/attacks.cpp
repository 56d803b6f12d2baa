#include "soap/attacks.hpp"

#include <cmath>

namespace soap::attack {

namespace {

void validate(const AttackConfig& cfg) {
    require(cfg.eps >= 0.0f, ErrorKind::Config, "attack: eps must be >= 0");
    require(cfg.gamma > 0.0f, ErrorKind::Config, "attack: gamma must be > 0");
    require(cfg.steps >= 1, ErrorKind::Config, "attack: steps must be >= 1");
}

void check_inputs(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y) {
    require(m.is_eval(), ErrorKind::Invalid,
            "attack: model must be in eval mode (attacks are deterministic)");
    require(x.rank() >= 2 && x.shape[0] == static_cast<int>(y.size()), ErrorKind::Shape,
            "attack: label count " + std::to_string(y.size()) + " does not match batch " +
                shape_str(x.shape));
    for (float v : x.data)
        require(v >= 0.0f && v <= 1.0f, ErrorKind::Invalid,
                "attack: inputs must lie in [0,1]");
}

// Alg. 1 with either a sign step (Linf) or a normalized-gradient step (L2);
// ball projection precedes the box projection each iteration.
Tensor attack_core(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                   const AttackConfig& cfg) {
    validate(cfg);
    check_inputs(m, x, y);
    const int n = x.shape[0];
    const int64_t block = x.numel() / n;

    Tensor delta = Tensor::zeros(x.shape);
    if (cfg.random_start && cfg.eps > 0.0f) {
        Rng rng(cfg.seed);
        for (auto& v : delta.data) v = rng.uniform(-cfg.eps, cfg.eps);
    }

    Tensor xd_val = Tensor::zeros(x.shape);
    for (int t = 0; t < cfg.steps; ++t) {
        kernels::add(x.ptr(), delta.ptr(), xd_val.ptr(), x.numel());
        ad::Tape tape;
        ad::Value xd = tape.leaf(xd_val);
        ad::Value z = nn::encode(m, tape, xd);
        ad::Value logits = nn::classify(m, tape, z);
        ad::Value objective = tasks::cls_loss(tape, logits, y);
        if (cfg.beta != 0.0f) {
            ad::Value aux = ad::mean(tasks::purification_loss_per_sample(m, tape, xd, cfg.rp_mse));
            objective = ad::sub(objective, ad::scalar_mul(aux, cfg.beta));
        }
        tape.backward(objective);
        const Tensor& g = tape.grad(xd);

        if (cfg.norm == Norm::Linf) {
            const Tensor step = ad::sign(g);
            kernels::axpy(cfg.gamma, step.ptr(), delta.ptr(), delta.numel());
            kernels::clamp_forward(delta.ptr(), delta.ptr(), delta.numel(), -cfg.eps, cfg.eps);
        } else {
            for (int i = 0; i < n; ++i) {
                const float* gi = g.ptr() + i * block;
                float* di = delta.ptr() + i * block;
                double norm2 = 0.0;
                for (int64_t j = 0; j < block; ++j) norm2 += static_cast<double>(gi[j]) * gi[j];
                const double gn = std::sqrt(norm2);
                if (gn >= 1e-12) {
                    const float scale = static_cast<float>(cfg.gamma / gn);
                    for (int64_t j = 0; j < block; ++j) di[j] += scale * gi[j];
                }
                double dn2 = 0.0;
                for (int64_t j = 0; j < block; ++j) dn2 += static_cast<double>(di[j]) * di[j];
                const double dn = std::sqrt(dn2);
                if (dn > cfg.eps) {
                    const float scale = static_cast<float>(cfg.eps / dn);
                    for (int64_t j = 0; j < block; ++j) di[j] *= scale;
                }
            }
        }
        // box projection: delta <- clamp(x + delta, 0, 1) - x
        for (int64_t i = 0; i < x.numel(); ++i) {
            const float v = std::min(std::max(x.data[static_cast<size_t>(i)] +
                                                  delta.data[static_cast<size_t>(i)],
                                              0.0f),
                                     1.0f);
            delta.data[static_cast<size_t>(i)] = v - x.data[static_cast<size_t>(i)];
        }
    }
    Tensor x_adv = Tensor::zeros(x.shape);
    kernels::add(x.ptr(), delta.ptr(), x_adv.ptr(), x.numel());
    check_finite(x_adv, "attack output");
    return x_adv;
}

}  // namespace

Tensor pgd_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg) {
    AttackConfig canonical = cfg;
    canonical.beta = 0.0f;
    return attack_core(m, x, y, canonical);
}

Tensor fgsm_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y, float eps) {
    require(eps >= 0.0f, ErrorKind::Config, "fgsm: eps must be >= 0");
    AttackConfig cfg;
    cfg.norm = Norm::Linf;
    cfg.eps = eps;
    cfg.gamma = eps > 0.0f ? eps : 1.0f;  // degenerate eps=0 still takes one no-op step
    cfg.steps = 1;
    cfg.beta = 0.0f;
    cfg.random_start = false;
    return attack_core(m, x, y, cfg);
}

Tensor aux_aware_attack(nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg) {
    if (cfg.beta != 0.0f)
        require(m.aux_kind != nn::AuxKind::DR || !m.spec.aux_head.empty(), ErrorKind::Invalid,
                "aux_aware_attack: model has no auxiliary head");
    return attack_core(m, x, y, cfg);
}

double transfer_eval(nn::ModelBundle& source, nn::ModelBundle& target, const AttackFn& fn,
                     const Tensor& x, const std::vector<int>& y) {
    require(source.spec.input_shape == target.spec.input_shape, ErrorKind::Shape,
            "transfer_eval: source input " + shape_str(source.spec.input_shape) +
                " does not match target input " + shape_str(target.spec.input_shape));
    const Tensor x_adv = fn(source, x, y);
    const std::vector<int> preds = nn::predict(target, x_adv);
    int correct = 0;
    for (size_t i = 0; i < y.size(); ++i)
        if (preds[i] == y[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(y.size());
}

}  // namespace soap::attack
