#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "soap/autodiff.hpp"
#include "soap/nn.hpp"
#include "soap/tensor.hpp"

namespace soap::tasks {

struct AuxTaskConfig {
    nn::AuxKind kind = nn::AuxKind::DR;
    float noise_sigma = 0.0f;   // sigma of the Gaussian corruption
    float alpha = 0.0f;         // joint-loss trade-off
    bool rp_purify_mse = true;  // test-time MSE variant for RP
};

enum class RpVariant { CE, MSE };

// mean softmax cross-entropy over the batch; labels must lie in [0, C)
ad::Value cls_loss(ad::Tape& tape, ad::Value logits, const std::vector<int>& labels);
// per-sample cross-entropy vector (N)
ad::Value ce_per_sample(ad::Tape& tape, ad::Value logits, const std::vector<int>& labels);

// Exact k*90-degree counter-clockwise pixel permutation; square spatial dims.
Tensor rotate90(const Tensor& x, int k);   // (N,C,H,W) or (C,H,W)
ad::Value rotate90(ad::Value x, int k);
// gather map over a per-sample (C,H,W) block
std::shared_ptr<const std::vector<int>> rotation_map(const std::vector<int>& chw, int k);

// x + N(0, sigma^2), clipped back to [0,1] (tensor-level, training pipelines)
Tensor corrupt_clip(const Tensor& x, float sigma, Rng& rng);

// LC augmentations. Train: two independent random flip + reflect-pad-crop +
// Gaussian-corrupt views. Purify: a1 = x unchanged, a2 = deterministic
// horizontal flip + fixed 2-pixel shifted crop (sigma ignored).
enum class LcMode { Train, Purify };
std::pair<Tensor, Tensor> augment_lc(const Tensor& x, LcMode mode, Rng* rng,
                                     float sigma = 0.0f);
ad::Value lc_second_view(ad::Value x);  // the deterministic purify-mode a2, on tape

// Per-sample auxiliary losses (shape (N)). When corrupt is set the encoder
// input is clamp(x + eta, 0, 1) built on the tape (clamp subgradient applies).
ad::Value dr_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, ad::Value x, float sigma,
                             bool corrupt, Rng* rng, nn::ParamBinding* binding = nullptr);
ad::Value rp_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, ad::Value x, RpVariant variant,
                             float sigma, bool corrupt, Rng* rng,
                             nn::ParamBinding* binding = nullptr);
ad::Value lc_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, ad::Value a1_out,
                             ad::Value a2_out, Rng* rng = nullptr,
                             nn::ParamBinding* binding = nullptr);

// Batch-mean scalar losses.
ad::Value dr_loss(nn::ModelBundle& m, ad::Tape& tape, ad::Value x, float sigma, bool corrupt,
                  Rng* rng);
ad::Value rp_loss(nn::ModelBundle& m, ad::Tape& tape, ad::Value x, RpVariant variant,
                  float sigma, bool corrupt, Rng* rng);
ad::Value lc_loss(nn::ModelBundle& m, ad::Tape& tape, ad::Value a1_out, ad::Value a2_out);

// Test-time auxiliary loss used by the purifier (and aux-aware adversaries):
// DR without corruption, RP on clean copies (MSE when rp_mse), LC with the
// identity + definite flip-crop views. Label-free by construction.
ad::Value purification_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, ad::Value x,
                                       bool rp_mse);

struct JointLoss {
    ad::Value total;
    ad::Value cls;
    ad::Value aux;  // invalid when alpha == 0 (no auxiliary term evaluated)
};

// L_cls + alpha * L_aux with the auxiliary recipe of cfg.kind; x enters as a
// constant (training differentiates parameters via `binding`).
JointLoss joint_loss(nn::ModelBundle& m, ad::Tape& tape, const Tensor& x,
                     const std::vector<int>& y, const AuxTaskConfig& cfg, Rng& rng,
                     nn::ParamBinding* binding = nullptr);

}  // namespace soap::tasks
