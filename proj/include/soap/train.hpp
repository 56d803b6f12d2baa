#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "soap/attacks.hpp"
#include "soap/data.hpp"
#include "soap/nn.hpp"
#include "soap/purify.hpp"
#include "soap/tasks.hpp"

namespace soap::train {

struct LrSchedule {
    float initial = 0.1f;
    std::vector<int> milestones;  // strictly increasing epoch indices
    float factor = 0.1f;
    float at(int epoch) const;
};

struct AdvTrainMode {
    enum class Kind { None, FGSM, PGD };
    Kind kind = Kind::None;
    float eps = 0.0f;
    float gamma = 0.0f;
    int steps = 0;
};

struct TrainConfig {
    int epochs = 10;
    int batch_size = 128;
    LrSchedule lr;
    float momentum = 0.9f;
    nn::AuxKind aux_kind = nn::AuxKind::DR;
    float alpha = 0.0f;
    float noise_sigma = 0.0f;
    // global gradient-norm clip applied before the sgd update; 0 disables.
    // Large-alpha joint objectives need it at desk scale (the first steps
    // otherwise saturate the decoder and freeze the auxiliary loss).
    float clip_norm = 0.0f;
    // linear ramp of alpha over the first N epochs; 0 disables. Keeps the
    // consistency objective from collapsing the network to a constant
    // function before classification has taken hold.
    int alpha_ramp_epochs = 0;
    AdvTrainMode adversarial;
    uint64_t seed = 0;
    bool verbose = false;
};

struct EpochLog {
    int epoch = 0;
    double cls_loss = 0.0;
    double aux_loss = 0.0;
    double joint_loss = 0.0;  // cls + alpha*aux (not serialized)
    double eval_acc = 0.0;
    double seconds = 0.0;
};
using TrainLog = std::vector<EpochLog>;
// epoch,cls_loss,aux_loss,eval_acc,seconds
void write_trainlog_csv(const TrainLog& log, const std::string& path);

// v <- momentum*v + g; theta <- theta - lr*v
void sgd_step(Tensor& param, const Tensor& grad, float lr, float momentum, Tensor& velocity);

struct SgdState {
    std::map<std::string, Tensor> velocity;
};
// applies sgd_step to every parameter bound in `binding` that received a grad;
// clip_norm > 0 rescales the whole gradient set when its global L2 norm
// exceeds the bound
void sgd_update(nn::ModelBundle& m, ad::Tape& tape, const nn::ParamBinding& binding, float lr,
                float momentum, SgdState& state, float clip_norm = 0.0f);

std::pair<nn::ModelBundle, TrainLog> train_soap(const data::Dataset& train_ds,
                                                const data::Dataset& eval_ds,
                                                const nn::ArchitectureSpec& spec,
                                                const TrainConfig& cfg);
// adversarial_mode must not be None; each batch is replaced by attacks on the
// current parameters before the gradient step.
std::pair<nn::ModelBundle, TrainLog> train_adversarial(const data::Dataset& train_ds,
                                                       const data::Dataset& eval_ds,
                                                       const nn::ArchitectureSpec& spec,
                                                       const TrainConfig& cfg);

double accuracy(nn::ModelBundle& m, const data::Dataset& ds, int batch_size = 250);

struct EvalRecord {
    int index = 0;
    int label = 0;
    int pred = 0;
    bool correct = false;
    float chosen_eps = 0.0f;
    float aux_before = 0.0f;
    float aux_after = 0.0f;
};
struct EvalResult {
    double accuracy = 0.0;
    std::vector<EvalRecord> records;
};

// clean -> (attack) -> (purify) -> classify
EvalResult evaluate(nn::ModelBundle& m, const data::Dataset& ds,
                    const attack::AttackFn* attack_fn, const purify::PurifyConfig* pfy,
                    int batch_size = 250);

// Experiment presets (architecture + auxiliary task + training recipe).
struct ExperimentPreset {
    std::string name;
    std::string dataset;  // default dataset
    std::string arch;     // fcn | cnn | cnn-cifar
    TrainConfig train;
};
ExperimentPreset experiment_preset(const std::string& name);
std::vector<std::string> experiment_preset_names();

}  // namespace soap::train
