#include "soap/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace soap::train {

float LrSchedule::at(int epoch) const {
    require(initial > 0.0f, ErrorKind::Config, "lr schedule: initial rate must be > 0");
    for (size_t i = 1; i < milestones.size(); ++i)
        require(milestones[i] > milestones[i - 1], ErrorKind::Config,
                "lr schedule: milestones must be strictly increasing");
    float lr = initial;
    for (int mstone : milestones)
        if (epoch >= mstone) lr *= factor;
    return lr;
}

void write_trainlog_csv(const TrainLog& log, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    require(os.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    os << "epoch,cls_loss,aux_loss,eval_acc,seconds\n";
    char buf[160];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.3f\n", e.epoch, e.cls_loss,
                      e.aux_loss, e.eval_acc, e.seconds);
        os << buf;
    }
    require(os.good(), ErrorKind::Io, "write failed for '" + path + "'");
}

void sgd_step(Tensor& param, const Tensor& grad, float lr, float momentum, Tensor& velocity) {
    require(grad.shape == param.shape, ErrorKind::Shape,
            "sgd_step: grad shape " + shape_str(grad.shape) + " does not match param " +
                shape_str(param.shape));
    require(velocity.shape == param.shape, ErrorKind::Shape,
            "sgd_step: velocity shape mismatch");
    for (size_t i = 0; i < param.data.size(); ++i) {
        velocity.data[i] = momentum * velocity.data[i] + grad.data[i];
        param.data[i] -= lr * velocity.data[i];
    }
}

void sgd_update(nn::ModelBundle& m, ad::Tape& tape, const nn::ParamBinding& binding, float lr,
                float momentum, SgdState& state, float clip_norm) {
    float scale = 1.0f;
    if (clip_norm > 0.0f) {
        double norm2 = 0.0;
        for (const auto& ref : nn::named_parameters(m)) {
            auto it = binding.bound.find(ref.tensor);
            if (it == binding.bound.end() || !tape.has_grad(it->second)) continue;
            for (float g : tape.grad(it->second).data) norm2 += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(norm2);
        if (norm > clip_norm) scale = static_cast<float>(clip_norm / norm);
    }
    for (const auto& ref : nn::named_parameters(m)) {
        auto it = binding.bound.find(ref.tensor);
        if (it == binding.bound.end()) continue;
        if (!tape.has_grad(it->second)) continue;
        auto vel = state.velocity.find(ref.name);
        if (vel == state.velocity.end())
            vel = state.velocity.emplace(ref.name, Tensor::zeros(ref.tensor->shape)).first;
        if (scale != 1.0f) {
            Tensor scaled = tape.grad(it->second);
            kernels::scale(scaled.ptr(), scaled.ptr(), scale, scaled.numel());
            sgd_step(*ref.tensor, scaled, lr, momentum, vel->second);
        } else {
            sgd_step(*ref.tensor, tape.grad(it->second), lr, momentum, vel->second);
        }
    }
}

double accuracy(nn::ModelBundle& m, const data::Dataset& ds, int batch_size) {
    const nn::Mode saved = m.mode;
    m.mode = nn::Mode::Eval;
    int correct = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
        const auto b = data::slice(ds, start, std::min(batch_size, ds.size() - start));
        const auto preds = nn::predict(m, b.x);
        for (size_t i = 0; i < b.y.size(); ++i)
            if (preds[i] == b.y[i]) ++correct;
    }
    m.mode = saved;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

std::pair<nn::ModelBundle, TrainLog> train_loop(const data::Dataset& train_ds,
                                                const data::Dataset& eval_ds,
                                                const nn::ArchitectureSpec& spec,
                                                const TrainConfig& cfg) {
    require(cfg.epochs >= 1, ErrorKind::Config, "train: epochs must be >= 1");
    require(cfg.batch_size >= 1, ErrorKind::Config, "train: batch_size must be >= 1");
    require(train_ds.input_shape == spec.input_shape, ErrorKind::Shape,
            "train: dataset input " + shape_str(train_ds.input_shape) +
                " does not match architecture input " + shape_str(spec.input_shape));
    if (cfg.aux_kind == nn::AuxKind::RP && cfg.alpha > 0.0f &&
        (train_ds.name.find("mnist") != std::string::npos ||
         train_ds.name.find("digits") != std::string::npos)) {
        std::fprintf(stderr,
                     "warning: rotation prediction is ill-posed on %s (rotation-ambiguous "
                     "digits); proceeding anyway\n",
                     train_ds.name.c_str());
    }

    nn::ModelBundle m = nn::build(spec, cfg.aux_kind, cfg.seed);
    tasks::AuxTaskConfig aux_cfg;
    aux_cfg.kind = cfg.aux_kind;
    aux_cfg.noise_sigma = cfg.noise_sigma;

    SgdState sgd;
    TrainLog log;
    const Rng root(cfg.seed);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const float lr = cfg.lr.at(epoch);
        aux_cfg.alpha = cfg.alpha;
        if (cfg.alpha_ramp_epochs > 0 && epoch < cfg.alpha_ramp_epochs)
            aux_cfg.alpha = cfg.alpha * static_cast<float>(epoch + 1) /
                            static_cast<float>(cfg.alpha_ramp_epochs);
        Rng rng = root.split(0x10000ULL + static_cast<uint64_t>(epoch));
        auto epoch_batches =
            data::batches(train_ds, cfg.batch_size,
                          root.split(0x20000ULL + static_cast<uint64_t>(epoch)).next_u64());
        double cls_sum = 0.0, aux_sum = 0.0, joint_sum = 0.0;
        int64_t seen = 0;
        for (auto& batch : epoch_batches) {
            Tensor x = batch.x;
            if (cfg.adversarial.kind != AdvTrainMode::Kind::None) {
                // attacks are generated in eval mode on the current parameters
                m.mode = nn::Mode::Eval;
                if (cfg.adversarial.kind == AdvTrainMode::Kind::FGSM) {
                    x = attack::fgsm_attack(m, batch.x, batch.y, cfg.adversarial.eps);
                } else {
                    attack::AttackConfig acfg;
                    acfg.eps = cfg.adversarial.eps;
                    acfg.gamma = cfg.adversarial.gamma;
                    acfg.steps = cfg.adversarial.steps;
                    x = attack::pgd_attack(m, batch.x, batch.y, acfg);
                }
            }
            m.mode = nn::Mode::Train;
            ad::Tape tape;
            nn::ParamBinding binding;
            auto joint = tasks::joint_loss(m, tape, x, batch.y, aux_cfg, rng, &binding);
            const float total = joint.total.tensor().data[0];
            require(std::isfinite(total), ErrorKind::Numeric,
                    "train: non-finite loss at epoch " + std::to_string(epoch));
            tape.backward(joint.total);
            sgd_update(m, tape, binding, lr, cfg.momentum, sgd, cfg.clip_norm);

            const int bn = static_cast<int>(batch.y.size());
            cls_sum += static_cast<double>(joint.cls.tensor().data[0]) * bn;
            if (joint.aux.valid())
                aux_sum += static_cast<double>(joint.aux.tensor().data[0]) * bn;
            joint_sum += static_cast<double>(total) * bn;
            seen += bn;
        }
        EpochLog entry;
        entry.epoch = epoch;
        entry.cls_loss = cls_sum / static_cast<double>(seen);
        entry.aux_loss = aux_sum / static_cast<double>(seen);
        entry.joint_loss = joint_sum / static_cast<double>(seen);
        entry.eval_acc = accuracy(m, eval_ds);
        entry.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.push_back(entry);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %d: cls %.4f aux %.4f acc %.4f (%.1fs)\n", epoch,
                         entry.cls_loss, entry.aux_loss, entry.eval_acc, entry.seconds);
    }
    for (const auto& ref : nn::named_parameters(m))
        check_finite(*ref.tensor, "trained parameter " + ref.name);
    m.mode = nn::Mode::Eval;
    return {std::move(m), std::move(log)};
}

}  // namespace

std::pair<nn::ModelBundle, TrainLog> train_soap(const data::Dataset& train_ds,
                                                const data::Dataset& eval_ds,
                                                const nn::ArchitectureSpec& spec,
                                                const TrainConfig& cfg) {
    return train_loop(train_ds, eval_ds, spec, cfg);
}

std::pair<nn::ModelBundle, TrainLog> train_adversarial(const data::Dataset& train_ds,
                                                       const data::Dataset& eval_ds,
                                                       const nn::ArchitectureSpec& spec,
                                                       const TrainConfig& cfg) {
    require(cfg.adversarial.kind != AdvTrainMode::Kind::None, ErrorKind::Config,
            "train_adversarial: adversarial mode is None (use train_soap)");
    require(cfg.adversarial.eps >= 0.0f, ErrorKind::Config,
            "train_adversarial: eps must be >= 0");
    return train_loop(train_ds, eval_ds, spec, cfg);
}

EvalResult evaluate(nn::ModelBundle& m, const data::Dataset& ds,
                    const attack::AttackFn* attack_fn, const purify::PurifyConfig* pfy,
                    int batch_size) {
    require(m.is_eval(), ErrorKind::Invalid, "evaluate: model must be in eval mode");
    EvalResult out;
    int correct = 0;
    for (int start = 0; start < ds.size(); start += batch_size) {
        auto b = data::slice(ds, start, std::min(batch_size, ds.size() - start));
        Tensor x = b.x;
        if (attack_fn) x = (*attack_fn)(m, x, b.y);

        std::vector<float> chosen_eps(b.y.size(), 0.0f), aux_before(b.y.size(), 0.0f),
            aux_after(b.y.size(), 0.0f);
        if (pfy) {
            switch (pfy->mode) {
                case purify::PurifyConfig::Mode::Fixed:
                    x = purify::purify_fixed(m, x, pfy->fixed_eps, pfy->gamma, pfy->steps,
                                             pfy->rp_mse);
                    for (auto& e : chosen_eps) e = pfy->fixed_eps;
                    break;
                case purify::PurifyConfig::Mode::MinAux: {
                    auto outc = purify::select_eps_min_aux(m, x, *pfy);
                    x = std::move(outc.x_pfy);
                    chosen_eps = std::move(outc.chosen_eps);
                    aux_before = std::move(outc.aux_before);
                    aux_after = std::move(outc.aux_after);
                    break;
                }
                case purify::PurifyConfig::Mode::Oracle: {
                    auto outc = purify::select_eps_oracle(m, x, b.y, *pfy);
                    x = std::move(outc.x_pfy);
                    chosen_eps = std::move(outc.chosen_eps);
                    aux_before = std::move(outc.aux_before);
                    aux_after = std::move(outc.aux_after);
                    break;
                }
            }
        }
        const auto preds = nn::predict(m, x);
        for (size_t i = 0; i < b.y.size(); ++i) {
            EvalRecord rec;
            rec.index = start + static_cast<int>(i);
            rec.label = b.y[i];
            rec.pred = preds[i];
            rec.correct = preds[i] == b.y[i];
            rec.chosen_eps = chosen_eps[i];
            rec.aux_before = aux_before[i];
            rec.aux_after = aux_after[i];
            if (rec.correct) ++correct;
            out.records.push_back(rec);
        }
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
    return out;
}

// ---------------------------------------------------------------------------
// experiment presets
// ---------------------------------------------------------------------------

namespace {

TrainConfig base_mnist() {
    TrainConfig t;
    t.epochs = 10;
    t.batch_size = 128;
    t.lr.initial = 0.1f;
    t.lr.milestones = {5};  // decreased 10 times at halfway
    t.lr.factor = 0.1f;
    t.momentum = 0.9f;
    return t;
}

TrainConfig base_cifar_like() {
    TrainConfig t;
    t.epochs = 20;
    t.batch_size = 128;
    t.lr.initial = 0.1f;
    t.lr.milestones = {10, 15};
    t.lr.factor = 0.1f;
    t.momentum = 0.9f;
    return t;
}

}  // namespace

ExperimentPreset experiment_preset(const std::string& name) {
    ExperimentPreset p;
    p.name = name;
    if (name == "mnist-dr" || name == "mnist-dr-fcn") {
        p.dataset = "mnist";
        p.arch = name == "mnist-dr" ? "cnn" : "fcn";
        p.train = base_mnist();
        if (p.arch == "fcn") p.train.lr.initial = 0.01f;
        p.train.aux_kind = nn::AuxKind::DR;
        p.train.alpha = 100.0f;      // MNIST DR trade-off
        p.train.noise_sigma = 0.5f;  // additive Gaussian (mu=0, sigma=0.5)
        p.train.clip_norm = 5.0f;    // keeps the large-alpha first steps sane
        return p;
    }
    if (name == "mnist-vanilla" || name == "mnist-vanilla-fcn") {
        p.dataset = "mnist";
        p.arch = name == "mnist-vanilla" ? "cnn" : "fcn";
        p.train = base_mnist();
        if (p.arch == "fcn") p.train.lr.initial = 0.01f;
        p.train.aux_kind = nn::AuxKind::LC;  // no auxiliary parameters
        p.train.alpha = 0.0f;
        return p;
    }
    if (name == "mnist-fgsm-at" || name == "mnist-pgd-at") {
        p.dataset = "mnist";
        p.arch = "cnn";
        p.train = base_mnist();
        p.train.aux_kind = nn::AuxKind::LC;
        p.train.alpha = 0.0f;
        if (name == "mnist-fgsm-at") {
            p.train.adversarial = {AdvTrainMode::Kind::FGSM, 0.3f, 0.0f, 0};
        } else {
            p.train.adversarial = {AdvTrainMode::Kind::PGD, 0.3f, 0.01f, 40};
        }
        return p;
    }
    if (name == "shapes-rp" || name == "cifar-rp") {
        p.dataset = name == "shapes-rp" ? "shapes" : "cifar10";
        p.arch = "cnn-cifar";
        p.train = base_cifar_like();
        p.train.aux_kind = nn::AuxKind::RP;
        p.train.alpha = 0.5f;
        p.train.noise_sigma = 0.1f;
        p.train.clip_norm = 5.0f;
        return p;
    }
    if (name == "shapes-lc" || name == "cifar-lc") {
        p.dataset = name == "shapes-lc" ? "shapes" : "cifar10";
        p.arch = "cnn-cifar";
        p.train = base_cifar_like();
        if (name == "shapes-lc") {
            // consistency training converges slowly under the heavy view
            // augmentation; the synthetic set needs the longer schedule
            p.train.epochs = 30;
            p.train.lr.milestones = {15, 22};
        }
        p.train.aux_kind = nn::AuxKind::LC;
        p.train.alpha = 1.0f;
        p.train.noise_sigma = 0.1f;
        p.train.clip_norm = 5.0f;
        p.train.alpha_ramp_epochs = 5;
        return p;
    }
    if (name == "shapes-vanilla" || name == "cifar-vanilla") {
        p.dataset = name == "shapes-vanilla" ? "shapes" : "cifar10";
        p.arch = "cnn-cifar";
        p.train = base_cifar_like();
        p.train.aux_kind = nn::AuxKind::LC;
        p.train.alpha = 0.0f;
        return p;
    }
    if (name == "cifar-fgsm-at" || name == "cifar-pgd-at") {
        p.dataset = "cifar10";
        p.arch = "cnn-cifar";
        p.train = base_cifar_like();
        p.train.aux_kind = nn::AuxKind::LC;
        p.train.alpha = 0.0f;
        if (name == "cifar-fgsm-at") {
            p.train.adversarial = {AdvTrainMode::Kind::FGSM, 8.0f / 255.0f, 0.0f, 0};
        } else {
            p.train.adversarial = {AdvTrainMode::Kind::PGD, 8.0f / 255.0f, 2.0f / 255.0f, 7};
        }
        return p;
    }
    raise(ErrorKind::Config, "unknown preset '" + name + "'");
}

std::vector<std::string> experiment_preset_names() {
    return {"mnist-dr",      "mnist-dr-fcn",  "mnist-vanilla", "mnist-vanilla-fcn",
            "mnist-fgsm-at", "mnist-pgd-at",  "shapes-rp",     "shapes-lc",
            "shapes-vanilla", "cifar-rp",     "cifar-lc",      "cifar-vanilla",
            "cifar-fgsm-at", "cifar-pgd-at"};
}

}  // namespace soap::train
