// soap: train / attack / purify-eval / sweep / report command-line harness.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "soap/attacks.hpp"
#include "soap/data.hpp"
#include "soap/kernels.hpp"
#include "soap/nn.hpp"
#include "soap/purify.hpp"
#include "soap/report.hpp"
#include "soap/tensor.hpp"
#include "soap/train.hpp"

namespace fs = std::filesystem;
using namespace soap;

namespace {

// ---------------------------------------------------------------------------
// config file: flat key-value lines with [section] headers, sections matching
// subcommand names; command-line flags override config values
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Config, "cannot open config file '" + path + "'");
    std::vector<std::pair<std::string, std::string>> out;  // ("section.key", value)
    std::string line, section;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            require(t.back() == ']', ErrorKind::Config,
                    "'" + path + "' line " + std::to_string(lineno) + ": unterminated section");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const auto eq = t.find('=');
        require(eq != std::string::npos, ErrorKind::Config,
                "'" + path + "' line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        require(!key.empty(), ErrorKind::Config,
                "'" + path + "' line " + std::to_string(lineno) + ": empty key");
        out.emplace_back(section.empty() ? key : section + "." + key, val);
    }
    return out;
}

// Injects config values as synthesized flags ahead of the real command line,
// so explicit flags win (TakeLast policy).
std::vector<std::string> merge_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::string config_path;
    for (size_t i = 1; i + 1 < args.size(); ++i)
        if (args[i] == "--config") config_path = args[i + 1];
    if (config_path.empty()) return args;
    const auto kv = parse_config_file(config_path);
    if (args.size() < 2 || args[1].empty() || args[1][0] == '-') return args;
    const std::string subcmd = args[1];
    std::vector<std::string> merged = {args[0], subcmd};
    for (const auto& [key, val] : kv) {
        const auto dot = key.find('.');
        if (dot == std::string::npos) continue;
        if (key.substr(0, dot) != subcmd) continue;
        merged.push_back("--" + key.substr(dot + 1));
        merged.push_back(val);
    }
    merged.insert(merged.end(), args.begin() + 2, args.end());
    return merged;
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

struct DataOpts {
    std::string dataset;  // mnist | digits | shapes | cifar10 (empty = infer)
    std::string data_dir;
    int train_n = 0;  // 0 = dataset default
    int test_n = 0;
    uint64_t data_seed = 42;
};

std::pair<int, int> default_split(const std::string& dataset) {
    if (dataset == "mnist" || dataset == "digits") return {10000, 2000};
    return {8000, 2000};  // shapes, cifar10
}

data::Dataset concat_datasets(std::vector<data::Dataset> parts) {
    data::Dataset out = parts.at(0);
    for (size_t i = 1; i < parts.size(); ++i) {
        require(parts[i].input_shape == out.input_shape, ErrorKind::Format,
                "dataset shards disagree on input shape");
        out.x.data.insert(out.x.data.end(), parts[i].x.data.begin(), parts[i].x.data.end());
        out.x.shape[0] += parts[i].x.shape[0];
        out.y.insert(out.y.end(), parts[i].y.begin(), parts[i].y.end());
    }
    return out;
}

data::Dataset load_split(const DataOpts& opts, bool train_split) {
    const auto [def_train, def_test] = default_split(opts.dataset);
    const int want = train_split ? (opts.train_n > 0 ? opts.train_n : def_train)
                                 : (opts.test_n > 0 ? opts.test_n : def_test);
    if (opts.dataset == "digits")
        return data::gen_digits(want, opts.data_seed + (train_split ? 0 : 1));
    if (opts.dataset == "shapes")
        return data::gen_oriented_shapes(want, opts.data_seed + (train_split ? 0 : 1));
    if (opts.dataset == "mnist") {
        const std::string base = opts.data_dir + "/";
        const auto ds = train_split
                            ? data::load_mnist_idx(base + "train-images-idx3-ubyte",
                                                   base + "train-labels-idx1-ubyte")
                            : data::load_mnist_idx(base + "t10k-images-idx3-ubyte",
                                                   base + "t10k-labels-idx1-ubyte");
        return data::subset(ds, std::min(want, ds.size()));
    }
    if (opts.dataset == "cifar10") {
        const std::string base = opts.data_dir + "/";
        if (!train_split) {
            const auto ds = data::load_cifar10_bin(base + "test_batch.bin");
            return data::subset(ds, std::min(want, ds.size()));
        }
        std::vector<data::Dataset> parts;
        int have = 0;
        for (int i = 1; i <= 5 && have < want; ++i) {
            parts.push_back(data::load_cifar10_bin(base + "data_batch_" + std::to_string(i) +
                                                   ".bin"));
            have += parts.back().size();
        }
        return data::subset(concat_datasets(std::move(parts)), want);
    }
    raise(ErrorKind::Config, "unknown dataset '" + opts.dataset + "'");
}

std::string infer_dataset(const std::vector<int>& input_shape) {
    if (input_shape == std::vector<int>{1, 28, 28}) return "digits";
    if (input_shape == std::vector<int>{1, 32, 32}) return "shapes";
    if (input_shape == std::vector<int>{3, 32, 32}) return "cifar10";
    raise(ErrorKind::Config,
          "cannot infer a dataset for input " + shape_str(input_shape) + "; pass --dataset");
}

// ---------------------------------------------------------------------------
// attack / purify defaults keyed on the model's input geometry
// ---------------------------------------------------------------------------

bool mnist_like(const nn::ModelBundle& m) { return m.spec.input_shape.back() == 28; }

attack::AttackConfig default_attack(const nn::ModelBundle& m, const std::string& kind) {
    attack::AttackConfig cfg;
    if (mnist_like(m)) {
        if (kind == "l2-pgd") {
            cfg.norm = attack::Norm::L2;
            cfg.eps = 4.0f;
            cfg.gamma = 0.25f;
            cfg.steps = 40;
        } else {
            cfg.eps = 0.3f;
            cfg.gamma = 0.01f;
            cfg.steps = 40;
        }
    } else {
        if (kind == "l2-pgd") {
            cfg.norm = attack::Norm::L2;
            cfg.eps = 2.0f;
            cfg.gamma = 0.25f;
            cfg.steps = 20;
        } else {
            cfg.eps = 8.0f / 255.0f;
            cfg.gamma = 2.0f / 255.0f;
            cfg.steps = 20;
        }
    }
    return cfg;
}

std::vector<float> default_grid(const nn::ModelBundle& m) {
    std::vector<float> g;
    if (mnist_like(m)) {
        for (int i = 0; i <= 10; ++i) g.push_back(0.05f * static_cast<float>(i));
    } else {
        for (int i = 0; i <= 8; ++i) g.push_back(2.0f * static_cast<float>(i) / 255.0f);
    }
    return g;
}

float default_pfy_gamma(const nn::ModelBundle& m) {
    return mnist_like(m) ? 0.1f : 4.0f / 255.0f;
}

std::vector<float> parse_grid(const std::string& text) {
    // "lo:step:hi" or comma-separated values
    std::vector<float> out;
    if (text.find(':') != std::string::npos) {
        float lo, step, hi;
        require(std::sscanf(text.c_str(), "%f:%f:%f", &lo, &step, &hi) == 3,
                ErrorKind::Config, "bad grid '" + text + "' (expected lo:step:hi)");
        require(step > 0, ErrorKind::Config, "grid step must be > 0");
        for (float v = lo; v <= hi + 1e-9f; v += step) out.push_back(v);
        return out;
    }
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stof(tok));
    return out;
}

std::vector<float> parse_float_list(const std::string& text) {
    std::vector<float> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stof(tok));
    return out;
}

Tensor labels_to_tensor(const std::vector<int>& y) {
    Tensor t = Tensor::zeros({static_cast<int>(y.size())});
    for (size_t i = 0; i < y.size(); ++i) t.data[i] = static_cast<float>(y[i]);
    return t;
}

std::vector<int> tensor_to_labels(const Tensor& t) {
    std::vector<int> y(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) y[i] = static_cast<int>(t.data[i]);
    return y;
}

attack::AttackFn make_attack_fn(const std::string& kind, const attack::AttackConfig& cfg) {
    if (kind == "none")
        return [](nn::ModelBundle&, const Tensor& x, const std::vector<int>&) { return x; };
    if (kind == "fgsm")
        return [cfg](nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y) {
            return attack::fgsm_attack(m, x, y, cfg.eps);
        };
    if (kind == "pgd" || kind == "l2-pgd")
        return [cfg](nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y) {
            return attack::pgd_attack(m, x, y, cfg);
        };
    if (kind == "aux-aware")
        return [cfg](nn::ModelBundle& m, const Tensor& x, const std::vector<int>& y) {
            return attack::aux_aware_attack(m, x, y, cfg);
        };
    raise(ErrorKind::Config, "unknown attack kind '" + kind + "'");
}

void ensure_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    require(!ec, ErrorKind::Io, "cannot create output directory '" + out + "'");
}

std::string manifest_text(const std::vector<std::pair<std::string, std::string>>& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-supervised online adversarial purification harness"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);

    int threads = 0;
    std::string config_file;
    app.add_option("--threads", threads, "worker threads (default: machine cores)");
    app.add_option("--config", config_file, "key-value config file with [subcommand] sections");

    const char* env_data = std::getenv("SOAP_DATA_DIR");
    const std::string default_data = env_data ? env_data : "data";

    // ---- train ----
    auto* t = app.add_subcommand("train", "train a model preset");
    std::string t_preset, t_dataset, t_data = default_data, t_out;
    int t_train_n = 0, t_test_n = 0, t_epochs = 0, t_batch = 0;
    double t_alpha = -1.0, t_sigma = -1.0, t_lr = 0.0, t_momentum = -1.0;
    uint64_t t_seed = 1, t_data_seed = 42;
    bool t_verbose = false;
    t->add_option("--preset", t_preset, "experiment preset")->required();
    t->add_option("--dataset", t_dataset, "mnist | digits | shapes | cifar10");
    t->add_option("--data", t_data, "dataset root (or SOAP_DATA_DIR)");
    t->add_option("--train-n", t_train_n);
    t->add_option("--test-n", t_test_n);
    t->add_option("--epochs", t_epochs);
    t->add_option("--batch-size", t_batch);
    t->add_option("--alpha", t_alpha);
    t->add_option("--sigma", t_sigma);
    t->add_option("--lr", t_lr);
    t->add_option("--momentum", t_momentum);
    t->add_option("--seed", t_seed);
    t->add_option("--data-seed", t_data_seed);
    t->add_flag("--verbose", t_verbose);
    t->add_option("--out", t_out)->required();

    // ---- attack ----
    auto* a = app.add_subcommand("attack", "craft an adversarial set from a checkpoint");
    std::string a_ck, a_kind = "pgd", a_dataset, a_data = default_data, a_out;
    double a_eps = -1.0, a_gamma = -1.0, a_beta = 0.0;
    int a_steps = 0, a_test_n = 0, a_batch = 250;
    uint64_t a_seed = 1, a_data_seed = 42;
    bool a_random_start = false, a_rp_ce = false;
    a->add_option("--checkpoint", a_ck)->required();
    a->add_option("--kind", a_kind, "none | fgsm | pgd | l2-pgd | aux-aware");
    a->add_option("--eps", a_eps);
    a->add_option("--gamma", a_gamma);
    a->add_option("--steps", a_steps);
    a->add_option("--beta", a_beta);
    a->add_flag("--random-start", a_random_start);
    a->add_flag("--rp-ce", a_rp_ce, "use the CE (not MSE) RP loss in aux-aware objectives");
    a->add_option("--dataset", a_dataset);
    a->add_option("--data", a_data);
    a->add_option("--test-n", a_test_n);
    a->add_option("--batch-size", a_batch);
    a->add_option("--seed", a_seed);
    a->add_option("--data-seed", a_data_seed);
    a->add_option("--out", a_out)->required();

    // ---- purify-eval ----
    auto* pe = app.add_subcommand("purify-eval", "evaluate purification on an adversarial set");
    std::string p_ck, p_advset, p_mode = "all", p_grid, p_out;
    double p_eps = 0.0, p_gamma = -1.0;
    int p_steps = 5, p_batch = 250;
    bool p_rp_ce = false;
    pe->add_option("--checkpoint", p_ck)->required();
    pe->add_option("--advset", p_advset)->required();
    pe->add_option("--mode", p_mode, "all | min-aux | oracle | fixed");
    pe->add_option("--eps", p_eps, "budget for --mode fixed");
    pe->add_option("--grid", p_grid, "lo:step:hi or comma list");
    pe->add_option("--gamma", p_gamma);
    pe->add_option("--steps", p_steps);
    pe->add_flag("--rp-ce", p_rp_ce);
    pe->add_option("--batch-size", p_batch);
    pe->add_option("--out", p_out)->required();

    // ---- sweep ----
    auto* sw = app.add_subcommand("sweep", "auxiliary-loss curves or beta sweeps");
    std::string s_ck, s_dataset, s_data = default_data, s_attack = "pgd", s_grid, s_betas,
                s_out;
    double s_eps = -1.0, s_gamma = -1.0, s_pfy_gamma = -1.0;
    int s_steps = 0, s_pfy_steps = 5, s_n = 500, s_batch = 250;
    uint64_t s_data_seed = 42;
    bool s_rp_ce = false;
    sw->add_option("--checkpoint", s_ck)->required();
    sw->add_option("--dataset", s_dataset);
    sw->add_option("--data", s_data);
    sw->add_option("--n", s_n, "test examples to sweep");
    sw->add_option("--attack", s_attack, "pgd | fgsm");
    sw->add_option("--eps", s_eps);
    sw->add_option("--gamma", s_gamma);
    sw->add_option("--steps", s_steps);
    sw->add_option("--grid", s_grid);
    sw->add_option("--pfy-gamma", s_pfy_gamma);
    sw->add_option("--pfy-steps", s_pfy_steps);
    sw->add_option("--beta-sweep", s_betas, "comma list of beta values (Fig. 4 variant)");
    sw->add_flag("--rp-ce", s_rp_ce);
    sw->add_option("--batch-size", s_batch);
    sw->add_option("--data-seed", s_data_seed);
    sw->add_option("--out", s_out)->required();

    // ---- report ----
    auto* rp = app.add_subcommand("report", "assemble the accuracy matrix of a run directory");
    std::string r_dir;
    rp->add_option("--run-dir", r_dir)->required();

    // global options (--config, --threads) may appear after the subcommand
    for (auto* sc : {t, a, pe, sw, rp}) sc->fallthrough();

    try {
        const auto merged = merge_config_args(argc, argv);
        std::vector<const char*> cargs;
        for (const auto& s : merged) cargs.push_back(s.c_str());
        try {
            app.parse(static_cast<int>(cargs.size()), cargs.data());
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 2;
        }
        if (threads > 0) kernels::set_num_threads(threads);

        if (t->parsed()) {
            auto preset = train::experiment_preset(t_preset);
            DataOpts d;
            d.dataset = t_dataset.empty() ? preset.dataset : t_dataset;
            d.data_dir = t_data;
            d.train_n = t_train_n;
            d.test_n = t_test_n;
            d.data_seed = t_data_seed;
            auto train_ds = load_split(d, true);
            auto test_ds = load_split(d, false);
            auto cfg = preset.train;
            if (t_epochs > 0) cfg.epochs = t_epochs;
            if (t_batch > 0) cfg.batch_size = t_batch;
            if (t_alpha >= 0.0) cfg.alpha = static_cast<float>(t_alpha);
            if (t_sigma >= 0.0) cfg.noise_sigma = static_cast<float>(t_sigma);
            if (t_lr > 0.0) cfg.lr.initial = static_cast<float>(t_lr);
            if (t_momentum >= 0.0) cfg.momentum = static_cast<float>(t_momentum);
            cfg.seed = t_seed;
            cfg.verbose = t_verbose;
            const auto spec = nn::preset(preset.arch, train_ds.input_shape, cfg.aux_kind);
            ensure_out_dir(t_out);
            auto [model, log] =
                cfg.adversarial.kind == train::AdvTrainMode::Kind::None
                    ? train::train_soap(train_ds, test_ds, spec, cfg)
                    : train::train_adversarial(train_ds, test_ds, spec, cfg);
            nn::save_checkpoint(model, t_out + "/checkpoint.soap");
            train::write_trainlog_csv(log, t_out + "/trainlog.csv");
            report::write_manifest(
                t_out + "/manifest.txt",
                manifest_text({{"cmd", "train"},
                               {"preset", t_preset},
                               {"dataset", d.dataset},
                               {"train_n", std::to_string(train_ds.size())},
                               {"test_n", std::to_string(test_ds.size())},
                               {"epochs", std::to_string(cfg.epochs)},
                               {"alpha", fmt(cfg.alpha)},
                               {"sigma", fmt(cfg.noise_sigma)},
                               {"seed", std::to_string(cfg.seed)},
                               {"data_seed", std::to_string(t_data_seed)}}),
                t_seed);
            std::printf("train preset=%s eval_acc=%s\n", t_preset.c_str(),
                        fmt(log.back().eval_acc).c_str());
            return 0;
        }

        if (a->parsed()) {
            auto m = nn::load_checkpoint(a_ck);
            m.mode = nn::Mode::Eval;
            DataOpts d;
            d.dataset = a_dataset.empty() ? infer_dataset(m.spec.input_shape) : a_dataset;
            d.data_dir = a_data;
            d.test_n = a_test_n;
            d.data_seed = a_data_seed;
            const auto test_ds = load_split(d, false);
            attack::AttackConfig cfg = default_attack(m, a_kind);
            if (a_eps >= 0.0) cfg.eps = static_cast<float>(a_eps);
            if (a_gamma > 0.0) cfg.gamma = static_cast<float>(a_gamma);
            if (a_steps > 0) cfg.steps = a_steps;
            cfg.beta = static_cast<float>(a_beta);
            cfg.random_start = a_random_start;
            cfg.seed = a_seed;
            cfg.rp_mse = !a_rp_ce;
            const auto fn = make_attack_fn(a_kind, cfg);
            Tensor x_adv = Tensor::zeros(test_ds.x.shape);
            int correct = 0;
            for (int start = 0; start < test_ds.size(); start += a_batch) {
                const auto b = data::slice(test_ds, start,
                                           std::min(a_batch, test_ds.size() - start));
                const Tensor xa = fn(m, b.x, b.y);
                std::copy(xa.data.begin(), xa.data.end(),
                          x_adv.data.begin() + static_cast<size_t>(start) * (test_ds.x.numel() /
                                                                             test_ds.size()));
                const auto preds = nn::predict(m, xa);
                for (size_t i = 0; i < b.y.size(); ++i)
                    if (preds[i] == b.y[i]) ++correct;
            }
            const double acc = static_cast<double>(correct) / test_ds.size();
            ensure_out_dir(a_out);
            const std::string meta = "__attack__=kind=" + a_kind + ";eps=" + fmt(cfg.eps) +
                                     ";gamma=" + fmt(cfg.gamma) +
                                     ";steps=" + std::to_string(cfg.steps) +
                                     ";beta=" + fmt(cfg.beta) +
                                     ";seed=" + std::to_string(cfg.seed);
            const std::string advset_path = a_out + "/advset_" + a_kind + ".soap";
            nn::save_tensors(advset_path,
                             {{meta, Tensor::zeros({0})},
                              {"x", test_ds.x},
                              {"x_adv", x_adv},
                              {"y", labels_to_tensor(test_ds.y)}});
            report::write_manifest(a_out + "/manifest_attack_" + a_kind + ".txt",
                                   manifest_text({{"cmd", "attack"},
                                                  {"kind", a_kind},
                                                  {"checkpoint", a_ck},
                                                  {"dataset", d.dataset},
                                                  {"eps", fmt(cfg.eps)},
                                                  {"gamma", fmt(cfg.gamma)},
                                                  {"steps", std::to_string(cfg.steps)},
                                                  {"beta", fmt(cfg.beta)},
                                                  {"seed", std::to_string(cfg.seed)},
                                                  {"data_seed", std::to_string(a_data_seed)}}),
                                   a_seed);
            std::printf("attack kind=%s eps=%s accuracy=%s advset=%s\n", a_kind.c_str(),
                        fmt(cfg.eps).c_str(), fmt(acc).c_str(), advset_path.c_str());
            return 0;
        }

        if (pe->parsed()) {
            auto m = nn::load_checkpoint(p_ck);
            m.mode = nn::Mode::Eval;
            uint8_t aux_byte = 0;
            const auto tensors = nn::load_tensors(p_advset, &aux_byte);
            const Tensor* x_adv = nullptr;
            const Tensor* y_t = nullptr;
            std::string attack_name = "pgd";
            for (const auto& [name, tensor] : tensors) {
                if (name == "x_adv") x_adv = &tensor;
                if (name == "y") y_t = &tensor;
                if (name.rfind("__attack__=", 0) == 0) {
                    const auto kpos = name.find("kind=");
                    if (kpos != std::string::npos) {
                        const auto end = name.find(';', kpos);
                        attack_name = name.substr(kpos + 5, end - kpos - 5);
                    }
                }
            }
            require(x_adv != nullptr, ErrorKind::Format,
                    "'" + p_advset + "': missing tensor 'x_adv'");
            std::vector<int> y;
            if (y_t) y = tensor_to_labels(*y_t);
            require(!(p_mode == "oracle" && y.empty()), ErrorKind::Config,
                    "oracle selection requested but the adversarial set has no labels");
            require(!y.empty() || p_mode == "fixed" || p_mode == "min-aux", ErrorKind::Config,
                    "accuracy evaluation needs labels in the adversarial set");

            purify::PurifyConfig cfg;
            cfg.eps_grid = p_grid.empty() ? default_grid(m) : parse_grid(p_grid);
            cfg.gamma = p_gamma > 0.0 ? static_cast<float>(p_gamma) : default_pfy_gamma(m);
            cfg.steps = p_steps;
            cfg.rp_mse = !p_rp_ce;
            purify::validate_grid(cfg.eps_grid);

            const int n = x_adv->shape[0];
            const int64_t block = x_adv->numel() / n;
            int correct0 = 0, correct_min = 0, correct_orc = 0;
            int correct_fixed = 0;
            std::vector<float> chosen_min, chosen_orc;
            double aux_before_sum = 0.0, aux_after_sum = 0.0;
            for (int start = 0; start < n; start += p_batch) {
                const int count = std::min(p_batch, n - start);
                std::vector<int> shape = x_adv->shape;
                shape[0] = count;
                Tensor xb(shape, std::vector<float>(
                                     x_adv->data.begin() + static_cast<size_t>(start * block),
                                     x_adv->data.begin() +
                                         static_cast<size_t>((start + count) * block)));
                std::vector<int> yb;
                if (!y.empty()) yb.assign(y.begin() + start, y.begin() + start + count);

                if (p_mode == "fixed") {
                    const Tensor xp = purify::purify_fixed(m, xb, static_cast<float>(p_eps),
                                                           cfg.gamma, cfg.steps, cfg.rp_mse);
                    const auto preds = nn::predict(m, xp);
                    for (int i = 0; i < count; ++i)
                        if (!yb.empty() && preds[static_cast<size_t>(i)] == yb[static_cast<size_t>(i)])
                            ++correct_fixed;
                    continue;
                }
                const auto grid_res =
                    purify::purify_grid(m, xb, cfg.eps_grid, cfg.gamma, cfg.steps, cfg.rp_mse);
                const auto preds0 = nn::predict(m, xb);
                for (int i = 0; i < count; ++i)
                    if (!yb.empty() && preds0[static_cast<size_t>(i)] == yb[static_cast<size_t>(i)])
                        ++correct0;
                if (p_mode == "all" || p_mode == "min-aux") {
                    auto mo = purify::select_min_aux_from(grid_res, cfg.eps_grid);
                    const auto preds = nn::predict(m, mo.x_pfy);
                    for (int i = 0; i < count; ++i) {
                        if (!yb.empty() && preds[static_cast<size_t>(i)] == yb[static_cast<size_t>(i)])
                            ++correct_min;
                        chosen_min.push_back(mo.chosen_eps[static_cast<size_t>(i)]);
                        aux_before_sum += mo.aux_before[static_cast<size_t>(i)];
                        aux_after_sum += mo.aux_after[static_cast<size_t>(i)];
                    }
                }
                if ((p_mode == "all" && !y.empty()) || p_mode == "oracle") {
                    auto oo = purify::select_oracle_from(grid_res, m, cfg.eps_grid, yb);
                    const auto preds = nn::predict(m, oo.x_pfy);
                    for (int i = 0; i < count; ++i) {
                        if (preds[static_cast<size_t>(i)] == yb[static_cast<size_t>(i)]) ++correct_orc;
                        chosen_orc.push_back(oo.chosen_eps[static_cast<size_t>(i)]);
                    }
                }
            }
            ensure_out_dir(p_out);
            std::vector<report::Cell> cells;
            auto emit = [&](const std::string& defense, int correct) {
                const double acc = static_cast<double>(correct) / n;
                cells.push_back({attack_name, defense, acc, n});
                std::printf("attack=%s defense=%s accuracy=%s\n", attack_name.c_str(),
                            defense.c_str(), fmt(acc).c_str());
            };
            if (p_mode == "fixed") {
                emit("eps=" + fmt(p_eps), correct_fixed);
            } else {
                if (!y.empty()) emit("eps=0", correct0);
                if (p_mode == "all" || p_mode == "min-aux") emit("eps=min-aux", correct_min);
                if ((p_mode == "all" && !y.empty()) || p_mode == "oracle")
                    emit("eps=oracle*", correct_orc);
            }
            report::append_cells_csv(p_out + "/cells.csv", cells);
            if (!chosen_min.empty()) {
                std::vector<float> sorted = chosen_min;
                std::sort(sorted.begin(), sorted.end());
                const float median = sorted[sorted.size() / 2];
                std::ofstream stats(p_out + "/purify_stats_" + attack_name + ".csv",
                                    std::ios::trunc);
                stats << "defense,median_chosen_eps,mean_aux_before,mean_aux_after\n";
                stats << "eps=min-aux," << fmt(median) << "," << fmt(aux_before_sum / n) << ","
                      << fmt(aux_after_sum / n) << "\n";
                std::printf("min-aux median_chosen_eps=%s mean_aux_before=%s mean_aux_after=%s\n",
                            fmt(median).c_str(), fmt(aux_before_sum / n).c_str(),
                            fmt(aux_after_sum / n).c_str());
            }
            return 0;
        }

        if (sw->parsed()) {
            auto m = nn::load_checkpoint(s_ck);
            m.mode = nn::Mode::Eval;
            DataOpts d;
            d.dataset = s_dataset.empty() ? infer_dataset(m.spec.input_shape) : s_dataset;
            d.data_dir = s_data;
            d.test_n = s_n;
            d.data_seed = s_data_seed;
            const auto test_ds = load_split(d, false);
            attack::AttackConfig acfg = default_attack(m, s_attack);
            if (s_eps >= 0.0) acfg.eps = static_cast<float>(s_eps);
            if (s_gamma > 0.0) acfg.gamma = static_cast<float>(s_gamma);
            if (s_steps > 0) acfg.steps = s_steps;
            acfg.rp_mse = !s_rp_ce;
            const auto grid = s_grid.empty() ? default_grid(m) : parse_grid(s_grid);
            const float pfy_gamma =
                s_pfy_gamma > 0.0 ? static_cast<float>(s_pfy_gamma) : default_pfy_gamma(m);
            ensure_out_dir(s_out);

            if (s_betas.empty()) {
                const auto fn = make_attack_fn(s_attack, acfg);
                const Tensor x_adv = fn(m, test_ds.x, test_ds.y);
                const auto result = purify::sweep_aux_curve(m, test_ds.x, x_adv, grid,
                                                            pfy_gamma, s_pfy_steps, !s_rp_ce);
                std::ofstream os(s_out + "/sweep_aux.csv", std::ios::trunc);
                os << purify::sweep_csv(result);
                std::printf("sweep attack=%s eps=%s elbow=%s rows=%zu -> %s/sweep_aux.csv\n",
                            s_attack.c_str(), fmt(acfg.eps).c_str(), fmt(result.elbow).c_str(),
                            result.rows.size(), s_out.c_str());
            } else {
                const auto betas = parse_float_list(s_betas);
                purify::PurifyConfig pcfg;
                pcfg.eps_grid = grid;
                pcfg.gamma = pfy_gamma;
                pcfg.steps = s_pfy_steps;
                pcfg.rp_mse = !s_rp_ce;
                std::ofstream os(s_out + "/beta_sweep.csv", std::ios::trunc);
                os << "beta,acc_before,acc_after\n";
                for (float beta : betas) {
                    attack::AttackConfig bcfg = acfg;
                    bcfg.beta = beta;
                    const Tensor x_adv = attack::aux_aware_attack(m, test_ds.x, test_ds.y, bcfg);
                    const auto preds0 = nn::predict(m, x_adv);
                    int c0 = 0;
                    for (size_t i = 0; i < test_ds.y.size(); ++i)
                        if (preds0[i] == test_ds.y[i]) ++c0;
                    auto mo = purify::select_eps_min_aux(m, x_adv, pcfg);
                    const auto preds1 = nn::predict(m, mo.x_pfy);
                    int c1 = 0;
                    for (size_t i = 0; i < test_ds.y.size(); ++i)
                        if (preds1[i] == test_ds.y[i]) ++c1;
                    const double before = static_cast<double>(c0) / test_ds.size();
                    const double after = static_cast<double>(c1) / test_ds.size();
                    os << fmt(beta) << "," << fmt(before) << "," << fmt(after) << "\n";
                    std::printf("beta=%s acc_before=%s acc_after=%s\n", fmt(beta).c_str(),
                                fmt(before).c_str(), fmt(after).c_str());
                }
                std::printf("beta sweep -> %s/beta_sweep.csv\n", s_out.c_str());
            }
            return 0;
        }

        if (rp->parsed()) {
            const auto cells = report::read_cells_csv(r_dir + "/cells.csv");
            const std::string table = markdown_table(cells);
            std::ofstream os(r_dir + "/report.md", std::ios::trunc);
            os << table;
            std::fputs(table.c_str(), stdout);
            return 0;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.kind() == ErrorKind::Config ? 2 : 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
