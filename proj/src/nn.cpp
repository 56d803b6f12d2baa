#include "soap/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace soap::nn {

std::string aux_kind_name(AuxKind k) {
    switch (k) {
        case AuxKind::DR: return "dr";
        case AuxKind::RP: return "rp";
        case AuxKind::LC: return "lc";
    }
    return "?";
}

AuxKind aux_kind_from_name(const std::string& s) {
    if (s == "dr" || s == "DR") return AuxKind::DR;
    if (s == "rp" || s == "RP") return AuxKind::RP;
    if (s == "lc" || s == "LC") return AuxKind::LC;
    raise(ErrorKind::Config, "unknown auxiliary task '" + s + "' (expected dr, rp or lc)");
}

LayerSpec LayerSpec::linear(int in, int out) {
    LayerSpec l;
    l.kind = Kind::Linear;
    l.in = in;
    l.out = out;
    return l;
}
LayerSpec LayerSpec::conv(int in_ch, int out_ch, int k, int stride, int pad) {
    LayerSpec l;
    l.kind = Kind::Conv2d;
    l.in = in_ch;
    l.out = out_ch;
    l.k = k;
    l.stride = stride;
    l.pad = pad;
    return l;
}
LayerSpec LayerSpec::convT(int in_ch, int out_ch, int k, int stride, int pad) {
    LayerSpec l;
    l.kind = Kind::ConvTranspose2d;
    l.in = in_ch;
    l.out = out_ch;
    l.k = k;
    l.stride = stride;
    l.pad = pad;
    return l;
}
LayerSpec LayerSpec::relu() {
    LayerSpec l;
    l.kind = Kind::ReLU;
    return l;
}
LayerSpec LayerSpec::sigmoid() {
    LayerSpec l;
    l.kind = Kind::Sigmoid;
    return l;
}
LayerSpec LayerSpec::maxpool(int k, int stride) {
    LayerSpec l;
    l.kind = Kind::MaxPool;
    l.k = k;
    l.stride = stride;
    return l;
}
LayerSpec LayerSpec::batch_norm(int features) {
    LayerSpec l;
    l.kind = Kind::BatchNorm;
    l.in = features;
    l.out = features;
    return l;
}
LayerSpec LayerSpec::dropout(float p) {
    LayerSpec l;
    l.kind = Kind::Dropout;
    l.p = p;
    return l;
}
LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = Kind::Flatten;
    return l;
}
LayerSpec LayerSpec::reshape(std::vector<int> target) {
    LayerSpec l;
    l.kind = Kind::Reshape;
    l.target_shape = std::move(target);
    return l;
}

std::string layer_kind_name(LayerSpec::Kind k) {
    switch (k) {
        case LayerSpec::Kind::Linear: return "linear";
        case LayerSpec::Kind::Conv2d: return "conv";
        case LayerSpec::Kind::ConvTranspose2d: return "convt";
        case LayerSpec::Kind::ReLU: return "relu";
        case LayerSpec::Kind::Sigmoid: return "sigmoid";
        case LayerSpec::Kind::MaxPool: return "maxpool";
        case LayerSpec::Kind::BatchNorm: return "bn";
        case LayerSpec::Kind::Dropout: return "dropout";
        case LayerSpec::Kind::Flatten: return "flatten";
        case LayerSpec::Kind::Reshape: return "reshape";
    }
    return "?";
}

std::vector<int> infer_output_shape(const std::vector<LayerSpec>& layers,
                                    const std::vector<int>& input,
                                    const std::string& section) {
    std::vector<int> s = input;
    for (size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const std::string where =
            section + " layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
        switch (l.kind) {
            case LayerSpec::Kind::Linear:
                require(s.size() == 1, ErrorKind::Shape,
                        where + ": expects a flat input, got " + shape_str(s));
                require(s[0] == l.in, ErrorKind::Shape,
                        where + ": expects " + std::to_string(l.in) + " features, got " +
                            shape_str(s));
                s = {l.out};
                break;
            case LayerSpec::Kind::Conv2d: {
                require(s.size() == 3, ErrorKind::Shape,
                        where + ": expects (C,H,W), got " + shape_str(s));
                require(s[0] == l.in, ErrorKind::Shape,
                        where + ": expects " + std::to_string(l.in) + " channels, got " +
                            shape_str(s));
                require(l.k <= s[1] + 2 * l.pad && l.k <= s[2] + 2 * l.pad, ErrorKind::Shape,
                        where + ": kernel does not fit input " + shape_str(s));
                const int oh = (s[1] + 2 * l.pad - l.k) / l.stride + 1;
                const int ow = (s[2] + 2 * l.pad - l.k) / l.stride + 1;
                s = {l.out, oh, ow};
                break;
            }
            case LayerSpec::Kind::ConvTranspose2d: {
                require(s.size() == 3, ErrorKind::Shape,
                        where + ": expects (C,H,W), got " + shape_str(s));
                require(s[0] == l.in, ErrorKind::Shape,
                        where + ": expects " + std::to_string(l.in) + " channels, got " +
                            shape_str(s));
                const int oh = (s[1] - 1) * l.stride - 2 * l.pad + l.k;
                const int ow = (s[2] - 1) * l.stride - 2 * l.pad + l.k;
                require(oh >= 1 && ow >= 1, ErrorKind::Shape, where + ": empty output");
                s = {l.out, oh, ow};
                break;
            }
            case LayerSpec::Kind::MaxPool: {
                require(s.size() == 3, ErrorKind::Shape,
                        where + ": expects (C,H,W), got " + shape_str(s));
                require(l.k <= s[1] && l.k <= s[2], ErrorKind::Shape,
                        where + ": window does not fit input " + shape_str(s));
                s = {s[0], (s[1] - l.k) / l.stride + 1, (s[2] - l.k) / l.stride + 1};
                break;
            }
            case LayerSpec::Kind::BatchNorm:
                require(s.size() == 1 || s.size() == 3, ErrorKind::Shape,
                        where + ": expects flat or (C,H,W) input, got " + shape_str(s));
                require(s[0] == l.in, ErrorKind::Shape,
                        where + ": expects " + std::to_string(l.in) + " features, got " +
                            shape_str(s));
                break;
            case LayerSpec::Kind::Dropout:
                require(l.p >= 0.0f && l.p < 1.0f, ErrorKind::Config,
                        where + ": dropout probability must be in [0,1)");
                break;
            case LayerSpec::Kind::ReLU:
            case LayerSpec::Kind::Sigmoid:
                break;
            case LayerSpec::Kind::Flatten:
                s = {static_cast<int>(shape_numel(s))};
                break;
            case LayerSpec::Kind::Reshape:
                require(shape_numel(l.target_shape) == shape_numel(s), ErrorKind::Shape,
                        where + ": cannot reshape " + shape_str(s) + " to " +
                            shape_str(l.target_shape));
                s = l.target_shape;
                break;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// presets
// ---------------------------------------------------------------------------

namespace {

std::vector<LayerSpec> dr_decoder_for(const std::string& arch,
                                      const std::vector<int>& input_shape, int z_dim) {
    std::vector<LayerSpec> d;
    if (arch == "fcn") {
        const int pixels = static_cast<int>(shape_numel(input_shape));
        d.push_back(LayerSpec::linear(z_dim, 256));
        d.push_back(LayerSpec::relu());
        d.push_back(LayerSpec::linear(256, pixels));
        d.push_back(LayerSpec::sigmoid());
        d.push_back(LayerSpec::reshape(input_shape));
        return d;
    }
    if (arch == "cnn") {
        // mirror of the conv stack (including its batch norms): FC to 7x7x32,
        // two stride-2 deconvs to 28x28
        d.push_back(LayerSpec::linear(z_dim, 32 * 7 * 7));
        d.push_back(LayerSpec::relu());
        d.push_back(LayerSpec::batch_norm(32 * 7 * 7));
        d.push_back(LayerSpec::reshape({32, 7, 7}));
        d.push_back(LayerSpec::convT(32, 32, 4, 2, 1));
        d.push_back(LayerSpec::relu());
        d.push_back(LayerSpec::batch_norm(32));
        d.push_back(LayerSpec::convT(32, input_shape[0], 4, 2, 1));
        d.push_back(LayerSpec::sigmoid());
        return d;
    }
    d.push_back(LayerSpec::linear(z_dim, 48 * 8 * 8));
    d.push_back(LayerSpec::relu());
    d.push_back(LayerSpec::batch_norm(48 * 8 * 8));
    d.push_back(LayerSpec::reshape({48, 8, 8}));
    d.push_back(LayerSpec::convT(48, 24, 4, 2, 1));
    d.push_back(LayerSpec::relu());
    d.push_back(LayerSpec::batch_norm(24));
    d.push_back(LayerSpec::convT(24, input_shape[0], 4, 2, 1));
    d.push_back(LayerSpec::sigmoid());
    return d;
}

}  // namespace

ArchitectureSpec preset(const std::string& name, const std::vector<int>& input_shape,
                        AuxKind aux) {
    require(input_shape.size() == 3, ErrorKind::Config,
            "preset: input shape must be (C,H,W), got " + shape_str(input_shape));
    ArchitectureSpec s;
    s.name = name;
    s.input_shape = input_shape;
    s.num_classes = 10;
    int z_dim = 0;
    if (name == "fcn") {
        const int pixels = static_cast<int>(shape_numel(input_shape));
        s.encoder = {LayerSpec::flatten(),        LayerSpec::linear(pixels, 256),
                     LayerSpec::relu(),           LayerSpec::dropout(0.5f),
                     LayerSpec::linear(256, 128), LayerSpec::relu(),
                     LayerSpec::dropout(0.5f)};
        s.classifier = {LayerSpec::linear(128, 10)};  // g is a linear classifier
        z_dim = 128;
    } else if (name == "cnn") {
        require(input_shape[1] == 28 && input_shape[2] == 28, ErrorKind::Config,
                "preset cnn: expects 28x28 inputs, got " + shape_str(input_shape));
        s.encoder = {LayerSpec::conv(input_shape[0], 32, 3, 2, 1),
                     LayerSpec::relu(),
                     LayerSpec::conv(32, 64, 3, 2, 1),
                     LayerSpec::relu(),
                     LayerSpec::batch_norm(64),
                     LayerSpec::flatten()};
        z_dim = 64 * 7 * 7;
        // g is a 2-layer MLP
        s.classifier = {LayerSpec::linear(z_dim, 128), LayerSpec::relu(),
                        LayerSpec::batch_norm(128), LayerSpec::linear(128, 10)};
    } else if (name == "cnn-cifar") {
        require(input_shape[1] == 32 && input_shape[2] == 32, ErrorKind::Config,
                "preset cnn-cifar: expects 32x32 inputs, got " + shape_str(input_shape));
        s.encoder = {LayerSpec::conv(input_shape[0], 32, 3, 2, 1),
                     LayerSpec::relu(),
                     LayerSpec::batch_norm(32),
                     LayerSpec::conv(32, 64, 3, 2, 1),
                     LayerSpec::relu(),
                     LayerSpec::batch_norm(64),
                     LayerSpec::conv(64, 96, 3, 2, 1),
                     LayerSpec::relu(),
                     LayerSpec::batch_norm(96),
                     LayerSpec::flatten()};
        z_dim = 96 * 4 * 4;
        s.classifier = {LayerSpec::linear(z_dim, 128), LayerSpec::relu(),
                        LayerSpec::batch_norm(128), LayerSpec::linear(128, 10)};
    } else {
        raise(ErrorKind::Config, "unknown architecture preset '" + name + "'");
    }
    switch (aux) {
        case AuxKind::DR: s.aux_head = dr_decoder_for(name, input_shape, z_dim); break;
        case AuxKind::RP: s.aux_head = {LayerSpec::linear(z_dim, 4)}; break;
        case AuxKind::LC: s.aux_head = {}; break;  // h is the exact classifier
    }
    return s;
}

// ---------------------------------------------------------------------------
// spec (de)serialization
// ---------------------------------------------------------------------------

namespace {

std::string layer_to_string(const LayerSpec& l) {
    std::ostringstream os;
    os << layer_kind_name(l.kind);
    switch (l.kind) {
        case LayerSpec::Kind::Linear: os << ":" << l.in << ":" << l.out; break;
        case LayerSpec::Kind::Conv2d:
        case LayerSpec::Kind::ConvTranspose2d:
            os << ":" << l.in << ":" << l.out << ":" << l.k << ":" << l.stride << ":" << l.pad;
            break;
        case LayerSpec::Kind::MaxPool: os << ":" << l.k << ":" << l.stride; break;
        case LayerSpec::Kind::BatchNorm: os << ":" << l.in; break;
        case LayerSpec::Kind::Dropout: {
            char buf[32];
            std::snprintf(buf, sizeof(buf), ":%.6g", static_cast<double>(l.p));
            os << buf;
            break;
        }
        case LayerSpec::Kind::Reshape:
            os << ":";
            for (size_t i = 0; i < l.target_shape.size(); ++i)
                os << (i ? "," : "") << l.target_shape[i];
            break;
        default: break;
    }
    return os.str();
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

LayerSpec layer_from_string(const std::string& text) {
    auto parts = split_on(text, ':');
    const std::string& kind = parts[0];
    auto geti = [&](size_t i) { return std::stoi(parts.at(i)); };
    if (kind == "linear") return LayerSpec::linear(geti(1), geti(2));
    if (kind == "conv") return LayerSpec::conv(geti(1), geti(2), geti(3), geti(4), geti(5));
    if (kind == "convt") return LayerSpec::convT(geti(1), geti(2), geti(3), geti(4), geti(5));
    if (kind == "relu") return LayerSpec::relu();
    if (kind == "sigmoid") return LayerSpec::sigmoid();
    if (kind == "maxpool") return LayerSpec::maxpool(geti(1), geti(2));
    if (kind == "bn") return LayerSpec::batch_norm(geti(1));
    if (kind == "dropout") return LayerSpec::dropout(std::stof(parts.at(1)));
    if (kind == "flatten") return LayerSpec::flatten();
    if (kind == "reshape") {
        std::vector<int> dims;
        for (const auto& d : split_on(parts.at(1), ',')) dims.push_back(std::stoi(d));
        return LayerSpec::reshape(dims);
    }
    raise(ErrorKind::Format, "unknown layer kind '" + kind + "' in spec");
}

std::string layers_to_string(const std::vector<LayerSpec>& ls) {
    std::string out;
    for (size_t i = 0; i < ls.size(); ++i) {
        if (i) out += "|";
        out += layer_to_string(ls[i]);
    }
    return out;
}

std::vector<LayerSpec> layers_from_string(const std::string& s) {
    std::vector<LayerSpec> out;
    if (s.empty()) return out;
    for (const auto& tok : split_on(s, '|')) out.push_back(layer_from_string(tok));
    return out;
}

}  // namespace

std::string serialize_spec(const ArchitectureSpec& spec) {
    std::ostringstream os;
    os << "name=" << spec.name << ";in=";
    for (size_t i = 0; i < spec.input_shape.size(); ++i)
        os << (i ? "," : "") << spec.input_shape[i];
    os << ";classes=" << spec.num_classes;
    os << ";enc=" << layers_to_string(spec.encoder);
    os << ";cls=" << layers_to_string(spec.classifier);
    os << ";aux=" << layers_to_string(spec.aux_head);
    return os.str();
}

ArchitectureSpec parse_spec(const std::string& text) {
    ArchitectureSpec spec;
    for (const auto& field : split_on(text, ';')) {
        const auto eq = field.find('=');
        require(eq != std::string::npos, ErrorKind::Format,
                "malformed architecture spec field '" + field + "'");
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        if (key == "name") {
            spec.name = val;
        } else if (key == "in") {
            spec.input_shape.clear();
            for (const auto& d : split_on(val, ',')) spec.input_shape.push_back(std::stoi(d));
        } else if (key == "classes") {
            spec.num_classes = std::stoi(val);
        } else if (key == "enc") {
            spec.encoder = layers_from_string(val);
        } else if (key == "cls") {
            spec.classifier = layers_from_string(val);
        } else if (key == "aux") {
            spec.aux_head = layers_from_string(val);
        } else {
            raise(ErrorKind::Format, "unknown architecture spec key '" + key + "'");
        }
    }
    return spec;
}

// ---------------------------------------------------------------------------
// build / forward
// ---------------------------------------------------------------------------

namespace {

LayerState init_layer(const LayerSpec& l, Rng rng) {
    LayerState st;
    switch (l.kind) {
        case LayerSpec::Kind::Linear: {
            const float limit = std::sqrt(6.0f / static_cast<float>(l.in));
            st.params.push_back(uniform_tensor({l.in, l.out}, -limit, limit, rng));
            st.params.push_back(Tensor::zeros({l.out}));
            break;
        }
        case LayerSpec::Kind::Conv2d: {
            const float limit = std::sqrt(6.0f / static_cast<float>(l.in * l.k * l.k));
            st.params.push_back(uniform_tensor({l.out, l.in, l.k, l.k}, -limit, limit, rng));
            st.params.push_back(Tensor::zeros({l.out}));
            break;
        }
        case LayerSpec::Kind::ConvTranspose2d: {
            const float limit = std::sqrt(6.0f / static_cast<float>(l.in * l.k * l.k));
            st.params.push_back(uniform_tensor({l.in, l.out, l.k, l.k}, -limit, limit, rng));
            st.params.push_back(Tensor::zeros({l.out}));
            break;
        }
        case LayerSpec::Kind::BatchNorm:
            st.params.push_back(Tensor::full({l.in}, 1.0f));
            st.params.push_back(Tensor::zeros({l.in}));
            st.state.push_back(Tensor::zeros({l.in}));       // running mean
            st.state.push_back(Tensor::full({l.in}, 1.0f));  // running var
            break;
        default: break;
    }
    return st;
}

std::vector<LayerState> init_section(const std::vector<LayerSpec>& specs, const Rng& root,
                                     int section_id) {
    std::vector<LayerState> out;
    out.reserve(specs.size());
    for (size_t i = 0; i < specs.size(); ++i)
        out.push_back(
            init_layer(specs[i], root.split(static_cast<uint64_t>(section_id) * 1000 + i)));
    return out;
}

}  // namespace

ModelBundle build(const ArchitectureSpec& spec, AuxKind aux, uint64_t seed) {
    require(!spec.input_shape.empty(), ErrorKind::Config, "build: missing input shape");
    if (aux == AuxKind::LC)
        require(spec.aux_head.empty(), ErrorKind::Config,
                "build: LC uses the classifier as its auxiliary device; aux_head must be empty");
    const auto z_shape =
        infer_output_shape(spec.encoder, spec.input_shape, spec.name + " encoder");
    const auto logits =
        infer_output_shape(spec.classifier, z_shape, spec.name + " classifier");
    require(logits == std::vector<int>{spec.num_classes}, ErrorKind::Shape,
            spec.name + " classifier: produces " + shape_str(logits) + ", expected [" +
                std::to_string(spec.num_classes) + "]");
    if (aux == AuxKind::DR) {
        const auto recon =
            infer_output_shape(spec.aux_head, z_shape, spec.name + " aux decoder");
        require(recon == spec.input_shape, ErrorKind::Shape,
                spec.name + " aux decoder: produces " + shape_str(recon) + ", expected " +
                    shape_str(spec.input_shape));
    } else if (aux == AuxKind::RP) {
        const auto rp = infer_output_shape(spec.aux_head, z_shape, spec.name + " aux head");
        require(rp == std::vector<int>{4}, ErrorKind::Shape,
                spec.name + " aux head: produces " + shape_str(rp) + ", expected [4]");
    }

    ModelBundle m;
    m.spec = spec;
    m.aux_kind = aux;
    m.mode = Mode::Train;
    const Rng root(seed);
    m.enc = init_section(spec.encoder, root, 0);
    m.cls = init_section(spec.classifier, root, 1);
    m.aux = init_section(spec.aux_head, root, 2);
    return m;
}

ad::Value bind_param(ad::Tape& tape, Tensor& t, ParamBinding* binding) {
    if (!binding) return tape.constant(t);
    auto it = binding->bound.find(&t);
    if (it != binding->bound.end()) return it->second;
    ad::Value v = tape.leaf(t);
    binding->bound.emplace(&t, v);
    return v;
}

namespace {

ad::Value apply_layers(ModelBundle& m, std::vector<LayerState>& states,
                       const std::vector<LayerSpec>& specs, ad::Tape& tape, ad::Value x,
                       Rng* rng, ParamBinding* binding) {
    const bool train = m.mode == Mode::Train;
    for (size_t i = 0; i < specs.size(); ++i) {
        const LayerSpec& l = specs[i];
        LayerState& st = states[i];
        switch (l.kind) {
            case LayerSpec::Kind::Linear: {
                ad::Value w = bind_param(tape, st.params[0], binding);
                ad::Value b = bind_param(tape, st.params[1], binding);
                x = ad::bias_add(ad::matmul(x, w), b);
                break;
            }
            case LayerSpec::Kind::Conv2d: {
                ad::Value w = bind_param(tape, st.params[0], binding);
                ad::Value b = bind_param(tape, st.params[1], binding);
                x = ad::conv2d(x, w, b, l.stride, l.pad);
                break;
            }
            case LayerSpec::Kind::ConvTranspose2d: {
                ad::Value w = bind_param(tape, st.params[0], binding);
                ad::Value b = bind_param(tape, st.params[1], binding);
                x = ad::conv_transpose2d(x, w, b, l.stride, l.pad);
                break;
            }
            case LayerSpec::Kind::ReLU: x = ad::relu(x); break;
            case LayerSpec::Kind::Sigmoid: x = ad::sigmoid(x); break;
            case LayerSpec::Kind::MaxPool: x = ad::maxpool2d(x, l.k, l.stride); break;
            case LayerSpec::Kind::BatchNorm: {
                ad::Value g = bind_param(tape, st.params[0], binding);
                ad::Value b = bind_param(tape, st.params[1], binding);
                x = ad::batch_norm(x, g, b, st.state[0], st.state[1], train, m.bn_momentum,
                                   m.bn_eps);
                break;
            }
            case LayerSpec::Kind::Dropout:
                if (train) {
                    require(rng != nullptr, ErrorKind::Invalid,
                            "train-mode forward through dropout requires an rng");
                    x = ad::dropout(x, l.p, *rng, true);
                }
                break;
            case LayerSpec::Kind::Flatten: {
                const int n = x.shape()[0];
                x = ad::reshape(x, {n, static_cast<int>(x.tensor().numel() / n)});
                break;
            }
            case LayerSpec::Kind::Reshape: {
                std::vector<int> target = {x.shape()[0]};
                target.insert(target.end(), l.target_shape.begin(), l.target_shape.end());
                x = ad::reshape(x, target);
                break;
            }
        }
    }
    return x;
}

void check_batch_input(const ModelBundle& m, const ad::Value& x, const char* what) {
    const auto& xs = x.shape();
    std::vector<int> expect = {xs.empty() ? 0 : xs[0]};
    expect.insert(expect.end(), m.spec.input_shape.begin(), m.spec.input_shape.end());
    require(xs.size() == m.spec.input_shape.size() + 1 && xs == expect && xs[0] >= 1,
            ErrorKind::Shape,
            std::string(what) + ": input shape " + shape_str(xs) + " does not match (N," +
                shape_str(m.spec.input_shape) + ")");
}

}  // namespace

ad::Value encode(ModelBundle& m, ad::Tape& tape, ad::Value x, Rng* rng, ParamBinding* binding) {
    check_batch_input(m, x, "encode");
    return apply_layers(m, m.enc, m.spec.encoder, tape, x, rng, binding);
}

ad::Value classify(ModelBundle& m, ad::Tape& tape, ad::Value z, Rng* rng,
                   ParamBinding* binding) {
    return apply_layers(m, m.cls, m.spec.classifier, tape, z, rng, binding);
}

ad::Value aux_forward(ModelBundle& m, ad::Tape& tape, ad::Value z_or_x, Rng* rng,
                      ParamBinding* binding) {
    if (m.aux_kind == AuxKind::LC) {
        // h is the exact classifier
        return classify(m, tape, encode(m, tape, z_or_x, rng, binding), rng, binding);
    }
    require(!m.spec.aux_head.empty(), ErrorKind::Invalid,
            "aux_forward: model has no auxiliary head");
    return apply_layers(m, m.aux, m.spec.aux_head, tape, z_or_x, rng, binding);
}

Tensor forward_logits(ModelBundle& m, const Tensor& x) {
    require(m.is_eval(), ErrorKind::Invalid, "forward_logits: model must be in eval mode");
    ad::Tape tape;
    ad::Value xv = tape.constant(x);
    ad::Value logits = classify(m, tape, encode(m, tape, xv));
    return logits.tensor();
}

std::vector<int> predict(ModelBundle& m, const Tensor& x) {
    const Tensor logits = forward_logits(m, x);
    const int n = logits.shape[0], c = logits.shape[1];
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* row = logits.ptr() + static_cast<int64_t>(i) * c;
        int best = 0;
        for (int j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

namespace {

void collect_section(std::vector<ParamRef>& out, std::vector<LayerState>& states,
                     const std::string& prefix, bool params) {
    static const char* kParamNames[] = {"w", "b"};
    static const char* kStateNames[] = {"rm", "rv"};
    for (size_t i = 0; i < states.size(); ++i) {
        auto& vec = params ? states[i].params : states[i].state;
        for (size_t j = 0; j < vec.size(); ++j) {
            const char* suffix = params ? kParamNames[j] : kStateNames[j];
            out.push_back({prefix + "." + std::to_string(i) + "." + suffix, &vec[j]});
        }
    }
}

}  // namespace

std::vector<ParamRef> named_parameters(ModelBundle& m) {
    std::vector<ParamRef> out;
    collect_section(out, m.enc, "enc", true);
    collect_section(out, m.cls, "cls", true);
    collect_section(out, m.aux, "aux", true);
    return out;
}

std::vector<ParamRef> named_state(ModelBundle& m) {
    std::vector<ParamRef> out;
    collect_section(out, m.enc, "enc", false);
    collect_section(out, m.cls, "cls", false);
    collect_section(out, m.aux, "aux", false);
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'O', 'A', 'P'};
constexpr uint16_t kVersion = 1;

void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void put_u16(std::ostream& os, uint16_t v) {
    const uint8_t b[2] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>(v >> 8)};
    put_bytes(os, b, 2);
}
void put_u32(std::ostream& os, uint32_t v) {
    const uint8_t b[4] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>((v >> 8) & 0xff),
                          static_cast<uint8_t>((v >> 16) & 0xff),
                          static_cast<uint8_t>(v >> 24)};
    put_bytes(os, b, 4);
}
void put_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

struct Reader {
    std::ifstream in;
    int64_t offset = 0;
    explicit Reader(const std::string& path) : in(path, std::ios::binary) {
        require(in.good(), ErrorKind::Io, "cannot open '" + path + "'");
    }
    void read(void* p, size_t n, const char* what) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        require(static_cast<size_t>(in.gcount()) == n, ErrorKind::Format,
                std::string("truncated file while reading ") + what + " at offset " +
                    std::to_string(offset));
        offset += static_cast<int64_t>(n);
    }
    uint16_t u16(const char* what) {
        uint8_t b[2];
        read(b, 2, what);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
    uint32_t u32(const char* what) {
        uint8_t b[4];
        read(b, 4, what);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
};

}  // namespace

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  uint8_t aux_byte) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    put_bytes(os, kMagic, 4);
    put_u16(os, kVersion);
    put_bytes(os, &aux_byte, 1);
    put_u32(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        require(name.size() <= 0xffff, ErrorKind::Invalid, "tensor name too long");
        put_u16(os, static_cast<uint16_t>(name.size()));
        put_bytes(os, name.data(), name.size());
        const uint8_t rank = static_cast<uint8_t>(t.shape.size());
        put_bytes(os, &rank, 1);
        for (int d : t.shape) put_u32(os, static_cast<uint32_t>(d));
        for (float f : t.data) put_f32(os, f);
    }
    require(os.good(), ErrorKind::Io, "write failed for '" + path + "'");
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path,
                                                         uint8_t* aux_byte_out) {
    Reader r(path);
    char magic[4];
    r.read(magic, 4, "magic");
    require(std::memcmp(magic, kMagic, 4) == 0, ErrorKind::Format,
            "'" + path + "': bad magic bytes (not a SOAP container)");
    const uint16_t version = r.u16("version");
    require(version == kVersion, ErrorKind::Format,
            "'" + path + "': unsupported container version " + std::to_string(version));
    uint8_t aux_byte;
    r.read(&aux_byte, 1, "aux kind");
    if (aux_byte_out) *aux_byte_out = aux_byte;
    const uint32_t count = r.u32("tensor count");
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16("name length");
        std::string name(name_len, '\0');
        if (name_len) r.read(name.data(), name_len, "name");
        uint8_t rank;
        r.read(&rank, 1, "rank");
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(r.u32("dims"));
        const int64_t n = shape_numel(shape);
        Tensor t = Tensor::zeros(shape);
        for (int64_t j = 0; j < n; ++j) {
            const uint32_t bits = r.u32("tensor data");
            float f;
            std::memcpy(&f, &bits, 4);
            t.data[static_cast<size_t>(j)] = f;
        }
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

void save_checkpoint(const ModelBundle& m, const std::string& path) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    tensors.emplace_back("__spec__=" + serialize_spec(m.spec), Tensor::zeros({0}));
    auto& mm = const_cast<ModelBundle&>(m);
    for (const auto& p : named_parameters(mm)) tensors.emplace_back(p.name, *p.tensor);
    for (const auto& p : named_state(mm)) tensors.emplace_back(p.name, *p.tensor);
    save_tensors(path, tensors, static_cast<uint8_t>(m.aux_kind));
}

ModelBundle load_checkpoint(const std::string& path) {
    uint8_t aux_byte = 0;
    auto tensors = load_tensors(path, &aux_byte);
    require(aux_byte <= 2, ErrorKind::Format,
            "'" + path + "': invalid aux kind byte " + std::to_string(aux_byte));
    std::string spec_text;
    for (const auto& [name, t] : tensors) {
        if (name.rfind("__spec__=", 0) == 0) {
            spec_text = name.substr(9);
            break;
        }
    }
    require(!spec_text.empty(), ErrorKind::Format,
            "'" + path + "': missing architecture description");
    ModelBundle m = build(parse_spec(spec_text), static_cast<AuxKind>(aux_byte), 0);
    auto fill = [&](const std::vector<ParamRef>& refs) {
        for (const auto& ref : refs) {
            bool found = false;
            for (const auto& [name, t] : tensors) {
                if (name != ref.name) continue;
                require(t.shape == ref.tensor->shape, ErrorKind::Format,
                        "'" + path + "': tensor '" + name + "' has shape " + shape_str(t.shape) +
                            ", model expects " + shape_str(ref.tensor->shape));
                *ref.tensor = t;
                found = true;
                break;
            }
            require(found, ErrorKind::Format, "'" + path + "': missing tensor '" + ref.name + "'");
        }
    };
    fill(named_parameters(m));
    fill(named_state(m));
    return m;
}

}  // namespace soap::nn
