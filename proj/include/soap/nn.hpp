#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "soap/autodiff.hpp"
#include "soap/tensor.hpp"

namespace soap::nn {

enum class AuxKind : uint8_t { DR = 0, RP = 1, LC = 2 };
enum class Mode { Train, Eval };

std::string aux_kind_name(AuxKind k);
AuxKind aux_kind_from_name(const std::string& s);

struct LayerSpec {
    enum class Kind {
        Linear,
        Conv2d,
        ConvTranspose2d,
        ReLU,
        Sigmoid,
        MaxPool,
        BatchNorm,
        Dropout,
        Flatten,
        Reshape,
    };
    Kind kind = Kind::ReLU;
    int in = 0, out = 0;             // features (linear/bn) or channels (conv)
    int k = 0, stride = 1, pad = 0;  // conv / convT / maxpool
    float p = 0.0f;                  // dropout probability
    std::vector<int> target_shape;   // reshape target (per sample)

    static LayerSpec linear(int in, int out);
    static LayerSpec conv(int in_ch, int out_ch, int k, int stride, int pad);
    static LayerSpec convT(int in_ch, int out_ch, int k, int stride, int pad);
    static LayerSpec relu();
    static LayerSpec sigmoid();
    static LayerSpec maxpool(int k, int stride);
    static LayerSpec batch_norm(int features);
    static LayerSpec dropout(float p);
    static LayerSpec flatten();
    static LayerSpec reshape(std::vector<int> target);
};

std::string layer_kind_name(LayerSpec::Kind k);

// Named layer sequences with the encoder/classifier split point made explicit;
// aux_head is the DR decoder or the RP linear head, and stays empty for LC.
struct ArchitectureSpec {
    std::string name = "custom";
    std::vector<int> input_shape;  // per sample, (C,H,W)
    int num_classes = 10;
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> classifier;
    std::vector<LayerSpec> aux_head;
};

// Shipped presets: "fcn", "cnn", "cnn-cifar". input_shape is (C,H,W).
ArchitectureSpec preset(const std::string& name, const std::vector<int>& input_shape,
                        AuxKind aux);

std::string serialize_spec(const ArchitectureSpec& spec);
ArchitectureSpec parse_spec(const std::string& text);

// Walks the layer chain on a per-sample shape, validating conformance; errors
// name the section and offending layer.
std::vector<int> infer_output_shape(const std::vector<LayerSpec>& layers,
                                    const std::vector<int>& input,
                                    const std::string& section);

struct LayerState {
    std::vector<Tensor> params;  // linear/conv: {w,b}; bn: {gamma,beta}
    std::vector<Tensor> state;   // bn: {run_mean, run_var}
};

struct ModelBundle {
    ArchitectureSpec spec;
    AuxKind aux_kind = AuxKind::DR;
    Mode mode = Mode::Train;
    std::vector<LayerState> enc, cls, aux;
    float bn_momentum = 0.9f;
    float bn_eps = 1e-5f;

    bool is_eval() const { return mode == Mode::Eval; }
};

ModelBundle build(const ArchitectureSpec& spec, AuxKind aux, uint64_t seed);

// Maps parameter tensors to their tape leaves for one forward pass. When a
// binding is supplied, parameters are tracked leaves (shared across repeated
// uses, so gradients accumulate on one node); without one they enter the tape
// as constants and backward skips them.
struct ParamBinding {
    std::map<const Tensor*, ad::Value> bound;
};
ad::Value bind_param(ad::Tape& tape, Tensor& t, ParamBinding* binding);

ad::Value encode(ModelBundle& m, ad::Tape& tape, ad::Value x, Rng* rng = nullptr,
                 ParamBinding* binding = nullptr);
ad::Value classify(ModelBundle& m, ad::Tape& tape, ad::Value z, Rng* rng = nullptr,
                   ParamBinding* binding = nullptr);
// DR/RP consume the representation z; LC delegates to classify(encode(x)).
ad::Value aux_forward(ModelBundle& m, ad::Tape& tape, ad::Value z_or_x, Rng* rng = nullptr,
                      ParamBinding* binding = nullptr);

// Eval-mode batch logits / predictions (pure function of params and x).
Tensor forward_logits(ModelBundle& m, const Tensor& x);
std::vector<int> predict(ModelBundle& m, const Tensor& x);

struct ParamRef {
    std::string name;
    Tensor* tensor;
};
std::vector<ParamRef> named_parameters(ModelBundle& m);  // trainable
std::vector<ParamRef> named_state(ModelBundle& m);       // bn running stats

// Checkpoint container: magic "SOAP", u16 version, u8 aux_kind, u32 tensor
// count, then per tensor u16 name length + name, u8 rank, u32 dims (LE),
// f32 data (LE). Also reused for generic tensor sets (adversarial sets).
void save_checkpoint(const ModelBundle& m, const std::string& path);
ModelBundle load_checkpoint(const std::string& path);

inline constexpr uint8_t kNotAModel = 255;
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  uint8_t aux_byte = kNotAModel);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path,
                                                         uint8_t* aux_byte_out = nullptr);

}  // namespace soap::nn
