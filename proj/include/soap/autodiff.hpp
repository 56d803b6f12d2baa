#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "soap/kernels.hpp"
#include "soap/tensor.hpp"

namespace soap::ad {

class Tape;

// Lightweight handle into a tape.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& tensor() const;
    const std::vector<int>& shape() const;
};

// Records the forward graph in creation order; replaying it in reverse visits
// every node after all of its consumers. One tape per forward pass; a tape is
// single-threaded (parallelism lives inside the kernels).
class Tape {
public:
    Value leaf(Tensor t);       // gradient tracked
    Value constant(Tensor t);   // gradient not tracked

    // root must be scalar-valued; accumulates grads for all reachable nodes
    // that require them.
    void backward(Value root);

    const Tensor& value(Value v) const;
    const Tensor& grad(Value v) const;
    bool has_grad(Value v) const;
    bool requires_grad(Value v) const;
    size_t num_nodes() const { return nodes_.size(); }

    // --- op-implementation interface ---
    using BackwardFn = std::function<void(Tape&, int self_id)>;
    int add_node(Tensor value, std::vector<int> parents, BackwardFn bw);
    Tensor& grad_buffer(int id);  // allocates (zeroed) on first use
    const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool node_requires_grad(int id) const {
        return nodes_[static_cast<size_t>(id)].requires_grad;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_present = false;
        std::vector<int> parents;
        BackwardFn backward_fn;
    };
    std::vector<Node> nodes_;
    friend struct Value;
};

// Elementwise / algebra
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scalar_mul(Value a, float s);
Value relu(Value x);
Value sigmoid(Value x);
Value clamp(Value x, float lo, float hi);
Value reshape(Value x, std::vector<int> new_shape);
Value sum(Value x);                     // scalar
Value mean(Value x);                    // scalar
Value sum_rows(Value x);                // (N,D) -> (N)
Value matmul(Value a, Value b);         // (M,K)x(K,N)
Value bias_add(Value x, Value b);       // (N,F)+(F) or (N,C,H,W)+(C)

// Structured ops
Value conv2d(Value x, Value w, Value b, int stride, int pad);
Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad);
Value maxpool2d(Value x, int k, int stride);
Value dropout_with_mask(Value x, Tensor mask);  // mask holds 0 or 1/(1-p)
Value dropout(Value x, float p, Rng& rng, bool train);
Value batch_norm(Value x, Value gamma, Value beta, Tensor& run_mean, Tensor& run_var,
                 bool train, float momentum, float eps);
Value softmax(Value logits);       // rowwise on (N,C)
Value log_softmax(Value logits);   // rowwise on (N,C)
Value gather_cols(Value m, std::vector<int> idx);          // (N,C),(N) -> (N)
Value slice_rows(Value x, int begin, int count);
Value concat_rows(const std::vector<Value>& parts);
Value fold_sum_blocks(Value v, int blocks);  // (B*N) -> (N), out[i] = sum_b in[b*N+i]
// Per-sample spatial gather: out[n, j] = x[n, map[j]]; map indexes the
// per-sample element block (C*H*W). Used for rotations, flips and shifts.
Value permute_within_sample(Value x, std::shared_ptr<const std::vector<int>> map,
                            std::vector<int> out_shape);

// Non-differentiated utilities (leaves with respect to the tape)
Tensor sign(const Tensor& t);
// Central finite differences; `fn` is evaluated at f32-representable points and
// the difference quotient is formed in f64 with the actual (post-rounding) step.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& fn,
                              const Tensor& at, float step);

}  // namespace soap::ad
