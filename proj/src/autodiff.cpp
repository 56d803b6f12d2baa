#include "soap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace soap::ad {

namespace {

void check_same_tape(Value a, Value b, const char* op) {
    require(a.valid() && b.valid() && a.tape == b.tape, ErrorKind::Invalid,
            std::string(op) + ": values must come from the same tape");
}

void check_same_shape(Value a, Value b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::Shape,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

}  // namespace

const Tensor& Value::tensor() const { return tape->value(*this); }
const std::vector<int>& Value::shape() const { return tape->value(*this).shape; }

Value Tape::leaf(Tensor t) {
    const int id = add_node(std::move(t), {}, nullptr);
    nodes_[static_cast<size_t>(id)].requires_grad = true;
    return Value{this, id};
}

Value Tape::constant(Tensor t) {
    const int id = add_node(std::move(t), {}, nullptr);
    nodes_[static_cast<size_t>(id)].requires_grad = false;
    return Value{this, id};
}

int Tape::add_node(Tensor value, std::vector<int> parents, BackwardFn bw) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward_fn = std::move(bw);
    n.requires_grad = false;
    for (int p : n.parents)
        if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_buffer(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_present) {
        n.grad = Tensor::zeros(n.value.shape);
        n.grad_present = true;
    }
    return n.grad;
}

const Tensor& Tape::value(Value v) const { return nodes_[static_cast<size_t>(v.id)].value; }

const Tensor& Tape::grad(Value v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    require(n.grad_present, ErrorKind::Invalid, "grad: no gradient present for this node");
    return n.grad;
}

bool Tape::has_grad(Value v) const { return nodes_[static_cast<size_t>(v.id)].grad_present; }

bool Tape::requires_grad(Value v) const {
    return nodes_[static_cast<size_t>(v.id)].requires_grad;
}

void Tape::backward(Value root) {
    require(root.valid() && root.tape == this, ErrorKind::Invalid,
            "backward: root does not belong to this tape");
    require(root.tensor().numel() == 1, ErrorKind::Invalid,
            "backward: root must be scalar-valued, got shape " + shape_str(root.shape()));
    grad_buffer(root.id).data[0] = 1.0f;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_present || !n.backward_fn || !n.requires_grad) continue;
        n.backward_fn(*this, id);
    }
}

// ---------------------------------------------------------------------------
// elementwise / algebra
// ---------------------------------------------------------------------------

Value add(Value a, Value b) {
    check_same_tape(a, b, "add");
    check_same_shape(a, b, "add");
    Tape& t = *a.tape;
    Tensor out = Tensor::zeros(a.shape());
    kernels::add(a.tensor().ptr(), b.tensor().ptr(), out.ptr(), out.numel());
    const int pa = a.id, pb = b.id;
    const int id = t.add_node(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(pa)) kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(pa).ptr(), dy.numel());
        if (tp.node_requires_grad(pb)) kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(pb).ptr(), dy.numel());
    });
    return Value{&t, id};
}

Value sub(Value a, Value b) {
    check_same_tape(a, b, "sub");
    check_same_shape(a, b, "sub");
    Tape& t = *a.tape;
    Tensor out = Tensor::zeros(a.shape());
    kernels::sub(a.tensor().ptr(), b.tensor().ptr(), out.ptr(), out.numel());
    const int pa = a.id, pb = b.id;
    const int id = t.add_node(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(pa)) kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(pa).ptr(), dy.numel());
        if (tp.node_requires_grad(pb)) kernels::axpy(-1.0f, dy.ptr(), tp.grad_buffer(pb).ptr(), dy.numel());
    });
    return Value{&t, id};
}

Value mul(Value a, Value b) {
    check_same_tape(a, b, "mul");
    check_same_shape(a, b, "mul");
    Tape& t = *a.tape;
    Tensor out = Tensor::zeros(a.shape());
    kernels::mul(a.tensor().ptr(), b.tensor().ptr(), out.ptr(), out.numel());
    const int pa = a.id, pb = b.id;
    const int id = t.add_node(std::move(out), {pa, pb}, [pa, pb](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        const int64_t n = dy.numel();
        if (tp.node_requires_grad(pa)) {
            const float* bv = tp.value_of(pb).ptr();
            float* da = tp.grad_buffer(pa).ptr();
            const float* g = dy.ptr();
            for (int64_t i = 0; i < n; ++i) da[i] += g[i] * bv[i];
        }
        if (tp.node_requires_grad(pb)) {
            const float* av = tp.value_of(pa).ptr();
            float* db = tp.grad_buffer(pb).ptr();
            const float* g = dy.ptr();
            for (int64_t i = 0; i < n; ++i) db[i] += g[i] * av[i];
        }
    });
    return Value{&t, id};
}

Value scalar_mul(Value a, float s) {
    Tape& t = *a.tape;
    Tensor out = Tensor::zeros(a.shape());
    kernels::scale(a.tensor().ptr(), out.ptr(), s, out.numel());
    const int pa = a.id;
    const int id = t.add_node(std::move(out), {pa}, [pa, s](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(pa)) kernels::axpy(s, dy.ptr(), tp.grad_buffer(pa).ptr(), dy.numel());
    });
    return Value{&t, id};
}

Value relu(Value x) {
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros(x.shape());
    kernels::relu_forward(x.tensor().ptr(), out.ptr(), out.numel());
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::relu_backward(tp.value_of(px).ptr(), dy.ptr(), tp.grad_buffer(px).ptr(),
                               dy.numel());
    });
    return Value{&t, id};
}

Value sigmoid(Value x) {
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros(x.shape());
    kernels::sigmoid_forward(x.tensor().ptr(), out.ptr(), out.numel());
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::sigmoid_backward(tp.value_of(self).ptr(), dy.ptr(), tp.grad_buffer(px).ptr(),
                                  dy.numel());
    });
    return Value{&t, id};
}

Value clamp(Value x, float lo, float hi) {
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros(x.shape());
    kernels::clamp_forward(x.tensor().ptr(), out.ptr(), out.numel(), lo, hi);
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px, lo, hi](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::clamp_backward(tp.value_of(px).ptr(), dy.ptr(), tp.grad_buffer(px).ptr(),
                                dy.numel(), lo, hi);
    });
    return Value{&t, id};
}

Value reshape(Value x, std::vector<int> new_shape) {
    require(shape_numel(new_shape) == x.tensor().numel(), ErrorKind::Shape,
            "reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(new_shape));
    Tape& t = *x.tape;
    Tensor out(new_shape, x.tensor().data);
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(px).ptr(), dy.numel());
    });
    return Value{&t, id};
}

Value sum(Value x) {
    Tape& t = *x.tape;
    Tensor out = Tensor::scalar(static_cast<float>(kernels::sum_f64(x.tensor().ptr(), x.tensor().numel())));
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const float g = tp.grad_buffer(self).data[0];
        Tensor& dx = tp.grad_buffer(px);
        for (auto& v : dx.data) v += g;
    });
    return Value{&t, id};
}

Value mean(Value x) {
    Tape& t = *x.tape;
    const int64_t n = x.tensor().numel();
    Tensor out = Tensor::scalar(
        static_cast<float>(kernels::sum_f64(x.tensor().ptr(), n) / static_cast<double>(n)));
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px, n](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const float g = tp.grad_buffer(self).data[0] / static_cast<float>(n);
        Tensor& dx = tp.grad_buffer(px);
        for (auto& v : dx.data) v += g;
    });
    return Value{&t, id};
}

Value sum_rows(Value x) {
    require(x.tensor().rank() == 2, ErrorKind::Shape,
            "sum_rows: expected rank-2 input, got " + shape_str(x.shape()));
    Tape& t = *x.tape;
    const int n = x.shape()[0], d = x.shape()[1];
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i)
        out.data[static_cast<size_t>(i)] = static_cast<float>(
            kernels::sum_f64(x.tensor().ptr() + static_cast<int64_t>(i) * d, d));
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px, n, d](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        float* dx = tp.grad_buffer(px).ptr();
        for (int i = 0; i < n; ++i) {
            const float g = dy.data[static_cast<size_t>(i)];
            float* row = dx + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j) row[j] += g;
        }
    });
    return Value{&t, id};
}

Value matmul(Value a, Value b) {
    check_same_tape(a, b, "matmul");
    require(a.tensor().rank() == 2 && b.tensor().rank() == 2 && a.shape()[1] == b.shape()[0],
            ErrorKind::Shape,
            "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tape& t = *a.tape;
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = Tensor::zeros({m, n});
    kernels::gemm_nn(a.tensor().ptr(), b.tensor().ptr(), out.ptr(), m, k, n);
    const int pa = a.id, pb = b.id;
    const int id = t.add_node(std::move(out), {pa, pb}, [pa, pb, m, k, n](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(pa)) {
            std::vector<float> scratch(static_cast<size_t>(m) * k);
            kernels::gemm_nt(dy.ptr(), tp.value_of(pb).ptr(), scratch.data(), m, n, k);
            kernels::axpy(1.0f, scratch.data(), tp.grad_buffer(pa).ptr(),
                          static_cast<int64_t>(m) * k);
        }
        if (tp.node_requires_grad(pb)) {
            std::vector<float> at(static_cast<size_t>(k) * m);
            kernels::transpose(tp.value_of(pa).ptr(), at.data(), m, k);
            std::vector<float> scratch(static_cast<size_t>(k) * n);
            kernels::gemm_nn(at.data(), dy.ptr(), scratch.data(), k, m, n);
            kernels::axpy(1.0f, scratch.data(), tp.grad_buffer(pb).ptr(),
                          static_cast<int64_t>(k) * n);
        }
    });
    return Value{&t, id};
}

Value bias_add(Value x, Value b) {
    check_same_tape(x, b, "bias_add");
    const auto& xs = x.shape();
    require(b.tensor().rank() == 1, ErrorKind::Shape,
            "bias_add: bias must be rank-1, got " + shape_str(b.shape()));
    int channels, inner;
    if (xs.size() == 2) {
        channels = xs[1];
        inner = 1;
    } else if (xs.size() == 4) {
        channels = xs[1];
        inner = xs[2] * xs[3];
    } else {
        raise(ErrorKind::Shape, "bias_add: expected (N,F) or (N,C,H,W), got " + shape_str(xs));
    }
    require(b.shape()[0] == channels, ErrorKind::Shape,
            "bias_add: bias " + shape_str(b.shape()) + " does not match input " + shape_str(xs));
    Tape& t = *x.tape;
    const int rows = xs[0];
    Tensor out = x.tensor();
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < channels; ++c) {
            float* p = out.ptr() + (static_cast<int64_t>(r) * channels + c) * inner;
            const float bv = b.tensor().data[static_cast<size_t>(c)];
            for (int i = 0; i < inner; ++i) p[i] += bv;
        }
    }
    const int px = x.id, pb = b.id;
    const int id = t.add_node(std::move(out), {px, pb},
                              [px, pb, rows, channels, inner](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(px))
            kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(px).ptr(), dy.numel());
        if (tp.node_requires_grad(pb)) {
            float* db = tp.grad_buffer(pb).ptr();
            for (int c = 0; c < channels; ++c) {
                double acc = 0.0;
                for (int r = 0; r < rows; ++r) {
                    const float* p = dy.ptr() + (static_cast<int64_t>(r) * channels + c) * inner;
                    for (int i = 0; i < inner; ++i) acc += p[i];
                }
                db[c] += static_cast<float>(acc);
            }
        }
    });
    return Value{&t, id};
}

// ---------------------------------------------------------------------------
// structured ops
// ---------------------------------------------------------------------------

Value conv2d(Value x, Value w, Value b, int stride, int pad) {
    check_same_tape(x, w, "conv2d");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4, ErrorKind::Shape, "conv2d: input must be (N,C,H,W), got " + shape_str(xs));
    require(ws.size() == 4, ErrorKind::Shape, "conv2d: weight must be (OC,C,KH,KW), got " + shape_str(ws));
    require(ws[1] == xs[1], ErrorKind::Shape,
            "conv2d: channel mismatch, input " + shape_str(xs) + " vs weight " + shape_str(ws));
    const auto s = kernels::ConvShape::make(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3],
                                            stride, pad);
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros({s.n, s.oc, s.oh, s.ow});
    const bool keep_cols = t.requires_grad(w);
    auto cols = keep_cols ? std::make_shared<std::vector<float>>(
                                static_cast<size_t>(s.n) * s.ckk() * s.patches())
                          : nullptr;
    const float* bias = b.valid() ? b.tensor().ptr() : nullptr;
    if (b.valid()) {
        require(b.shape() == std::vector<int>{s.oc}, ErrorKind::Shape,
                "conv2d: bias " + shape_str(b.shape()) + " does not match out channels");
    }
    kernels::conv2d_forward(x.tensor().ptr(), w.tensor().ptr(), bias, out.ptr(), s,
                            cols ? cols->data() : nullptr);
    std::vector<int> parents = {x.id, w.id};
    if (b.valid()) parents.push_back(b.id);
    const int px = x.id, pw = w.id, pb = b.valid() ? b.id : -1;
    const int id = t.add_node(std::move(out), std::move(parents),
                              [px, pw, pb, s, cols](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        if (tp.node_requires_grad(px))
            kernels::conv2d_dx(dy.ptr(), tp.value_of(pw).ptr(), tp.grad_buffer(px).ptr(), s);
        if (tp.node_requires_grad(pw))
            kernels::conv2d_dw(dy.ptr(), cols->data(), tp.grad_buffer(pw).ptr(), s);
        if (pb >= 0 && tp.node_requires_grad(pb))
            kernels::conv2d_db(dy.ptr(), tp.grad_buffer(pb).ptr(), s);
    });
    return Value{&t, id};
}

Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad) {
    check_same_tape(x, w, "conv_transpose2d");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    require(xs.size() == 4, ErrorKind::Shape,
            "conv_transpose2d: input must be (N,IC,H,W), got " + shape_str(xs));
    require(ws.size() == 4 && ws[0] == xs[1], ErrorKind::Shape,
            "conv_transpose2d: weight must be (IC,OC,KH,KW) matching input " + shape_str(xs) +
                ", got " + shape_str(ws));
    const int oc = ws[1], kh = ws[2], kw = ws[3];
    const int oh = (xs[2] - 1) * stride - 2 * pad + kh;
    const int ow = (xs[3] - 1) * stride - 2 * pad + kw;
    require(oh >= 1 && ow >= 1, ErrorKind::Shape, "conv_transpose2d: empty output");
    // Adjoint convolution: maps our output space back to our input space.
    const auto s = kernels::ConvShape::make(xs[0], oc, oh, ow, xs[1], kh, kw, stride, pad);
    require(s.oh == xs[2] && s.ow == xs[3], ErrorKind::Shape,
            "conv_transpose2d: inconsistent geometry");
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros({xs[0], oc, oh, ow});
    kernels::conv2d_dx(x.tensor().ptr(), w.tensor().ptr(), out.ptr(), s);
    if (b.valid()) {
        require(b.shape() == std::vector<int>{oc}, ErrorKind::Shape,
                "conv_transpose2d: bias " + shape_str(b.shape()) + " does not match out channels");
        const int inner = oh * ow;
        for (int nn = 0; nn < xs[0]; ++nn)
            for (int c = 0; c < oc; ++c) {
                float* p = out.ptr() + (static_cast<int64_t>(nn) * oc + c) * inner;
                const float bv = b.tensor().data[static_cast<size_t>(c)];
                for (int i = 0; i < inner; ++i) p[i] += bv;
            }
    }
    std::vector<int> parents = {x.id, w.id};
    if (b.valid()) parents.push_back(b.id);
    const int px = x.id, pw = w.id, pb = b.valid() ? b.id : -1;
    const int n_batch = xs[0];
    const int id = t.add_node(std::move(out), std::move(parents),
                              [px, pw, pb, s, n_batch, oc, oh, ow](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        const bool need_dx = tp.node_requires_grad(px);
        const bool need_dw = tp.node_requires_grad(pw);
        if (need_dx || need_dw) {
            // Forward conv of dy through w gives dx; its im2col feeds dw.
            std::vector<float> cols;
            if (need_dw) cols.resize(static_cast<size_t>(s.n) * s.ckk() * s.patches());
            std::vector<float> dx_scratch(static_cast<size_t>(s.n) * s.oc * s.patches());
            kernels::conv2d_forward(dy.ptr(), tp.value_of(pw).ptr(), nullptr,
                                    dx_scratch.data(), s, need_dw ? cols.data() : nullptr);
            if (need_dx)
                kernels::axpy(1.0f, dx_scratch.data(), tp.grad_buffer(px).ptr(),
                              static_cast<int64_t>(dx_scratch.size()));
            if (need_dw)
                kernels::conv2d_dw(tp.value_of(px).ptr(), cols.data(),
                                   tp.grad_buffer(pw).ptr(), s);
        }
        if (pb >= 0 && tp.node_requires_grad(pb)) {
            float* db = tp.grad_buffer(pb).ptr();
            const int inner = oh * ow;
            for (int c = 0; c < oc; ++c) {
                double acc = 0.0;
                for (int nn = 0; nn < n_batch; ++nn) {
                    const float* p = dy.ptr() + (static_cast<int64_t>(nn) * oc + c) * inner;
                    for (int i = 0; i < inner; ++i) acc += p[i];
                }
                db[c] += static_cast<float>(acc);
            }
        }
    });
    return Value{&t, id};
}

Value maxpool2d(Value x, int k, int stride) {
    const auto& xs = x.shape();
    require(xs.size() == 4, ErrorKind::Shape, "maxpool2d: input must be (N,C,H,W), got " + shape_str(xs));
    require(k <= xs[2] && k <= xs[3], ErrorKind::Shape, "maxpool2d: window larger than input");
    const int oh = (xs[2] - k) / stride + 1;
    const int ow = (xs[3] - k) / stride + 1;
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros({xs[0], xs[1], oh, ow});
    auto argmax = std::make_shared<std::vector<int32_t>>(
        static_cast<size_t>(xs[0]) * xs[1] * oh * ow);
    kernels::maxpool_forward(x.tensor().ptr(), out.ptr(), argmax->data(), xs[0], xs[1], xs[2],
                             xs[3], k, stride);
    const int px = x.id;
    const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const int id = t.add_node(std::move(out), {px},
                              [px, argmax, n, c, h, w, k, stride](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::maxpool_backward(dy.ptr(), argmax->data(), tp.grad_buffer(px).ptr(), n, c, h,
                                  w, k, stride);
    });
    return Value{&t, id};
}

Value dropout_with_mask(Value x, Tensor mask) {
    require(mask.shape == x.shape(), ErrorKind::Shape,
            "dropout: mask shape " + shape_str(mask.shape) + " does not match input " +
                shape_str(x.shape()));
    Tape& t = *x.tape;
    Tensor out = Tensor::zeros(x.shape());
    kernels::mul(x.tensor().ptr(), mask.ptr(), out.ptr(), out.numel());
    auto mask_ptr = std::make_shared<Tensor>(std::move(mask));
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px, mask_ptr](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        float* dx = tp.grad_buffer(px).ptr();
        const float* m = mask_ptr->ptr();
        const float* g = dy.ptr();
        for (int64_t i = 0; i < dy.numel(); ++i) dx[i] += g[i] * m[i];
    });
    return Value{&t, id};
}

Value dropout(Value x, float p, Rng& rng, bool train) {
    if (!train || p <= 0.0f) return x;
    require(p < 1.0f, ErrorKind::Config, "dropout: p must be < 1");
    Tensor mask = Tensor::zeros(x.shape());
    const float keep_scale = 1.0f / (1.0f - p);
    for (auto& v : mask.data) v = rng.uniform() < p ? 0.0f : keep_scale;
    return dropout_with_mask(x, std::move(mask));
}

Value batch_norm(Value x, Value gamma, Value beta, Tensor& run_mean, Tensor& run_var,
                 bool train, float momentum, float eps) {
    check_same_tape(x, gamma, "batch_norm");
    const auto& xs = x.shape();
    int c, hw;
    if (xs.size() == 2) {
        c = xs[1];
        hw = 1;
    } else if (xs.size() == 4) {
        c = xs[1];
        hw = xs[2] * xs[3];
    } else {
        raise(ErrorKind::Shape, "batch_norm: expected (N,F) or (N,C,H,W), got " + shape_str(xs));
    }
    require(gamma.shape() == std::vector<int>{c} && beta.shape() == std::vector<int>{c},
            ErrorKind::Shape, "batch_norm: gamma/beta must be shape [" + std::to_string(c) + "]");
    require(run_mean.shape == std::vector<int>{c} && run_var.shape == std::vector<int>{c},
            ErrorKind::Shape, "batch_norm: running stats must be shape [" + std::to_string(c) + "]");
    Tape& t = *x.tape;
    const int n = xs[0];
    const int64_t m = static_cast<int64_t>(n) * hw;

    auto mean = std::make_shared<std::vector<float>>(static_cast<size_t>(c));
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(c));
    if (train) {
        std::vector<float> var(static_cast<size_t>(c));
        kernels::bn_moments(x.tensor().ptr(), mean->data(), var.data(), n, c, hw);
        for (int ch = 0; ch < c; ++ch) {
            (*inv_std)[static_cast<size_t>(ch)] =
                1.0f / std::sqrt(var[static_cast<size_t>(ch)] + eps);
            run_mean.data[static_cast<size_t>(ch)] =
                momentum * run_mean.data[static_cast<size_t>(ch)] +
                (1.0f - momentum) * (*mean)[static_cast<size_t>(ch)];
            run_var.data[static_cast<size_t>(ch)] =
                momentum * run_var.data[static_cast<size_t>(ch)] +
                (1.0f - momentum) * var[static_cast<size_t>(ch)];
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            (*mean)[static_cast<size_t>(ch)] = run_mean.data[static_cast<size_t>(ch)];
            (*inv_std)[static_cast<size_t>(ch)] =
                1.0f / std::sqrt(run_var.data[static_cast<size_t>(ch)] + eps);
        }
    }

    Tensor out = Tensor::zeros(xs);
    const float* xv = x.tensor().ptr();
    const float* gv = gamma.tensor().ptr();
    const float* bv = beta.tensor().ptr();
    for (int nn = 0; nn < n; ++nn) {
        for (int ch = 0; ch < c; ++ch) {
            const float mu = (*mean)[static_cast<size_t>(ch)];
            const float is = (*inv_std)[static_cast<size_t>(ch)];
            const float g = gv[ch], b = bv[ch];
            const float* xp = xv + (static_cast<int64_t>(nn) * c + ch) * hw;
            float* op = out.ptr() + (static_cast<int64_t>(nn) * c + ch) * hw;
            for (int i = 0; i < hw; ++i) op[i] = g * (xp[i] - mu) * is + b;
        }
    }

    const int px = x.id, pg = gamma.id, pb = beta.id;
    const int id = t.add_node(std::move(out), {px, pg, pb},
                              [px, pg, pb, mean, inv_std, train, n, c, hw, m](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        const float* xv = tp.value_of(px).ptr();
        const float* gv = tp.value_of(pg).ptr();
        // per-channel sums: s1 = sum dy, s2 = sum dy*xhat
        std::vector<double> s1(static_cast<size_t>(c), 0.0), s2(static_cast<size_t>(c), 0.0);
        for (int nn = 0; nn < n; ++nn) {
            for (int ch = 0; ch < c; ++ch) {
                const float mu = (*mean)[static_cast<size_t>(ch)];
                const float is = (*inv_std)[static_cast<size_t>(ch)];
                const float* dp = dy.ptr() + (static_cast<int64_t>(nn) * c + ch) * hw;
                const float* xp = xv + (static_cast<int64_t>(nn) * c + ch) * hw;
                double a1 = 0.0, a2 = 0.0;
                for (int i = 0; i < hw; ++i) {
                    a1 += dp[i];
                    a2 += static_cast<double>(dp[i]) * ((xp[i] - mu) * is);
                }
                s1[static_cast<size_t>(ch)] += a1;
                s2[static_cast<size_t>(ch)] += a2;
            }
        }
        if (tp.node_requires_grad(pg)) {
            float* dg = tp.grad_buffer(pg).ptr();
            for (int ch = 0; ch < c; ++ch) dg[ch] += static_cast<float>(s2[static_cast<size_t>(ch)]);
        }
        if (tp.node_requires_grad(pb)) {
            float* db = tp.grad_buffer(pb).ptr();
            for (int ch = 0; ch < c; ++ch) db[ch] += static_cast<float>(s1[static_cast<size_t>(ch)]);
        }
        if (tp.node_requires_grad(px)) {
            float* dx = tp.grad_buffer(px).ptr();
            for (int nn = 0; nn < n; ++nn) {
                for (int ch = 0; ch < c; ++ch) {
                    const float mu = (*mean)[static_cast<size_t>(ch)];
                    const float is = (*inv_std)[static_cast<size_t>(ch)];
                    const float g = gv[ch];
                    const float* dp = dy.ptr() + (static_cast<int64_t>(nn) * c + ch) * hw;
                    const float* xp = xv + (static_cast<int64_t>(nn) * c + ch) * hw;
                    float* dxp = dx + (static_cast<int64_t>(nn) * c + ch) * hw;
                    if (train) {
                        const float c1 = static_cast<float>(s1[static_cast<size_t>(ch)] / static_cast<double>(m));
                        const float c2 = static_cast<float>(s2[static_cast<size_t>(ch)] / static_cast<double>(m));
                        for (int i = 0; i < hw; ++i) {
                            const float xhat = (xp[i] - mu) * is;
                            dxp[i] += g * is * (dp[i] - c1 - xhat * c2);
                        }
                    } else {
                        for (int i = 0; i < hw; ++i) dxp[i] += g * is * dp[i];
                    }
                }
            }
        }
    });
    return Value{&t, id};
}

Value softmax(Value logits) {
    const auto& xs = logits.shape();
    require(xs.size() == 2, ErrorKind::Shape, "softmax: expected (N,C), got " + shape_str(xs));
    Tape& t = *logits.tape;
    const int n = xs[0], c = xs[1];
    Tensor out = Tensor::zeros(xs);
    kernels::softmax_rows(logits.tensor().ptr(), out.ptr(), n, c);
    const int px = logits.id;
    const int id = t.add_node(std::move(out), {px}, [px, n, c](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        const float* y = tp.value_of(self).ptr();
        float* dx = tp.grad_buffer(px).ptr();
        for (int i = 0; i < n; ++i) {
            const float* yr = y + static_cast<int64_t>(i) * c;
            const float* gr = dy.ptr() + static_cast<int64_t>(i) * c;
            float* dr = dx + static_cast<int64_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += static_cast<double>(gr[j]) * yr[j];
            for (int j = 0; j < c; ++j) dr[j] += yr[j] * (gr[j] - static_cast<float>(dot));
        }
    });
    return Value{&t, id};
}

Value log_softmax(Value logits) {
    const auto& xs = logits.shape();
    require(xs.size() == 2, ErrorKind::Shape, "log_softmax: expected (N,C), got " + shape_str(xs));
    Tape& t = *logits.tape;
    const int n = xs[0], c = xs[1];
    Tensor out = Tensor::zeros(xs);
    kernels::log_softmax_rows(logits.tensor().ptr(), out.ptr(), n, c);
    const int px = logits.id;
    const int id = t.add_node(std::move(out), {px}, [px, n, c](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        const float* y = tp.value_of(self).ptr();
        float* dx = tp.grad_buffer(px).ptr();
        for (int i = 0; i < n; ++i) {
            const float* yr = y + static_cast<int64_t>(i) * c;
            const float* gr = dy.ptr() + static_cast<int64_t>(i) * c;
            float* dr = dx + static_cast<int64_t>(i) * c;
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += gr[j];
            for (int j = 0; j < c; ++j)
                dr[j] += gr[j] - std::exp(yr[j]) * static_cast<float>(gsum);
        }
    });
    return Value{&t, id};
}

Value gather_cols(Value m, std::vector<int> idx) {
    const auto& xs = m.shape();
    require(xs.size() == 2, ErrorKind::Shape, "gather_cols: expected (N,C), got " + shape_str(xs));
    require(static_cast<int>(idx.size()) == xs[0], ErrorKind::Shape,
            "gather_cols: index count " + std::to_string(idx.size()) + " does not match rows " +
                std::to_string(xs[0]));
    const int c = xs[1];
    for (size_t i = 0; i < idx.size(); ++i)
        require(idx[i] >= 0 && idx[i] < c, ErrorKind::Invalid,
                "gather_cols: label " + std::to_string(idx[i]) + " out of range [0," +
                    std::to_string(c) + ") at row " + std::to_string(i));
    Tape& t = *m.tape;
    const int n = xs[0];
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i)
        out.data[static_cast<size_t>(i)] =
            m.tensor().data[static_cast<size_t>(i) * c + static_cast<size_t>(idx[static_cast<size_t>(i)])];
    auto idx_ptr = std::make_shared<std::vector<int>>(std::move(idx));
    const int px = m.id;
    const int id = t.add_node(std::move(out), {px}, [px, idx_ptr, c](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        float* dx = tp.grad_buffer(px).ptr();
        for (int64_t i = 0; i < dy.numel(); ++i)
            dx[i * c + (*idx_ptr)[static_cast<size_t>(i)]] += dy.data[static_cast<size_t>(i)];
    });
    return Value{&t, id};
}

Value slice_rows(Value x, int begin, int count) {
    const auto& xs = x.shape();
    require(!xs.empty() && begin >= 0 && count >= 1 && begin + count <= xs[0], ErrorKind::Shape,
            "slice_rows: invalid range [" + std::to_string(begin) + "," +
                std::to_string(begin + count) + ") for " + shape_str(xs));
    const int64_t row = x.tensor().numel() / xs[0];
    std::vector<int> out_shape = xs;
    out_shape[0] = count;
    Tensor out = Tensor::zeros(out_shape);
    std::memcpy(out.ptr(), x.tensor().ptr() + begin * row,
                static_cast<size_t>(count) * row * sizeof(float));
    Tape& t = *x.tape;
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px}, [px, begin, row](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        kernels::axpy(1.0f, dy.ptr(), tp.grad_buffer(px).ptr() + begin * row, dy.numel());
    });
    return Value{&t, id};
}

Value concat_rows(const std::vector<Value>& parts) {
    require(!parts.empty(), ErrorKind::Invalid, "concat_rows: no inputs");
    Tape& t = *parts[0].tape;
    std::vector<int> out_shape = parts[0].shape();
    const int64_t row = parts[0].tensor().numel() / out_shape[0];
    int total = 0;
    for (const auto& p : parts) {
        auto ps = p.shape();
        require(p.tape == &t, ErrorKind::Invalid, "concat_rows: mixed tapes");
        std::vector<int> tail_a(out_shape.begin() + 1, out_shape.end());
        std::vector<int> tail_b(ps.begin() + 1, ps.end());
        require(tail_a == tail_b, ErrorKind::Shape,
                "concat_rows: trailing shape mismatch " + shape_str(out_shape) + " vs " +
                    shape_str(ps));
        total += ps[0];
    }
    out_shape[0] = total;
    Tensor out = Tensor::zeros(out_shape);
    int64_t off = 0;
    std::vector<int> ids;
    std::vector<int> rows;
    for (const auto& p : parts) {
        std::memcpy(out.ptr() + off, p.tensor().ptr(),
                    static_cast<size_t>(p.tensor().numel()) * sizeof(float));
        off += p.tensor().numel();
        ids.push_back(p.id);
        rows.push_back(p.shape()[0]);
    }
    const int id = t.add_node(std::move(out), ids, [ids, rows, row](Tape& tp, int self) {
        const Tensor& dy = tp.grad_buffer(self);
        int64_t off = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            const int64_t cnt = static_cast<int64_t>(rows[i]) * row;
            if (tp.node_requires_grad(ids[i]))
                kernels::axpy(1.0f, dy.ptr() + off, tp.grad_buffer(ids[i]).ptr(), cnt);
            off += cnt;
        }
    });
    return Value{&t, id};
}

Value fold_sum_blocks(Value v, int blocks) {
    const auto& xs = v.shape();
    require(xs.size() == 1 && xs[0] % blocks == 0, ErrorKind::Shape,
            "fold_sum_blocks: cannot fold " + shape_str(xs) + " into " + std::to_string(blocks) +
                " blocks");
    const int n = xs[0] / blocks;
    Tensor out = Tensor::zeros({n});
    for (int b = 0; b < blocks; ++b)
        for (int i = 0; i < n; ++i)
            out.data[static_cast<size_t>(i)] += v.tensor().data[static_cast<size_t>(b) * n + i];
    Tape& t = *v.tape;
    const int px = v.id;
    const int id = t.add_node(std::move(out), {px}, [px, blocks, n](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        float* dx = tp.grad_buffer(px).ptr();
        for (int b = 0; b < blocks; ++b)
            for (int i = 0; i < n; ++i) dx[static_cast<int64_t>(b) * n + i] += dy.data[static_cast<size_t>(i)];
    });
    return Value{&t, id};
}

Value permute_within_sample(Value x, std::shared_ptr<const std::vector<int>> map,
                            std::vector<int> out_shape) {
    const auto& xs = x.shape();
    require(xs.size() >= 2, ErrorKind::Shape,
            "permute_within_sample: need a batch dimension, got " + shape_str(xs));
    const int n = xs[0];
    const int64_t in_block = x.tensor().numel() / n;
    require(!out_shape.empty() && out_shape[0] == n, ErrorKind::Shape,
            "permute_within_sample: output batch dim must match input");
    const int64_t out_block = shape_numel(out_shape) / n;
    require(static_cast<int64_t>(map->size()) == out_block, ErrorKind::Shape,
            "permute_within_sample: map size does not match output block");
    for (int idx : *map)
        require(idx >= 0 && idx < in_block, ErrorKind::Invalid,
                "permute_within_sample: map index out of range");
    Tensor out = Tensor::zeros(out_shape);
    const float* xv = x.tensor().ptr();
    for (int nn = 0; nn < n; ++nn) {
        const float* src = xv + nn * in_block;
        float* dst = out.ptr() + nn * out_block;
        for (int64_t j = 0; j < out_block; ++j) dst[j] = src[(*map)[static_cast<size_t>(j)]];
    }
    Tape& t = *x.tape;
    const int px = x.id;
    const int id = t.add_node(std::move(out), {px},
                              [px, map, n, in_block, out_block](Tape& tp, int self) {
        if (!tp.node_requires_grad(px)) return;
        const Tensor& dy = tp.grad_buffer(self);
        float* dx = tp.grad_buffer(px).ptr();
        for (int nn = 0; nn < n; ++nn) {
            const float* g = dy.ptr() + nn * out_block;
            float* d = dx + nn * in_block;
            for (int64_t j = 0; j < out_block; ++j) d[(*map)[static_cast<size_t>(j)]] += g[j];
        }
    });
    return Value{&t, id};
}

Tensor sign(const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape);
    kernels::sign(t.ptr(), out.ptr(), t.numel());
    return out;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& fn,
                              const Tensor& at, float step) {
    require(step > 0.0f, ErrorKind::Config, "finite_difference_grad: step must be > 0");
    Tensor grad = Tensor::zeros(at.shape);
    Tensor probe = at;
    for (size_t i = 0; i < at.data.size(); ++i) {
        const float orig = at.data[i];
        const float plus = orig + step;
        const float minus = orig - step;
        probe.data[i] = plus;
        const double f_plus = fn(probe);
        probe.data[i] = minus;
        const double f_minus = fn(probe);
        probe.data[i] = orig;
        // actual step after f32 rounding
        const double h2 = static_cast<double>(plus) - static_cast<double>(minus);
        grad.data[i] = static_cast<float>((f_plus - f_minus) / h2);
    }
    return grad;
}

}  // namespace soap::ad
