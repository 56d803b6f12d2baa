#pragma once

#include <cstdint>
#include <vector>

namespace soap::kernels {

// Global switch between the OpenMP kernels and the serial reference path.
// Both paths share the same per-element accumulation order, so results are
// bit-identical; the switch only controls whether outer loops are distributed.
void set_parallel(bool enabled);
bool parallel_enabled();
void set_num_threads(int n);  // n <= 1 also disables the parallel path
int num_threads();

struct ConvShape {
    int n = 0, c = 0, h = 0, w = 0;    // input (N,C,H,W)
    int oc = 0, kh = 0, kw = 0;        // kernel
    int stride = 1, pad = 0;
    int oh = 0, ow = 0;                // derived output spatial dims

    static ConvShape make(int n, int c, int h, int w, int oc, int kh, int kw, int stride,
                          int pad);
    int ckk() const { return c * kh * kw; }
    int patches() const { return oh * ow; }
};

// C (m x n) = A (m x k) * B (k x n), all row-major. C is overwritten.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n);
// C (m x n) = A (m x k) * B^T where B is stored (n x k). C is overwritten.
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n);
void transpose(const float* src, float* dst, int rows, int cols);

// im2col for one sample: x_n is (C,H,W); cols is (C*KH*KW, OH*OW), row index
// ordered (c, kh, kw), column index ordered (oh, ow). Zero padding.
void im2col_sample(const float* x_n, float* cols, const ConvShape& s);
void col2im_sample(const float* cols, float* x_n, const ConvShape& s);  // scatter-add

// Batched convolution. w is (OC, C, KH, KW) flat; bias (OC) may be null.
// cols_out, when non-null, receives the full (N, CKK, P) im2col matrix for reuse
// by the weight-gradient pass.
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const ConvShape& s, float* cols_out);
void conv2d_dx(const float* dy, const float* w, float* dx, const ConvShape& s);
void conv2d_dw(const float* dy, const float* cols, float* dw, const ConvShape& s);
void conv2d_db(const float* dy, float* db, const ConvShape& s);

// Max pooling, no padding. argmax holds flat per-plane input offsets for backward.
void maxpool_forward(const float* x, float* y, int32_t* argmax, int n, int c, int h, int w,
                     int k, int stride);
void maxpool_backward(const float* dy, const int32_t* argmax, float* dx, int n, int c, int h,
                      int w, int k, int stride);

// Elementwise and reduction helpers (deterministic accumulation order).
void relu_forward(const float* x, float* y, int64_t n);
void relu_backward(const float* x, const float* dy, float* dx_accum, int64_t n);
void sigmoid_forward(const float* x, float* y, int64_t n);
void sigmoid_backward(const float* y, const float* dy, float* dx_accum, int64_t n);
void clamp_forward(const float* x, float* y, int64_t n, float lo, float hi);
void clamp_backward(const float* x, const float* dy, float* dx_accum, int64_t n, float lo,
                    float hi);
void add(const float* a, const float* b, float* c, int64_t n);
void sub(const float* a, const float* b, float* c, int64_t n);
void mul(const float* a, const float* b, float* c, int64_t n);
void axpy(float alpha, const float* x, float* y, int64_t n);  // y += alpha * x
void scale(const float* x, float* y, float alpha, int64_t n);
void sign(const float* x, float* y, int64_t n);  // -1/0/+1
double sum_f64(const float* x, int64_t n);       // fixed-order accumulation in f64

// Row-wise softmax / log-softmax over an (n x c) matrix.
void softmax_rows(const float* x, float* y, int n, int c);
void log_softmax_rows(const float* x, float* y, int n, int c);

// Batch norm statistics over (N,C,H,W) per channel (spatial=true) or (N,F) per
// feature (spatial=false, pass h=w=1). Variance is biased (1/M).
void bn_moments(const float* x, float* mean, float* var, int n, int c, int hw);

// Serial reference kernels: naive loops, kept for testing the OpenMP path and
// for the kernel benchmark. Same accumulation order as the parallel kernels.
namespace serial {
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n);
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n);
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const ConvShape& s);
void conv2d_dx(const float* dy, const float* w, float* dx, const ConvShape& s);
void conv2d_dw(const float* dy, const float* x, float* dw, const ConvShape& s);
void maxpool_forward(const float* x, float* y, int32_t* argmax, int n, int c, int h, int w,
                     int k, int stride);
void bn_moments(const float* x, float* mean, float* var, int n, int c, int hw);
}  // namespace serial

}  // namespace soap::kernels
