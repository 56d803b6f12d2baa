// Low-level compute kernels. The OpenMP path distributes outer loops over
// disjoint output tiles; per output element the accumulation order is fixed
// (innermost index ascending), so results are bit-identical to the serial
// reference regardless of thread count. The serial reference mirrors that
// order on purpose: the comparison tests are exact, not approximate.

#include "soap/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <vector>

#include "soap/common.hpp"

namespace soap::kernels {

namespace {

bool g_parallel = true;
int g_threads = 0;  // 0 = OpenMP default

bool use_parallel() { return g_parallel && omp_get_max_threads() > 1; }

constexpr int kIB = 48;    // gemm row tile
constexpr int kJB = 256;   // gemm column tile
constexpr int kKB = 256;   // gemm depth block (keeps a B panel cache-resident)

// 16-lane dot product (one full zmm accumulator on AVX-512); the fixed lane
// structure keeps the accumulation order identical between the serial and
// parallel callers.
inline float collapse16(const float acc[16]) {
    float s[8];
    for (int l = 0; l < 8; ++l) s[l] = acc[2 * l] + acc[2 * l + 1];
    const float t0 = (s[0] + s[1]) + (s[2] + s[3]);
    const float t1 = (s[4] + s[5]) + (s[6] + s[7]);
    return t0 + t1;
}

inline float dot16(const float* a, const float* b, int n) {
    float acc[16] = {0};
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        for (int l = 0; l < 16; ++l) acc[l] += a[i + l] * b[i + l];
    }
    for (; i < n; ++i) acc[i % 16] += a[i] * b[i];
    return collapse16(acc);
}

// Four dot products sharing one a-row stream; per-output lane structure and
// collapse order are identical to dot16, so results are bit-equal to four
// separate dot16 calls.
inline void dot16_quad(const float* a, const float* b0, const float* b1, const float* b2,
                       const float* b3, int n, float out[4]) {
    float acc[4][16] = {{0}};
    int i = 0;
    for (; i + 16 <= n; i += 16) {
        for (int l = 0; l < 16; ++l) {
            const float av = a[i + l];
            acc[0][l] += av * b0[i + l];
            acc[1][l] += av * b1[i + l];
            acc[2][l] += av * b2[i + l];
            acc[3][l] += av * b3[i + l];
        }
    }
    for (; i < n; ++i) {
        const int l = i % 16;
        acc[0][l] += a[i] * b0[i];
        acc[1][l] += a[i] * b1[i];
        acc[2][l] += a[i] * b2[i];
        acc[3][l] += a[i] * b3[i];
    }
    for (int q = 0; q < 4; ++q) out[q] = collapse16(acc[q]);
}

// c-row-block accumulate: C[i, j0:j1) += A[i, :] * B[:, j0:j1) for i in [i0, i1).
// k is processed in ascending blocks, so the per-element accumulation order is
// plain ascending-k regardless of blocking.
inline void gemm_nn_tile(const float* a, const float* b, float* c, int k, int n, int i0,
                         int i1, int j0, int j1) {
    for (int kb = 0; kb < k; kb += kKB) {
        const int k1 = std::min(k, kb + kKB);
        for (int i = i0; i < i1; ++i) {
            float* crow = c + static_cast<int64_t>(i) * n;
            const float* arow = a + static_cast<int64_t>(i) * k;
            for (int kk = kb; kk < k1; ++kk) {
                const float av = arow[kk];
                const float* brow = b + static_cast<int64_t>(kk) * n;
                for (int j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

void zero(float* p, int64_t n) { std::memset(p, 0, static_cast<size_t>(n) * sizeof(float)); }

}  // namespace

void set_parallel(bool enabled) { g_parallel = enabled; }
bool parallel_enabled() { return g_parallel; }

void set_num_threads(int n) {
    g_threads = n;
    if (n >= 1) omp_set_num_threads(n);
    g_parallel = n != 1;
}

int num_threads() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

ConvShape ConvShape::make(int n, int c, int h, int w, int oc, int kh, int kw, int stride,
                          int pad) {
    require(stride >= 1, ErrorKind::Shape, "conv: stride must be >= 1");
    require(kh <= h + 2 * pad && kw <= w + 2 * pad, ErrorKind::Shape,
            "conv: kernel does not fit padded input");
    ConvShape s;
    s.n = n; s.c = c; s.h = h; s.w = w;
    s.oc = oc; s.kh = kh; s.kw = kw;
    s.stride = stride; s.pad = pad;
    s.oh = (h + 2 * pad - kh) / stride + 1;
    s.ow = (w + 2 * pad - kw) / stride + 1;
    return s;
}

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    zero(c, static_cast<int64_t>(m) * n);
    const int nib = (m + kIB - 1) / kIB;
    const int njb = (n + kJB - 1) / kJB;
#pragma omp parallel for collapse(2) schedule(static) if (use_parallel())
    for (int ib = 0; ib < nib; ++ib) {
        for (int jb = 0; jb < njb; ++jb) {
            const int i0 = ib * kIB, i1 = std::min(m, i0 + kIB);
            const int j0 = jb * kJB, j1 = std::min(n, j0 + kJB);
            gemm_nn_tile(a, b, c, k, n, i0, i1, j0, j1);
        }
    }
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n;
        int j = 0;
        for (; j + 4 <= n; j += 4) {
            dot16_quad(arow, b + static_cast<int64_t>(j) * k, b + static_cast<int64_t>(j + 1) * k,
                      b + static_cast<int64_t>(j + 2) * k, b + static_cast<int64_t>(j + 3) * k,
                      k, crow + j);
        }
        for (; j < n; ++j) crow[j] = dot16(arow, b + static_cast<int64_t>(j) * k, k);
    }
}

void transpose(const float* src, float* dst, int rows, int cols) {
#pragma omp parallel for schedule(static) if (use_parallel() && rows * cols > 16384)
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) dst[static_cast<int64_t>(c) * rows + r] = src[static_cast<int64_t>(r) * cols + c];
    }
}

void im2col_sample(const float* x_n, float* cols, const ConvShape& s) {
    const int P = s.patches();
    float* out = cols;
    for (int c = 0; c < s.c; ++c) {
        const float* plane = x_n + static_cast<int64_t>(c) * s.h * s.w;
        for (int kh = 0; kh < s.kh; ++kh) {
            for (int kw = 0; kw < s.kw; ++kw) {
                for (int oh = 0; oh < s.oh; ++oh) {
                    const int ih = oh * s.stride - s.pad + kh;
                    const bool row_ok = ih >= 0 && ih < s.h;
                    for (int ow = 0; ow < s.ow; ++ow) {
                        const int iw = ow * s.stride - s.pad + kw;
                        out[oh * s.ow + ow] =
                            (row_ok && iw >= 0 && iw < s.w) ? plane[ih * s.w + iw] : 0.0f;
                    }
                }
                out += P;
            }
        }
    }
}

void col2im_sample(const float* cols, float* x_n, const ConvShape& s) {
    const int P = s.patches();
    const float* in = cols;
    for (int c = 0; c < s.c; ++c) {
        float* plane = x_n + static_cast<int64_t>(c) * s.h * s.w;
        for (int kh = 0; kh < s.kh; ++kh) {
            for (int kw = 0; kw < s.kw; ++kw) {
                for (int oh = 0; oh < s.oh; ++oh) {
                    const int ih = oh * s.stride - s.pad + kh;
                    if (ih < 0 || ih >= s.h) continue;
                    for (int ow = 0; ow < s.ow; ++ow) {
                        const int iw = ow * s.stride - s.pad + kw;
                        if (iw < 0 || iw >= s.w) continue;
                        plane[ih * s.w + iw] += in[oh * s.ow + ow];
                    }
                }
                in += P;
            }
        }
    }
}

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const ConvShape& s, float* cols_out) {
    const int ckk = s.ckk();
    const int P = s.patches();
#pragma omp parallel if (use_parallel())
    {
        std::vector<float> scratch;
        if (!cols_out) scratch.resize(static_cast<size_t>(ckk) * P);
#pragma omp for schedule(static)
        for (int nn = 0; nn < s.n; ++nn) {
            float* cols = cols_out ? cols_out + static_cast<int64_t>(nn) * ckk * P
                                   : scratch.data();
            im2col_sample(x + static_cast<int64_t>(nn) * s.c * s.h * s.w, cols, s);
            float* y_n = y + static_cast<int64_t>(nn) * s.oc * P;
            zero(y_n, static_cast<int64_t>(s.oc) * P);
            gemm_nn_tile(w, cols, y_n, ckk, P, 0, s.oc, 0, P);
            if (bias) {
                for (int oc = 0; oc < s.oc; ++oc) {
                    const float bv = bias[oc];
                    float* row = y_n + static_cast<int64_t>(oc) * P;
                    for (int p = 0; p < P; ++p) row[p] += bv;
                }
            }
        }
    }
}

void conv2d_dx(const float* dy, const float* w, float* dx, const ConvShape& s) {
    const int ckk = s.ckk();
    const int P = s.patches();
    std::vector<float> wt(static_cast<size_t>(ckk) * s.oc);
    transpose(w, wt.data(), s.oc, ckk);
#pragma omp parallel if (use_parallel())
    {
        std::vector<float> dcols(static_cast<size_t>(ckk) * P);
#pragma omp for schedule(static)
        for (int nn = 0; nn < s.n; ++nn) {
            zero(dcols.data(), static_cast<int64_t>(ckk) * P);
            gemm_nn_tile(wt.data(), dy + static_cast<int64_t>(nn) * s.oc * P, dcols.data(),
                         s.oc, P, 0, ckk, 0, P);
            col2im_sample(dcols.data(), dx + static_cast<int64_t>(nn) * s.c * s.h * s.w, s);
        }
    }
}

void conv2d_dw(const float* dy, const float* cols, float* dw, const ConvShape& s) {
    const int ckk = s.ckk();
    const int P = s.patches();
    // dw[oc, r] += sum_n dot(dy[n,oc,:], cols[n,r,:]); n ascending per element.
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int oc = 0; oc < s.oc; ++oc) {
        float* drow = dw + static_cast<int64_t>(oc) * ckk;
        int r = 0;
        for (; r + 4 <= ckk; r += 4) {
            float acc[4] = {0, 0, 0, 0};
            for (int nn = 0; nn < s.n; ++nn) {
                float part[4];
                const float* dyrow = dy + (static_cast<int64_t>(nn) * s.oc + oc) * P;
                const float* base = cols + (static_cast<int64_t>(nn) * ckk + r) * P;
                dot16_quad(dyrow, base, base + P, base + 2 * P, base + 3 * P, P, part);
                for (int q = 0; q < 4; ++q) acc[q] += part[q];
            }
            for (int q = 0; q < 4; ++q) drow[r + q] += acc[q];
        }
        for (; r < ckk; ++r) {
            float acc = 0.0f;
            for (int nn = 0; nn < s.n; ++nn) {
                acc += dot16(dy + (static_cast<int64_t>(nn) * s.oc + oc) * P,
                            cols + (static_cast<int64_t>(nn) * ckk + r) * P, P);
            }
            drow[r] += acc;
        }
    }
}

void conv2d_db(const float* dy, float* db, const ConvShape& s) {
    const int P = s.patches();
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int oc = 0; oc < s.oc; ++oc) {
        double acc = 0.0;
        for (int nn = 0; nn < s.n; ++nn) {
            const float* row = dy + (static_cast<int64_t>(nn) * s.oc + oc) * P;
            for (int p = 0; p < P; ++p) acc += row[p];
        }
        db[oc] += static_cast<float>(acc);
    }
}

void maxpool_forward(const float* x, float* y, int32_t* argmax, int n, int c, int h, int w,
                     int k, int stride) {
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    const int planes = n * c;
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int pl = 0; pl < planes; ++pl) {
        const float* in = x + static_cast<int64_t>(pl) * h * w;
        float* out = y + static_cast<int64_t>(pl) * oh * ow;
        int32_t* am = argmax + static_cast<int64_t>(pl) * oh * ow;
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                float best = -std::numeric_limits<float>::infinity();
                int32_t best_idx = 0;
                for (int ki = 0; ki < k; ++ki) {
                    for (int kj = 0; kj < k; ++kj) {
                        const int idx = (i * stride + ki) * w + (j * stride + kj);
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[i * ow + j] = best;
                am[i * ow + j] = best_idx;
            }
        }
    }
}

void maxpool_backward(const float* dy, const int32_t* argmax, float* dx, int n, int c, int h,
                      int w, int k, int stride) {
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    const int planes = n * c;
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int pl = 0; pl < planes; ++pl) {
        const float* din = dy + static_cast<int64_t>(pl) * oh * ow;
        const int32_t* am = argmax + static_cast<int64_t>(pl) * oh * ow;
        float* dout = dx + static_cast<int64_t>(pl) * h * w;
        for (int p = 0; p < oh * ow; ++p) dout[am[p]] += din[p];
    }
}

void relu_forward(const float* x, float* y, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(const float* x, const float* dy, float* dx_accum, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) dx_accum[i] += x[i] > 0.0f ? dy[i] : 0.0f;
}

void sigmoid_forward(const float* x, float* y, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void sigmoid_backward(const float* y, const float* dy, float* dx_accum, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) dx_accum[i] += dy[i] * y[i] * (1.0f - y[i]);
}

void clamp_forward(const float* x, float* y, int64_t n, float lo, float hi) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] = std::min(std::max(x[i], lo), hi);
}

void clamp_backward(const float* x, const float* dy, float* dx_accum, int64_t n, float lo,
                    float hi) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) dx_accum[i] += (x[i] >= lo && x[i] <= hi) ? dy[i] : 0.0f;
}

void add(const float* a, const float* b, float* c, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}

void sub(const float* a, const float* b, float* c, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}

void mul(const float* a, const float* b, float* c, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}

void axpy(float alpha, const float* x, float* y, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(const float* x, float* y, float alpha, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

void sign(const float* x, float* y, int64_t n) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 16384)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? 1.0f : (x[i] < 0.0f ? -1.0f : 0.0f);
}

double sum_f64(const float* x, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void softmax_rows(const float* x, float* y, int n, int c) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 8)
    for (int i = 0; i < n; ++i) {
        const float* row = x + static_cast<int64_t>(i) * c;
        float* out = y + static_cast<int64_t>(i) * c;
        float mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            out[j] = std::exp(row[j] - mx);
            sum += out[j];
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < c; ++j) out[j] *= inv;
    }
}

void log_softmax_rows(const float* x, float* y, int n, int c) {
#pragma omp parallel for schedule(static) if (use_parallel() && n > 8)
    for (int i = 0; i < n; ++i) {
        const float* row = x + static_cast<int64_t>(i) * c;
        float* out = y + static_cast<int64_t>(i) * c;
        float mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        const float lse = mx + static_cast<float>(std::log(sum));
        for (int j = 0; j < c; ++j) out[j] = row[j] - lse;
    }
}

void bn_moments(const float* x, float* mean, float* var, int n, int c, int hw) {
#pragma omp parallel for schedule(static) if (use_parallel())
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (int nn = 0; nn < n; ++nn) {
            const float* p = x + (static_cast<int64_t>(nn) * c + ch) * hw;
            for (int i = 0; i < hw; ++i) {
                s += p[i];
                s2 += static_cast<double>(p[i]) * p[i];
            }
        }
        const double m = s / (static_cast<double>(n) * hw);
        mean[ch] = static_cast<float>(m);
        var[ch] = static_cast<float>(s2 / (static_cast<double>(n) * hw) - m * m);
    }
}

namespace serial {

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
    zero(c, static_cast<int64_t>(m) * n);
    gemm_nn_tile(a, b, c, k, n, 0, m, 0, n);
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j)
            c[static_cast<int64_t>(i) * n + j] =
                dot16(a + static_cast<int64_t>(i) * k, b + static_cast<int64_t>(j) * k, k);
    }
}

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const ConvShape& s) {
    const int P = s.patches();
    std::vector<float> cols(static_cast<size_t>(s.ckk()) * P);
    for (int nn = 0; nn < s.n; ++nn) {
        im2col_sample(x + static_cast<int64_t>(nn) * s.c * s.h * s.w, cols.data(), s);
        float* y_n = y + static_cast<int64_t>(nn) * s.oc * P;
        zero(y_n, static_cast<int64_t>(s.oc) * P);
        gemm_nn_tile(w, cols.data(), y_n, s.ckk(), P, 0, s.oc, 0, P);
        if (bias) {
            for (int oc = 0; oc < s.oc; ++oc)
                for (int p = 0; p < P; ++p) y_n[static_cast<int64_t>(oc) * P + p] += bias[oc];
        }
    }
}

void conv2d_dx(const float* dy, const float* w, float* dx, const ConvShape& s) {
    const int ckk = s.ckk();
    const int P = s.patches();
    std::vector<float> wt(static_cast<size_t>(ckk) * s.oc);
    for (int r = 0; r < s.oc; ++r)
        for (int q = 0; q < ckk; ++q) wt[static_cast<int64_t>(q) * s.oc + r] = w[static_cast<int64_t>(r) * ckk + q];
    std::vector<float> dcols(static_cast<size_t>(ckk) * P);
    for (int nn = 0; nn < s.n; ++nn) {
        zero(dcols.data(), static_cast<int64_t>(ckk) * P);
        gemm_nn_tile(wt.data(), dy + static_cast<int64_t>(nn) * s.oc * P, dcols.data(), s.oc,
                     P, 0, ckk, 0, P);
        col2im_sample(dcols.data(), dx + static_cast<int64_t>(nn) * s.c * s.h * s.w, s);
    }
}

void conv2d_dw(const float* dy, const float* x, float* dw, const ConvShape& s) {
    const int ckk = s.ckk();
    const int P = s.patches();
    std::vector<float> cols(static_cast<size_t>(s.n) * ckk * P);
    for (int nn = 0; nn < s.n; ++nn)
        im2col_sample(x + static_cast<int64_t>(nn) * s.c * s.h * s.w,
                      cols.data() + static_cast<int64_t>(nn) * ckk * P, s);
    for (int oc = 0; oc < s.oc; ++oc) {
        for (int r = 0; r < ckk; ++r) {
            float acc = 0.0f;
            for (int nn = 0; nn < s.n; ++nn) {
                acc += dot16(dy + (static_cast<int64_t>(nn) * s.oc + oc) * P,
                            cols.data() + (static_cast<int64_t>(nn) * ckk + r) * P, P);
            }
            dw[static_cast<int64_t>(oc) * ckk + r] += acc;
        }
    }
}

void maxpool_forward(const float* x, float* y, int32_t* argmax, int n, int c, int h, int w,
                     int k, int stride) {
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    for (int pl = 0; pl < n * c; ++pl) {
        const float* in = x + static_cast<int64_t>(pl) * h * w;
        float* out = y + static_cast<int64_t>(pl) * oh * ow;
        int32_t* am = argmax + static_cast<int64_t>(pl) * oh * ow;
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                float best = -std::numeric_limits<float>::infinity();
                int32_t best_idx = 0;
                for (int ki = 0; ki < k; ++ki) {
                    for (int kj = 0; kj < k; ++kj) {
                        const int idx = (i * stride + ki) * w + (j * stride + kj);
                        if (in[idx] > best) {
                            best = in[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[i * ow + j] = best;
                am[i * ow + j] = best_idx;
            }
        }
    }
}

void bn_moments(const float* x, float* mean, float* var, int n, int c, int hw) {
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (int nn = 0; nn < n; ++nn) {
            const float* p = x + (static_cast<int64_t>(nn) * c + ch) * hw;
            for (int i = 0; i < hw; ++i) {
                s += p[i];
                s2 += static_cast<double>(p[i]) * p[i];
            }
        }
        const double m = s / (static_cast<double>(n) * hw);
        mean[ch] = static_cast<float>(m);
        var[ch] = static_cast<float>(s2 / (static_cast<double>(n) * hw) - m * m);
    }
}

}  // namespace serial

}  // namespace soap::kernels
