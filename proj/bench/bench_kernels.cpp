// Kernel benchmark: OpenMP path vs the serial reference on the gemm and conv
// shapes this project actually runs, plus a whole-model step timing.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "soap/autodiff.hpp"
#include "soap/data.hpp"
#include "soap/kernels.hpp"
#include "soap/nn.hpp"
#include "soap/tasks.hpp"
#include "soap/tensor.hpp"
#include "soap/train.hpp"

using namespace soap;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
    return dt.count() / reps;
}

void row(const char* name, double flops, double serial_s, double parallel_s) {
    std::printf("%-34s %9.2f ms %9.2f ms  %6.2fx  %7.2f GF/s\n", name, serial_s * 1e3,
                parallel_s * 1e3, serial_s / parallel_s, flops / parallel_s * 1e-9);
}

}  // namespace

int main() {
    std::printf("%-34s %12s %12s %8s %12s\n", "kernel", "serial", "openmp", "speedup",
                "throughput");

    Rng rng(7);
    {
        const int m = 128, k = 3136, n = 1568;  // decoder FC of the mnist cnn
        Tensor a = uniform_tensor({m, k}, -1, 1, rng);
        Tensor b = uniform_tensor({k, n}, -1, 1, rng);
        Tensor c = Tensor::zeros({m, n});
        const double flops = 2.0 * m * k * n;
        const double ts = time_of(
            [&] { kernels::serial::gemm_nn(a.ptr(), b.ptr(), c.ptr(), m, k, n); }, 3);
        const double tp =
            time_of([&] { kernels::gemm_nn(a.ptr(), b.ptr(), c.ptr(), m, k, n); }, 3);
        row("gemm_nn 128x3136x1568", flops, ts, tp);
    }
    {
        const int m = 512, k = 256, n = 512;
        Tensor a = uniform_tensor({m, k}, -1, 1, rng);
        Tensor b = uniform_tensor({n, k}, -1, 1, rng);
        Tensor c = Tensor::zeros({m, n});
        const double flops = 2.0 * m * k * n;
        const double ts = time_of(
            [&] { kernels::serial::gemm_nt(a.ptr(), b.ptr(), c.ptr(), m, k, n); }, 5);
        const double tp =
            time_of([&] { kernels::gemm_nt(a.ptr(), b.ptr(), c.ptr(), m, k, n); }, 5);
        row("gemm_nt 512x256x512", flops, ts, tp);
    }
    {
        // second conv of the mnist cnn on a 128 batch
        const auto s = kernels::ConvShape::make(128, 32, 14, 14, 64, 3, 3, 2, 1);
        Tensor x = uniform_tensor({s.n, s.c, s.h, s.w}, 0, 1, rng);
        Tensor w = uniform_tensor({s.oc, s.c, s.kh, s.kw}, -1, 1, rng);
        Tensor y = Tensor::zeros({s.n, s.oc, s.oh, s.ow});
        const double flops = 2.0 * s.n * s.oc * s.oh * s.ow * s.ckk();
        const double ts = time_of(
            [&] { kernels::serial::conv2d_forward(x.ptr(), w.ptr(), nullptr, y.ptr(), s); }, 5);
        const double tp = time_of(
            [&] { kernels::conv2d_forward(x.ptr(), w.ptr(), nullptr, y.ptr(), s, nullptr); },
            5);
        row("conv2d 128x32x14x14 -> 64", flops, ts, tp);
    }
    {
        const auto s = kernels::ConvShape::make(128, 32, 14, 14, 64, 3, 3, 2, 1);
        Tensor dy = uniform_tensor({s.n, s.oc, s.oh, s.ow}, -1, 1, rng);
        Tensor w = uniform_tensor({s.oc, s.c, s.kh, s.kw}, -1, 1, rng);
        Tensor dx = Tensor::zeros({s.n, s.c, s.h, s.w});
        const double flops = 2.0 * s.n * s.oc * s.oh * s.ow * s.ckk();
        const double ts =
            time_of([&] { kernels::serial::conv2d_dx(dy.ptr(), w.ptr(), dx.ptr(), s); }, 5);
        const double tp = time_of([&] { kernels::conv2d_dx(dy.ptr(), w.ptr(), dx.ptr(), s); }, 5);
        row("conv2d_dx same shape", flops, ts, tp);
    }
    {
        // one joint-training step of the mnist-dr preset on a 128 batch
        auto ds = data::gen_digits(128, 3);
        auto spec = nn::preset("cnn", ds.input_shape, nn::AuxKind::DR);
        auto m = nn::build(spec, nn::AuxKind::DR, 1);
        tasks::AuxTaskConfig cfg;
        cfg.kind = nn::AuxKind::DR;
        cfg.alpha = 100.0f;
        cfg.noise_sigma = 0.5f;
        Rng step_rng(11);
        auto step = [&] {
            ad::Tape tape;
            nn::ParamBinding binding;
            auto joint = tasks::joint_loss(m, tape, ds.x, ds.y, cfg, step_rng, &binding);
            tape.backward(joint.total);
        };
        kernels::set_parallel(false);
        const double ts = time_of(step, 3);
        kernels::set_parallel(true);
        const double tp = time_of(step, 3);
        std::printf("%-34s %9.2f ms %9.2f ms  %6.2fx\n", "joint fwd+bwd cnn-dr batch 128",
                    ts * 1e3, tp * 1e3, ts / tp);
    }
    return 0;
}
