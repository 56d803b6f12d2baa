#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "helpers.hpp"
#include "oracle_ref.hpp"
#include "soap/autodiff.hpp"

using namespace soap;
using testutil::isclose;
using testutil::isclose_all;
using testutil::uniform_away_from;

namespace {

// builds root = sum(op(x) .* r) on a tape, backward, and compares grad(x)
// against central differences of the f64 reference
void check_grad(const char* name, const Tensor& x0,
                const std::function<ad::Value(ad::Tape&, ad::Value)>& build,
                const std::function<oracle::dvec(const oracle::dvec&)>& ref,
                const Tensor& readout, double rtol = 1e-3, double atol = 1e-5) {
    ad::Tape tape;
    ad::Value x = tape.leaf(x0);
    ad::Value out = build(tape, x);
    REQUIRE(out.tensor().numel() == readout.numel());
    ad::Value root = ad::sum(ad::mul(out, tape.constant(readout)));
    tape.backward(root);
    auto fd_fn = [&](const Tensor& probe) {
        const auto y = ref(oracle::to_f64(probe));
        double acc = 0.0;
        for (size_t i = 0; i < y.size(); ++i) acc += y[i] * readout.data[i];
        return acc;
    };
    const Tensor fd = ad::finite_difference_grad(fd_fn, x0, 1e-3f);
    std::string msg;
    CHECK_MESSAGE(isclose_all(tape.grad(x), fd, rtol, atol, &msg), name, ": ", msg);
}

}  // namespace

TEST_CASE("forward op examples") {
    ad::Tape tape;
    SUBCASE("relu definition") {
        auto x = tape.leaf(Tensor({3}, {-1.0f, 0.0f, 2.0f}));
        auto y = ad::relu(x);
        CHECK(y.tensor().data == std::vector<float>{0.0f, 0.0f, 2.0f});
    }
    SUBCASE("matmul identity") {
        Rng rng(1);
        Tensor a = uniform_tensor({3, 3}, -2, 2, rng);
        Tensor eye = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) eye.data[static_cast<size_t>(i) * 3 + i] = 1.0f;
        auto out = ad::matmul(tape.constant(eye), tape.constant(a));
        CHECK(bitwise_equal(out.tensor(), a));
    }
    SUBCASE("conv2d 4x4 ones, 2x2 ones kernel, stride 2 -> all 4") {
        auto x = tape.constant(Tensor::full({1, 1, 4, 4}, 1.0f));
        auto w = tape.constant(Tensor::full({1, 1, 2, 2}, 1.0f));
        auto y = ad::conv2d(x, w, ad::Value{}, 2, 0);
        CHECK(y.shape() == std::vector<int>{1, 1, 2, 2});
        for (float v : y.tensor().data) CHECK(v == 4.0f);
    }
    SUBCASE("shape mismatch names both shapes") {
        auto a = tape.leaf(Tensor::zeros({2, 3}));
        auto b = tape.leaf(Tensor::zeros({3, 2}));
        CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("[2,3]"), Error);
        try {
            ad::add(a, b);
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("[3,2]") != std::string::npos);
            CHECK(e.kind() == ErrorKind::Shape);
        }
    }
}

TEST_CASE("backward examples") {
    SUBCASE("d(x^2)/dx at 3 is 6") {
        ad::Tape tape;
        auto x = tape.leaf(Tensor::scalar(3.0f));
        auto y = ad::mul(x, x);
        tape.backward(y);
        CHECK(tape.grad(x).data[0] == doctest::Approx(6.0).epsilon(1e-6));
    }
    SUBCASE("sum(relu(x)) subgradient") {
        ad::Tape tape;
        auto x = tape.leaf(Tensor({2}, {-1.0f, 2.0f}));
        auto root = ad::sum(ad::relu(x));
        tape.backward(root);
        CHECK(tape.grad(x).data == std::vector<float>{0.0f, 1.0f});
    }
    SUBCASE("mean((Wx - t)^2) gradient in W matches finite differences") {
        Rng rng(2);
        Tensor w0 = uniform_tensor({4, 4}, -1, 1, rng);
        Tensor xv = uniform_tensor({4, 1}, -1, 1, rng);
        Tensor tv = uniform_tensor({4, 1}, -1, 1, rng);
        ad::Tape tape;
        auto w = tape.leaf(w0);
        auto d = ad::sub(ad::matmul(w, tape.constant(xv)), tape.constant(tv));
        auto root = ad::mean(ad::mul(d, d));
        tape.backward(root);
        auto ref = [&](const Tensor& probe) {
            double acc = 0.0;
            for (int i = 0; i < 4; ++i) {
                double row = 0.0;
                for (int k = 0; k < 4; ++k)
                    row += static_cast<double>(probe.data[static_cast<size_t>(i) * 4 + k]) *
                           xv.data[static_cast<size_t>(k)];
                const double diff = row - tv.data[static_cast<size_t>(i)];
                acc += diff * diff;
            }
            return acc / 4.0;
        };
        const Tensor fd = ad::finite_difference_grad(ref, w0, 1e-3f);
        std::string msg;
        CHECK_MESSAGE(isclose_all(tape.grad(w), fd, 1e-3, 1e-5, &msg), msg);
    }
    SUBCASE("gradient accumulation: y = x + x") {
        ad::Tape tape;
        auto x = tape.leaf(Tensor::scalar(1.5f));
        tape.backward(ad::add(x, x));
        CHECK(tape.grad(x).data[0] == 2.0f);
    }
    SUBCASE("non-scalar root is an error") {
        ad::Tape tape;
        auto x = tape.leaf(Tensor::zeros({3}));
        CHECK_THROWS_AS(tape.backward(ad::relu(x)), Error);
    }
}

TEST_CASE("sign") {
    CHECK(ad::sign(Tensor({3}, {-0.5f, 0.0f, 3.0f})).data ==
          std::vector<float>{-1.0f, 0.0f, 1.0f});
    Rng rng(3);
    SUBCASE("idempotence") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor t = uniform_tensor({17}, -2, 2, rng);
            const Tensor s = ad::sign(t);
            CHECK(bitwise_equal(ad::sign(s), s));
        }
    }
    SUBCASE("gradient of sum(x) has all-plus-one sign") {
        ad::Tape tape;
        auto x = tape.leaf(uniform_tensor({9}, -2, 2, rng));
        tape.backward(ad::sum(x));
        for (float v : ad::sign(tape.grad(x)).data) CHECK(v == 1.0f);
    }
}

TEST_CASE("finite_difference_grad examples") {
    SUBCASE("x^2 at 3 with h = 1e-3") {
        auto fn = [](const Tensor& t) {
            const double v = t.data[0];
            return v * v;
        };
        const Tensor g = ad::finite_difference_grad(fn, Tensor::scalar(3.0f), 1e-3f);
        CHECK(std::fabs(g.data[0] - 6.0) < 1e-5);
    }
    SUBCASE("constant function has zero gradient") {
        auto fn = [](const Tensor&) { return 4.2; };
        const Tensor g = ad::finite_difference_grad(fn, Tensor::full({5}, 0.3f), 1e-3f);
        for (float v : g.data) CHECK(v == 0.0f);
    }
    SUBCASE("step must be positive") {
        CHECK_THROWS_AS(
            ad::finite_difference_grad([](const Tensor&) { return 0.0; }, Tensor::scalar(1), 0.0f),
            Error);
    }
    SUBCASE("cross-entropy of a fixed 2-class linear model: fd vs backward") {
        Rng rng(4);
        Tensor w0 = uniform_tensor({3, 2}, -1, 1, rng);
        Tensor x0 = uniform_tensor({4, 3}, -1, 1, rng);
        const std::vector<int> labels = {0, 1, 1, 0};
        ad::Tape tape;
        auto x = tape.leaf(x0);
        auto logits = ad::matmul(x, tape.constant(w0));
        auto picked = ad::gather_cols(ad::log_softmax(logits), labels);
        auto root = ad::scalar_mul(ad::mean(picked), -1.0f);
        tape.backward(root);
        auto ref = [&](const Tensor& probe) {
            const auto logits_ref = oracle::linear(oracle::to_f64(probe), 4, 3, 2,
                                                   oracle::to_f64(w0), oracle::dvec(2, 0.0));
            return oracle::ce_mean(logits_ref, 4, 2, labels);
        };
        const Tensor fd = ad::finite_difference_grad(ref, x0, 1e-3f);
        std::string msg;
        CHECK_MESSAGE(isclose_all(tape.grad(x), fd, 1e-3, 1e-5, &msg), msg);
    }
}

TEST_CASE("primitive gradients match central finite differences") {
    Rng rng(10);
    const int cases = 5;  // the acceptance suite runs 50+ per primitive

    for (int t = 0; t < cases; ++t) {
        {
            Tensor x0 = uniform_tensor({3, 4}, -2, 2, rng);
            Tensor other = uniform_tensor({3, 4}, -2, 2, rng);
            Tensor r = uniform_tensor({3, 4}, -1, 1, rng);
            check_grad("add", x0,
                       [&](ad::Tape& tp, ad::Value x) { return ad::add(x, tp.constant(other)); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(x.size());
                           for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] + other.data[i];
                           return y;
                       },
                       r);
            check_grad("sub", x0,
                       [&](ad::Tape& tp, ad::Value x) { return ad::sub(tp.constant(other), x); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(x.size());
                           for (size_t i = 0; i < x.size(); ++i) y[i] = other.data[i] - x[i];
                           return y;
                       },
                       r);
            check_grad("mul", x0,
                       [&](ad::Tape& tp, ad::Value x) { return ad::mul(x, tp.constant(other)); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(x.size());
                           for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * other.data[i];
                           return y;
                       },
                       r);
            check_grad("scalar_mul", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::scalar_mul(x, -1.7f); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(x.size());
                           for (size_t i = 0; i < x.size(); ++i) y[i] = -1.7 * x[i];
                           return y;
                       },
                       r);
            check_grad("sigmoid", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::sigmoid(x); },
                       [&](const oracle::dvec& x) { return oracle::sigmoid(x); }, r);
            Tensor r_reshaped(std::vector<int>{4, 3}, r.data);
            check_grad("reshape", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::reshape(x, {4, 3}); },
                       [&](const oracle::dvec& x) { return x; }, r_reshaped);
        }
        {
            Tensor x0 = uniform_away_from({3, 4}, -2, 2, rng, {0.0f});
            Tensor r = uniform_tensor({3, 4}, -1, 1, rng);
            check_grad("relu", x0, [&](ad::Tape&, ad::Value x) { return ad::relu(x); },
                       [&](const oracle::dvec& x) { return oracle::relu(x); }, r);
        }
        {
            Tensor x0 = uniform_away_from({3, 4}, -2, 2, rng, {-1.0f, 1.0f});
            Tensor r = uniform_tensor({3, 4}, -1, 1, rng);
            check_grad("clamp", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::clamp(x, -1.0f, 1.0f); },
                       [&](const oracle::dvec& x) { return oracle::clamp(x, -1.0, 1.0); }, r);
        }
        {
            Tensor x0 = uniform_tensor({3, 5}, -2, 2, rng);
            Tensor w0 = uniform_tensor({5, 4}, -1, 1, rng);
            Tensor r = uniform_tensor({3, 4}, -1, 1, rng);
            check_grad("matmul (x side)", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           return ad::matmul(x, tp.constant(w0));
                       },
                       [&](const oracle::dvec& x) {
                           return oracle::linear(x, 3, 5, 4, oracle::to_f64(w0),
                                                 oracle::dvec(4, 0.0));
                       },
                       r);
            check_grad("matmul (w side)", w0,
                       [&](ad::Tape& tp, ad::Value w) {
                           return ad::matmul(tp.constant(x0), w);
                       },
                       [&](const oracle::dvec& w) {
                           return oracle::linear(oracle::to_f64(x0), 3, 5, 4, w,
                                                 oracle::dvec(4, 0.0));
                       },
                       r);
            Tensor b0 = uniform_tensor({4}, -1, 1, rng);
            Tensor xb = uniform_tensor({3, 4}, -2, 2, rng);
            check_grad("bias_add (bias side)", b0,
                       [&](ad::Tape& tp, ad::Value b) {
                           return ad::bias_add(tp.constant(xb), b);
                       },
                       [&](const oracle::dvec& b) {
                           oracle::dvec y(xb.data.size());
                           for (int i = 0; i < 3; ++i)
                               for (int j = 0; j < 4; ++j)
                                   y[static_cast<size_t>(i) * 4 + j] =
                                       xb.data[static_cast<size_t>(i) * 4 + j] + b[static_cast<size_t>(j)];
                           return y;
                       },
                       r);
        }
        {
            // conv2d with stride 2 and padding 1, both input and weight sides
            const auto d = oracle::conv_dims(2, 2, 5, 5, 3, 3, 2, 1);
            Tensor x0 = uniform_tensor({2, 2, 5, 5}, -2, 2, rng);
            Tensor w0 = uniform_tensor({3, 2, 3, 3}, -1, 1, rng);
            Tensor b0 = uniform_tensor({3}, -1, 1, rng);
            Tensor r = uniform_tensor({2, 3, d.oh, d.ow}, -1, 1, rng);
            check_grad("conv2d (x side)", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           return ad::conv2d(x, tp.constant(w0), tp.constant(b0), 2, 1);
                       },
                       [&](const oracle::dvec& x) {
                           return oracle::conv2d(x, d, oracle::to_f64(w0), oracle::to_f64(b0));
                       },
                       r);
            check_grad("conv2d (w side)", w0,
                       [&](ad::Tape& tp, ad::Value w) {
                           return ad::conv2d(tp.constant(x0), w, tp.constant(b0), 2, 1);
                       },
                       [&](const oracle::dvec& w) {
                           return oracle::conv2d(oracle::to_f64(x0), d, w, oracle::to_f64(b0));
                       },
                       r);
        }
        {
            // transposed conv, both sides
            Tensor x0 = uniform_tensor({2, 3, 4, 4}, -2, 2, rng);
            Tensor w0 = uniform_tensor({3, 2, 4, 4}, -1, 1, rng);
            int oh = 0, ow = 0;
            oracle::conv_transpose2d(oracle::to_f64(x0), 2, 3, 4, 4, 2, 4, 2, 1,
                                     oracle::to_f64(w0), {}, oh, ow);
            Tensor r = uniform_tensor({2, 2, oh, ow}, -1, 1, rng);
            check_grad("conv_transpose2d (x side)", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           return ad::conv_transpose2d(x, tp.constant(w0), ad::Value{}, 2, 1);
                       },
                       [&](const oracle::dvec& x) {
                           int a = 0, b = 0;
                           return oracle::conv_transpose2d(x, 2, 3, 4, 4, 2, 4, 2, 1,
                                                           oracle::to_f64(w0), {}, a, b);
                       },
                       r);
            check_grad("conv_transpose2d (w side)", w0,
                       [&](ad::Tape& tp, ad::Value w) {
                           return ad::conv_transpose2d(tp.constant(x0), w, ad::Value{}, 2, 1);
                       },
                       [&](const oracle::dvec& w) {
                           int a = 0, b = 0;
                           return oracle::conv_transpose2d(oracle::to_f64(x0), 2, 3, 4, 4, 2, 4,
                                                           2, 1, w, {}, a, b);
                       },
                       r);
        }
        {
            // maxpool with a safe top-2 gap in every window
            Tensor x0 = uniform_tensor({2, 2, 6, 6}, -2, 2, rng);
            bool ok = false;
            while (!ok) {
                ok = true;
                for (int pl = 0; pl < 4 && ok; ++pl)
                    for (int i = 0; i + 2 <= 6 && ok; i += 2)
                        for (int j = 0; j + 2 <= 6 && ok; j += 2) {
                            float top = -1e30f, second = -1e30f;
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b) {
                                    const float v =
                                        x0.data[static_cast<size_t>(pl) * 36 + (i + a) * 6 + j + b];
                                    if (v > top) {
                                        second = top;
                                        top = v;
                                    } else if (v > second) {
                                        second = v;
                                    }
                                }
                            if (top - second < 0.01f) ok = false;
                        }
                if (!ok) x0 = uniform_tensor({2, 2, 6, 6}, -2, 2, rng);
            }
            Tensor r = uniform_tensor({2, 2, 3, 3}, -1, 1, rng);
            check_grad("maxpool", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::maxpool2d(x, 2, 2); },
                       [&](const oracle::dvec& x) {
                           int a = 0, b = 0;
                           return oracle::maxpool(x, 2, 2, 6, 6, 2, 2, a, b);
                       },
                       r);
        }
        {
            Tensor x0 = uniform_tensor({4, 6}, -2, 2, rng);
            Tensor r = uniform_tensor({4, 6}, -1, 1, rng);
            check_grad("softmax", x0, [&](ad::Tape&, ad::Value x) { return ad::softmax(x); },
                       [&](const oracle::dvec& x) { return oracle::softmax_rows(x, 4, 6); }, r);
            check_grad("log_softmax", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::log_softmax(x); },
                       [&](const oracle::dvec& x) { return oracle::log_softmax_rows(x, 4, 6); },
                       r);
            Tensor r1 = uniform_tensor({4}, -1, 1, rng);
            const std::vector<int> idx = {1, 0, 5, 3};
            check_grad("gather_cols", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::gather_cols(x, idx); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(4);
                           for (int i = 0; i < 4; ++i) y[static_cast<size_t>(i)] = x[static_cast<size_t>(i) * 6 + idx[static_cast<size_t>(i)]];
                           return y;
                       },
                       r1);
            check_grad("sum_rows", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::sum_rows(x); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(4, 0.0);
                           for (int i = 0; i < 4; ++i)
                               for (int j = 0; j < 6; ++j) y[static_cast<size_t>(i)] += x[static_cast<size_t>(i) * 6 + j];
                           return y;
                       },
                       r1);
            Tensor r2 = uniform_tensor({2, 6}, -1, 1, rng);
            check_grad("slice_rows", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::slice_rows(x, 1, 2); },
                       [&](const oracle::dvec& x) {
                           return oracle::dvec(x.begin() + 6, x.begin() + 18);
                       },
                       r2);
        }
        {
            Tensor x0 = uniform_tensor({8}, -2, 2, rng);
            Tensor r = uniform_tensor({2}, -1, 1, rng);
            check_grad("fold_sum_blocks", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::fold_sum_blocks(x, 4); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(2, 0.0);
                           for (int b = 0; b < 4; ++b)
                               for (int i = 0; i < 2; ++i) y[static_cast<size_t>(i)] += x[static_cast<size_t>(b) * 2 + i];
                           return y;
                       },
                       r);
        }
        {
            Tensor x0 = uniform_tensor({2, 1, 4, 4}, -2, 2, rng);
            Tensor r = uniform_tensor({2, 1, 4, 4}, -1, 1, rng);
            auto map = soap::tasks::rotation_map({1, 4, 4}, 1);
            check_grad("permute_within_sample (rot90)", x0,
                       [&](ad::Tape&, ad::Value x) {
                           return ad::permute_within_sample(x, map, x.shape());
                       },
                       [&](const oracle::dvec& x) { return oracle::rotate90(x, 2, 1, 4, 4, 1); },
                       r);
        }
        {
            Tensor x0 = uniform_tensor({3, 5}, -2, 2, rng);
            Tensor mask = Tensor::zeros({3, 5});
            for (auto& v : mask.data) v = rng.uniform() < 0.5f ? 0.0f : 2.0f;
            Tensor r = uniform_tensor({3, 5}, -1, 1, rng);
            check_grad("dropout (fixed mask)", x0,
                       [&](ad::Tape&, ad::Value x) { return ad::dropout_with_mask(x, mask); },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y(x.size());
                           for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask.data[i];
                           return y;
                       },
                       r);
        }
        {
            // batch norm, eval and train modes
            Tensor x0 = uniform_tensor({4, 3, 2, 2}, -2, 2, rng);
            Tensor gamma = uniform_tensor({3}, 0.5, 1.5, rng);
            Tensor beta = uniform_tensor({3}, -0.5, 0.5, rng);
            Tensor rm = uniform_tensor({3}, -0.3, 0.3, rng);
            Tensor rv = uniform_tensor({3}, 0.5, 1.5, rng);
            Tensor r = uniform_tensor({4, 3, 2, 2}, -1, 1, rng);
            check_grad("batch_norm eval", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           Tensor rm_c = rm, rv_c = rv;
                           return ad::batch_norm(x, tp.constant(gamma), tp.constant(beta), rm_c,
                                                 rv_c, false, 0.9f, 1e-5f);
                       },
                       [&](const oracle::dvec& x) {
                           return oracle::batchnorm_eval(x, 4, 3, 4, oracle::to_f64(gamma),
                                                         oracle::to_f64(beta), oracle::to_f64(rm),
                                                         oracle::to_f64(rv), 1e-5);
                       },
                       r);
            check_grad("batch_norm train", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           Tensor rm_c = rm, rv_c = rv;
                           return ad::batch_norm(x, tp.constant(gamma), tp.constant(beta), rm_c,
                                                 rv_c, true, 0.9f, 1e-5f);
                       },
                       [&](const oracle::dvec& x) {
                           return oracle::batchnorm_train(x, 4, 3, 4, oracle::to_f64(gamma),
                                                          oracle::to_f64(beta), 1e-5);
                       },
                       r, 2e-3, 1e-4);
        }
        {
            Tensor x0 = uniform_tensor({2, 3}, -2, 2, rng);
            Tensor r1 = uniform_tensor({1}, -1, 1, rng);
            check_grad("sum", x0, [&](ad::Tape&, ad::Value x) { return ad::sum(x); },
                       [&](const oracle::dvec& x) {
                           double acc = 0.0;
                           for (double v : x) acc += v;
                           return oracle::dvec{acc};
                       },
                       r1);
            check_grad("mean", x0, [&](ad::Tape&, ad::Value x) { return ad::mean(x); },
                       [&](const oracle::dvec& x) {
                           double acc = 0.0;
                           for (double v : x) acc += v;
                           return oracle::dvec{acc / static_cast<double>(x.size())};
                       },
                       r1);
            Tensor o = uniform_tensor({2, 3}, -2, 2, rng);
            Tensor r2 = uniform_tensor({4, 3}, -1, 1, rng);
            check_grad("concat_rows", x0,
                       [&](ad::Tape& tp, ad::Value x) {
                           return ad::concat_rows({x, tp.constant(o)});
                       },
                       [&](const oracle::dvec& x) {
                           oracle::dvec y = x;
                           for (float v : o.data) y.push_back(v);
                           return y;
                       },
                       r2);
        }
    }
}

TEST_CASE("determinism: identical seeds give bit-identical values and gradients") {
    auto run = [] {
        Rng rng(42);
        Tensor x0 = uniform_tensor({4, 2, 6, 6}, 0, 1, rng);
        Tensor w0 = uniform_tensor({3, 2, 3, 3}, -1, 1, rng);
        ad::Tape tape;
        auto x = tape.leaf(x0);
        auto y = ad::relu(ad::conv2d(x, tape.leaf(w0), ad::Value{}, 2, 1));
        auto root = ad::mean(ad::mul(y, y));
        tape.backward(root);
        return std::pair<Tensor, Tensor>(y.tensor(), tape.grad(x));
    };
    const auto a = run();
    const auto b = run();
    CHECK(bitwise_equal(a.first, b.first));
    CHECK(bitwise_equal(a.second, b.second));
}
