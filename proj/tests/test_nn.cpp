#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "oracle_ref.hpp"
#include "soap/nn.hpp"

using namespace soap;
using testutil::isclose_all;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("build: fcn classifier is a single linear layer") {
    const auto spec = nn::preset("fcn", {1, 28, 28}, nn::AuxKind::DR);
    CHECK(spec.classifier.size() == 1);
    CHECK(spec.classifier[0].kind == nn::LayerSpec::Kind::Linear);
    CHECK(spec.classifier[0].out == 10);
}

TEST_CASE("build: same seed gives bit-identical parameters") {
    const auto spec = nn::preset("cnn", {1, 28, 28}, nn::AuxKind::DR);
    auto a = nn::build(spec, nn::AuxKind::DR, 7);
    auto b = nn::build(spec, nn::AuxKind::DR, 7);
    auto c = nn::build(spec, nn::AuxKind::DR, 8);
    auto pa = nn::named_parameters(a), pb = nn::named_parameters(b), pc = nn::named_parameters(c);
    REQUIRE(pa.size() == pb.size());
    bool all_same = true, any_diff_seed = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        all_same = all_same && bitwise_equal(*pa[i].tensor, *pb[i].tensor);
        any_diff_seed = any_diff_seed || !bitwise_equal(*pa[i].tensor, *pc[i].tensor);
    }
    CHECK(all_same);
    CHECK(any_diff_seed);
}

TEST_CASE("fcn forward on a zero image: finite logits of shape (1,10)") {
    auto m = nn::build(nn::preset("fcn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 1);
    m.mode = nn::Mode::Eval;
    const Tensor logits = nn::forward_logits(m, Tensor::zeros({1, 1, 28, 28}));
    CHECK(logits.shape == std::vector<int>{1, 10});
    CHECK(all_finite(logits));
}

TEST_CASE("encode: fcn produces z of length 128 and is deterministic in eval mode") {
    auto m = nn::build(nn::preset("fcn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 1);
    m.mode = nn::Mode::Eval;
    Rng rng(3);
    const Tensor x = uniform_tensor({2, 1, 28, 28}, 0, 1, rng);
    ad::Tape t1, t2;
    auto z1 = nn::encode(m, t1, t1.constant(x));
    auto z2 = nn::encode(m, t2, t2.constant(x));
    CHECK(z1.shape() == std::vector<int>{2, 128});
    CHECK(bitwise_equal(z1.tensor(), z2.tensor()));
}

TEST_CASE("encode: wrong input shape is an error") {
    auto m = nn::build(nn::preset("fcn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 1);
    ad::Tape tape;
    CHECK_THROWS_AS(nn::encode(m, tape, tape.constant(Tensor::zeros({2, 1, 27, 27}))), Error);
}

TEST_CASE("train-mode dropout zeroes about half the activations") {
    // single dropout layer as the encoder, driven through encode()
    nn::ArchitectureSpec s;
    s.input_shape = {1, 100, 100};
    s.encoder = {nn::LayerSpec::flatten(), nn::LayerSpec::dropout(0.5f)};
    s.classifier = {nn::LayerSpec::linear(10000, 10)};
    auto m = nn::build(s, nn::AuxKind::LC, 1);
    m.mode = nn::Mode::Train;
    Rng rng(9);
    ad::Tape tape;
    auto z = nn::encode(m, tape, tape.constant(Tensor::full({1, 1, 100, 100}, 1.0f)), &rng);
    int zeros = 0;
    for (float v : z.tensor().data) {
        if (v == 0.0f)
            ++zeros;
        else
            CHECK(v == 2.0f);  // inverted dropout scales survivors by 1/(1-p)
    }
    const double rate = static_cast<double>(zeros) / 10000.0;
    CHECK(rate > 0.45);
    CHECK(rate < 0.55);
}

TEST_CASE("classify: shape, argmax shift invariance, chance accuracy untrained") {
    auto ds = data::gen_oriented_shapes(2000, 5);
    auto m = nn::build(nn::preset("cnn-cifar", ds.input_shape, nn::AuxKind::RP), nn::AuxKind::RP, 3);
    m.mode = nn::Mode::Eval;
    const auto batch = data::slice(ds, 0, 64);
    const Tensor logits = nn::forward_logits(m, batch.x);
    CHECK(logits.shape == std::vector<int>{64, 10});

    // argmax unchanged when a constant is added to every logit
    Tensor shifted = logits;
    for (auto& v : shifted.data) v += 3.25f;
    for (int i = 0; i < 64; ++i) {
        int a = 0, b = 0;
        for (int j = 1; j < 10; ++j) {
            if (logits.data[static_cast<size_t>(i) * 10 + j] > logits.data[static_cast<size_t>(i) * 10 + a]) a = j;
            if (shifted.data[static_cast<size_t>(i) * 10 + j] > shifted.data[static_cast<size_t>(i) * 10 + b]) b = j;
        }
        CHECK(a == b);
    }

    const double acc = train::accuracy(m, ds);
    CHECK(acc > 0.07);
    CHECK(acc < 0.13);
}

TEST_CASE("aux_forward shapes and ranges") {
    Rng rng(4);
    SUBCASE("DR decoder output lies in [0,1]") {
        auto m = nn::build(nn::preset("cnn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 2);
        m.mode = nn::Mode::Eval;
        ad::Tape tape;
        auto z = nn::encode(m, tape, tape.constant(uniform_tensor({3, 1, 28, 28}, 0, 1, rng)));
        auto recon = nn::aux_forward(m, tape, z);
        CHECK(recon.shape() == std::vector<int>{3, 1, 28, 28});
        for (float v : recon.tensor().data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    SUBCASE("RP head produces (batch, 4)") {
        auto m = nn::build(nn::preset("cnn-cifar", {1, 32, 32}, nn::AuxKind::RP), nn::AuxKind::RP, 2);
        m.mode = nn::Mode::Eval;
        ad::Tape tape;
        auto z = nn::encode(m, tape, tape.constant(uniform_tensor({5, 1, 32, 32}, 0, 1, rng)));
        CHECK(nn::aux_forward(m, tape, z).shape() == std::vector<int>{5, 4});
    }
    SUBCASE("LC aux_forward(x) equals classify(encode(x)) exactly") {
        auto m = nn::build(nn::preset("cnn-cifar", {1, 32, 32}, nn::AuxKind::LC), nn::AuxKind::LC, 2);
        m.mode = nn::Mode::Eval;
        const Tensor x = uniform_tensor({4, 1, 32, 32}, 0, 1, rng);
        ad::Tape t1, t2;
        auto via_aux = nn::aux_forward(m, t1, t1.constant(x));
        auto via_cls = nn::classify(m, t2, nn::encode(m, t2, t2.constant(x)));
        CHECK(bitwise_equal(via_aux.tensor(), via_cls.tensor()));
    }
}

TEST_CASE("split-point consistency against the f64 reference walker") {
    Rng rng(6);
    auto m = nn::build(nn::preset("cnn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 11);
    m.mode = nn::Mode::Eval;
    const Tensor x = uniform_tensor({3, 1, 28, 28}, 0, 1, rng);
    const Tensor logits = nn::forward_logits(m, x);
    const auto ref = oracle::classify_ref(m, oracle::encode_ref(m, x), 3);
    Tensor want = Tensor::zeros(logits.shape);
    for (size_t i = 0; i < ref.size(); ++i) want.data[i] = static_cast<float>(ref[i]);
    std::string msg;
    CHECK_MESSAGE(isclose_all(logits, want, 1e-4, 1e-4, &msg), msg);
}

TEST_CASE("eval forward is a pure function (frozen batch-norm statistics)") {
    Rng rng(8);
    auto m = nn::build(nn::preset("cnn", {1, 28, 28}, nn::AuxKind::DR), nn::AuxKind::DR, 4);
    m.mode = nn::Mode::Eval;
    const Tensor x = uniform_tensor({2, 1, 28, 28}, 0, 1, rng);
    const Tensor before = nn::forward_logits(m, x);
    // unrelated eval work must not change anything
    (void)nn::forward_logits(m, uniform_tensor({5, 1, 28, 28}, 0, 1, rng));
    const Tensor after = nn::forward_logits(m, x);
    CHECK(bitwise_equal(before, after));

    // a train-mode pass does update the running statistics
    m.mode = nn::Mode::Train;
    Rng drng(1);
    ad::Tape tape;
    (void)nn::classify(m, tape, nn::encode(m, tape, tape.constant(x), &drng), &drng);
    m.mode = nn::Mode::Eval;
    CHECK_FALSE(bitwise_equal(nn::forward_logits(m, x), before));
}

TEST_CASE("parameter gradients after one backward pass are finite") {
    Rng rng(12);
    auto m = nn::build(testutil::tiny_cnn_spec(nn::AuxKind::DR), nn::AuxKind::DR, 5);
    m.mode = nn::Mode::Train;
    Tensor x = uniform_tensor({16, 1, 8, 8}, 0, 1, rng);
    std::vector<int> y(16);
    for (int i = 0; i < 16; ++i) y[static_cast<size_t>(i)] = i % 10;
    tasks::AuxTaskConfig cfg;
    cfg.kind = nn::AuxKind::DR;
    cfg.alpha = 2.0f;
    cfg.noise_sigma = 0.3f;
    Rng lrng(2);
    ad::Tape tape;
    nn::ParamBinding binding;
    auto joint = tasks::joint_loss(m, tape, x, y, cfg, lrng, &binding);
    tape.backward(joint.total);
    int checked = 0;
    for (const auto& [tensor, value] : binding.bound) {
        if (!tape.has_grad(value)) continue;
        CHECK(all_finite(tape.grad(value)));
        ++checked;
    }
    CHECK(checked > 0);
}

TEST_CASE("checkpoint round-trip") {
    auto m = nn::build(testutil::tiny_cnn_spec(nn::AuxKind::DR), nn::AuxKind::DR, 21);
    m.mode = nn::Mode::Eval;
    const std::string p1 = "ck_test_a.soap", p2 = "ck_test_b.soap";
    nn::save_checkpoint(m, p1);
    auto loaded = nn::load_checkpoint(p1);
    nn::save_checkpoint(loaded, p2);
    CHECK(read_file(p1) == read_file(p2));

    Rng rng(3);
    const Tensor x = uniform_tensor({2, 1, 8, 8}, 0, 1, rng);
    loaded.mode = nn::Mode::Eval;
    CHECK(bitwise_equal(nn::forward_logits(m, x), nn::forward_logits(loaded, x)));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("checkpoint error taxonomy") {
    auto m = nn::build(testutil::tiny_fcn_spec(nn::AuxKind::RP), nn::AuxKind::RP, 2);
    const std::string path = "ck_test_err.soap";
    nn::save_checkpoint(m, path);

    SUBCASE("corrupted magic") {
        auto bytes = read_file(path);
        bytes[0] = 'X';
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_WITH_AS(nn::load_checkpoint(path), doctest::Contains("magic"), Error);
    }
    SUBCASE("truncated file") {
        auto bytes = read_file(path);
        bytes.resize(bytes.size() / 2);
        std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
        CHECK_THROWS_WITH_AS(nn::load_checkpoint(path), doctest::Contains("truncated"), Error);
    }
    SUBCASE("shape mismatch against the header") {
        // rebuild the container with one wrong-shaped tensor
        auto tensors = nn::load_tensors(path);
        for (auto& [name, tensor] : tensors)
            if (name == "cls.0.b") tensor = Tensor::zeros({7});
        nn::save_tensors(path, tensors, static_cast<uint8_t>(nn::AuxKind::RP));
        CHECK_THROWS_WITH_AS(nn::load_checkpoint(path), doctest::Contains("shape"), Error);
    }
    std::remove(path.c_str());
}

TEST_CASE("custom spec validation names the offending layer") {
    nn::ArchitectureSpec s;
    s.input_shape = {1, 8, 8};
    s.encoder = {nn::LayerSpec::flatten(), nn::LayerSpec::linear(64, 32)};
    s.classifier = {nn::LayerSpec::linear(16, 10)};  // expects 32
    try {
        nn::build(s, nn::AuxKind::LC, 1);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("classifier layer 0") != std::string::npos);
    }
}
