#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "helpers.hpp"
#include "soap/data.hpp"

using namespace soap;

namespace {

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

void push_u32_be(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>((x >> 16) & 0xff));
    v.push_back(static_cast<uint8_t>((x >> 8) & 0xff));
    v.push_back(static_cast<uint8_t>(x & 0xff));
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("mnist idx: hand-built single-image file") {
    std::vector<uint8_t> img;
    push_u32_be(img, 2051);
    push_u32_be(img, 1);
    push_u32_be(img, 2);
    push_u32_be(img, 2);
    img.insert(img.end(), {0, 128, 255, 64});
    std::vector<uint8_t> lab;
    push_u32_be(lab, 2049);
    push_u32_be(lab, 1);
    lab.push_back(7);
    write_bytes("idx_img_test", img);
    write_bytes("idx_lab_test", lab);

    const auto ds = data::load_mnist_idx("idx_img_test", "idx_lab_test");
    CHECK(ds.size() == 1);
    CHECK(ds.input_shape == std::vector<int>{1, 2, 2});
    CHECK(ds.x.data == std::vector<float>{0.0f, 128.0f / 255.0f, 1.0f, 64.0f / 255.0f});
    CHECK(ds.y == std::vector<int>{7});

    SUBCASE("image/label count mismatch") {
        std::vector<uint8_t> lab2;
        push_u32_be(lab2, 2049);
        push_u32_be(lab2, 2);
        lab2.push_back(1);
        lab2.push_back(2);
        write_bytes("idx_lab_test", lab2);
        CHECK_THROWS_WITH_AS(data::load_mnist_idx("idx_img_test", "idx_lab_test"),
                             doctest::Contains("mismatch"), Error);
    }
    SUBCASE("wrong magic") {
        img[3] = 9;
        write_bytes("idx_img_test", img);
        CHECK_THROWS_WITH_AS(data::load_mnist_idx("idx_img_test", "idx_lab_test"),
                             doctest::Contains("magic"), Error);
    }
    SUBCASE("truncated pixel data reports the offset") {
        img.pop_back();
        write_bytes("idx_img_test", img);
        CHECK_THROWS_WITH_AS(data::load_mnist_idx("idx_img_test", "idx_lab_test"),
                             doctest::Contains("truncated"), Error);
    }
    std::remove("idx_img_test");
    std::remove("idx_lab_test");
}

TEST_CASE("mnist idx: round-trip through the writer") {
    const auto ds = data::gen_digits(64, 9);
    data::write_mnist_idx(ds, "idx_rt_img", "idx_rt_lab");
    const auto back = data::load_mnist_idx("idx_rt_img", "idx_rt_lab");
    CHECK(back.size() == 64);
    CHECK(bitwise_equal(back.x, ds.x));  // generator quantizes to the u8 grid
    CHECK(back.y == ds.y);
    // writer-reader fixpoint on bytes
    data::write_mnist_idx(back, "idx_rt_img2", "idx_rt_lab2");
    CHECK(file_bytes("idx_rt_img") == file_bytes("idx_rt_img2"));
    for (const char* f : {"idx_rt_img", "idx_rt_lab", "idx_rt_img2", "idx_rt_lab2"})
        std::remove(f);
}

TEST_CASE("real mnist (only when SOAP_DATA_DIR provides it)") {
    const char* dir = std::getenv("SOAP_DATA_DIR");
    const std::string base = dir ? std::string(dir) + "/" : "";
    if (!dir || !std::ifstream(base + "train-images-idx3-ubyte").good()) {
        MESSAGE("real MNIST not present; skipping the 60000-image header check");
        return;
    }
    const auto ds = data::load_mnist_idx(base + "train-images-idx3-ubyte",
                                         base + "train-labels-idx1-ubyte");
    CHECK(ds.size() == 60000);
    CHECK(ds.input_shape == std::vector<int>{1, 28, 28});
}

TEST_CASE("cifar10 binary") {
    SUBCASE("synthetic single record") {
        std::vector<uint8_t> rec(3073, 255);
        rec[0] = 7;
        write_bytes("cifar_test.bin", rec);
        const auto ds = data::load_cifar10_bin("cifar_test.bin");
        CHECK(ds.size() == 1);
        CHECK(ds.y == std::vector<int>{7});
        for (float v : ds.x.data) CHECK(v == 1.0f);
        std::remove("cifar_test.bin");
    }
    SUBCASE("record count = file length / 3073") {
        std::vector<uint8_t> three(3 * 3073, 0);
        write_bytes("cifar_test.bin", three);
        CHECK(data::load_cifar10_bin("cifar_test.bin").size() == 3);
        std::remove("cifar_test.bin");
    }
    SUBCASE("length not a multiple of the record size") {
        write_bytes("cifar_test.bin", std::vector<uint8_t>(3072, 0));
        CHECK_THROWS_WITH_AS(data::load_cifar10_bin("cifar_test.bin"),
                             doctest::Contains("3073"), Error);
        std::remove("cifar_test.bin");
    }
    SUBCASE("writer-reader round trip reproduces bytes") {
        std::vector<uint8_t> recs;
        Rng rng(4);
        for (int i = 0; i < 5; ++i) {
            recs.push_back(static_cast<uint8_t>(i % 10));
            for (int j = 0; j < 3072; ++j)
                recs.push_back(static_cast<uint8_t>(rng.uniform_int(256)));
        }
        write_bytes("cifar_rt.bin", recs);
        const auto ds = data::load_cifar10_bin("cifar_rt.bin");
        data::write_cifar10_bin(ds, "cifar_rt2.bin");
        CHECK(file_bytes("cifar_rt.bin") == file_bytes("cifar_rt2.bin"));
        std::remove("cifar_rt.bin");
        std::remove("cifar_rt2.bin");
    }
}

TEST_CASE("oriented shapes generator") {
    const auto ds = data::gen_oriented_shapes(500, 21);
    SUBCASE("deterministic for a fixed seed") {
        const auto again = data::gen_oriented_shapes(500, 21);
        CHECK(bitwise_equal(ds.x, again.x));
        CHECK(ds.y == again.y);
        const auto other = data::gen_oriented_shapes(500, 22);
        CHECK_FALSE(bitwise_equal(ds.x, other.x));
    }
    SUBCASE("rotation maps every class to a different class") {
        int changed = 0;
        for (int c = 0; c < 10; ++c) {
            if (data::rotated_class(c) != c) ++changed;
            // axis flips, motif is preserved
            CHECK(data::rotated_class(c) / 2 == c / 2);
            CHECK(data::rotated_class(data::rotated_class(c)) == c);
        }
        CHECK(changed >= 8);
    }
    SUBCASE("pixels lie in [0,1] with exact background and interior values") {
        bool has_zero = false, has_one = false;
        for (float v : ds.x.data) {
            CHECK((v >= 0.0f && v <= 1.0f));
            has_zero = has_zero || v == 0.0f;
            has_one = has_one || v == 1.0f;
        }
        CHECK(has_zero);
        CHECK(has_one);
    }
    SUBCASE("labels are balanced within one") {
        std::vector<int> counts(10, 0);
        for (int y : ds.y) counts[static_cast<size_t>(y)]++;
        const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
        CHECK(*mx - *mn <= 1);
    }
    SUBCASE("no NaN from any generator or loader") { CHECK(all_finite(ds.x)); }
}

TEST_CASE("digits generator basics") {
    const auto ds = data::gen_digits(300, 3);
    CHECK(ds.input_shape == std::vector<int>{1, 28, 28});
    std::vector<int> counts(10, 0);
    for (int y : ds.y) counts[static_cast<size_t>(y)]++;
    const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*mx - *mn <= 1);
    for (float v : ds.x.data) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(bitwise_equal(ds.x, data::gen_digits(300, 3).x));
}

TEST_CASE("batches") {
    const auto ds = data::gen_digits(205, 5);
    SUBCASE("covers every example exactly once; last batch short") {
        const auto bs = data::batches(ds, 64, 7);
        int total = 0;
        for (const auto& b : bs) total += static_cast<int>(b.y.size());
        CHECK(total == 205);
        CHECK(bs.back().y.size() == 205 % 64);
    }
    SUBCASE("fixed shuffle seed reproduces the order") {
        const auto a = data::batches(ds, 50, 9);
        const auto b = data::batches(ds, 50, 9);
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].y == b[i].y);
            CHECK(bitwise_equal(a[i].x, b[i].x));
        }
    }
    SUBCASE("different seeds give different orders") {
        const auto a = data::batches(ds, 205, 1);
        const auto b = data::batches(ds, 205, 2);
        CHECK(a[0].y != b[0].y);
    }
}
