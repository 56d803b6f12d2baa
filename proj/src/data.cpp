#include "soap/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace soap::data {

namespace {

struct Reader {
    std::ifstream in;
    int64_t offset = 0;
    std::string path;
    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        require(in.good(), ErrorKind::Io, "cannot open '" + p + "'");
    }
    void read(void* out, size_t n, const char* what) {
        in.read(static_cast<char*>(out), static_cast<std::streamsize>(n));
        require(static_cast<size_t>(in.gcount()) == n, ErrorKind::Format,
                "'" + path + "': truncated while reading " + what + " at offset " +
                    std::to_string(offset));
        offset += static_cast<int64_t>(n);
    }
    uint32_t u32_be(const char* what) {
        uint8_t b[4];
        read(b, 4, what);
        return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
               (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
    }
    int64_t remaining() {
        const auto cur = in.tellg();
        in.seekg(0, std::ios::end);
        const auto end = in.tellg();
        in.seekg(cur);
        return static_cast<int64_t>(end - cur);
    }
};

void put_u32_be(std::ostream& os, uint32_t v) {
    const uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>((v >> 16) & 0xff),
                          static_cast<uint8_t>((v >> 8) & 0xff), static_cast<uint8_t>(v & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint8_t to_u8(float v) {
    const float scaled = std::min(std::max(v, 0.0f), 1.0f) * 255.0f;
    return static_cast<uint8_t>(std::lround(scaled));
}

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    Reader img(images_path);
    const uint32_t img_magic = img.u32_be("image magic");
    require(img_magic == 2051, ErrorKind::Format,
            "'" + images_path + "': bad IDX image magic " + std::to_string(img_magic) +
                " (expected 2051)");
    const uint32_t count = img.u32_be("image count");
    const uint32_t rows = img.u32_be("rows");
    const uint32_t cols = img.u32_be("cols");

    Reader lab(labels_path);
    const uint32_t lab_magic = lab.u32_be("label magic");
    require(lab_magic == 2049, ErrorKind::Format,
            "'" + labels_path + "': bad IDX label magic " + std::to_string(lab_magic) +
                " (expected 2049)");
    const uint32_t lab_count = lab.u32_be("label count");
    require(lab_count == count, ErrorKind::Format,
            "image/label count mismatch: " + std::to_string(count) + " images vs " +
                std::to_string(lab_count) + " labels");

    Dataset ds;
    ds.name = "mnist";
    ds.num_classes = 10;
    ds.input_shape = {1, static_cast<int>(rows), static_cast<int>(cols)};
    ds.x = Tensor::zeros({static_cast<int>(count), 1, static_cast<int>(rows),
                          static_cast<int>(cols)});
    ds.y.resize(count);
    std::vector<uint8_t> buf(static_cast<size_t>(rows) * cols);
    for (uint32_t i = 0; i < count; ++i) {
        img.read(buf.data(), buf.size(), "pixels");
        float* out = ds.x.ptr() + static_cast<int64_t>(i) * rows * cols;
        for (size_t j = 0; j < buf.size(); ++j) out[j] = static_cast<float>(buf[j]) / 255.0f;
        uint8_t label;
        lab.read(&label, 1, "label");
        require(label < 10, ErrorKind::Format,
                "'" + labels_path + "': label " + std::to_string(label) + " out of range");
        ds.y[i] = label;
    }
    return ds;
}

void write_mnist_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    require(ds.input_shape.size() == 3 && ds.input_shape[0] == 1, ErrorKind::Invalid,
            "write_mnist_idx: expects single-channel images");
    std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
    require(img.good(), ErrorKind::Io, "cannot open '" + images_path + "' for writing");
    const int n = ds.size(), h = ds.input_shape[1], w = ds.input_shape[2];
    put_u32_be(img, 2051);
    put_u32_be(img, static_cast<uint32_t>(n));
    put_u32_be(img, static_cast<uint32_t>(h));
    put_u32_be(img, static_cast<uint32_t>(w));
    std::vector<uint8_t> buf(static_cast<size_t>(h) * w);
    for (int i = 0; i < n; ++i) {
        const float* px = ds.x.ptr() + static_cast<int64_t>(i) * h * w;
        for (size_t j = 0; j < buf.size(); ++j) buf[j] = to_u8(px[j]);
        img.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size()));
    }
    require(img.good(), ErrorKind::Io, "write failed for '" + images_path + "'");

    std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
    require(lab.good(), ErrorKind::Io, "cannot open '" + labels_path + "' for writing");
    put_u32_be(lab, 2049);
    put_u32_be(lab, static_cast<uint32_t>(n));
    for (int i = 0; i < n; ++i) {
        const uint8_t label = static_cast<uint8_t>(ds.y[static_cast<size_t>(i)]);
        lab.write(reinterpret_cast<const char*>(&label), 1);
    }
    require(lab.good(), ErrorKind::Io, "write failed for '" + labels_path + "'");
}

Dataset load_cifar10_bin(const std::string& path) {
    Reader r(path);
    const int64_t len = r.remaining();
    constexpr int64_t kRecord = 3073;
    require(len > 0 && len % kRecord == 0, ErrorKind::Format,
            "'" + path + "': length " + std::to_string(len) +
                " is not a multiple of the 3073-byte record size");
    const int n = static_cast<int>(len / kRecord);
    Dataset ds;
    ds.name = "cifar10";
    ds.num_classes = 10;
    ds.input_shape = {3, 32, 32};
    ds.x = Tensor::zeros({n, 3, 32, 32});
    ds.y.resize(static_cast<size_t>(n));
    std::vector<uint8_t> rec(kRecord);
    for (int i = 0; i < n; ++i) {
        r.read(rec.data(), rec.size(), "record");
        require(rec[0] < 10, ErrorKind::Format,
                "'" + path + "': label " + std::to_string(rec[0]) + " out of range in record " +
                    std::to_string(i));
        ds.y[static_cast<size_t>(i)] = rec[0];
        float* out = ds.x.ptr() + static_cast<int64_t>(i) * 3072;
        for (int j = 0; j < 3072; ++j) out[j] = static_cast<float>(rec[static_cast<size_t>(j) + 1]) / 255.0f;
    }
    return ds;
}

void write_cifar10_bin(const Dataset& ds, const std::string& path) {
    require(ds.input_shape == std::vector<int>{3, 32, 32}, ErrorKind::Invalid,
            "write_cifar10_bin: expects (3,32,32) images");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    for (int i = 0; i < ds.size(); ++i) {
        const uint8_t label = static_cast<uint8_t>(ds.y[static_cast<size_t>(i)]);
        os.write(reinterpret_cast<const char*>(&label), 1);
        const float* px = ds.x.ptr() + static_cast<int64_t>(i) * 3072;
        uint8_t buf[3072];
        for (int j = 0; j < 3072; ++j) buf[j] = to_u8(px[j]);
        os.write(reinterpret_cast<const char*>(buf), 3072);
    }
    require(os.good(), ErrorKind::Io, "write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// oriented shapes
// ---------------------------------------------------------------------------

namespace {

struct Rect {  // axis-aligned, canonical (math) coords, y up
    float x0, y0, x1, y1;
    bool contains(float x, float y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct Triangle {
    float ax, ay, bx, by, cx, cy;
    bool contains(float px, float py) const {
        auto side = [&](float x0, float y0, float x1, float y1) {
            return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        };
        const float d1 = side(ax, ay, bx, by);
        const float d2 = side(bx, by, cx, cy);
        const float d3 = side(cx, cy, ax, ay);
        const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
        const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
        return !(has_neg && has_pos);
    }
};

struct Motif {
    std::vector<Rect> rects;
    std::vector<Triangle> tris;
    bool contains(float x, float y) const {
        for (const auto& r : rects)
            if (r.contains(x, y)) return true;
        for (const auto& t : tris)
            if (t.contains(x, y)) return true;
        return false;
    }
};

// canonical motifs point up; h = half height, t = stroke thickness
Motif make_motif(int id, float h, float t, bool mirror) {
    Motif m;
    switch (id) {
        case 0:  // wedge
            m.tris.push_back({0.0f, h, -0.85f * h, -0.7f * h, 0.85f * h, -0.7f * h});
            break;
        case 1:  // T
            m.rects.push_back({-0.85f * h, h - t, 0.85f * h, h});
            m.rects.push_back({-t / 2, -h, t / 2, h - t});
            break;
        case 2:  // bar
            m.rects.push_back({-t, -h, t, h});
            break;
        case 3:  // double bar
            m.rects.push_back({-0.7f * h, -h, -0.7f * h + t, h});
            m.rects.push_back({0.7f * h - t, -h, 0.7f * h, h});
            break;
        case 4:  // flag: pole plus a solid square at the top
            m.rects.push_back({-t / 2, -h, t / 2, h});
            m.rects.push_back({t / 2, h - 0.9f * h, t / 2 + 0.8f * h, h});
            break;
        default: raise(ErrorKind::Invalid, "make_motif: bad id");
    }
    if (mirror) {
        for (auto& r : m.rects) {
            const float nx0 = -r.x1, nx1 = -r.x0;
            r.x0 = nx0;
            r.x1 = nx1;
        }
        for (auto& tr : m.tris) {
            tr.ax = -tr.ax;
            tr.bx = -tr.bx;
            tr.cx = -tr.cx;
        }
    }
    return m;
}

}  // namespace

int rotated_class(int c) {
    require(c >= 0 && c < 10, ErrorKind::Invalid, "rotated_class: class out of range");
    const int motif = c / 2;
    const int axis = c % 2;
    return motif * 2 + (1 - axis);  // vertical <-> horizontal, motif preserved
}

Dataset gen_oriented_shapes(int n, uint64_t seed) {
    require(n > 0, ErrorKind::Config, "gen_oriented_shapes: n must be > 0");
    constexpr int kSize = 32;
    constexpr int kSub = 3;  // subsamples per axis for coverage anti-aliasing
    Dataset ds;
    ds.name = "shapes";
    ds.num_classes = 10;
    ds.input_shape = {1, kSize, kSize};
    ds.x = Tensor::zeros({n, 1, kSize, kSize});
    ds.y.resize(static_cast<size_t>(n));

    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const int cls = i % 10;
        const int motif_id = cls / 2;
        const int axis = cls % 2;  // 0 vertical, 1 horizontal
        const float h = rng.uniform(2.8f, 5.2f);
        const float t = rng.uniform(1.0f, 1.7f);
        const bool mirror = rng.uniform() < 0.5f;
        // quarter turns applied to the motif: vertical = up or down,
        // horizontal = left or right
        const int quarter = axis == 0 ? (rng.uniform() < 0.5f ? 0 : 2)
                                      : (rng.uniform() < 0.5f ? 1 : 3);
        const float cx = 15.5f + rng.uniform(-4.0f, 4.0f);
        const float cy = 13.5f + rng.uniform(-3.5f, 3.5f);
        const Motif motif = make_motif(motif_id, h, t, mirror);

        // extents of the rotated motif decide where the pedestal sits
        const float ex = (quarter % 2 == 0) ? 0.9f * h : h;
        const float ey = (quarter % 2 == 0) ? h : 0.9f * h;
        const float ped_top = cy + ey + rng.uniform(1.0f, 2.0f);
        const float ped_bot = ped_top + rng.uniform(1.4f, 2.2f);
        const float ped_pad = rng.uniform(1.0f, 2.5f);
        const float ped_x0 = cx - ex - ped_pad;
        const float ped_x1 = cx + ex + ped_pad;

        // binary-valued clutter (dots and short bars) raises the difficulty
        // without leaving the {0,1}-plus-antialiasing value set
        struct Clutter {
            float x0, y0, x1, y1;
        };
        std::vector<Clutter> clutter;
        const int n_clutter = 5 + rng.uniform_int(5);
        for (int k = 0; k < n_clutter; ++k) {
            const float w = rng.uniform() < 0.5f ? rng.uniform(0.8f, 1.6f)
                                                 : rng.uniform(2.0f, 4.2f);
            const float hgt = rng.uniform(0.8f, 1.6f);
            const float qx = rng.uniform(2.0f, 29.0f - w);
            const float qy = rng.uniform(2.0f, 29.0f - hgt);
            clutter.push_back({qx, qy, qx + w, qy + hgt});
        }

        float* img = ds.x.ptr() + static_cast<int64_t>(i) * kSize * kSize;
        for (int r = 0; r < kSize; ++r) {
            for (int col = 0; col < kSize; ++col) {
                int hits = 0;
                for (int sr = 0; sr < kSub; ++sr) {
                    for (int sc = 0; sc < kSub; ++sc) {
                        const float py = static_cast<float>(r) + (sr + 0.5f) / kSub;
                        const float px = static_cast<float>(col) + (sc + 0.5f) / kSub;
                        // pedestal lives in image coordinates (gravity cue)
                        if (py >= ped_top && py <= ped_bot && px >= ped_x0 && px <= ped_x1) {
                            ++hits;
                            continue;
                        }
                        bool in_clutter = false;
                        for (const auto& q : clutter) {
                            if (px >= q.x0 && px <= q.x1 && py >= q.y0 && py <= q.y1) {
                                in_clutter = true;
                                break;
                            }
                        }
                        if (in_clutter) {
                            ++hits;
                            continue;
                        }
                        // motif test in rotated, centered coordinates (y up)
                        const float dx = px - cx;
                        const float dy = cy - py;
                        float mx = dx, my = dy;
                        switch (quarter) {  // inverse rotation of the sample point
                            case 0: break;
                            case 1: mx = -dy; my = dx; break;
                            case 2: mx = -dx; my = -dy; break;
                            case 3: mx = dy; my = -dx; break;
                        }
                        if (motif.contains(mx, my)) ++hits;
                    }
                }
                img[r * kSize + col] = static_cast<float>(hits) / (kSub * kSub);
            }
        }
        ds.y[static_cast<size_t>(i)] = cls;
    }

    // deterministic shuffle so class order is not systematic
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(seed ^ 0x5a5a5a5aULL);
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)],
                  perm[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);
    Dataset out = ds;
    const int64_t block = static_cast<int64_t>(kSize) * kSize;
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.x.ptr() + i * block, ds.x.ptr() + perm[static_cast<size_t>(i)] * block,
                    static_cast<size_t>(block) * sizeof(float));
        out.y[static_cast<size_t>(i)] = ds.y[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    return out;
}

// ---------------------------------------------------------------------------
// procedural digits
// ---------------------------------------------------------------------------

namespace {

// classic 5x7 glyphs, row-major from the top
const char* kDigitFont[10] = {
    "01110""10001""10011""10101""11001""10001""01110",
    "00100""01100""00100""00100""00100""00100""01110",
    "01110""10001""00001""00010""00100""01000""11111",
    "11111""00010""00100""00010""00001""10001""01110",
    "00010""00110""01010""10010""11111""00010""00010",
    "11111""10000""11110""00001""00001""10001""01110",
    "00110""01000""10000""11110""10001""10001""01110",
    "11111""00001""00010""00100""01000""01000""01000",
    "01110""10001""10001""01110""10001""10001""01110",
    "01110""10001""10001""01111""00001""00010""01100",
};

}  // namespace

Dataset gen_digits(int n, uint64_t seed) {
    require(n > 0, ErrorKind::Config, "gen_digits: n must be > 0");
    constexpr int kSize = 28;
    constexpr int kSub = 3;
    Dataset ds;
    ds.name = "digits";
    ds.num_classes = 10;
    ds.input_shape = {1, kSize, kSize};
    ds.x = Tensor::zeros({n, 1, kSize, kSize});
    ds.y.resize(static_cast<size_t>(n));

    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const int digit = i % 10;
        const char* glyph = kDigitFont[digit];
        const float scale = rng.uniform(2.4f, 3.2f);     // glyph cell size in pixels
        const float angle = rng.uniform(-0.22f, 0.22f);  // radians
        const float shear = rng.uniform(-0.18f, 0.18f);
        const float tx = 14.0f + rng.uniform(-2.0f, 2.0f);
        const float ty = 14.0f + rng.uniform(-2.0f, 2.0f);
        const float ca = std::cos(angle), sa = std::sin(angle);
        float* img = ds.x.ptr() + static_cast<int64_t>(i) * kSize * kSize;
        for (int r = 0; r < kSize; ++r) {
            for (int c = 0; c < kSize; ++c) {
                int hits = 0;
                for (int sr = 0; sr < kSub; ++sr) {
                    for (int sc = 0; sc < kSub; ++sc) {
                        const float py = static_cast<float>(r) + (sr + 0.5f) / kSub - ty;
                        const float px = static_cast<float>(c) + (sc + 0.5f) / kSub - tx;
                        // inverse rotation, then inverse shear, then glyph cell
                        const float ux = ca * px + sa * py;
                        const float uy = -sa * px + ca * py;
                        const float gx = (ux - shear * uy) / scale + 2.5f;
                        const float gy = uy / scale + 3.5f;
                        const int col = static_cast<int>(std::floor(gx));
                        const int row = static_cast<int>(std::floor(gy));
                        if (col < 0 || col >= 5 || row < 0 || row >= 7) continue;
                        if (glyph[row * 5 + col] == '1') ++hits;
                    }
                }
                img[r * kSize + c] = static_cast<float>(hits) / (kSub * kSub);
            }
        }
        // quantize to the u8 grid so IDX round-trips are lossless
        for (int p = 0; p < kSize * kSize; ++p)
            img[p] = static_cast<float>(to_u8(img[p])) / 255.0f;
        ds.y[static_cast<size_t>(i)] = digit;
    }

    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    Rng shuffle_rng(seed ^ 0xd1d1d1d1ULL);
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)],
                  perm[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);
    Dataset out = ds;
    const int64_t block = static_cast<int64_t>(kSize) * kSize;
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.x.ptr() + i * block, ds.x.ptr() + perm[static_cast<size_t>(i)] * block,
                    static_cast<size_t>(block) * sizeof(float));
        out.y[static_cast<size_t>(i)] = ds.y[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    return out;
}

Dataset subset(const Dataset& ds, int n) {
    require(n >= 1 && n <= ds.size(), ErrorKind::Config,
            "subset: requested " + std::to_string(n) + " of " + std::to_string(ds.size()));
    Dataset out;
    out.name = ds.name;
    out.num_classes = ds.num_classes;
    out.input_shape = ds.input_shape;
    const int64_t block = ds.x.numel() / ds.size();
    std::vector<int> shape = ds.x.shape;
    shape[0] = n;
    out.x = Tensor(shape, std::vector<float>(ds.x.data.begin(),
                                             ds.x.data.begin() + static_cast<size_t>(n * block)));
    out.y.assign(ds.y.begin(), ds.y.begin() + n);
    return out;
}

LabeledBatch slice(const Dataset& ds, int begin, int count) {
    require(begin >= 0 && count >= 1 && begin + count <= ds.size(), ErrorKind::Config,
            "slice: invalid range");
    const int64_t block = ds.x.numel() / ds.size();
    std::vector<int> shape = ds.x.shape;
    shape[0] = count;
    LabeledBatch b;
    b.x = Tensor(shape,
                 std::vector<float>(ds.x.data.begin() + static_cast<size_t>(begin * block),
                                    ds.x.data.begin() + static_cast<size_t>((begin + count) * block)));
    b.y.assign(ds.y.begin() + begin, ds.y.begin() + begin + count);
    return b;
}

std::vector<LabeledBatch> batches(const Dataset& ds, int batch_size, uint64_t shuffle_seed) {
    require(batch_size >= 1, ErrorKind::Config, "batches: batch_size must be >= 1");
    const int n = ds.size();
    std::vector<int> perm(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    Rng rng(shuffle_seed);
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)],
                  perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
    const int64_t block = ds.x.numel() / n;
    std::vector<LabeledBatch> out;
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        std::vector<int> shape = ds.x.shape;
        shape[0] = count;
        LabeledBatch b;
        b.x = Tensor::zeros(shape);
        b.y.resize(static_cast<size_t>(count));
        for (int j = 0; j < count; ++j) {
            const int src = perm[static_cast<size_t>(start + j)];
            std::memcpy(b.x.ptr() + j * block, ds.x.ptr() + src * block,
                        static_cast<size_t>(block) * sizeof(float));
            b.y[static_cast<size_t>(j)] = ds.y[static_cast<size_t>(src)];
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace soap::data
