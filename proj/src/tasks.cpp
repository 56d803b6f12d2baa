#include "soap/tasks.hpp"

#include <algorithm>
#include <cmath>

namespace soap::tasks {

using ad::Value;
using nn::AuxKind;

Value ce_per_sample(ad::Tape& tape, Value logits, const std::vector<int>& labels) {
    (void)tape;
    Value lsm = ad::log_softmax(logits);
    Value picked = ad::gather_cols(lsm, labels);
    return ad::scalar_mul(picked, -1.0f);
}

Value cls_loss(ad::Tape& tape, Value logits, const std::vector<int>& labels) {
    return ad::mean(ce_per_sample(tape, logits, labels));
}

// ---------------------------------------------------------------------------
// rotations / flips / shifts as index maps
// ---------------------------------------------------------------------------

namespace {

// reflect an index into [0, n) (mirror including the edge sample)
int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

// single quarter-turn counter-clockwise: out[r][c] = in[c][H-1-r]
std::vector<int> quarter_turn_map(int c, int h, int w) {
    std::vector<int> map(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col)
                map[(static_cast<size_t>(ch) * h + r) * w + col] =
                    (ch * h + col) * w + (h - 1 - r);
    return map;
}

std::vector<int> hflip_map(int c, int h, int w) {
    std::vector<int> map(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col)
                map[(static_cast<size_t>(ch) * h + r) * w + col] =
                    (ch * h + r) * w + (w - 1 - col);
    return map;
}

// shift with reflect padding: out[r][c] = in[reflect(r - dy), reflect(c - dx)]
std::vector<int> shift_map(int c, int h, int w, int dy, int dx) {
    std::vector<int> map(static_cast<size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col)
                map[(static_cast<size_t>(ch) * h + r) * w + col] =
                    (ch * h + reflect_index(r - dy, h)) * w + reflect_index(col - dx, w);
    return map;
}

std::vector<int> compose_maps(const std::vector<int>& outer, const std::vector<int>& inner) {
    // apply inner first, then outer: out[j] = in[inner[outer[j]]]
    std::vector<int> map(outer.size());
    for (size_t j = 0; j < outer.size(); ++j)
        map[j] = inner[static_cast<size_t>(outer[j])];
    return map;
}

std::vector<int> chw_of(const std::vector<int>& shape, const char* what) {
    require(shape.size() == 3 || shape.size() == 4, ErrorKind::Shape,
            std::string(what) + ": expected (C,H,W) or (N,C,H,W), got " + shape_str(shape));
    if (shape.size() == 4) return {shape[1], shape[2], shape[3]};
    return shape;
}

void apply_map_tensor(const Tensor& in, Tensor& out, const std::vector<int>& map, int n,
                      int64_t block) {
    for (int i = 0; i < n; ++i) {
        const float* src = in.ptr() + i * block;
        float* dst = out.ptr() + i * block;
        for (int64_t j = 0; j < block; ++j) dst[j] = src[map[static_cast<size_t>(j)]];
    }
}

}  // namespace

std::shared_ptr<const std::vector<int>> rotation_map(const std::vector<int>& chw, int k) {
    require(chw.size() == 3, ErrorKind::Shape, "rotation_map: expected (C,H,W)");
    require(chw[1] == chw[2], ErrorKind::Shape,
            "rotate90: requires square spatial dims, got " + shape_str(chw));
    require(k >= 0, ErrorKind::Config, "rotate90: k must be >= 0");
    const int c = chw[0], h = chw[1], w = chw[2];
    std::vector<int> map(static_cast<size_t>(c) * h * w);
    for (size_t i = 0; i < map.size(); ++i) map[i] = static_cast<int>(i);
    const auto quarter = quarter_turn_map(c, h, w);
    for (int i = 0; i < k % 4; ++i) map = compose_maps(map, quarter);
    return std::make_shared<const std::vector<int>>(std::move(map));
}

Tensor rotate90(const Tensor& x, int k) {
    const auto chw = chw_of(x.shape, "rotate90");
    const auto map = rotation_map(chw, k);
    const int n = x.rank() == 4 ? x.shape[0] : 1;
    Tensor out = Tensor::zeros(x.shape);
    apply_map_tensor(x, out, *map, n, shape_numel(chw));
    return out;
}

Value rotate90(Value x, int k) {
    const auto chw = chw_of(x.shape(), "rotate90");
    require(x.shape().size() == 4, ErrorKind::Shape,
            "rotate90 (tape): expected batched (N,C,H,W), got " + shape_str(x.shape()));
    return ad::permute_within_sample(x, rotation_map(chw, k), x.shape());
}

Tensor corrupt_clip(const Tensor& x, float sigma, Rng& rng) {
    Tensor out = x;
    if (sigma > 0.0f) {
        for (auto& v : out.data) v += rng.normal(0.0f, sigma);
    }
    for (auto& v : out.data) v = std::min(std::max(v, 0.0f), 1.0f);
    return out;
}

std::pair<Tensor, Tensor> augment_lc(const Tensor& x, LcMode mode, Rng* rng, float sigma) {
    const auto chw = chw_of(x.shape, "augment_lc");
    require(x.rank() == 4, ErrorKind::Shape,
            "augment_lc: expected batched (N,C,H,W), got " + shape_str(x.shape));
    const int n = x.shape[0];
    const int64_t block = shape_numel(chw);
    if (mode == LcMode::Purify) {
        // a1 is the input itself so every pixel is purified; a2 is a definite
        // flip + fixed 2-pixel shifted crop.
        Tensor a2 = Tensor::zeros(x.shape);
        const auto map = compose_maps(shift_map(chw[0], chw[1], chw[2], 2, 2),
                                      hflip_map(chw[0], chw[1], chw[2]));
        apply_map_tensor(x, a2, map, n, block);
        return {x, std::move(a2)};
    }
    require(rng != nullptr, ErrorKind::Invalid, "augment_lc: train mode requires an rng");
    auto random_view = [&]() {
        Tensor v = Tensor::zeros(x.shape);
        for (int i = 0; i < n; ++i) {
            const bool flip = rng->uniform() < 0.5f;
            const int dy = rng->uniform_int(9) - 4;  // pad 4 then crop
            const int dx = rng->uniform_int(9) - 4;
            auto map = shift_map(chw[0], chw[1], chw[2], dy, dx);
            if (flip) map = compose_maps(map, hflip_map(chw[0], chw[1], chw[2]));
            const float* src = x.ptr() + i * block;
            float* dst = v.ptr() + i * block;
            for (int64_t j = 0; j < block; ++j) dst[j] = src[map[static_cast<size_t>(j)]];
        }
        if (sigma > 0.0f)
            for (auto& val : v.data) val += rng->normal(0.0f, sigma);
        for (auto& val : v.data) val = std::min(std::max(val, 0.0f), 1.0f);
        return v;
    };
    Tensor a1 = random_view();
    Tensor a2 = random_view();
    return {std::move(a1), std::move(a2)};
}

Value lc_second_view(Value x) {
    const auto chw = chw_of(x.shape(), "lc_second_view");
    require(x.shape().size() == 4, ErrorKind::Shape,
            "lc_second_view: expected batched (N,C,H,W), got " + shape_str(x.shape()));
    auto map = std::make_shared<const std::vector<int>>(compose_maps(
        shift_map(chw[0], chw[1], chw[2], 2, 2), hflip_map(chw[0], chw[1], chw[2])));
    return ad::permute_within_sample(x, map, x.shape());
}

// ---------------------------------------------------------------------------
// auxiliary losses
// ---------------------------------------------------------------------------

namespace {

Value maybe_corrupt_on_tape(ad::Tape& tape, Value x, float sigma, bool corrupt, Rng* rng) {
    if (!corrupt || sigma <= 0.0f) return x;
    require(rng != nullptr, ErrorKind::Invalid, "corrupted loss requires an rng");
    Tensor noise = normal_tensor(x.shape(), 0.0f, sigma, *rng);
    Value eta = tape.constant(std::move(noise));
    return ad::clamp(ad::add(x, eta), 0.0f, 1.0f);
}

Value squared_dist_per_sample(Value a, Value b) {
    require(a.shape() == b.shape(), ErrorKind::Shape,
            "squared distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int n = a.shape()[0];
    Value d = ad::sub(a, b);
    Value sq = ad::mul(d, d);
    Value flat = ad::reshape(sq, {n, static_cast<int>(sq.tensor().numel() / n)});
    return ad::sum_rows(flat);
}

}  // namespace

Value dr_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, Value x, float sigma, bool corrupt,
                         Rng* rng, nn::ParamBinding* binding) {
    require(m.aux_kind == AuxKind::DR, ErrorKind::Invalid,
            "dr_loss: model auxiliary task is " + nn::aux_kind_name(m.aux_kind) + ", not dr");
    Value xin = maybe_corrupt_on_tape(tape, x, sigma, corrupt, rng);
    Value z = nn::encode(m, tape, xin, rng, binding);
    Value recon = nn::aux_forward(m, tape, z, rng, binding);
    return squared_dist_per_sample(x, recon);
}

Value rp_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, Value x, RpVariant variant,
                         float sigma, bool corrupt, Rng* rng, nn::ParamBinding* binding) {
    require(m.aux_kind == AuxKind::RP, ErrorKind::Invalid,
            "rp_loss: model auxiliary task is " + nn::aux_kind_name(m.aux_kind) + ", not rp");
    const int n = x.shape()[0];
    std::vector<Value> rots;
    rots.reserve(4);
    for (int k = 0; k < 4; ++k) rots.push_back(rotate90(x, k));
    Value x4 = ad::concat_rows(rots);
    x4 = maybe_corrupt_on_tape(tape, x4, sigma, corrupt, rng);
    Value z4 = nn::encode(m, tape, x4, rng, binding);
    Value logits4 = nn::aux_forward(m, tape, z4, rng, binding);
    if (variant == RpVariant::CE) {
        std::vector<int> labels(static_cast<size_t>(4) * n);
        for (int k = 0; k < 4; ++k)
            for (int i = 0; i < n; ++i) labels[static_cast<size_t>(k) * n + i] = k;
        Value per_copy = ce_per_sample(tape, logits4, labels);
        return ad::fold_sum_blocks(per_copy, 4);
    }
    // MSE between predictive distributions and one-hot targets
    Value p = ad::softmax(logits4);
    Tensor onehot = Tensor::zeros({4 * n, 4});
    for (int k = 0; k < 4; ++k)
        for (int i = 0; i < n; ++i) onehot.data[(static_cast<size_t>(k) * n + i) * 4 + k] = 1.0f;
    Value t = tape.constant(std::move(onehot));
    Value d = ad::sub(p, t);
    Value per_copy = ad::sum_rows(ad::mul(d, d));
    return ad::fold_sum_blocks(per_copy, 4);
}

Value lc_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, Value a1_out, Value a2_out,
                         Rng* rng, nn::ParamBinding* binding) {
    require(m.aux_kind == AuxKind::LC, ErrorKind::Invalid,
            "lc_loss: model auxiliary task is " + nn::aux_kind_name(m.aux_kind) + ", not lc");
    require(a1_out.shape() == a2_out.shape(), ErrorKind::Shape,
            "lc_loss: view shape mismatch " + shape_str(a1_out.shape()) + " vs " +
                shape_str(a2_out.shape()));
    const int n = a1_out.shape()[0];
    Value both = ad::concat_rows({a1_out, a2_out});
    Value logits = nn::classify(m, tape, nn::encode(m, tape, both, rng, binding), rng, binding);
    Value g1 = ad::slice_rows(logits, 0, n);
    Value g2 = ad::slice_rows(logits, n, n);
    return squared_dist_per_sample(g1, g2);
}

Value dr_loss(nn::ModelBundle& m, ad::Tape& tape, Value x, float sigma, bool corrupt, Rng* rng) {
    return ad::mean(dr_loss_per_sample(m, tape, x, sigma, corrupt, rng));
}

Value rp_loss(nn::ModelBundle& m, ad::Tape& tape, Value x, RpVariant variant, float sigma,
              bool corrupt, Rng* rng) {
    return ad::mean(rp_loss_per_sample(m, tape, x, variant, sigma, corrupt, rng));
}

Value lc_loss(nn::ModelBundle& m, ad::Tape& tape, Value a1_out, Value a2_out) {
    return ad::mean(lc_loss_per_sample(m, tape, a1_out, a2_out));
}

Value purification_loss_per_sample(nn::ModelBundle& m, ad::Tape& tape, Value x, bool rp_mse) {
    switch (m.aux_kind) {
        case AuxKind::DR:
            return dr_loss_per_sample(m, tape, x, 0.0f, false, nullptr);
        case AuxKind::RP:
            return rp_loss_per_sample(m, tape, x, rp_mse ? RpVariant::MSE : RpVariant::CE, 0.0f,
                                      false, nullptr);
        case AuxKind::LC: {
            Value a2 = lc_second_view(x);
            return lc_loss_per_sample(m, tape, x, a2);
        }
    }
    raise(ErrorKind::Invalid, "purification loss: unknown aux kind");
}

// ---------------------------------------------------------------------------
// joint objective
// ---------------------------------------------------------------------------

JointLoss joint_loss(nn::ModelBundle& m, ad::Tape& tape, const Tensor& x,
                     const std::vector<int>& y, const AuxTaskConfig& cfg, Rng& rng,
                     nn::ParamBinding* binding) {
    require(cfg.alpha >= 0.0f, ErrorKind::Config, "joint_loss: alpha must be >= 0");
    require(cfg.noise_sigma >= 0.0f, ErrorKind::Config, "joint_loss: noise_sigma must be >= 0");
    require(static_cast<int>(y.size()) == x.shape.at(0), ErrorKind::Shape,
            "joint_loss: label count does not match batch");
    JointLoss out;
    const int n = x.shape[0];

    if (cfg.alpha == 0.0f) {
        // vanilla path: no corruption, no auxiliary graph
        Value xv = tape.constant(x);
        Value logits = nn::classify(m, tape, nn::encode(m, tape, xv, &rng, binding), &rng, binding);
        out.cls = cls_loss(tape, logits, y);
        out.total = out.cls;
        return out;
    }

    require(cfg.kind == m.aux_kind, ErrorKind::Config,
            "joint_loss: config aux kind " + nn::aux_kind_name(cfg.kind) +
                " does not match model " + nn::aux_kind_name(m.aux_kind));

    switch (cfg.kind) {
        case AuxKind::DR: {
            // one corrupted encoding shared by classification and reconstruction
            Value xv = tape.constant(x);
            Value xc = maybe_corrupt_on_tape(tape, xv, cfg.noise_sigma, true, &rng);
            Value z = nn::encode(m, tape, xc, &rng, binding);
            Value logits = nn::classify(m, tape, z, &rng, binding);
            out.cls = cls_loss(tape, logits, y);
            Value recon = nn::aux_forward(m, tape, z, &rng, binding);
            out.aux = ad::mean(squared_dist_per_sample(xv, recon));
            break;
        }
        case AuxKind::RP: {
            Value xv = tape.constant(x);
            std::vector<Value> rots;
            for (int k = 0; k < 4; ++k) rots.push_back(rotate90(xv, k));
            Value x4 = maybe_corrupt_on_tape(tape, ad::concat_rows(rots), cfg.noise_sigma, true,
                                             &rng);
            Value z4 = nn::encode(m, tape, x4, &rng, binding);
            Value logits4 = nn::aux_forward(m, tape, z4, &rng, binding);
            std::vector<int> rot_labels(static_cast<size_t>(4) * n);
            for (int k = 0; k < 4; ++k)
                for (int i = 0; i < n; ++i) rot_labels[static_cast<size_t>(k) * n + i] = k;
            Value per_copy = ce_per_sample(tape, logits4, rot_labels);
            out.aux = ad::mean(ad::fold_sum_blocks(per_copy, 4));
            // the upright (and corrupted) copies also feed the classifier
            Value z0 = ad::slice_rows(z4, 0, n);
            Value logits = nn::classify(m, tape, z0, &rng, binding);
            out.cls = cls_loss(tape, logits, y);
            break;
        }
        case AuxKind::LC: {
            auto views = augment_lc(x, LcMode::Train, &rng, cfg.noise_sigma);
            Value both = ad::concat_rows({tape.constant(std::move(views.first)),
                                          tape.constant(std::move(views.second))});
            Value z = nn::encode(m, tape, both, &rng, binding);
            Value logits2 = nn::classify(m, tape, z, &rng, binding);
            // both augmented copies train the classifier
            std::vector<int> y2(y.begin(), y.end());
            y2.insert(y2.end(), y.begin(), y.end());
            out.cls = cls_loss(tape, logits2, y2);
            Value g1 = ad::slice_rows(logits2, 0, n);
            Value g2 = ad::slice_rows(logits2, n, n);
            out.aux = ad::mean(squared_dist_per_sample(g1, g2));
            break;
        }
    }
    out.total = ad::add(out.cls, ad::scalar_mul(out.aux, cfg.alpha));
    return out;
}

}  // namespace soap::tasks
