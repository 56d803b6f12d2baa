#include "soap/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace soap {

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    require(shape_numel(shape) == static_cast<int64_t>(data.size()), ErrorKind::Shape,
            "tensor: shape " + shape_str(shape) + " does not match buffer of " +
                std::to_string(data.size()) + " elements");
}

Tensor Tensor::zeros(std::vector<int> shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), 0.0f));
}

Tensor Tensor::full(std::vector<int> shape, float v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<size_t>(n), v));
}

bool all_finite(const Tensor& t) {
    for (float v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

void check_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) raise(ErrorKind::Numeric, what + ": non-finite values detected");
}

Tensor uniform_tensor(std::vector<int> shape, float lo, float hi, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

Tensor normal_tensor(std::vector<int> shape, float mean, float stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.normal(mean, stddev);
    return t;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), ErrorKind::Shape,
            "max_abs_diff: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace soap
