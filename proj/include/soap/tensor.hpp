#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "soap/common.hpp"

namespace soap {

std::string shape_str(const std::vector<int>& shape);

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

// Dense row-major f32 tensor; the universal value type.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> shape_, std::vector<float> data_);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float v);
    static Tensor scalar(float v) { return full({1}, v); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }
};

bool all_finite(const Tensor& t);
void check_finite(const Tensor& t, const std::string& what);

Tensor uniform_tensor(std::vector<int> shape, float lo, float hi, Rng& rng);
Tensor normal_tensor(std::vector<int> shape, float mean, float stddev, Rng& rng);

float max_abs_diff(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace soap
