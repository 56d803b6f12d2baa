#pragma once

#include <string>
#include <vector>

#include "soap/tensor.hpp"

namespace soap::data {

struct LabeledBatch {
    Tensor x;  // (batch, C, H, W) in [0,1]
    std::vector<int> y;
};

struct Dataset {
    std::string name;
    int num_classes = 10;
    std::vector<int> input_shape;  // per sample (C,H,W)
    Tensor x;                      // (N,C,H,W)
    std::vector<int> y;
    int size() const { return x.shape.empty() ? 0 : x.shape[0]; }
};

// MNIST IDX pair (big-endian headers, magic 2051/2049); pixels scaled to [0,1].
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
void write_mnist_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path);

// CIFAR-10 binary (3073-byte records, channel-planar u8).
Dataset load_cifar10_bin(const std::string& path);
void write_cifar10_bin(const Dataset& ds, const std::string& path);

// Synthetic 1x32x32 shapes whose class identity is orientation-dependent:
// 5 motifs x {vertical, horizontal} = 10 classes, drawn standing on a pedestal
// (the canonical-orientation cue that makes rotation prediction well-posed).
Dataset gen_oriented_shapes(int n, uint64_t seed);
// rotate90 maps class c to rotated_class(c) != c for every class.
int rotated_class(int c);

// Procedural 1x28x28 digits (glyphs with affine jitter); MNIST-like stand-in.
Dataset gen_digits(int n, uint64_t seed);

Dataset subset(const Dataset& ds, int n);
LabeledBatch slice(const Dataset& ds, int begin, int count);
// Every example exactly once per epoch; last batch may be short.
std::vector<LabeledBatch> batches(const Dataset& ds, int batch_size, uint64_t shuffle_seed);

}  // namespace soap::data
