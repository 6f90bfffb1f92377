#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rpt/tensor.hpp"

// Differentiable operations over Tensor. Layout is row-major; a spatial map
// h x w x c stores element (i, j, ch) at (i * w + j) * c + ch.
namespace rpt {

// elementwise, equal shapes
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
// gate * x where gate is a one-element tensor; grad flows to both.
Tensor gate(const Tensor& x, const Tensor& gate);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor abs(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_over_axes(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
// x[n x m] + bias[m] added to every row
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// dot(a, b) / (|a| |b|) for two equal-length tensors viewed as vectors.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Every row of x[n x c] scaled to unit L2 norm.
Tensor normalize_rows(const Tensor& x);

// Spatial maps h x w x c.
Tensor crop(const Tensor& x, std::size_t row, std::size_t col, std::size_t rows, std::size_t cols);
// Inverse of cropping a k x k grid of equal tiles; tiles in row-major order.
Tensor assemble_grid(std::span<const Tensor> tiles, std::size_t k);
// Half-pixel-centre bilinear interpolation; out extents must not shrink.
Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w);
// x[h x w x cin], weight[kh x kw x cin x cout], bias[cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

// Mean binary cross-entropy of probabilities p against constant 0/1 targets;
// p clamped to [clamp, 1 - clamp].
Tensor binary_cross_entropy(const Tensor& p, std::span<const double> target, double clamp = 1e-7);
// Mean |x - target| against a constant target.
Tensor l1_loss(const Tensor& x, std::span<const double> target);

}  // namespace rpt
