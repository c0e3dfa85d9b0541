#pragma once

#include <cstddef>
#include <span>

#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

// Elementwise binary ops require identical shapes; the only broadcast allowed
// is a rank-0 operand against a tensor of any shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real offset);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [M x K] * [K x N] -> [M x N]
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax over the last axis, stabilized by subtracting the slice maximum.
Tensor softmax(const Tensor& logits);

// Picks one entry per row of an [N x K] tensor: out[n] = a[n, index[n]].
Tensor pick(const Tensor& a, std::span<const std::size_t> index);

// Cross-correlation of an [N x C x H x W] input with an [F x C x kH x kW]
// kernel. `bias` may be undefined, otherwise it has shape [F].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, Tensor(), stride, padding);
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

NPTT_NAMESPACE_END
