#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dssl/tensor.hpp"

// Differentiable operations. Binary elementwise ops accept equal shapes or a
// right-hand operand whose shape is a trailing suffix of the left-hand shape
// (leading-axis broadcast); anything else is a ShapeError.
namespace dssl::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);
/// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
Tensor logit(const Tensor& a, double eps = 1e-5);

Tensor softmax(const Tensor& a);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// x[..., in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

/// Patch extraction over an [H, W, C] map: returns [H' * W', k * k * C] with
/// zero padding, so a convolution is im2col followed by linear().
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

/// sum_i weights[i] * -log softmax(logits[i])[targets[i]]
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const double> weights);

}  // namespace dssl::ops
