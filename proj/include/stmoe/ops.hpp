#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stmoe/tensor.hpp"

namespace stmoe {

namespace ops {

// Elementwise binary ops require identical shapes; use broadcast() first.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

/// (..., m, k) x (..., k, n). Leading batch axes must match, or one operand
/// may be a plain matrix that is shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor reverse_axis(const Tensor& x, int axis);
Tensor reshape(const Tensor& x, Shape shape);

/// Reduces `axis`, or every axis when none is given.
Tensor reduce_sum(const Tensor& x, std::optional<int> axis = std::nullopt, bool keepdim = false);
Tensor reduce_mean(const Tensor& x, std::optional<int> axis = std::nullopt, bool keepdim = false);

Tensor softmax_lastaxis(const Tensor& x);
/// Zero-mean, unit-variance normalization of the last axis (biased
/// variance, no affine terms).
Tensor layernorm_lastaxis(const Tensor& x, double eps = 1e-5);

/// x: (batch, length, channels), weight: (channels, width), bias: (channels).
/// Left-pads with width - 1 zeros so the output length equals the input's.
Tensor depthwise_causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// NumPy-style broadcast to `shape` (trailing-aligned, size-1 or missing axes expand).
Tensor broadcast(const Tensor& x, const Shape& shape);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t stop);
Tensor concat(std::span<const Tensor> parts, int axis);

/// Keeps the k largest entries of each last-axis row and writes `fill`
/// elsewhere. Ties resolve toward the lower index.
Tensor topk_mask(const Tensor& x, std::size_t k, double fill = -std::numeric_limits<double>::infinity());

// Convenience compositions of the primitives above.
Tensor scale(const Tensor& x, double factor);
Tensor square(const Tensor& x);
/// x (..., in) * weight (in, out) [+ bias (out)].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);
/// Elementwise multiply by a constant tensor of the same shape (no gradient
/// flows to `mask`).
Tensor mul_const(const Tensor& x, std::vector<double> mask);

/// Indices of the kept entries of one row under the topk_mask ordering.
std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k);

}  // namespace ops

using AttrValue = std::variant<std::int64_t, double, std::vector<std::int64_t>>;
using Attrs = std::map<std::string, AttrValue, std::less<>>;

/// String-keyed entry point for every registered primitive. Attribute names
/// per primitive: transpose{axis0,axis1}, reverse_axis{axis},
/// reshape{shape}, reduce_*{axis?,keepdim?}, layernorm_lastaxis{eps?},
/// broadcast{shape}, slice{axis,start,stop}, concat{axis},
/// topk_mask{k,fill?}.
Tensor apply_primitive(std::string_view name, std::span<const Tensor> inputs, const Attrs& attrs = {});

/// Names accepted by apply_primitive, in registration order.
std::span<const std::string_view> primitive_names();

}  // namespace stmoe
