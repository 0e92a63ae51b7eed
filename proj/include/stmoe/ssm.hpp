#pragma once

#include <cstddef>
#include <string>

#include "stmoe/random.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::ssm {

struct SsmSizes {
  std::size_t expand = 2;
  std::size_t state_dim = 16;
  std::size_t conv_width = 4;
  std::size_t dt_rank = 0;  // 0 selects ceil(channels / 16)
};

std::size_t resolve_dt_rank(const SsmSizes& sizes, std::size_t channels);

/// One selective state-space block over sequences of `channels`-wide
/// elements. Inner width is expand * channels.
struct MambaBlockParams {
  std::size_t channels = 0;
  std::size_t expand = 0;
  std::size_t state_dim = 0;
  std::size_t conv_width = 0;
  std::size_t dt_rank = 0;

  Tensor in_proj;       // (channels, 2 * inner)
  Tensor conv_weight;   // (inner, conv_width)
  Tensor conv_bias;     // (inner)
  Tensor x_proj;        // (inner, dt_rank + 2 * state_dim)
  Tensor dt_proj;       // (dt_rank, inner)
  Tensor dt_bias;       // (inner)
  Tensor a_log;         // (inner, state_dim); A = -exp(a_log)
  Tensor out_proj;      // (inner, channels)

  std::size_t inner() const { return expand * channels; }
};

MambaBlockParams make_mamba_block(std::size_t channels, const SsmSizes& sizes, Rng& rng);
void collect_parameters(const MambaBlockParams& p, const std::string& prefix, NamedTensors& out);

struct Discretized {
  Tensor a_bar;  // (batch, L, inner, N)
  Tensor b_bar;  // (batch, L, inner, N)
};

/// A_bar = exp(delta * A) (zero-order hold on the state path),
/// B_bar = delta * B (Euler on the input path). Built from primitives.
/// delta (batch, L, inner) must be strictly positive.
Discretized discretize(const Tensor& delta, const Tensor& a, const Tensor& b);

/// h_i = A_bar_i * h_{i-1} + B_bar_i * u_i with h_0 = 0; y_i = sum_n C_in h_i.
/// A_bar, B_bar: (batch, L, inner, N); c: (batch, L, N); u: (batch, L, inner).
Tensor selective_scan(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& u);

/// Same recurrence with the discretization folded into the sweep, so the
/// (batch, L, inner, N) coefficient tensors are never materialized.
/// delta (batch, L, inner), a (inner, N), b and c (batch, L, N), u (batch, L, inner).
Tensor selective_scan_fused(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& u);

/// Per-step recurrence written with slice/mul/add/reduce_sum/concat only.
/// Slow; the reference the kernels are checked against.
Tensor selective_scan_reference(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& u);

/// x: (batch, L, channels) -> (batch, L, channels).
Tensor mamba_block_forward(const MambaBlockParams& p, const Tensor& x);

struct LayerNormParams {
  Tensor gain;   // (channels)
  Tensor shift;  // (channels)
};

Tensor layer_norm(const LayerNormParams& p, const Tensor& x);

struct FeedForwardParams {
  Tensor w1, b1;  // (C, 2C), (2C)
  Tensor w2, b2;  // (2C, C), (C)
};

Tensor feed_forward(const FeedForwardParams& p, const Tensor& x);

/// A Mamba block used in both scan directions plus the normalization and
/// feed-forward wrapper around their sum.
struct BiBlockParams {
  MambaBlockParams mamba;
  LayerNormParams ln_inner;
  LayerNormParams ln_outer;
  FeedForwardParams ffn;
};

BiBlockParams make_bi_block(std::size_t channels, const SsmSizes& sizes, Rng& rng);
void collect_parameters(const BiBlockParams& p, const std::string& prefix, NamedTensors& out);

enum class ScanMode { kBidirectional, kForward, kBackward };

struct ScanOptions {
  ScanMode mode = ScanMode::kBidirectional;
  /// Re-reverse the backward branch so positions line up before summing.
  bool flip_back = true;
};

/// Residual sum of the scan branches: mamba(x) + rev(mamba(rev(x))) + x in
/// the default bidirectional mode.
Tensor bidirectional_core(const BiBlockParams& p, const Tensor& x, const ScanOptions& opts = {});

/// LN(LN(core) + FFN(LN(core))).
Tensor bidirectional_forward(const BiBlockParams& p, const Tensor& x, const ScanOptions& opts = {});

}  // namespace stmoe::ssm
