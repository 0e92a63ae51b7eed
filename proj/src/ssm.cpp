#include "stmoe/ssm.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "stmoe/ops.hpp"
#include "stmoe/tape.hpp"

namespace stmoe::ssm {

namespace {

void expect_shape(const char* op, const char* what, const Tensor& t, const Shape& want) {
  if (t.shape() != want) {
    throw ShapeError(std::string(op) + ": " + what + " has shape " + shape_str(t.shape()) + ", expected " +
                     shape_str(want));
  }
}

void require_positive(const char* op, std::span<const double> delta) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (!(delta[i] > 0.0)) {
      throw std::domain_error(std::string(op) + ": step size at flat index " + std::to_string(i) +
                              " is not positive (" + std::to_string(delta[i]) + ")");
    }
  }
}

// log(exp(v) - 1), the inverse of softplus for v > 0.
double inverse_softplus(double v) { return v + std::log(-std::expm1(-v)); }

}  // namespace

std::size_t resolve_dt_rank(const SsmSizes& sizes, std::size_t channels) {
  return sizes.dt_rank != 0 ? sizes.dt_rank : (channels + 15) / 16;
}

MambaBlockParams make_mamba_block(std::size_t channels, const SsmSizes& sizes, Rng& rng) {
  if (channels == 0 || sizes.expand == 0 || sizes.state_dim == 0 || sizes.conv_width == 0) {
    throw std::invalid_argument("make_mamba_block: channels, expand, state_dim and conv_width must be positive");
  }
  MambaBlockParams p;
  p.channels = channels;
  p.expand = sizes.expand;
  p.state_dim = sizes.state_dim;
  p.conv_width = sizes.conv_width;
  p.dt_rank = resolve_dt_rank(sizes, channels);
  const std::size_t inner = p.inner();
  const std::size_t n = p.state_dim;
  auto fan_in = [](std::size_t f) { return 1.0 / std::sqrt(static_cast<double>(f)); };

  p.in_proj = uniform_tensor({channels, 2 * inner}, fan_in(channels), rng);
  p.conv_weight = uniform_tensor({inner, p.conv_width}, fan_in(p.conv_width), rng);
  p.conv_bias = uniform_tensor({inner}, fan_in(p.conv_width), rng);
  p.x_proj = uniform_tensor({inner, p.dt_rank + 2 * n}, fan_in(inner), rng);
  p.dt_proj = uniform_tensor({p.dt_rank, inner}, fan_in(p.dt_rank), rng);

  // Step sizes start log-uniform in [1e-3, 1e-1].
  std::vector<double> dt_bias(inner);
  for (auto& b : dt_bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b = inverse_softplus(dt);
  }
  p.dt_bias = Tensor({inner}, std::move(dt_bias), true);

  std::vector<double> a_log(inner * n);
  for (std::size_t c = 0; c < inner; ++c)
    for (std::size_t k = 0; k < n; ++k) a_log[c * n + k] = std::log(static_cast<double>(k + 1));
  p.a_log = Tensor({inner, n}, std::move(a_log), true);

  p.out_proj = uniform_tensor({inner, channels}, fan_in(inner), rng);
  return p;
}

void collect_parameters(const MambaBlockParams& p, const std::string& prefix, NamedTensors& out) {
  out.emplace_back(prefix + "in_proj", p.in_proj);
  out.emplace_back(prefix + "conv_weight", p.conv_weight);
  out.emplace_back(prefix + "conv_bias", p.conv_bias);
  out.emplace_back(prefix + "x_proj", p.x_proj);
  out.emplace_back(prefix + "dt_proj", p.dt_proj);
  out.emplace_back(prefix + "dt_bias", p.dt_bias);
  out.emplace_back(prefix + "a_log", p.a_log);
  out.emplace_back(prefix + "out_proj", p.out_proj);
}

Discretized discretize(const Tensor& delta, const Tensor& a, const Tensor& b) {
  if (delta.rank() != 3 || a.rank() != 2 || b.rank() != 3) {
    throw ShapeError("discretize: expected delta (batch, L, inner), A (inner, N), B (batch, L, N)");
  }
  const std::size_t nb = delta.dim(0), len = delta.dim(1), inner = delta.dim(2), n = a.dim(1);
  expect_shape("discretize", "A", a, {inner, n});
  expect_shape("discretize", "B", b, {nb, len, n});
  require_positive("discretize", delta.data());

  const Shape full{nb, len, inner, n};
  const Tensor d4 = ops::broadcast(ops::reshape(delta, {nb, len, inner, 1}), full);
  const Tensor a4 = ops::broadcast(a, full);
  const Tensor b4 = ops::broadcast(ops::reshape(b, {nb, len, 1, n}), full);
  return {ops::exp(ops::mul(d4, a4)), ops::mul(d4, b4)};
}

Tensor selective_scan(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& u) {
  if (a_bar.rank() != 4) throw ShapeError("selective_scan: A_bar must be (batch, L, inner, N), got " + shape_str(a_bar.shape()));
  const std::size_t nb = a_bar.dim(0), len = a_bar.dim(1), inner = a_bar.dim(2), n = a_bar.dim(3);
  expect_shape("selective_scan", "B_bar", b_bar, a_bar.shape());
  expect_shape("selective_scan", "C", c, {nb, len, n});
  expect_shape("selective_scan", "u", u, {nb, len, inner});

  const std::array<Tensor, 4> inputs{a_bar, b_bar, c, u};
  const bool keep_states = will_record(inputs);
  const double* ab = a_bar.data().data();
  const double* bb = b_bar.data().data();
  const double* cd = c.data().data();
  const double* ud = u.data().data();
  std::vector<double> y(nb * len * inner, 0.0);
  std::vector<double> states(keep_states ? nb * len * inner * n : 0);
  std::vector<double> h(inner * n);
  for (std::size_t b = 0; b < nb; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t l = 0; l < len; ++l) {
      const std::size_t row = b * len + l;
      const double* cl = cd + row * n;
      for (std::size_t ch = 0; ch < inner; ++ch) {
        const double uv = ud[row * inner + ch];
        const std::size_t base = (row * inner + ch) * n;
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          double& hv = h[ch * n + k];
          hv = ab[base + k] * hv + bb[base + k] * uv;
          acc += cl[k] * hv;
        }
        y[row * inner + ch] = acc;
        if (keep_states) std::copy(h.begin() + ch * n, h.begin() + (ch + 1) * n, states.begin() + base);
      }
    }
  }
  BackwardFn bw;
  if (keep_states) {
    bw = [nb, len, inner, n, states = std::move(states)](BackwardContext& ctx) {
      const double* ab = ctx.in[0].data();
      const double* bb = ctx.in[1].data();
      const double* cd = ctx.in[2].data();
      const double* ud = ctx.in[3].data();
      auto* ga = ctx.grad_in[0];
      auto* gb = ctx.grad_in[1];
      auto* gc = ctx.grad_in[2];
      auto* gu = ctx.grad_in[3];
      std::vector<double> dh(inner * n);
      for (std::size_t b = 0; b < nb; ++b) {
        std::fill(dh.begin(), dh.end(), 0.0);
        for (std::size_t l = len; l-- > 0;) {
          const std::size_t row = b * len + l;
          for (std::size_t ch = 0; ch < inner; ++ch) {
            const double g = ctx.grad_out[row * inner + ch];
            const double uv = ud[row * inner + ch];
            const std::size_t base = (row * inner + ch) * n;
            double du = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
              const double hv = states[base + k];
              const double hprev = l > 0 ? states[base - inner * n + k] : 0.0;
              if (gc) (*gc)[row * n + k] += g * hv;
              double& d = dh[ch * n + k];
              d += g * cd[row * n + k];
              if (ga) (*ga)[base + k] += d * hprev;
              if (gb) (*gb)[base + k] += d * uv;
              du += d * bb[base + k];
              d *= ab[base + k];
            }
            if (gu) (*gu)[row * inner + ch] += du;
          }
        }
      }
    };
  }
  return make_result("selective_scan", inputs, {nb, len, inner}, std::move(y), std::move(bw));
}

Tensor selective_scan_fused(const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& u) {
  if (delta.rank() != 3) throw ShapeError("selective_scan_fused: delta must be (batch, L, inner), got " + shape_str(delta.shape()));
  if (a.rank() != 2) throw ShapeError("selective_scan_fused: A must be (inner, N), got " + shape_str(a.shape()));
  const std::size_t nb = delta.dim(0), len = delta.dim(1), inner = delta.dim(2), n = a.dim(1);
  expect_shape("selective_scan_fused", "A", a, {inner, n});
  expect_shape("selective_scan_fused", "B", b, {nb, len, n});
  expect_shape("selective_scan_fused", "C", c, {nb, len, n});
  expect_shape("selective_scan_fused", "u", u, {nb, len, inner});
  require_positive("selective_scan_fused", delta.data());

  const std::array<Tensor, 5> inputs{delta, a, b, c, u};
  const bool keep_states = will_record(inputs);
  const double* dd = delta.data().data();
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  const double* cd = c.data().data();
  const double* ud = u.data().data();
  std::vector<double> y(nb * len * inner, 0.0);
  std::vector<double> states(keep_states ? nb * len * inner * n : 0);
  std::vector<double> h(inner * n);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t l = 0; l < len; ++l) {
      const std::size_t row = bi * len + l;
      const double* bl = bd + row * n;
      const double* cl = cd + row * n;
      for (std::size_t ch = 0; ch < inner; ++ch) {
        const double dv = dd[row * inner + ch];
        const double uv = ud[row * inner + ch];
        const double* arow = ad + ch * n;
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          double& hv = h[ch * n + k];
          hv = std::exp(dv * arow[k]) * hv + (dv * bl[k]) * uv;
          acc += cl[k] * hv;
        }
        y[row * inner + ch] = acc;
        if (keep_states) {
          std::copy(h.begin() + ch * n, h.begin() + (ch + 1) * n, states.begin() + (row * inner + ch) * n);
        }
      }
    }
  }
  BackwardFn bw;
  if (keep_states) {
    bw = [nb, len, inner, n, states = std::move(states)](BackwardContext& ctx) {
      const double* dd = ctx.in[0].data();
      const double* ad = ctx.in[1].data();
      const double* bd = ctx.in[2].data();
      const double* cd = ctx.in[3].data();
      const double* ud = ctx.in[4].data();
      auto* gdelta = ctx.grad_in[0];
      auto* ga = ctx.grad_in[1];
      auto* gb = ctx.grad_in[2];
      auto* gc = ctx.grad_in[3];
      auto* gu = ctx.grad_in[4];
      std::vector<double> dh(inner * n);
      for (std::size_t bi = 0; bi < nb; ++bi) {
        std::fill(dh.begin(), dh.end(), 0.0);
        for (std::size_t l = len; l-- > 0;) {
          const std::size_t row = bi * len + l;
          const double* bl = bd + row * n;
          const double* cl = cd + row * n;
          for (std::size_t ch = 0; ch < inner; ++ch) {
            const double g = ctx.grad_out[row * inner + ch];
            const double dv = dd[row * inner + ch];
            const double uv = ud[row * inner + ch];
            const double* arow = ad + ch * n;
            const std::size_t base = (row * inner + ch) * n;
            double ddelta = 0.0, du = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
              const double hv = states[base + k];
              const double hprev = l > 0 ? states[base - inner * n + k] : 0.0;
              const double abar = std::exp(dv * arow[k]);
              if (gc) (*gc)[row * n + k] += g * hv;
              double& d = dh[ch * n + k];
              d += g * cl[k];
              const double d_abar = d * hprev;
              const double d_bbar = d * uv;
              ddelta += d_abar * abar * arow[k] + d_bbar * bl[k];
              if (ga) (*ga)[ch * n + k] += d_abar * abar * dv;
              if (gb) (*gb)[row * n + k] += d_bbar * dv;
              du += d * dv * bl[k];
              d *= abar;
            }
            if (gdelta) (*gdelta)[row * inner + ch] += ddelta;
            if (gu) (*gu)[row * inner + ch] += du;
          }
        }
      }
    };
  }
  return make_result("selective_scan_fused", inputs, {nb, len, inner}, std::move(y), std::move(bw));
}

Tensor selective_scan_reference(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& u) {
  if (a_bar.rank() != 4) throw ShapeError("selective_scan_reference: A_bar must be rank 4");
  const std::size_t nb = a_bar.dim(0), len = a_bar.dim(1), inner = a_bar.dim(2), n = a_bar.dim(3);
  expect_shape("selective_scan_reference", "B_bar", b_bar, a_bar.shape());
  expect_shape("selective_scan_reference", "C", c, {nb, len, n});
  expect_shape("selective_scan_reference", "u", u, {nb, len, inner});
  const Shape state{nb, inner, n};
  Tensor h;
  std::vector<Tensor> ys;
  ys.reserve(len);
  for (std::size_t l = 0; l < len; ++l) {
    const Tensor a_l = ops::reshape(ops::slice(a_bar, 1, l, l + 1), state);
    const Tensor b_l = ops::reshape(ops::slice(b_bar, 1, l, l + 1), state);
    const Tensor u_l = ops::broadcast(ops::reshape(ops::slice(u, 1, l, l + 1), {nb, inner, 1}), state);
    const Tensor drive = ops::mul(b_l, u_l);
    h = l == 0 ? drive : ops::add(ops::mul(a_l, h), drive);
    const Tensor c_l = ops::broadcast(ops::reshape(ops::slice(c, 1, l, l + 1), {nb, 1, n}), state);
    ys.push_back(ops::reshape(ops::reduce_sum(ops::mul(c_l, h), 2), {nb, 1, inner}));
  }
  return ops::concat(ys, 1);
}

Tensor mamba_block_forward(const MambaBlockParams& p, const Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != p.channels) {
    throw ShapeError("mamba_block_forward: input " + shape_str(x.shape()) + " must be (batch, L, " +
                     std::to_string(p.channels) + ")");
  }
  const std::size_t inner = p.inner();
  const std::size_t r = p.dt_rank;
  const std::size_t n = p.state_dim;
  const Tensor xz = ops::matmul(x, p.in_proj);
  const Tensor xs = ops::slice(xz, 2, 0, inner);
  const Tensor z = ops::slice(xz, 2, inner, 2 * inner);
  const Tensor xc = ops::silu(ops::depthwise_causal_conv1d(xs, p.conv_weight, p.conv_bias));
  const Tensor proj = ops::matmul(xc, p.x_proj);
  const Tensor dt_in = ops::slice(proj, 2, 0, r);
  const Tensor bm = ops::slice(proj, 2, r, r + n);
  const Tensor cm = ops::slice(proj, 2, r + n, r + 2 * n);
  const Tensor dt_lin = ops::matmul(dt_in, p.dt_proj);
  const Tensor delta = ops::softplus(ops::add(ops::broadcast(p.dt_bias, dt_lin.shape()), dt_lin));
  const Tensor a = ops::scale(ops::exp(p.a_log), -1.0);
  const Tensor y = selective_scan_fused(delta, a, bm, cm, xc);
  return ops::matmul(ops::mul(y, ops::silu(z)), p.out_proj);
}

Tensor layer_norm(const LayerNormParams& p, const Tensor& x) {
  const Tensor normed = ops::layernorm_lastaxis(x);
  return ops::add(ops::mul(normed, ops::broadcast(p.gain, x.shape())), ops::broadcast(p.shift, x.shape()));
}

Tensor feed_forward(const FeedForwardParams& p, const Tensor& x) {
  return ops::linear(ops::relu(ops::linear(x, p.w1, &p.b1)), p.w2, &p.b2);
}

BiBlockParams make_bi_block(std::size_t channels, const SsmSizes& sizes, Rng& rng) {
  BiBlockParams p;
  p.mamba = make_mamba_block(channels, sizes, rng);
  for (auto* ln : {&p.ln_inner, &p.ln_outer}) {
    ln->gain = Tensor::full({channels}, 1.0, true);
    ln->shift = Tensor::zeros({channels}, true);
  }
  const double c = static_cast<double>(channels);
  p.ffn.w1 = uniform_tensor({channels, 2 * channels}, 1.0 / std::sqrt(c), rng);
  p.ffn.b1 = Tensor::zeros({2 * channels}, true);
  p.ffn.w2 = uniform_tensor({2 * channels, channels}, 1.0 / std::sqrt(2.0 * c), rng);
  p.ffn.b2 = Tensor::zeros({channels}, true);
  return p;
}

void collect_parameters(const BiBlockParams& p, const std::string& prefix, NamedTensors& out) {
  collect_parameters(p.mamba, prefix + "mamba.", out);
  out.emplace_back(prefix + "ln_inner.gain", p.ln_inner.gain);
  out.emplace_back(prefix + "ln_inner.shift", p.ln_inner.shift);
  out.emplace_back(prefix + "ln_outer.gain", p.ln_outer.gain);
  out.emplace_back(prefix + "ln_outer.shift", p.ln_outer.shift);
  out.emplace_back(prefix + "ffn.w1", p.ffn.w1);
  out.emplace_back(prefix + "ffn.b1", p.ffn.b1);
  out.emplace_back(prefix + "ffn.w2", p.ffn.w2);
  out.emplace_back(prefix + "ffn.b2", p.ffn.b2);
}

Tensor bidirectional_core(const BiBlockParams& p, const Tensor& x, const ScanOptions& opts) {
  auto backward_branch = [&] {
    Tensor b = mamba_block_forward(p.mamba, ops::reverse_axis(x, 1));
    return opts.flip_back ? ops::reverse_axis(b, 1) : b;
  };
  switch (opts.mode) {
    case ScanMode::kForward:
      return ops::add(mamba_block_forward(p.mamba, x), x);
    case ScanMode::kBackward:
      return ops::add(backward_branch(), x);
    case ScanMode::kBidirectional:
      break;
  }
  return ops::add(ops::add(mamba_block_forward(p.mamba, x), backward_branch()), x);
}

Tensor bidirectional_forward(const BiBlockParams& p, const Tensor& x, const ScanOptions& opts) {
  const Tensor inner = layer_norm(p.ln_inner, bidirectional_core(p, x, opts));
  return layer_norm(p.ln_outer, ops::add(inner, feed_forward(p.ffn, inner)));
}

}  // namespace stmoe::ssm
