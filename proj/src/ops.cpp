#include "stmoe/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "stmoe/ssm.hpp"
#include "stmoe/tape.hpp"

namespace stmoe {
namespace ops {

namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::string detail = "operand shapes " + shape_str(sa) + " and " + shape_str(sb) + " differ";
  if (sa.size() == sb.size()) {
    for (std::size_t i = 0; i < sa.size(); ++i) {
      if (sa[i] != sb[i]) {
        detail += " on axis " + std::to_string(i);
        break;
      }
    }
  } else {
    detail += " in rank";
  }
  shape_fail(op, detail);
}

// Splits `shape` around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const std::array<Tensor, 1> inputs{x};
  BackwardFn bw;
  if (will_record(inputs)) {
    bw = [deriv](BackwardContext& c) {
      auto& gx = *c.grad_in[0];
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c.grad_out[i] * deriv(c.in[0][i], c.out[i]);
    };
  }
  return make_result(op, inputs, x.shape(), std::move(out), std::move(bw));
}

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const std::array<Tensor, 2> inputs{a, b};
  return make_result("add", inputs, a.shape(), std::move(out), [](BackwardContext& c) {
    for (int side = 0; side < 2; ++side) {
      if (auto* g = c.grad_in[side]) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const std::array<Tensor, 2> inputs{a, b};
  return make_result("sub", inputs, a.shape(), std::move(out), [](BackwardContext& c) {
    if (auto* g = c.grad_in[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i];
    }
    if (auto* g = c.grad_in[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= c.grad_out[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const std::array<Tensor, 2> inputs{a, b};
  return make_result("mul", inputs, a.shape(), std::move(out), [](BackwardContext& c) {
    if (auto* g = c.grad_in[0]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i] * c.in[1][i];
    }
    if (auto* g = c.grad_in[1]) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out[i] * c.in[0][i];
    }
  });
}

namespace {

struct MatmulPlan {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool a_batched = false, b_batched = false;
  Shape out_shape;
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    shape_fail("matmul", "operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  MatmulPlan p;
  p.m = sa[sa.size() - 2];
  p.k = sa[sa.size() - 1];
  p.n = sb[sb.size() - 1];
  if (sb[sb.size() - 2] != p.k) {
    shape_fail("matmul", "inner dimensions differ (lhs axis " + std::to_string(sa.size() - 1) + " = " +
                             std::to_string(p.k) + ", rhs axis " + std::to_string(sb.size() - 2) + " = " +
                             std::to_string(sb[sb.size() - 2]) + ")");
  }
  const Shape lead_a(sa.begin(), sa.end() - 2);
  const Shape lead_b(sb.begin(), sb.end() - 2);
  Shape lead;
  if (!lead_a.empty() && !lead_b.empty()) {
    if (lead_a != lead_b) {
      shape_fail("matmul", "batch axes differ: " + shape_str(sa) + " vs " + shape_str(sb));
    }
    lead = lead_a;
    p.a_batched = p.b_batched = true;
  } else if (!lead_a.empty()) {
    lead = lead_a;
    p.a_batched = true;
  } else if (!lead_b.empty()) {
    lead = lead_b;
    p.b_batched = true;
  }
  p.batch = shape_numel(lead);
  p.out_shape = lead;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  // A batched lhs against a shared rhs is one tall product.
  if (p.a_batched && !p.b_batched) {
    p.m *= p.batch;
    p.batch = 1;
    p.a_batched = false;
  }
  return p;
}

// c += a (m x k) * b (k x n)
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulPlan p = plan_matmul(a, b);
  std::vector<double> out(shape_numel(p.out_shape), 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t bi = 0; bi < p.batch; ++bi) {
    gemm_acc(ad + (p.a_batched ? bi * p.m * p.k : 0), bd + (p.b_batched ? bi * p.k * p.n : 0),
             out.data() + bi * p.m * p.n, p.m, p.k, p.n);
  }
  const std::array<Tensor, 2> inputs{a, b};
  return make_result("matmul", inputs, p.out_shape, std::move(out), [p](BackwardContext& c) {
    const double* g = c.grad_out.data();
    const double* ad = c.in[0].data();
    const double* bd = c.in[1].data();
    for (std::size_t bi = 0; bi < p.batch; ++bi) {
      const double* gb = g + bi * p.m * p.n;
      const double* ab = ad + (p.a_batched ? bi * p.m * p.k : 0);
      const double* bb = bd + (p.b_batched ? bi * p.k * p.n : 0);
      if (auto* ga = c.grad_in[0]) {
        double* gab = ga->data() + (p.a_batched ? bi * p.m * p.k : 0);
        for (std::size_t i = 0; i < p.m; ++i) {
          for (std::size_t q = 0; q < p.k; ++q) {
            double s = 0.0;
            for (std::size_t j = 0; j < p.n; ++j) s += gb[i * p.n + j] * bb[q * p.n + j];
            gab[i * p.k + q] += s;
          }
        }
      }
      if (auto* gbuf = c.grad_in[1]) {
        double* gbb = gbuf->data() + (p.b_batched ? bi * p.k * p.n : 0);
        for (std::size_t i = 0; i < p.m; ++i) {
          for (std::size_t q = 0; q < p.k; ++q) {
            const double av = ab[i * p.k + q];
            for (std::size_t j = 0; j < p.n; ++j) gbb[q * p.n + j] += av * gb[i * p.n + j];
          }
        }
      }
    }
  });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid(v); });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v * sigmoid(v); },
      [](double v, double) {
        const double s = sigmoid(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace {

// Swaps axes a0 < a1, viewing the tensor as (p, a, m, b, q).
struct SwapPlan {
  std::size_t p = 1, a = 1, m = 1, b = 1, q = 1;
};

void swap_copy(const SwapPlan& s, const double* src, double* dst, bool accumulate) {
  // src is (p, a, m, b, q); dst is (p, b, m, a, q).
  for (std::size_t ip = 0; ip < s.p; ++ip)
    for (std::size_t ia = 0; ia < s.a; ++ia)
      for (std::size_t im = 0; im < s.m; ++im)
        for (std::size_t ib = 0; ib < s.b; ++ib) {
          const double* from = src + ((((ip * s.a + ia) * s.m + im) * s.b + ib) * s.q);
          double* to = dst + ((((ip * s.b + ib) * s.m + im) * s.a + ia) * s.q);
          if (accumulate) {
            for (std::size_t iq = 0; iq < s.q; ++iq) to[iq] += from[iq];
          } else {
            std::copy(from, from + s.q, to);
          }
        }
}

}  // namespace

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  auto a0 = normalize_axis(axis0, x.rank(), "transpose");
  auto a1 = normalize_axis(axis1, x.rank(), "transpose");
  if (a0 > a1) std::swap(a0, a1);
  const auto& sh = x.shape();
  SwapPlan s;
  for (std::size_t i = 0; i < a0; ++i) s.p *= sh[i];
  s.a = sh[a0];
  for (std::size_t i = a0 + 1; i < a1; ++i) s.m *= sh[i];
  s.b = sh[a1];
  for (std::size_t i = a1 + 1; i < sh.size(); ++i) s.q *= sh[i];
  Shape out_shape = sh;
  std::swap(out_shape[a0], out_shape[a1]);
  std::vector<double> out(x.numel());
  if (a0 == a1) {
    std::copy(x.data().begin(), x.data().end(), out.begin());
  } else {
    swap_copy(s, x.data().data(), out.data(), false);
  }
  const std::array<Tensor, 1> inputs{x};
  SwapPlan back{s.p, s.b, s.m, s.a, s.q};
  const bool identity = a0 == a1;
  return make_result("transpose", inputs, std::move(out_shape), std::move(out), [back, identity](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    if (identity) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i];
    } else {
      swap_copy(back, c.grad_out.data(), g.data(), true);
    }
  });
}

Tensor reverse_axis(const Tensor& x, int axis) {
  const auto ax = normalize_axis(axis, x.rank(), "reverse_axis");
  const auto s = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l) {
      const double* from = in.data() + (o * s.length + l) * s.inner;
      std::copy(from, from + s.inner, out.data() + (o * s.length + (s.length - 1 - l)) * s.inner);
    }
  const std::array<Tensor, 1> inputs{x};
  return make_result("reverse_axis", inputs, x.shape(), std::move(out), [s](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.length; ++l) {
        const double* from = c.grad_out.data() + (o * s.length + (s.length - 1 - l)) * s.inner;
        double* to = g.data() + (o * s.length + l) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) to[i] += from[i];
      }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const auto in = x.data();
  std::vector<double> out(in.begin(), in.end());
  const std::array<Tensor, 1> inputs{x};
  return make_result("reshape", inputs, std::move(shape), std::move(out), [](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c.grad_out[i];
  });
}

namespace {

Tensor reduce(std::string_view op, const Tensor& x, std::optional<int> axis, bool keepdim, bool mean) {
  if (!axis) {
    const auto in = x.data();
    double s = 0.0;
    for (double v : in) s += v;
    const double scale = mean ? 1.0 / static_cast<double>(in.size()) : 1.0;
    Shape out_shape = keepdim ? Shape(x.rank(), 1) : Shape{};
    const std::array<Tensor, 1> inputs{x};
    return make_result(op, inputs, std::move(out_shape), {s * scale}, [scale](BackwardContext& c) {
      auto& g = *c.grad_in[0];
      const double v = c.grad_out[0] * scale;
      for (auto& e : g) e += v;
    });
  }
  const auto ax = normalize_axis(*axis, x.rank(), op.data());
  const auto s = split_at(x.shape(), ax);
  const auto in = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l) {
      const double* from = in.data() + (o * s.length + l) * s.inner;
      double* to = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) to[i] += from[i];
    }
  const double scale = mean ? 1.0 / static_cast<double>(s.length) : 1.0;
  if (mean) {
    for (auto& v : out) v *= scale;
  }
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const std::array<Tensor, 1> inputs{x};
  return make_result(op, inputs, std::move(out_shape), std::move(out), [s, scale](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.length; ++l) {
        const double* from = c.grad_out.data() + o * s.inner;
        double* to = g.data() + (o * s.length + l) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) to[i] += from[i] * scale;
      }
  });
}

}  // namespace

Tensor reduce_sum(const Tensor& x, std::optional<int> axis, bool keepdim) {
  return reduce("reduce_sum", x, axis, keepdim, false);
}

Tensor reduce_mean(const Tensor& x, std::optional<int> axis, bool keepdim) {
  return reduce("reduce_mean", x, axis, keepdim, true);
}

Tensor softmax_lastaxis(const Tensor& x) {
  if (x.rank() == 0) shape_fail("softmax_lastaxis", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      z += yr[i];
    }
    for (std::size_t i = 0; i < n; ++i) yr[i] /= z;
  }
  const std::array<Tensor, 1> inputs{x};
  return make_result("softmax_lastaxis", inputs, x.shape(), std::move(out), [n, rows](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = c.out.data() + r * n;
      const double* go = c.grad_out.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += go[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (go[i] - dot);
    }
  });
}

Tensor layernorm_lastaxis(const Tensor& x, double eps) {
  if (x.rank() == 0) shape_fail("layernorm_lastaxis", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  if (n == 0) shape_fail("layernorm_lastaxis", "last axis is empty");
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> out(in.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xr[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = (xr[i] - mean) * inv_std[r];
  }
  const std::array<Tensor, 1> inputs{x};
  BackwardFn bw;
  if (will_record(inputs)) {
    // Normalized values are kept separately so the rule stays exact in
    // float32 mode, where the stored output is rounded.
    bw = [n, rows, inv_std = std::move(inv_std), xhat = out](BackwardContext& c) {
      auto& g = *c.grad_in[0];
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = xhat.data() + r * n;
        const double* go = c.grad_out.data() + r * n;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          mg += go[i];
          mgy += go[i] * y[i];
        }
        mg *= inv_n;
        mgy *= inv_n;
        for (std::size_t i = 0; i < n; ++i) g[r * n + i] += inv_std[r] * (go[i] - mg - y[i] * mgy);
      }
    };
  }
  return make_result("layernorm_lastaxis", inputs, x.shape(), std::move(out), std::move(bw));
}

Tensor depthwise_causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) shape_fail("depthwise_causal_conv1d", "input must be (batch, length, channels), got " + shape_str(x.shape()));
  const std::size_t nb = x.dim(0), len = x.dim(1), ch = x.dim(2);
  if (weight.rank() != 2 || weight.dim(0) != ch) {
    shape_fail("depthwise_causal_conv1d", "weight " + shape_str(weight.shape()) + " must be (" + std::to_string(ch) +
                                               ", width) to match input axis 2");
  }
  if (bias.rank() != 1 || bias.dim(0) != ch) {
    shape_fail("depthwise_causal_conv1d", "bias " + shape_str(bias.shape()) + " must be (" + std::to_string(ch) + ",)");
  }
  const std::size_t kw = weight.dim(1);
  if (kw == 0) shape_fail("depthwise_causal_conv1d", "kernel width must be >= 1");
  const auto xd = x.data();
  const auto wd = weight.data();
  const auto bd = bias.data();
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t c = 0; c < ch; ++c) {
        double s = bd[c];
        for (std::size_t j = 0; j < kw; ++j) {
          const std::size_t src = l + j;  // position l + j - (kw - 1), shifted to stay unsigned
          if (src < kw - 1) continue;
          s += wd[c * kw + j] * xd[(b * len + (src - (kw - 1))) * ch + c];
        }
        out[(b * len + l) * ch + c] = s;
      }
  const std::array<Tensor, 3> inputs{x, weight, bias};
  return make_result("depthwise_causal_conv1d", inputs, x.shape(), std::move(out), [nb, len, ch, kw](BackwardContext& c) {
    auto* gx = c.grad_in[0];
    auto* gw = c.grad_in[1];
    auto* gb = c.grad_in[2];
    const auto xd = c.in[0];
    const auto wd = c.in[1];
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t ci = 0; ci < ch; ++ci) {
          const double g = c.grad_out[(b * len + l) * ch + ci];
          if (gb) (*gb)[ci] += g;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t src = l + j;
            if (src < kw - 1) continue;
            const std::size_t xi = (b * len + (src - (kw - 1))) * ch + ci;
            if (gx) (*gx)[xi] += wd[ci * kw + j] * g;
            if (gw) (*gw)[ci * kw + j] += xd[xi] * g;
          }
        }
  });
}

namespace {

// Source strides (0 on broadcast axes) for viewing `from` as `to`.
std::vector<std::size_t> broadcast_strides(const Shape& from, const Shape& to) {
  if (from.size() > to.size()) {
    shape_fail("broadcast", "cannot broadcast " + shape_str(from) + " to lower-rank " + shape_str(to));
  }
  const std::size_t offset = to.size() - from.size();
  std::vector<std::size_t> strides(to.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = from.size(); i-- > 0;) {
    const std::size_t ax = i + offset;
    if (from[i] == to[ax]) {
      strides[ax] = from[i] == 1 ? 0 : stride;
    } else if (from[i] != 1) {
      shape_fail("broadcast", "axis " + std::to_string(i) + " of " + shape_str(from) + " (size " +
                                  std::to_string(from[i]) + ") cannot expand to " + std::to_string(to[ax]));
    }
    stride *= from[i];
  }
  return strides;
}

template <class Visit>
void for_each_offset(const Shape& shape, const std::vector<std::size_t>& strides, Visit visit) {
  const std::size_t total = shape_numel(shape);
  if (total == 0) return;
  const std::size_t rank = shape.size();
  if (rank == 0) {
    visit(0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  const std::size_t inner = shape.back();
  const std::size_t inner_stride = strides.back();
  for (std::size_t flat = 0; flat < total; flat += inner) {
    for (std::size_t i = 0; i < inner; ++i) visit(flat + i, off + i * inner_stride);
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      off += strides[ax];
      if (idx[ax] < shape[ax]) break;
      off -= strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor broadcast(const Tensor& x, const Shape& shape) {
  const auto strides = broadcast_strides(x.shape(), shape);
  const auto in = x.data();
  std::vector<double> out(shape_numel(shape));
  for_each_offset(shape, strides, [&](std::size_t o, std::size_t i) { out[o] = in[i]; });
  const std::array<Tensor, 1> inputs{x};
  return make_result("broadcast", inputs, shape, std::move(out), [shape, strides](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for_each_offset(shape, strides, [&](std::size_t o, std::size_t i) { g[i] += c.grad_out[o]; });
  });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t stop) {
  const auto ax = normalize_axis(axis, x.rank(), "slice");
  if (start > stop || stop > x.shape()[ax]) {
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(stop) + ") invalid for axis " +
                            std::to_string(ax) + " of size " + std::to_string(x.shape()[ax]));
  }
  const auto s = split_at(x.shape(), ax);
  const std::size_t len = stop - start;
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  const auto in = x.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* from = in.data() + (o * s.length + start) * s.inner;
    std::copy(from, from + len * s.inner, out.data() + o * len * s.inner);
  }
  const std::array<Tensor, 1> inputs{x};
  return make_result("slice", inputs, std::move(out_shape), std::move(out), [s, start, len](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* from = c.grad_out.data() + o * len * s.inner;
      double* to = g.data() + (o * s.length + start) * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) to[i] += from[i];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_fail("concat", "needs at least one input");
  const auto ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lengths;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& sh = parts[p].shape();
    if (sh.size() != out_shape.size()) shape_fail("concat", "input " + std::to_string(p) + " has different rank");
    for (std::size_t i = 0; i < sh.size(); ++i) {
      if (i != ax && sh[i] != parts[0].shape()[i]) {
        shape_fail("concat", "input " + std::to_string(p) + " differs on axis " + std::to_string(i) + " (" +
                                 shape_str(sh) + " vs " + shape_str(parts[0].shape()) + ")");
      }
    }
    lengths.push_back(sh[ax]);
    out_shape[ax] += sh[ax];
  }
  const auto s = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto in = parts[p].data();
    const std::size_t chunk = lengths[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(in.data() + o * chunk, in.data() + (o + 1) * chunk, out.data() + (o * s.length + pos) * s.inner);
    }
    pos += lengths[p];
  }
  return make_result("concat", parts, std::move(out_shape), std::move(out), [s, lengths](BackwardContext& c) {
    std::size_t pos = 0;
    for (std::size_t p = 0; p < lengths.size(); ++p) {
      const std::size_t chunk = lengths[p] * s.inner;
      if (auto* g = c.grad_in[p]) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* from = c.grad_out.data() + (o * s.length + pos) * s.inner;
          double* to = g->data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) to[i] += from[i];
        }
      }
      pos += lengths[p];
    }
  });
}

std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

Tensor topk_mask(const Tensor& x, std::size_t k, double fill) {
  if (x.rank() == 0) shape_fail("topk_mask", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  if (k < 1 || k > n) {
    throw std::invalid_argument("topk_mask: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const std::size_t rows = x.numel() / n;
  const auto in = x.data();
  std::vector<double> out(in.size(), fill);
  std::vector<unsigned char> kept(in.size(), 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto i : topk_indices(in.subspan(r * n, n), k)) {
      out[r * n + i] = in[r * n + i];
      kept[r * n + i] = 1;
    }
  }
  const std::array<Tensor, 1> inputs{x};
  return make_result("topk_mask", inputs, x.shape(), std::move(out), [kept = std::move(kept)](BackwardContext& c) {
    auto& g = *c.grad_in[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (kept[i]) g[i] += c.grad_out[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) { return mul(x, Tensor::full(x.shape(), factor)); }

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  Tensor y = matmul(x, weight);
  if (bias != nullptr) y = add(y, broadcast(*bias, y.shape()));
  return y;
}

Tensor mul_const(const Tensor& x, std::vector<double> mask) { return mul(x, Tensor(x.shape(), std::move(mask))); }

}  // namespace ops

namespace {

std::int64_t attr_int(const Attrs& attrs, std::string_view prim, std::string_view key) {
  auto it = attrs.find(key);
  if (it == attrs.end()) {
    throw std::invalid_argument(std::string(prim) + ": missing attribute '" + std::string(key) + "'");
  }
  if (const auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
  throw std::invalid_argument(std::string(prim) + ": attribute '" + std::string(key) + "' must be an integer");
}

std::optional<std::int64_t> attr_int_opt(const Attrs& attrs, std::string_view prim, std::string_view key) {
  if (attrs.find(key) == attrs.end()) return std::nullopt;
  return attr_int(attrs, prim, key);
}

double attr_double(const Attrs& attrs, std::string_view prim, std::string_view key, double fallback) {
  auto it = attrs.find(key);
  if (it == attrs.end()) return fallback;
  if (const auto* v = std::get_if<double>(&it->second)) return *v;
  if (const auto* v = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*v);
  throw std::invalid_argument(std::string(prim) + ": attribute '" + std::string(key) + "' must be a number");
}

Shape attr_shape(const Attrs& attrs, std::string_view prim, std::string_view key) {
  auto it = attrs.find(key);
  const auto* v = it == attrs.end() ? nullptr : std::get_if<std::vector<std::int64_t>>(&it->second);
  if (v == nullptr) {
    throw std::invalid_argument(std::string(prim) + ": attribute '" + std::string(key) + "' must be an integer list");
  }
  Shape s;
  for (auto d : *v) {
    if (d < 0) throw std::invalid_argument(std::string(prim) + ": negative extent in '" + std::string(key) + "'");
    s.push_back(static_cast<std::size_t>(d));
  }
  return s;
}

void expect_arity(std::string_view prim, std::span<const Tensor> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw std::invalid_argument(std::string(prim) + ": expects " + std::to_string(n) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
}

using PrimitiveFn = Tensor (*)(std::span<const Tensor>, const Attrs&);

struct Entry {
  std::string_view name;
  PrimitiveFn fn;
};

#define STMOE_BINARY(NAME)                                                \
  Entry {                                                                 \
#NAME, [](std::span<const Tensor> in, const Attrs&) {                 \
      expect_arity(#NAME, in, 2);                                         \
      return ops::NAME(in[0], in[1]);                                     \
    }                                                                     \
  }
#define STMOE_UNARY(NAME)                                                 \
  Entry {                                                                 \
#NAME, [](std::span<const Tensor> in, const Attrs&) {                 \
      expect_arity(#NAME, in, 1);                                         \
      return ops::NAME(in[0]);                                            \
    }                                                                     \
  }

const std::array<Entry, 23> kRegistry{{
    STMOE_BINARY(add),
    STMOE_BINARY(sub),
    STMOE_BINARY(mul),
    STMOE_BINARY(matmul),
    STMOE_UNARY(exp),
    STMOE_UNARY(softplus),
    STMOE_UNARY(silu),
    STMOE_UNARY(tanh),
    STMOE_UNARY(relu),
    {"transpose",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("transpose", in, 1);
       return ops::transpose(in[0], static_cast<int>(attr_int(a, "transpose", "axis0")),
                             static_cast<int>(attr_int(a, "transpose", "axis1")));
     }},
    {"reverse_axis",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("reverse_axis", in, 1);
       return ops::reverse_axis(in[0], static_cast<int>(attr_int(a, "reverse_axis", "axis")));
     }},
    {"reshape",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("reshape", in, 1);
       return ops::reshape(in[0], attr_shape(a, "reshape", "shape"));
     }},
    {"reduce_mean",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("reduce_mean", in, 1);
       auto axis = attr_int_opt(a, "reduce_mean", "axis");
       return ops::reduce_mean(in[0], axis ? std::optional<int>(static_cast<int>(*axis)) : std::nullopt,
                               attr_int_opt(a, "reduce_mean", "keepdim").value_or(0) != 0);
     }},
    {"reduce_sum",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("reduce_sum", in, 1);
       auto axis = attr_int_opt(a, "reduce_sum", "axis");
       return ops::reduce_sum(in[0], axis ? std::optional<int>(static_cast<int>(*axis)) : std::nullopt,
                              attr_int_opt(a, "reduce_sum", "keepdim").value_or(0) != 0);
     }},
    STMOE_UNARY(softmax_lastaxis),
    {"layernorm_lastaxis",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("layernorm_lastaxis", in, 1);
       return ops::layernorm_lastaxis(in[0], attr_double(a, "layernorm_lastaxis", "eps", 1e-5));
     }},
    {"depthwise_causal_conv1d",
     [](std::span<const Tensor> in, const Attrs&) {
       expect_arity("depthwise_causal_conv1d", in, 3);
       return ops::depthwise_causal_conv1d(in[0], in[1], in[2]);
     }},
    {"broadcast",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("broadcast", in, 1);
       return ops::broadcast(in[0], attr_shape(a, "broadcast", "shape"));
     }},
    {"slice",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("slice", in, 1);
       const auto start = attr_int(a, "slice", "start");
       const auto stop = attr_int(a, "slice", "stop");
       if (start < 0 || stop < 0) throw std::invalid_argument("slice: start/stop must be non-negative");
       return ops::slice(in[0], static_cast<int>(attr_int(a, "slice", "axis")), static_cast<std::size_t>(start),
                         static_cast<std::size_t>(stop));
     }},
    {"concat",
     [](std::span<const Tensor> in, const Attrs& a) {
       return ops::concat(in, static_cast<int>(attr_int(a, "concat", "axis")));
     }},
    {"topk_mask",
     [](std::span<const Tensor> in, const Attrs& a) {
       expect_arity("topk_mask", in, 1);
       const auto k = attr_int(a, "topk_mask", "k");
       if (k < 1) throw std::invalid_argument("topk_mask: k must be >= 1");
       return ops::topk_mask(in[0], static_cast<std::size_t>(k),
                             attr_double(a, "topk_mask", "fill", -std::numeric_limits<double>::infinity()));
     }},
    {"selective_scan",
     [](std::span<const Tensor> in, const Attrs&) {
       expect_arity("selective_scan", in, 4);
       return ssm::selective_scan(in[0], in[1], in[2], in[3]);
     }},
    {"selective_scan_fused",
     [](std::span<const Tensor> in, const Attrs&) {
       expect_arity("selective_scan_fused", in, 5);
       return ssm::selective_scan_fused(in[0], in[1], in[2], in[3], in[4]);
     }},
}};

#undef STMOE_BINARY
#undef STMOE_UNARY

const std::array<std::string_view, kRegistry.size()> kNames = [] {
  std::array<std::string_view, kRegistry.size()> names{};
  for (std::size_t i = 0; i < kRegistry.size(); ++i) names[i] = kRegistry[i].name;
  return names;
}();

}  // namespace

Tensor apply_primitive(std::string_view name, std::span<const Tensor> inputs, const Attrs& attrs) {
  for (const auto& e : kRegistry) {
    if (e.name == name) return e.fn(inputs, attrs);
  }
  throw std::invalid_argument("apply_primitive: unknown primitive '" + std::string(name) + "'");
}

std::span<const std::string_view> primitive_names() { return kNames; }

}  // namespace stmoe
