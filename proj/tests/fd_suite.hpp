#pragma once

// Finite-difference gradient cases shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "stmoe/gradcheck.hpp"
#include "stmoe/model.hpp"
#include "stmoe/objective.hpp"
#include "stmoe/data.hpp"
#include "stmoe/ops.hpp"
#include "stmoe/ssm.hpp"
#include "stmoe/tape.hpp"
#include "test_util.hpp"

namespace stmoe::testing {

struct FdCase {
  std::string name;
  std::vector<Tensor> inputs;
  Attrs attrs;
  std::vector<std::size_t> checked;  // input positions that get a gradient check
};

inline Shape random_shape(Rng& rng, std::size_t min_rank, std::size_t max_rank, std::size_t max_len = 8) {
  Shape s(min_rank + rng.index(max_rank - min_rank + 1));
  for (auto& d : s) d = 1 + rng.index(max_len);
  return s;
}

inline std::vector<std::int64_t> to_i64(const Shape& s) { return {s.begin(), s.end()}; }

/// Distinct values on a shuffled grid, so ranks are stable under tiny perturbations.
inline Tensor spaced_values(const Shape& s, Rng& rng) {
  std::vector<double> v(shape_numel(s));
  std::iota(v.begin(), v.end(), 0.0);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
  for (auto& x : v) x = 0.1 * x - 1.0;
  return Tensor(s, std::move(v));
}

inline FdCase make_fd_case(std::string_view name, std::uint64_t seed) {
  Rng rng(seed * 7919 + std::hash<std::string_view>{}(name) % 1000);
  FdCase c{std::string(name), {}, {}, {}};
  auto any = [&](std::size_t lo = 1, std::size_t hi = 4) { return random_shape(rng, lo, hi); };
  if (name == "add" || name == "sub" || name == "mul") {
    const Shape s = any();
    c.inputs = {rand_signed(s, 0.2, 2, rng), rand_signed(s, 0.2, 2, rng)};
  } else if (name == "matmul") {
    const std::size_t m = 1 + rng.index(8), k = 1 + rng.index(8), n = 1 + rng.index(8);
    Shape lead = random_shape(rng, 0, 2);
    Shape sa = lead, sb = lead;
    sa.insert(sa.end(), {m, k});
    sb.insert(sb.end(), {k, n});
    if (rng.index(3) == 0) sa = {m, k};  // shared left operand
    c.inputs = {rand_uniform(sa, 0.2, 1, rng), rand_uniform(sb, 0.2, 1, rng)};
  } else if (name == "exp") {
    c.inputs = {rand_uniform(any(), -1, 1, rng)};
  } else if (name == "softplus" || name == "tanh") {
    c.inputs = {rand_uniform(any(), -2, 2, rng)};
  } else if (name == "silu") {
    c.inputs = {rand_uniform(any(), -1, 2, rng)};
  } else if (name == "relu") {
    c.inputs = {rand_signed(any(), 0.1, 2, rng)};
  } else if (name == "transpose") {
    const Shape s = any(2, 4);
    c.inputs = {rand_signed(s, 0.2, 2, rng)};
    c.attrs = {{"axis0", std::int64_t(rng.index(s.size()))}, {"axis1", std::int64_t(rng.index(s.size()))}};
  } else if (name == "reverse_axis") {
    const Shape s = any();
    c.inputs = {rand_signed(s, 0.2, 2, rng)};
    c.attrs = {{"axis", std::int64_t(rng.index(s.size()))}};
  } else if (name == "reshape") {
    const Shape s = any();
    Shape t{shape_numel(s)};
    if (t[0] % 2 == 0) t = {2, t[0] / 2};
    c.inputs = {rand_signed(s, 0.2, 2, rng)};
    c.attrs = {{"shape", to_i64(t)}};
  } else if (name == "reduce_sum" || name == "reduce_mean") {
    const Shape s = any();
    c.inputs = {rand_signed(s, 0.2, 2, rng)};
    if (rng.index(3) != 0) {
      c.attrs = {{"axis", std::int64_t(rng.index(s.size()))}, {"keepdim", std::int64_t(rng.index(2))}};
    }
  } else if (name == "softmax_lastaxis") {
    // Row-coupled ops have gradients near zero for some entries; small
    // shapes keep the loss magnitude, and so FD roundoff, low.
    c.inputs = {rand_uniform(random_shape(rng, 1, 3, 6), -1, 1, rng)};
  } else if (name == "layernorm_lastaxis") {
    Shape s = random_shape(rng, 1, 3, 6);
    s.back() = 3 + rng.index(6);
    c.inputs = {rand_uniform(s, -2, 2, rng)};
  } else if (name == "depthwise_causal_conv1d") {
    const std::size_t b = 1 + rng.index(3), l = 1 + rng.index(8), ch = 1 + rng.index(6), w = 1 + rng.index(4);
    c.inputs = {rand_uniform({b, l, ch}, 0.2, 1, rng), rand_uniform({ch, w}, 0.2, 1, rng),
                rand_uniform({ch}, -1, 1, rng)};
  } else if (name == "broadcast") {
    Shape target = any(2, 4);
    Shape src(target.begin() + static_cast<long>(rng.index(target.size())), target.end());
    for (auto& d : src)
      if (rng.index(2) == 0) d = 1;
    c.inputs = {rand_signed(src, 0.2, 2, rng)};
    c.attrs = {{"shape", to_i64(target)}};
  } else if (name == "slice") {
    const Shape s = any();
    const std::size_t axis = rng.index(s.size());
    const std::size_t start = rng.index(s[axis]);
    const std::size_t stop = start + 1 + rng.index(s[axis] - start);
    c.inputs = {rand_signed(s, 0.2, 2, rng)};
    c.attrs = {{"axis", std::int64_t(axis)}, {"start", std::int64_t(start)}, {"stop", std::int64_t(stop)}};
  } else if (name == "concat") {
    const Shape s = any();
    const std::size_t axis = rng.index(s.size());
    const std::size_t parts = 1 + rng.index(3);
    for (std::size_t p = 0; p < parts; ++p) {
      Shape sp = s;
      sp[axis] = 1 + rng.index(8);
      c.inputs.push_back(rand_signed(sp, 0.2, 2, rng));
    }
    c.attrs = {{"axis", std::int64_t(axis)}};
  } else if (name == "topk_mask") {
    const Shape s = any();
    c.inputs = {spaced_values(s, rng)};
    c.attrs = {{"k", std::int64_t(1 + rng.index(s.back()))}, {"fill", -3.0}};
  } else if (name == "selective_scan") {
    const std::size_t b = 1 + rng.index(2), l = 1 + rng.index(8), d = 1 + rng.index(4), n = 1 + rng.index(4);
    c.inputs = {rand_uniform({b, l, d, n}, 0.3, 0.95, rng), rand_uniform({b, l, d, n}, 0.2, 1, rng),
                rand_uniform({b, l, n}, 0.2, 1, rng), rand_uniform({b, l, d}, 0.2, 1, rng)};
  } else if (name == "selective_scan_fused") {
    const std::size_t b = 1 + rng.index(2), l = 1 + rng.index(8), d = 1 + rng.index(4), n = 1 + rng.index(4);
    c.inputs = {rand_uniform({b, l, d}, 0.1, 1, rng), rand_uniform({d, n}, -2, -0.2, rng),
                rand_uniform({b, l, n}, 0.2, 1, rng), rand_uniform({b, l, n}, 0.2, 1, rng),
                rand_uniform({b, l, d}, 0.2, 1, rng)};
  } else {
    throw std::invalid_argument("no finite-difference generator for " + std::string(name));
  }
  c.checked.resize(c.inputs.size());
  std::iota(c.checked.begin(), c.checked.end(), std::size_t{0});
  return c;
}

/// Max relative error over every checked input of sum(w * prim(inputs)).
inline double run_fd_case(const FdCase& c, std::uint64_t seed) {
  const Tensor probe = apply_primitive(c.name, c.inputs, c.attrs);
  Rng rng(seed + 17);
  const bool coupled = c.name == "softmax_lastaxis" || c.name == "layernorm_lastaxis";
  const Tensor w = coupled ? rand_signed(probe.shape(), 0.5, 3, rng) : rand_uniform(probe.shape(), 0.5, 1.5, rng);
  double worst = 0.0;
  for (std::size_t pos : c.checked) {
    auto f = [&](const Tensor& x) {
      std::vector<Tensor> in = c.inputs;
      in[pos] = x;
      return weighted_sum(apply_primitive(c.name, in, c.attrs), w);
    };
    worst = std::max(worst, finite_difference_check(f, c.inputs[pos]).max_rel_error);
  }
  return worst;
}

/// Max relative error over every tensor in `params` for the scalar f().
inline double check_parameters(const std::function<Tensor()>& f, const NamedTensors& params, std::string* worst_name,
                               double eps = 1e-5) {
  double worst = 0.0;
  for (const auto& [name, t] : params) {
    const double e = finite_difference_check_inplace(f, t, eps).max_rel_error;
    if (e > worst) {
      worst = e;
      if (worst_name) *worst_name = name;
    }
  }
  return worst;
}

inline void refill(Tensor t, double lo, double hi, Rng& rng) {
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
}

/// The canonical init makes the scan branch contribute ~1e-8 to its output,
/// below what central differences can resolve. Gradient checks move the
/// block to a generic point where every parameter matters.
inline void condition_for_fd(ssm::MambaBlockParams& p, Rng& rng) {
  refill(p.in_proj, -0.8, 0.8, rng);
  refill(p.conv_weight, -0.8, 0.8, rng);
  refill(p.conv_bias, -0.5, 0.5, rng);
  refill(p.x_proj, -0.8, 0.8, rng);
  refill(p.dt_proj, -0.8, 0.8, rng);
  refill(p.dt_bias, 0.0, 1.0, rng);
  refill(p.a_log, -0.5, 0.5, rng);
  refill(p.out_proj, -0.8, 0.8, rng);
}

struct CompositeResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t skipped = 0;  // elements whose stencil crossed a ReLU kink
};

/// Mamba block on (1, 4, 3), expand 2, state 2: input and every parameter.
inline CompositeResult fd_mamba_block(std::uint64_t seed) {
  Rng rng(seed);
  ssm::SsmSizes sizes{2, 2, 4, 0};
  auto block = ssm::make_mamba_block(3, sizes, rng);
  condition_for_fd(block, rng);
  const Tensor x = rand_uniform({1, 4, 3}, -1, 1, rng);
  const Tensor w = rand_uniform({1, 4, 3}, 0.5, 1.5, rng);
  CompositeResult r;
  r.max_rel_error = finite_difference_check(
                        [&](const Tensor& in) { return weighted_sum(ssm::mamba_block_forward(block, in), w); }, x)
                        .max_rel_error;
  r.worst = "input";
  NamedTensors params;
  ssm::collect_parameters(block, "mamba", params);
  std::string name;
  const double pe = check_parameters([&] { return weighted_sum(ssm::mamba_block_forward(block, x), w); }, params, &name);
  if (pe > r.max_rel_error) r = {pe, name};
  return r;
}

/// Full bidirectional wrapper (core + LN/FFN) on (2, 5, 3).
inline CompositeResult fd_bi_block(std::uint64_t seed, ssm::ScanOptions opts = {}) {
  Rng rng(seed);
  ssm::SsmSizes sizes{2, 2, 3, 0};
  auto block = ssm::make_bi_block(3, sizes, rng);
  condition_for_fd(block.mamba, rng);
  const Tensor x = rand_uniform({2, 5, 3}, -1, 1, rng);
  const Tensor w = rand_uniform({2, 5, 3}, 0.5, 1.5, rng);
  auto f = [&](const Tensor& in) { return weighted_sum(ssm::bidirectional_forward(block, in, opts), w); };
  CompositeResult r{finite_difference_check(f, x).max_rel_error, "input"};
  NamedTensors params;
  ssm::collect_parameters(block, "bi", params);
  std::string name;
  const double pe = check_parameters([&] { return f(x); }, params, &name);
  if (pe > r.max_rel_error) r = {pe, name};
  return r;
}

inline ModelConfig fd_micro_config() {
  ModelConfig c;
  c.joints = 3;
  c.history = 5;
  c.total = 8;
  c.persons = 2;
  c.codec_hidden = 6;
  c.dropout = 0.0;
  c.ssm = {2, 2, 3, 0};
  c.unit_scale = 1.0;
  return c;
}

/// End-to-end training loss of the micro model on a (2, 9, 8) target with
/// respect to every model parameter.
/// Sign of every ReLU input recorded while evaluating f, in tape order.
inline std::vector<bool> relu_signs(const std::function<Tensor()>& f, double* value) {
  Tape tape;
  TapeScope scope(tape);
  *value = f().item();
  std::vector<bool> signs;
  for (const auto& node : tape.nodes())
    if (node.op == "relu")
      for (double z : node.inputs[0]->data) signs.push_back(z > 0);
  return signs;
}

/// Central differences against the tape gradient for every element of
/// `params`. Elements whose stencil moves any ReLU input across zero are
/// not differentiable inside the stencil; they are counted and skipped.
inline double check_parameters_kink_aware(const std::function<Tensor()>& f, const NamedTensors& params,
                                          std::string* worst_name, std::size_t* skipped, double eps = 1e-5) {
  for (auto [name, t] : params) t.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    backward(f());
  }
  double worst = 0.0, unused = 0.0;
  const std::vector<bool> base = relu_signs(f, &unused);
  for (const auto& [name, t] : params) {
    Tensor param = t;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double x0 = param.data()[i];
      double up = 0, down = 0;
      param.mutable_data()[i] = x0 + eps;
      const bool same_up = relu_signs(f, &up) == base;
      param.mutable_data()[i] = x0 - eps;
      const bool same_down = relu_signs(f, &down) == base;
      param.mutable_data()[i] = x0;
      if (!same_up || !same_down) {
        ++*skipped;
        continue;
      }
      const double fd = (up - down) / (2 * eps), a = analytic.empty() ? 0.0 : analytic[i];
      const double e = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      if (e > worst) {
        worst = e;
        if (worst_name) *worst_name = name;
      }
    }
  }
  return worst;
}

inline CompositeResult fd_model_loss(std::uint64_t seed, const ModelConfig& config = fd_micro_config()) {
  StMoeModel model = make_model(config, seed);
  Rng rng(seed + 1);
  for (auto& layer : model.layers) {
    condition_for_fd(layer.blocks.spatial.mamba, rng);
    condition_for_fd(layer.blocks.temporal.mamba, rng);
  }
  const std::size_t rows = config.persons;
  const Tensor target = rand_uniform({rows, config.pose_dim(), config.total}, -1, 1, rng);
  const Tensor history = ops::slice(target, 2, 0, config.history);
  LossWeights lw;
  auto f = [&] {
    const auto out = model_forward(model, history);
    return total_loss(to_joint_layout(out.pred), to_joint_layout(target), config.history, lw);
  };
  CompositeResult r;
  r.max_rel_error = check_parameters_kink_aware(f, model_parameters(model), &r.worst, &r.skipped);
  return r;
}

}  // namespace stmoe::testing
