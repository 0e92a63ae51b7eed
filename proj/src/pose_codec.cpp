#include "stmoe/pose_codec.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "stmoe/ops.hpp"

namespace stmoe {

Tensor pad_sequence(const Tensor& history, std::size_t total_frames) {
  if (history.rank() != 3) throw ShapeError("pad_sequence: history must be (persons, D, t), got " + shape_str(history.shape()));
  const std::size_t t = history.dim(2);
  if (t == 0) throw std::invalid_argument("pad_sequence: history has no frames");
  if (t > total_frames) {
    throw std::invalid_argument("pad_sequence: history length " + std::to_string(t) + " exceeds total frames " +
                                std::to_string(total_frames));
  }
  if (t == total_frames) return history;
  const Tensor last = ops::slice(history, 2, t - 1, t);
  const Tensor tail = ops::broadcast(last, {history.dim(0), history.dim(1), total_frames - t});
  const std::array<Tensor, 2> parts{history, tail};
  return ops::concat(parts, 2);
}

GcnLayer make_gcn_layer(std::size_t pose_dim, std::size_t in, std::size_t out, Activation act, double dropout,
                        bool residual, Rng& rng) {
  if (residual && in != out) throw std::invalid_argument("make_gcn_layer: residual layer needs equal widths");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("make_gcn_layer: dropout must lie in [0, 1)");
  GcnLayer layer;
  std::vector<double> adj(pose_dim * pose_dim);
  for (std::size_t i = 0; i < pose_dim; ++i)
    for (std::size_t j = 0; j < pose_dim; ++j) adj[i * pose_dim + j] = (i == j ? 1.0 : 0.0) + 0.01 * rng.normal();
  layer.adjacency = Tensor({pose_dim, pose_dim}, std::move(adj), true);
  layer.weight = uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  layer.bias = Tensor::zeros({out}, true);
  layer.activation = act;
  layer.dropout_rate = dropout;
  layer.residual = residual;
  return layer;
}

Tensor gcn_layer_forward(const GcnLayer& layer, const Tensor& x, const ForwardMode& mode) {
  const std::size_t d = layer.adjacency.dim(0);
  if (x.rank() != 3 || x.dim(1) != d || x.dim(2) != layer.weight.dim(0)) {
    throw ShapeError("gcn_layer_forward: input " + shape_str(x.shape()) + " does not match (batch, " +
                     std::to_string(d) + ", " + std::to_string(layer.weight.dim(0)) + ")");
  }
  const Tensor mixed = ops::matmul(ops::matmul(layer.adjacency, x), layer.weight);
  Tensor y = ops::add(mixed, ops::broadcast(layer.bias, mixed.shape()));
  if (layer.activation == Activation::kTanh) y = ops::tanh(y);
  if (layer.residual) y = ops::add(y, x);
  if (mode.training() && layer.dropout_rate > 0.0) {
    const double keep = 1.0 - layer.dropout_rate;
    std::vector<double> mask(y.numel());
    for (auto& m : mask) m = mode.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
    y = ops::mul_const(y, std::move(mask));
  }
  return y;
}

PoseCodec make_pose_codec(std::size_t pose_dim, std::size_t frames, std::size_t hidden, double dropout, Rng& rng) {
  if (hidden == 0) throw std::invalid_argument("make_pose_codec: hidden width must be positive");
  PoseCodec c;
  c.hidden_channels = hidden;
  auto build = [&](std::array<GcnLayer, 3>& stack) {
    stack[0] = make_gcn_layer(pose_dim, frames, hidden, Activation::kTanh, dropout, false, rng);
    stack[1] = make_gcn_layer(pose_dim, hidden, hidden, Activation::kTanh, dropout, true, rng);
    stack[2] = make_gcn_layer(pose_dim, hidden, frames, Activation::kNone, 0.0, false, rng);
  };
  build(c.encoder);
  build(c.decoder);
  return c;
}

void collect_parameters(const PoseCodec& codec, const std::string& prefix, NamedTensors& out) {
  auto add = [&](const std::array<GcnLayer, 3>& stack, const std::string& name) {
    for (std::size_t i = 0; i < stack.size(); ++i) {
      const std::string p = prefix + name + "." + std::to_string(i) + ".";
      out.emplace_back(p + "adjacency", stack[i].adjacency);
      out.emplace_back(p + "weight", stack[i].weight);
      out.emplace_back(p + "bias", stack[i].bias);
    }
  };
  add(codec.encoder, "encoder");
  add(codec.decoder, "decoder");
}

namespace {

Tensor run_stack(const std::array<GcnLayer, 3>& stack, const Tensor& x, const ForwardMode& mode) {
  Tensor h = x;
  for (const auto& layer : stack) h = gcn_layer_forward(layer, h, mode);
  return h;
}

}  // namespace

Tensor encode(const PoseCodec& codec, const Tensor& coeffs, const ForwardMode& mode) {
  return run_stack(codec.encoder, coeffs, mode);
}

Tensor decode(const PoseCodec& codec, const Tensor& features, const ForwardMode& mode) {
  return run_stack(codec.decoder, features, mode);
}

}  // namespace stmoe
