#include "stmoe/model.hpp"

#include <set>
#include <sstream>

#include "stmoe/ops.hpp"

namespace stmoe {

StMoeModel make_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.feature_dim();
  const std::size_t t = config.total;
  StMoeModel m{config, DctBasis(t), {}, {}};
  m.codec = make_pose_codec(d, t, config.codec_hidden, config.dropout, rng);
  for (std::size_t l = 0; l < config.moe_layers; ++l) {
    MoeLayerParams layer;
    layer.router = make_router(d, config.n_experts, config.active_k, rng);
    layer.blocks.spatial = ssm::make_bi_block(t, config.ssm, rng);
    layer.blocks.temporal = ssm::make_bi_block(d, config.ssm, rng);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

NamedTensors model_parameters(const StMoeModel& model) {
  NamedTensors out;
  collect_parameters(model.codec, "codec.", out);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "moe." + std::to_string(l) + ".";
    collect_parameters(model.layers[l].router, p + "router.", out);
    ssm::collect_parameters(model.layers[l].blocks.spatial, p + "spatial.", out);
    ssm::collect_parameters(model.layers[l].blocks.temporal, p + "temporal.", out);
  }
  return out;
}

namespace {

void check_history(const ModelConfig& c, const Tensor& history) {
  if (history.rank() != 3 || history.dim(1) != c.pose_dim() || history.dim(2) != c.history) {
    throw ShapeError("model_forward: history " + shape_str(history.shape()) + " must be (batch*persons, " +
                     std::to_string(c.pose_dim()) + ", " + std::to_string(c.history) + ")");
  }
  if (c.scene_concat && history.dim(0) % c.persons != 0) {
    throw ShapeError("model_forward: scene_concat needs a batch axis divisible by persons=" + std::to_string(c.persons));
  }
}

struct Prepared {
  Tensor coeffs;  // encoder input, model units
  Tensor offset;  // (rows, D, 1) centroid in model units, or undefined
};

Prepared prepare(const ModelConfig& c, const Tensor& history) {
  check_history(c, history);
  Prepared p;
  Tensor x = ops::scale(history, c.unit_scale);
  if (c.center_input) {
    const std::size_t n = history.dim(0), j = c.joints, t = c.history;
    const Tensor per_coord = ops::reduce_mean(ops::reduce_mean(ops::reshape(x, {n, j, 3, t}), 3, true), 1, true);
    p.offset = ops::reshape(ops::broadcast(per_coord, {n, j, 3, 1}), {n, c.pose_dim(), 1});
    x = ops::sub(x, ops::broadcast(p.offset, x.shape()));
  }
  if (c.scene_concat) x = ops::reshape(x, {history.dim(0) / c.persons, c.feature_dim(), c.history});
  p.coeffs = x;
  return p;
}

}  // namespace

Tensor model_features(const StMoeModel& model, const Tensor& history, const ForwardMode& mode) {
  const ModelConfig& c = model.config;
  const Prepared p = prepare(c, history);
  return encode(model.codec, dct_forward(model.dct, pad_sequence(p.coeffs, c.total)), mode);
}

ForwardResult model_forward(const StMoeModel& model, const Tensor& history, const ForwardMode& mode) {
  const ModelConfig& c = model.config;
  const Prepared p = prepare(c, history);
  ForwardResult r;
  r.features = encode(model.codec, dct_forward(model.dct, pad_sequence(p.coeffs, c.total)), mode);
  Tensor e = r.features;
  for (const auto& layer : model.layers) {
    MoeOutput out = moe_layer_forward(layer.router, layer.blocks, c.pool, e, c.scan_options());
    e = std::move(out.output);
    r.decisions.push_back(std::move(out.decision));
  }
  Tensor y = dct_inverse(model.dct, decode(model.codec, ops::add(r.features, e), mode));
  if (c.scene_concat) y = ops::reshape(y, {history.dim(0), c.pose_dim(), c.total});
  if (p.offset.defined()) y = ops::add(y, ops::broadcast(p.offset, y.shape()));
  r.pred = ops::scale(y, 1.0 / c.unit_scale);
  return r;
}

ParameterAudit audit_parameters(const StMoeModel& model) {
  ParameterAudit a;
  const NamedTensors all = model_parameters(model);
  std::set<const void*> seen;
  for (const auto& [name, t] : all) {
    if (!seen.insert(t.impl().get()).second) a.unique_tensors = false;
  }
  a.total = count_elements(all);

  NamedTensors codec;
  collect_parameters(model.codec, "codec.", codec);
  a.codec = count_elements(codec);
  a.modules.emplace_back("codec", a.codec);

  std::set<const void*> shared_ids;
  std::set<const void*> reachable;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const std::string p = "moe." + std::to_string(l) + ".";
    NamedTensors router, spatial, temporal;
    collect_parameters(layer.router, "", router);
    ssm::collect_parameters(layer.blocks.spatial, "", spatial);
    ssm::collect_parameters(layer.blocks.temporal, "", temporal);
    a.modules.emplace_back(p + "router", count_elements(router));
    a.modules.emplace_back(p + "spatial", count_elements(spatial));
    a.modules.emplace_back(p + "temporal", count_elements(temporal));
    a.routers += count_elements(router);
    a.expert_pool += count_elements(spatial) + count_elements(temporal);
    for (const auto* group : {&spatial, &temporal})
      for (const auto& [n, t] : *group) shared_ids.insert(t.impl().get());

    // Walk the blocks each expert actually calls.
    for (auto kind : model.config.pool) {
      const bool uses_s = kind != ExpertKind::kTT;
      const bool uses_t = kind != ExpertKind::kSS;
      if (uses_s) for (const auto& [n, t] : spatial) reachable.insert(t.impl().get());
      if (uses_t) for (const auto& [n, t] : temporal) reachable.insert(t.impl().get());
    }
  }
  for (const auto& [name, t] : all) {
    if (reachable.count(t.impl().get())) a.expert_reachable += t.numel();
  }
  for (const void* id : reachable) {
    if (!shared_ids.count(id)) a.experts_within_shared = false;
  }
  return a;
}

std::string ParameterAudit::to_text() const {
  std::ostringstream os;
  for (const auto& [name, n] : modules) os << name << ' ' << n << '\n';
  os << "codec " << codec << '\n'
     << "routers " << routers << '\n'
     << "expert_pool " << expert_pool << '\n'
     << "expert_reachable " << expert_reachable << '\n'
     << "total " << total << '\n'
     << "unique_tensors " << (unique_tensors ? "yes" : "no") << '\n'
     << "experts_within_shared " << (experts_within_shared ? "yes" : "no") << '\n';
  return os.str();
}

}  // namespace stmoe
