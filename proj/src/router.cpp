#include "stmoe/router.hpp"

#include <algorithm>
#include <cmath>
#include "json.hpp"
#include <stdexcept>

#include "stmoe/ops.hpp"

namespace stmoe {

std::string_view to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kST: return "ST";
    case ExpertKind::kTT: return "TT";
    case ExpertKind::kTS: return "TS";
    case ExpertKind::kSS: return "SS";
  }
  return "?";
}

std::optional<ExpertKind> parse_expert_kind(std::string_view text) {
  for (auto k : {ExpertKind::kST, ExpertKind::kTT, ExpertKind::kTS, ExpertKind::kSS}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

RouterParams make_router(std::size_t pose_dim, std::size_t n_experts, std::size_t k, Rng& rng) {
  if (n_experts == 0 || k < 1 || k > n_experts) {
    throw std::invalid_argument("make_router: need 1 <= k <= n_experts, got k=" + std::to_string(k) +
                                ", n_experts=" + std::to_string(n_experts));
  }
  RouterParams r;
  r.gate_weight = uniform_tensor({pose_dim, n_experts}, 1.0 / std::sqrt(static_cast<double>(pose_dim)), rng);
  r.gate_bias = Tensor::zeros({n_experts}, true);
  r.k = k;
  r.n_experts = n_experts;
  return r;
}

void collect_parameters(const RouterParams& r, const std::string& prefix, NamedTensors& out) {
  out.emplace_back(prefix + "gate_weight", r.gate_weight);
  out.emplace_back(prefix + "gate_bias", r.gate_bias);
}

GateDecision gate_from_logits(const Tensor& logits, std::size_t k) {
  if (logits.rank() != 2) throw ShapeError("gate: logits must be (batch, N), got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(1);
  if (k < 1 || k > n) {
    throw std::invalid_argument("gate: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  GateDecision d;
  d.batch = logits.dim(0);
  d.n_experts = n;
  d.logits.assign(logits.data().begin(), logits.data().end());
  for (std::size_t b = 0; b < d.batch; ++b) {
    auto idx = ops::topk_indices(logits.data().subspan(b * n, n), k);
    std::sort(idx.begin(), idx.end());
    d.kept.push_back(std::move(idx));
  }
  d.weights = ops::softmax_lastaxis(ops::topk_mask(logits, k));
  return d;
}

GateDecision gate(const RouterParams& router, const Tensor& features) {
  if (features.rank() != 3 || features.dim(1) != router.gate_weight.dim(0)) {
    throw ShapeError("gate: features " + shape_str(features.shape()) + " must be (batch, " +
                     std::to_string(router.gate_weight.dim(0)) + ", T)");
  }
  const Tensor descriptor = ops::reduce_mean(features, 2);
  return gate_from_logits(ops::linear(descriptor, router.gate_weight, &router.gate_bias), router.k);
}

std::string GateDecision::to_json_lines(std::size_t layer, std::size_t sample_offset) const {
  std::string out;
  for (std::size_t b = 0; b < batch; ++b) {
    nlohmann::json rec;
    rec["layer"] = layer;
    rec["sample"] = sample_offset + b;
    rec["logits"] = std::vector<double>(logits.begin() + b * n_experts, logits.begin() + (b + 1) * n_experts);
    rec["kept"] = kept[b];
    const auto w = weights.data().subspan(b * n_experts, n_experts);
    rec["weights"] = std::vector<double>(w.begin(), w.end());
    out += rec.dump();
    out += '\n';
  }
  return out;
}

namespace {

Tensor swap_last(const Tensor& x) { return ops::transpose(x, 1, 2); }

}  // namespace

Tensor expert_forward(ExpertKind kind, const SharedBlocks& blocks, const Tensor& features,
                      const ssm::ScanOptions& opts) {
  if (features.rank() != 3) throw ShapeError("expert_forward: features must be (batch, D, T), got " + shape_str(features.shape()));
  if (features.dim(2) != blocks.spatial.mamba.channels || features.dim(1) != blocks.temporal.mamba.channels) {
    throw ShapeError("expert_forward: features " + shape_str(features.shape()) + " do not match spatial channels " +
                     std::to_string(blocks.spatial.mamba.channels) + " and temporal channels " +
                     std::to_string(blocks.temporal.mamba.channels));
  }
  auto bi_s = [&](const Tensor& x) { return ssm::bidirectional_forward(blocks.spatial, x, opts); };
  auto bi_t = [&](const Tensor& x) { return ssm::bidirectional_forward(blocks.temporal, x, opts); };
  switch (kind) {
    case ExpertKind::kST: return swap_last(bi_t(swap_last(bi_s(features))));
    case ExpertKind::kTT: return swap_last(bi_t(bi_t(swap_last(features))));
    case ExpertKind::kTS: return bi_s(swap_last(bi_t(swap_last(features))));
    case ExpertKind::kSS: return bi_s(bi_s(features));
  }
  throw std::invalid_argument("expert_forward: unknown expert kind");
}

Tensor combine_experts(const GateDecision& decision, const SharedBlocks& blocks, const std::vector<ExpertKind>& pool,
                       const Tensor& features, const ssm::ScanOptions& opts) {
  if (pool.empty()) throw std::invalid_argument("moe_layer_forward: expert pool is empty");
  if (pool.size() != decision.n_experts || decision.batch != features.dim(0)) {
    throw ShapeError("moe_layer_forward: decision covers " + std::to_string(decision.batch) + " samples x " +
                     std::to_string(decision.n_experts) + " experts, input has " + std::to_string(features.dim(0)) +
                     " samples and the pool " + std::to_string(pool.size()) + " experts");
  }
  const std::size_t nb = decision.batch;
  Tensor total;
  for (std::size_t e = 0; e < pool.size(); ++e) {
    bool active = false;
    for (std::size_t b = 0; b < nb && !active; ++b) active = decision.weight(b, e) != 0.0;
    if (!active) continue;
    const Tensor out = expert_forward(pool[e], blocks, features, opts);
    const Tensor w = ops::broadcast(ops::reshape(ops::slice(decision.weights, 1, e, e + 1), {nb, 1, 1}), out.shape());
    const Tensor term = ops::mul(w, out);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

MoeOutput moe_layer_forward(const RouterParams& router, const SharedBlocks& blocks,
                            const std::vector<ExpertKind>& pool, const Tensor& features,
                            const ssm::ScanOptions& opts) {
  if (pool.size() != router.n_experts) {
    throw std::invalid_argument("moe_layer_forward: pool has " + std::to_string(pool.size()) +
                                " experts, router expects " + std::to_string(router.n_experts));
  }
  GateDecision decision = gate(router, features);
  Tensor out = combine_experts(decision, blocks, pool, features, opts);
  return {std::move(out), std::move(decision)};
}

}  // namespace stmoe
