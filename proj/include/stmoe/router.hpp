#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stmoe/random.hpp"
#include "stmoe/ssm.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe {

/// First letter is the first block's orientation, second letter the second's.
/// S scans the pose axis, T scans the frame axis.
enum class ExpertKind { kST, kTT, kTS, kSS };

std::string_view to_string(ExpertKind kind);
std::optional<ExpertKind> parse_expert_kind(std::string_view text);

struct RouterParams {
  Tensor gate_weight;  // (D, N)
  Tensor gate_bias;    // (N)
  std::size_t k = 0;
  std::size_t n_experts = 0;
};

RouterParams make_router(std::size_t pose_dim, std::size_t n_experts, std::size_t k, Rng& rng);
void collect_parameters(const RouterParams& r, const std::string& prefix, NamedTensors& out);

struct GateDecision {
  std::size_t batch = 0;
  std::size_t n_experts = 0;
  std::vector<double> logits;               // (batch, N)
  std::vector<std::vector<std::size_t>> kept;  // per sample, ascending
  Tensor weights;                           // (batch, N), differentiable

  double weight(std::size_t sample, std::size_t expert) const { return weights.data()[sample * n_experts + expert]; }
  /// One JSON object per sample: {"layer", "sample", "logits", "kept", "weights"}.
  std::string to_json_lines(std::size_t layer, std::size_t sample_offset) const;
};

/// Temporal-mean descriptor -> linear logits -> top-k mask -> softmax.
GateDecision gate(const RouterParams& router, const Tensor& features);

/// Top-k softmax of precomputed logits (batch, N).
GateDecision gate_from_logits(const Tensor& logits, std::size_t k);

struct SharedBlocks {
  ssm::BiBlockParams spatial;   // channels T, scans D
  ssm::BiBlockParams temporal;  // channels D, scans T
};

/// f: (batch, D, T) -> (batch, D, T).
Tensor expert_forward(ExpertKind kind, const SharedBlocks& blocks, const Tensor& features,
                      const ssm::ScanOptions& opts = {});

struct MoeOutput {
  Tensor output;
  GateDecision decision;
};

/// Weighted sum of pool experts. An expert whose weight is zero for every
/// sample in the batch is not evaluated.
MoeOutput moe_layer_forward(const RouterParams& router, const SharedBlocks& blocks,
                            const std::vector<ExpertKind>& pool, const Tensor& features,
                            const ssm::ScanOptions& opts = {});

/// Combination step of moe_layer_forward with an explicit decision.
Tensor combine_experts(const GateDecision& decision, const SharedBlocks& blocks, const std::vector<ExpertKind>& pool,
                       const Tensor& features, const ssm::ScanOptions& opts = {});

}  // namespace stmoe
