#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stmoe/config.hpp"
#include "stmoe/dct.hpp"
#include "stmoe/pose_codec.hpp"
#include "stmoe/router.hpp"

namespace stmoe {

struct MoeLayerParams {
  RouterParams router;
  SharedBlocks blocks;
};

struct StMoeModel {
  ModelConfig config;
  DctBasis dct;
  PoseCodec codec;
  std::vector<MoeLayerParams> layers;
};

StMoeModel make_model(const ModelConfig& config, std::uint64_t seed);

/// Every trainable tensor once, in a fixed order with dotted names.
NamedTensors model_parameters(const StMoeModel& model);

struct ForwardResult {
  Tensor pred;                          // (batch * persons, D, T), millimeters
  std::vector<GateDecision> decisions;  // one per MoE layer
  Tensor features;                      // F_input, model units
};

/// history: (batch * persons, D, t) in millimeters.
ForwardResult model_forward(const StMoeModel& model, const Tensor& history, const ForwardMode& mode = {});

/// Encoder features of a history batch, shaped for the router and experts.
Tensor model_features(const StMoeModel& model, const Tensor& history, const ForwardMode& mode = {});

struct ParameterAudit {
  std::vector<std::pair<std::string, std::size_t>> modules;  // name, element count
  std::size_t total = 0;
  std::size_t codec = 0;
  std::size_t routers = 0;
  /// Elements in the shared spatial and temporal blocks of every layer.
  std::size_t expert_pool = 0;
  /// Elements reachable from the experts of every pool, deduplicated.
  std::size_t expert_reachable = 0;
  bool unique_tensors = true;
  bool experts_within_shared = true;

  std::string to_text() const;
};

ParameterAudit audit_parameters(const StMoeModel& model);

}  // namespace stmoe
