#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "stmoe/random.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe {

/// Repeats the last of t observed frames until the trailing axis has
/// `total_frames` entries. history: (persons, D, t).
Tensor pad_sequence(const Tensor& history, std::size_t total_frames);

enum class Activation { kNone, kTanh };

struct GcnLayer {
  Tensor adjacency;  // (D, D)
  Tensor weight;     // (C_in, C_out)
  Tensor bias;       // (C_out)
  Activation activation = Activation::kNone;
  double dropout_rate = 0.0;
  bool residual = false;
};

/// Dropout source for training-mode forwards. A null pointer means eval mode.
struct ForwardMode {
  Rng* dropout_rng = nullptr;
  bool training() const { return dropout_rng != nullptr; }
};

GcnLayer make_gcn_layer(std::size_t pose_dim, std::size_t in, std::size_t out, Activation act, double dropout,
                        bool residual, Rng& rng);

/// act(A x W + b) for x (batch, D, C_in), plus x when the layer is residual,
/// then inverted dropout when training.
Tensor gcn_layer_forward(const GcnLayer& layer, const Tensor& x, const ForwardMode& mode = {});

struct PoseCodec {
  std::array<GcnLayer, 3> encoder;
  std::array<GcnLayer, 3> decoder;
  std::size_t hidden_channels = 0;
};

PoseCodec make_pose_codec(std::size_t pose_dim, std::size_t frames, std::size_t hidden, double dropout, Rng& rng);
void collect_parameters(const PoseCodec& codec, const std::string& prefix, NamedTensors& out);

Tensor encode(const PoseCodec& codec, const Tensor& coeffs, const ForwardMode& mode = {});
Tensor decode(const PoseCodec& codec, const Tensor& features, const ForwardMode& mode = {});

}  // namespace stmoe
