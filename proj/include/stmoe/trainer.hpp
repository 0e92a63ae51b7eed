#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmoe/config.hpp"
#include "stmoe/data.hpp"
#include "stmoe/model.hpp"
#include "stmoe/objective.hpp"
#include "stmoe/random.hpp"

namespace stmoe {

/// base * (0.1^(1/50))^epoch.
double lr_at_epoch(double base, std::size_t epoch);

struct OptimState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 0.01;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // parallel to the parameter list
  std::vector<std::vector<double>> v;
};

OptimState make_optim_state(const NamedTensors& params, const TrainerOptions& opts);

/// Bias-corrected Adam. grads[i] may be empty, meaning a zero gradient.
void adam_step(OptimState& state, const NamedTensors& params, std::span<const std::vector<double>> grads, double lr);

/// Adam using the grad buffers accumulated on the parameters.
void adam_step(OptimState& state, const NamedTensors& params, double lr);

struct TrainState {
  OptimState optim;
  std::size_t epoch = 0;  // completed epochs
  Rng rng;                // draws each epoch's shuffle seed and each batch's dropout seed
};

TrainState make_train_state(const StMoeModel& model, const TrainerOptions& opts, std::uint64_t seed);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_jpe;
  std::optional<double> val_ape;

  Json to_json() const;
};

struct FitOptions {
  TrainerOptions trainer;
  LossWeights loss;
  EvalOptions eval;
  std::size_t epochs = 0;  // epochs to run in this call
  std::function<void(const EpochLog&, const TrainState&)> on_epoch_end;
};

/// Runs `opts.epochs` further epochs from `state`. Throws on a non-finite
/// loss, naming the epoch and batch.
std::vector<EpochLog> fit(StMoeModel& model, TrainState& state, const std::vector<MotionSequence>& train,
                          const std::vector<MotionSequence>& val, const FitOptions& opts);

/// Eval-mode metrics over a dataset.
MetricReport evaluate(const StMoeModel& model, const std::vector<MotionSequence>& data, std::size_t batch_size,
                      const EvalOptions& eval);

/// Mean total loss over a dataset in eval mode, weighted by batch rows.
double evaluate_loss(const StMoeModel& model, const std::vector<MotionSequence>& data, std::size_t batch_size,
                     const LossWeights& w);

// STMC checkpoint, little-endian:
//   "STMC" u32 version
//   u64 n + n bytes: model config as JSON text
//   u64 tensor count; per tensor: u32 name length, name, u32 rank, u64 dims, f64 values
//   u64 step, f64 beta1, beta2, eps, base_lr; per tensor: f64 m values, f64 v values
//   u64 epoch; u64 n + n bytes: RNG state text
//   u64 FNV-1a hash of everything before it
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  NamedTensors params;
  OptimState optim;
  std::size_t epoch = 0;
  std::string rng_state;
};

std::string serialize_checkpoint(const StMoeModel& model, const TrainState& state);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const StMoeModel& model, const TrainState& state);
Checkpoint read_checkpoint(const std::string& path);

/// Copies checkpoint values into an existing model and state. The model's
/// configuration must match the stored one; the error names the first
/// divergent field.
void restore_checkpoint(const Checkpoint& ckpt, StMoeModel& model, TrainState& state);

/// Builds a model and train state from a checkpoint alone.
std::pair<StMoeModel, TrainState> load_checkpoint(const std::string& path);

}  // namespace stmoe
