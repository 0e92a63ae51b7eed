#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stmoe/router.hpp"
#include "stmoe/ssm.hpp"

namespace stmoe {

/// Bad or unknown configuration input. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::json;

/// Typed access to one JSON object that remembers which keys were read, so
/// leftovers can be rejected by name.
class ObjectReader {
 public:
  ObjectReader(const Json& object, std::string path);

  bool has(const std::string& key) const;
  void read(const std::string& key, std::size_t& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::vector<double>& out);
  void read(const std::string& key, std::vector<std::string>& out);
  const Json& child(const std::string& key);
  /// Throws ConfigError naming the first key never read.
  void finish() const;
  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const Json* get(const std::string& key);
  const Json& object_;
  std::string path_;
  std::set<std::string> seen_;
};

struct ModelConfig {
  std::size_t joints = 15;
  std::size_t history = 50;
  std::size_t total = 75;
  std::size_t persons = 3;
  std::size_t n_experts = 4;
  std::size_t active_k = 4;
  std::size_t moe_layers = 1;
  std::vector<ExpertKind> pool{ExpertKind::kST, ExpertKind::kTT, ExpertKind::kTS, ExpertKind::kSS};
  ssm::ScanMode scan_mode = ssm::ScanMode::kBidirectional;
  bool flip_back = true;
  ssm::SsmSizes ssm;
  std::size_t codec_hidden = 64;
  double dropout = 0.1;
  /// Stack persons along the pose axis instead of the batch axis.
  bool scene_concat = false;
  /// Positions are multiplied by this on entry and divided on exit.
  double unit_scale = 1e-3;
  /// Subtract each person's observed centroid (per coordinate) on entry
  /// and add it back on exit.
  bool center_input = true;

  std::size_t pose_dim() const { return joints * 3; }
  /// Pose axis width seen by the codec and the blocks.
  std::size_t feature_dim() const { return scene_concat ? persons * pose_dim() : pose_dim(); }
  ssm::ScanOptions scan_options() const { return {scan_mode, flip_back}; }
  void validate() const;
};

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double lambda_hist = 0.1;
};

struct TrainerOptions {
  std::size_t epochs = 200;
  std::size_t batch_size = 96;
  double base_lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm cap; 0 disables clipping.
  double grad_clip = 0.0;
  /// Write a checkpoint every n epochs (0: final only).
  std::size_t checkpoint_every = 0;
  /// "float64" or "float32".
  std::string precision = "float32";
};

struct DataOptions {
  std::string train;
  std::string val;
};

struct EvalOptions {
  double fps = 25.0;
  std::vector<double> horizons{0.2, 0.6, 1.0};
  std::size_t root_joint = 0;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  TrainerOptions trainer;
  DataOptions data;
  EvalOptions eval;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
};

std::string_view to_string(ssm::ScanMode mode);

Json to_json(const ModelConfig& c);
Json to_json(const RunConfig& c);
ModelConfig model_config_from_json(const Json& j);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

/// Dotted path of the first field where two JSON documents differ, or empty.
std::string first_difference(const Json& a, const Json& b, const std::string& path = "");

/// Reads a JSON document, mapping parse failures to ConfigError.
Json read_json_file(const std::string& path);

}  // namespace stmoe
