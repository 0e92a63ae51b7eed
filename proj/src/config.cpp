#include "stmoe/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace stmoe {

ObjectReader::ObjectReader(const Json& object, std::string path) : object_(object), path_(std::move(path)) {
  if (!object_.is_object()) throw ConfigError((path_.empty() ? std::string("config") : path_) + ": expected a JSON object");
}

bool ObjectReader::has(const std::string& key) const { return object_.contains(key); }

const Json* ObjectReader::get(const std::string& key) {
  seen_.insert(key);
  auto it = object_.find(key);
  return it == object_.end() ? nullptr : &*it;
}

void ObjectReader::read(const std::string& key, std::size_t& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
    throw ConfigError(qualify(key) + ": expected a non-negative integer");
  }
  out = v->get<std::size_t>();
}

void ObjectReader::read(const std::string& key, double& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_number()) throw ConfigError(qualify(key) + ": expected a number");
  out = v->get<double>();
}

void ObjectReader::read(const std::string& key, bool& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_boolean()) throw ConfigError(qualify(key) + ": expected true or false");
  out = v->get<bool>();
}

void ObjectReader::read(const std::string& key, std::string& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_string()) throw ConfigError(qualify(key) + ": expected a string");
  out = v->get<std::string>();
}

void ObjectReader::read(const std::string& key, std::vector<double>& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_array()) throw ConfigError(qualify(key) + ": expected an array of numbers");
  out.clear();
  for (const auto& e : *v) {
    if (!e.is_number()) throw ConfigError(qualify(key) + ": expected an array of numbers");
    out.push_back(e.get<double>());
  }
}

void ObjectReader::read(const std::string& key, std::vector<std::string>& out) {
  const Json* v = get(key);
  if (!v) return;
  if (!v->is_array()) throw ConfigError(qualify(key) + ": expected an array of strings");
  out.clear();
  for (const auto& e : *v) {
    if (!e.is_string()) throw ConfigError(qualify(key) + ": expected an array of strings");
    out.push_back(e.get<std::string>());
  }
}

const Json& ObjectReader::child(const std::string& key) {
  static const Json empty = Json::object();
  const Json* v = get(key);
  return v ? *v : empty;
}

void ObjectReader::finish() const {
  for (const auto& [key, value] : object_.items()) {
    if (!seen_.count(key)) throw ConfigError("unknown config key '" + qualify(key) + "'");
  }
}

std::string_view to_string(ssm::ScanMode mode) {
  switch (mode) {
    case ssm::ScanMode::kBidirectional: return "bidirectional";
    case ssm::ScanMode::kForward: return "forward";
    case ssm::ScanMode::kBackward: return "backward";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model." + msg); };
  if (joints == 0) fail("joints: must be positive");
  if (history == 0 || history >= total) fail("history: need 0 < history < total");
  if (moe_layers < 1) fail("moe_layers: must be at least 1");
  if (pool.empty()) fail("pool: must not be empty");
  if (n_experts != pool.size()) {
    fail("n_experts: " + std::to_string(n_experts) + " does not match pool size " + std::to_string(pool.size()));
  }
  if (active_k < 1 || active_k > n_experts) fail("active_k: need 1 <= active_k <= n_experts");
  if (ssm.expand == 0) fail("expand: must be positive");
  if (ssm.state_dim == 0) fail("state_dim: must be positive");
  if (ssm.conv_width == 0) fail("conv_width: must be positive");
  if (codec_hidden == 0) fail("codec_hidden: must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout: must lie in [0, 1)");
  if (scene_concat && persons == 0) fail("persons: must be positive with scene_concat");
  if (!(unit_scale > 0.0) || !std::isfinite(unit_scale)) fail("unit_scale: must be positive");
}

Json to_json(const ModelConfig& c) {
  Json pool = Json::array();
  for (auto k : c.pool) pool.push_back(std::string(to_string(k)));
  return Json{{"joints", c.joints},
              {"history", c.history},
              {"total", c.total},
              {"persons", c.persons},
              {"n_experts", c.n_experts},
              {"active_k", c.active_k},
              {"moe_layers", c.moe_layers},
              {"pool", pool},
              {"scan_mode", std::string(to_string(c.scan_mode))},
              {"flip_back", c.flip_back},
              {"expand", c.ssm.expand},
              {"state_dim", c.ssm.state_dim},
              {"conv_width", c.ssm.conv_width},
              {"dt_rank", c.ssm.dt_rank},
              {"codec_hidden", c.codec_hidden},
              {"dropout", c.dropout},
              {"scene_concat", c.scene_concat},
              {"unit_scale", c.unit_scale},
              {"center_input", c.center_input}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  ObjectReader r(j, "model");
  r.read("joints", c.joints);
  r.read("history", c.history);
  r.read("total", c.total);
  r.read("persons", c.persons);
  r.read("active_k", c.active_k);
  r.read("moe_layers", c.moe_layers);
  std::vector<std::string> pool;
  r.read("pool", pool);
  if (r.has("pool")) {
    c.pool.clear();
    for (const auto& name : pool) {
      auto kind = parse_expert_kind(name);
      if (!kind) throw ConfigError("model.pool: unknown expert kind '" + name + "' (expected ST, TT, TS or SS)");
      c.pool.push_back(*kind);
    }
  }
  c.n_experts = c.pool.size();
  r.read("n_experts", c.n_experts);
  std::string mode(to_string(c.scan_mode));
  r.read("scan_mode", mode);
  if (mode == "bidirectional") {
    c.scan_mode = ssm::ScanMode::kBidirectional;
  } else if (mode == "forward") {
    c.scan_mode = ssm::ScanMode::kForward;
  } else if (mode == "backward") {
    c.scan_mode = ssm::ScanMode::kBackward;
  } else {
    throw ConfigError("model.scan_mode: unknown mode '" + mode + "'");
  }
  r.read("flip_back", c.flip_back);
  r.read("expand", c.ssm.expand);
  r.read("state_dim", c.ssm.state_dim);
  r.read("conv_width", c.ssm.conv_width);
  r.read("dt_rank", c.ssm.dt_rank);
  r.read("codec_hidden", c.codec_hidden);
  r.read("dropout", c.dropout);
  r.read("scene_concat", c.scene_concat);
  r.read("unit_scale", c.unit_scale);
  r.read("center_input", c.center_input);
  r.finish();
  c.validate();
  return c;
}

Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"loss", {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"lambda_hist", c.loss.lambda_hist}}},
              {"trainer",
               {{"epochs", c.trainer.epochs},
                {"batch_size", c.trainer.batch_size},
                {"base_lr", c.trainer.base_lr},
                {"beta1", c.trainer.beta1},
                {"beta2", c.trainer.beta2},
                {"eps", c.trainer.eps},
                {"grad_clip", c.trainer.grad_clip},
                {"checkpoint_every", c.trainer.checkpoint_every},
                {"precision", c.trainer.precision}}},
              {"data", {{"train", c.data.train}, {"val", c.data.val}}},
              {"eval", {{"fps", c.eval.fps}, {"horizons", c.eval.horizons}, {"root_joint", c.eval.root_joint}}},
              {"output_dir", c.output_dir},
              {"seed", c.seed}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader top(j, "");
  c.model = model_config_from_json(top.child("model"));
  {
    ObjectReader r(top.child("loss"), "loss");
    r.read("alpha", c.loss.alpha);
    r.read("beta", c.loss.beta);
    r.read("lambda_hist", c.loss.lambda_hist);
    r.finish();
    if (c.loss.alpha < 0 || c.loss.beta < 0 || c.loss.lambda_hist < 0) {
      throw ConfigError("loss: weights must be non-negative");
    }
  }
  {
    ObjectReader r(top.child("trainer"), "trainer");
    auto& t = c.trainer;
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("base_lr", t.base_lr);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("eps", t.eps);
    r.read("grad_clip", t.grad_clip);
    r.read("checkpoint_every", t.checkpoint_every);
    r.read("precision", t.precision);
    r.finish();
    if (t.batch_size < 1) throw ConfigError("trainer.batch_size: must be at least 1");
    if (!(t.base_lr > 0)) throw ConfigError("trainer.base_lr: must be positive");
    if (t.precision != "float32" && t.precision != "float64") {
      throw ConfigError("trainer.precision: expected \"float32\" or \"float64\"");
    }
  }
  {
    ObjectReader r(top.child("data"), "data");
    r.read("train", c.data.train);
    r.read("val", c.data.val);
    r.finish();
  }
  {
    ObjectReader r(top.child("eval"), "eval");
    r.read("fps", c.eval.fps);
    r.read("horizons", c.eval.horizons);
    r.read("root_joint", c.eval.root_joint);
    r.finish();
    if (!(c.eval.fps > 0)) throw ConfigError("eval.fps: must be positive");
    if (c.eval.root_joint >= c.model.joints) throw ConfigError("eval.root_joint: must be below model.joints");
  }
  top.read("output_dir", c.output_dir);
  top.read("seed", c.seed);
  top.finish();
  return c;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

RunConfig load_run_config(const std::string& path) { return run_config_from_json(read_json_file(path)); }

std::string first_difference(const Json& a, const Json& b, const std::string& path) {
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      const std::string p = path.empty() ? key : path + "." + key;
      if (!b.contains(key)) return p;
      if (auto d = first_difference(value, b.at(key), p); !d.empty()) return d;
    }
    for (const auto& [key, value] : b.items()) {
      if (!a.contains(key)) return path.empty() ? key : path + "." + key;
    }
    return "";
  }
  return a == b ? "" : (path.empty() ? "<root>" : path);
}

}  // namespace stmoe
