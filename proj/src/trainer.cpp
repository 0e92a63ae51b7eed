#include "stmoe/trainer.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "stmoe/ops.hpp"
#include "stmoe/tape.hpp"

namespace stmoe {

double lr_at_epoch(double base, std::size_t epoch) {
  if (!(base > 0.0)) throw std::invalid_argument("lr_at_epoch: base rate must be positive");
  // 0.1^(epoch/50) rather than repeated multiplication, so epoch 50 is exactly a decade.
  return base * std::pow(0.1, static_cast<double>(epoch) / 50.0);
}

OptimState make_optim_state(const NamedTensors& params, const TrainerOptions& opts) {
  OptimState s;
  s.beta1 = opts.beta1;
  s.beta2 = opts.beta2;
  s.eps = opts.eps;
  s.base_lr = opts.base_lr;
  for (const auto& [name, t] : params) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_step(OptimState& state, const NamedTensors& params, std::span<const std::vector<double>> grads, double lr) {
  if (params.size() != state.m.size() || grads.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and moment lists differ in length");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads[i];
    if (!g.empty() && g.size() != params[i].second.numel()) {
      throw ShapeError("adam_step: gradient for " + params[i].first + " has the wrong size");
    }
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        throw std::domain_error("adam_step: non-finite gradient in parameter " + params[i].first + " at index " +
                                std::to_string(k));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const bool round = precision() == Precision::kFloat32;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
      if (round) w[k] = static_cast<double>(static_cast<float>(w[k]));
    }
  }
}

void adam_step(OptimState& state, const NamedTensors& params, double lr) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& [name, t] : params) grads.emplace_back(t.grad().begin(), t.grad().end());
  adam_step(state, params, grads, lr);
}

TrainState make_train_state(const StMoeModel& model, const TrainerOptions& opts, std::uint64_t seed) {
  return {make_optim_state(model_parameters(model), opts), 0, Rng(seed)};
}

Json EpochLog::to_json() const {
  Json j{{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}};
  j["val_jpe"] = val_jpe ? Json(*val_jpe) : Json(nullptr);
  j["val_ape"] = val_ape ? Json(*val_ape) : Json(nullptr);
  return j;
}

namespace {

void clip_gradients(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double f = max_norm / norm;
  for (auto& g : grads)
    for (double& x : g) x *= f;
}

Precision parse_precision(const std::string& p) {
  return p == "float32" ? Precision::kFloat32 : Precision::kFloat64;
}

}  // namespace

std::vector<EpochLog> fit(StMoeModel& model, TrainState& state, const std::vector<MotionSequence>& train,
                          const std::vector<MotionSequence>& val, const FitOptions& opts) {
  if (opts.epochs > 0 && train.empty()) throw std::invalid_argument("fit: training set is empty");
  PrecisionScope precision_scope(parse_precision(opts.trainer.precision));
  const ModelConfig& c = model.config;
  const NamedTensors params = model_parameters(model);
  std::vector<EpochLog> log;
  for (std::size_t run = 0; run < opts.epochs; ++run) {
    const std::size_t epoch = state.epoch;
    const double lr = lr_at_epoch(state.optim.base_lr, epoch);
    BatchIterator it(train, opts.trainer.batch_size, c.history, c.total, state.rng.next_u64());
    double loss_sum = 0.0;
    std::size_t rows = 0;
    std::size_t batch_index = 0;
    while (auto batch = it.next()) {
      Rng dropout(state.rng.next_u64());
      for (const auto& [name, t] : params) Tensor(t).zero_grad();
      double value = 0.0;
      {
        Tape tape;
        TapeScope scope(tape);
        const ForwardResult out = model_forward(model, batch->history, ForwardMode{&dropout});
        const Tensor loss =
            total_loss(to_joint_layout(out.pred), to_joint_layout(batch->target), c.history, opts.loss);
        value = loss.item();
        if (!std::isfinite(value)) {
          throw std::runtime_error("fit: non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                   std::to_string(batch_index));
        }
        backward(loss);
      }
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      for (const auto& [name, t] : params) grads.emplace_back(t.grad().begin(), t.grad().end());
      if (opts.trainer.grad_clip > 0.0) clip_gradients(grads, opts.trainer.grad_clip);
      adam_step(state.optim, params, grads, lr);
      const std::size_t n = batch->history.dim(0);
      loss_sum += value * static_cast<double>(n);
      rows += n;
      ++batch_index;
    }
    for (const auto& [name, t] : params) Tensor(t).zero_grad();
    state.epoch = epoch + 1;

    EpochLog entry;
    entry.epoch = state.epoch;
    entry.lr = lr;
    entry.train_loss = loss_sum / static_cast<double>(rows);
    if (!val.empty()) {
      const MetricReport r = evaluate(model, val, opts.trainer.batch_size, opts.eval);
      entry.val_jpe = r.jpe_avg;
      entry.val_ape = r.ape_avg;
    }
    log.push_back(entry);
    if (opts.on_epoch_end) opts.on_epoch_end(entry, state);
  }
  return log;
}

MetricReport evaluate(const StMoeModel& model, const std::vector<MotionSequence>& data, std::size_t batch_size,
                      const EvalOptions& eval) {
  const ModelConfig& c = model.config;
  MetricAccumulator acc(c.history, c.total, eval.fps, eval.horizons, eval.root_joint);
  BatchIterator it(data, batch_size, c.history, c.total, std::nullopt);
  while (auto batch = it.next()) {
    const ForwardResult out = model_forward(model, batch->history);
    acc.add(to_joint_layout(out.pred), to_joint_layout(batch->target));
  }
  return acc.report();
}

double evaluate_loss(const StMoeModel& model, const std::vector<MotionSequence>& data, std::size_t batch_size,
                     const LossWeights& w) {
  const ModelConfig& c = model.config;
  BatchIterator it(data, batch_size, c.history, c.total, std::nullopt);
  double sum = 0.0;
  std::size_t rows = 0;
  while (auto batch = it.next()) {
    const ForwardResult out = model_forward(model, batch->history);
    const double v = total_loss(to_joint_layout(out.pred), to_joint_layout(batch->target), c.history, w).item();
    sum += v * static_cast<double>(batch->history.dim(0));
    rows += batch->history.dim(0);
  }
  return rows == 0 ? 0.0 : sum / static_cast<double>(rows);
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = kFnvOffset;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= kFnvPrime;
  }
  return h;
}

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { buf_.append(s); }
  void text(std::string_view s) {
    u64(s.size());
    bytes(s);
  }
  std::string& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text() { return std::string(bytes(static_cast<std::size_t>(u64()))); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) {
      throw std::runtime_error("checkpoint is truncated: needed " + std::to_string(n) + " more bytes at offset " +
                               std::to_string(pos_) + ", " + std::to_string(remaining()) + " left");
    }
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const StMoeModel& model, const TrainState& state) {
  const NamedTensors params = model_parameters(model);
  if (state.optim.m.size() != params.size()) throw std::invalid_argument("save_checkpoint: optimizer state does not match model");
  Writer w;
  w.bytes("STMC");
  w.u32(kCheckpointVersion);
  w.text(to_json(model.config).dump());
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  w.u64(state.optim.step);
  w.f64(state.optim.beta1);
  w.f64(state.optim.beta2);
  w.f64(state.optim.eps);
  w.f64(state.optim.base_lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double v : state.optim.m[i]) w.f64(v);
    for (double v : state.optim.v[i]) w.f64(v);
  }
  w.u64(state.epoch);
  w.text(state.rng.serialize());
  w.u64(fnv1a(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "STMC") != 0) throw std::runtime_error("not a checkpoint (bad magic)");
  {
    Reader tail(std::string_view(bytes).substr(bytes.size() - 8));
    if (tail.u64() != fnv1a(std::string_view(bytes).substr(0, bytes.size() - 8))) {
      throw std::runtime_error("checkpoint payload is corrupt (checksum mismatch)");
    }
  }
  Reader r(std::string_view(bytes).substr(0, bytes.size() - 8));
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.config = model_config_from_json(Json::parse(r.text()));
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.bytes(r.u32()));
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = r.f64();
    c.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values), true));
  }
  c.optim.step = r.u64();
  c.optim.beta1 = r.f64();
  c.optim.beta2 = r.f64();
  c.optim.eps = r.f64();
  c.optim.base_lr = r.f64();
  for (const auto& [name, t] : c.params) {
    std::vector<double> m(t.numel()), v(t.numel());
    for (auto& x : m) x = r.f64();
    for (auto& x : v) x = r.f64();
    c.optim.m.push_back(std::move(m));
    c.optim.v.push_back(std::move(v));
  }
  c.epoch = static_cast<std::size_t>(r.u64());
  c.rng_state = r.text();
  if (r.remaining() != 0) throw std::runtime_error("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const StMoeModel& model, const TrainState& state) {
  const std::string bytes = serialize_checkpoint(model, state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_checkpoint(bytes);
}

void restore_checkpoint(const Checkpoint& ckpt, StMoeModel& model, TrainState& state) {
  const std::string diff = first_difference(to_json(model.config), to_json(ckpt.config));
  if (!diff.empty()) throw ConfigError("checkpoint config differs from the model config at field 'model." + diff + "'");
  const NamedTensors params = model_parameters(model);
  if (params.size() != ckpt.params.size()) throw std::runtime_error("checkpoint holds a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    const auto& [cname, ct] = ckpt.params[i];
    if (name != cname || t.shape() != ct.shape()) {
      throw std::runtime_error("checkpoint tensor '" + cname + "' does not match model tensor '" + name + "'");
    }
    Tensor dst = t;
    std::copy(ct.data().begin(), ct.data().end(), dst.mutable_data().begin());
  }
  state.optim = ckpt.optim;
  state.epoch = ckpt.epoch;
  state.rng.deserialize(ckpt.rng_state);
}

std::pair<StMoeModel, TrainState> load_checkpoint(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  StMoeModel model = make_model(ckpt.config, 0);
  TrainState state{make_optim_state(model_parameters(model), TrainerOptions{}), 0, Rng(0)};
  restore_checkpoint(ckpt, model, state);
  return {std::move(model), std::move(state)};
}

}  // namespace stmoe
