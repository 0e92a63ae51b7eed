#include "stmoe/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "stmoe/bench.hpp"
#include "stmoe/config.hpp"
#include "stmoe/data.hpp"
#include "stmoe/model.hpp"
#include "stmoe/objective.hpp"
#include "stmoe/ops.hpp"
#include "stmoe/trainer.hpp"

namespace stmoe {

namespace {

namespace fs = std::filesystem;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << text;
}

std::vector<MotionSequence> load_data(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + ": no dataset path given");
  if (!fs::exists(path)) throw ConfigError(what + ": dataset '" + path + "' does not exist");
  return read_dataset(path);
}

void check_frames(const std::vector<MotionSequence>& data, const ModelConfig& c, const std::string& path) {
  if (!data.empty() && data.front().frames < c.total) {
    throw ConfigError("dataset '" + path + "' has " + std::to_string(data.front().frames) +
                      " frames per sequence, the model needs " + std::to_string(c.total));
  }
  if (!data.empty() && data.front().joints != c.joints) {
    throw ConfigError("dataset '" + path + "' has " + std::to_string(data.front().joints) +
                      " joints, the model expects " + std::to_string(c.joints));
  }
  if (!data.empty() && c.scene_concat && data.front().persons != c.persons) {
    throw ConfigError("dataset '" + path + "' has " + std::to_string(data.front().persons) +
                      " persons, scene_concat expects " + std::to_string(c.persons));
  }
}

// Horizon problems are configuration errors, not runtime failures.
void check_horizons(const EvalOptions& e, const ModelConfig& c) {
  try {
    for (double h : e.horizons) horizon_frame(h, e.fps, c.total - c.history);
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("eval.horizons: ") + ex.what());
  }
  if (e.root_joint >= c.joints) throw ConfigError("eval.root_joint: must be below model.joints");
}

void echo_config(const std::string& out_path, const Json& resolved) {
  write_text(out_path + ".resolved.json", resolved.dump(2) + "\n");
}

std::string schema_text() {
  std::ostringstream os;
  os << "\nRun configuration (JSON; unknown keys are rejected, missing keys take these defaults):\n"
     << to_json(RunConfig{}).dump(2) << "\n"
     << "model.pool entries: ST, TT, TS, SS. model.scan_mode: bidirectional, forward, backward.\n"
     << "model.dt_rank 0 selects ceil(channels / 16). trainer.precision: float32 or float64.\n"
     << "trainer.grad_clip 0 disables clipping. trainer.checkpoint_every 0 writes only the final checkpoint.\n"
     << "\nSynthetic data spec (synth --spec):\n"
     << to_json(SynthSpec{}).dump(2) << "\n"
     << "\nExit codes: 0 success, 2 usage or configuration error, 1 runtime failure.\n";
  return os.str();
}

struct EvalFlags {
  std::string config;
  std::optional<double> fps;
  std::vector<double> horizons;
  std::optional<std::size_t> root_joint;
  std::size_t batch_size = 64;
};

EvalOptions resolve_eval(const EvalFlags& f) {
  EvalOptions e;
  if (!f.config.empty()) e = load_run_config(f.config).eval;
  if (f.fps) e.fps = *f.fps;
  if (!f.horizons.empty()) e.horizons = f.horizons;
  if (f.root_joint) e.root_joint = *f.root_joint;
  if (!(e.fps > 0)) throw ConfigError("eval.fps: must be positive");
  return e;
}

int cmd_synth(const std::string& spec_path, const std::string& out_path, std::optional<std::uint64_t> seed,
              std::ostream& out) {
  SynthSpec spec = synth_spec_from_json(read_json_file(spec_path));
  if (seed) spec.seed = *seed;
  const auto seqs = synth_generate(spec);
  write_dataset(seqs, out_path);
  echo_config(out_path, Json{{"command", "synth"}, {"synth", to_json(spec)}});
  out << "sequences " << seqs.size() << " bytes " << fs::file_size(out_path) << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& resume,
              std::optional<std::size_t> epochs_override, std::ostream& out) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  if (epochs_override) cfg.trainer.epochs = *epochs_override;
  check_horizons(cfg.eval, cfg.model);
  const auto train = load_data(cfg.data.train, "data.train");
  if (train.empty()) throw ConfigError("data.train: dataset '" + cfg.data.train + "' holds no sequences");
  check_frames(train, cfg.model, cfg.data.train);
  std::vector<MotionSequence> val;
  if (!cfg.data.val.empty()) {
    val = load_data(cfg.data.val, "data.val");
    check_frames(val, cfg.model, cfg.data.val);
  }
  fs::create_directories(cfg.output_dir);
  write_text((fs::path(cfg.output_dir) / "resolved_config.json").string(), to_json(cfg).dump(2) + "\n");

  StMoeModel model = make_model(cfg.model, cfg.seed);
  TrainState state = make_train_state(model, cfg.trainer, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  if (!resume.empty()) restore_checkpoint(read_checkpoint(resume), model, state);
  const std::size_t remaining = cfg.trainer.epochs > state.epoch ? cfg.trainer.epochs - state.epoch : 0;

  const std::string log_path = (fs::path(cfg.output_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write '" + log_path + "'");
  FitOptions fo;
  fo.trainer = cfg.trainer;
  fo.loss = cfg.loss;
  fo.eval = cfg.eval;
  fo.epochs = remaining;
  fo.on_epoch_end = [&](const EpochLog& e, const TrainState& s) {
    log << e.to_json().dump() << "\n" << std::flush;
    out << e.to_json().dump() << "\n";
    if (cfg.trainer.checkpoint_every > 0 && s.epoch % cfg.trainer.checkpoint_every == 0) {
      save_checkpoint((fs::path(cfg.output_dir) / ("epoch_" + std::to_string(s.epoch) + ".stmc")).string(), model, s);
    }
  };
  fit(model, state, train, val, fo);
  const std::string final_path = (fs::path(cfg.output_dir) / "final.stmc").string();
  save_checkpoint(final_path, model, state);
  out << "checkpoint " << final_path << "\n";
  return 0;
}

std::pair<StMoeModel, std::vector<MotionSequence>> load_model_and_data(const std::string& ckpt,
                                                                       const std::string& data_path) {
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint '" + ckpt + "' does not exist");
  auto [model, state] = load_checkpoint(ckpt);
  auto data = load_data(data_path, "--data");
  check_frames(data, model.config, data_path);
  return {std::move(model), std::move(data)};
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const EvalFlags& flags, const std::string& out_path,
             std::ostream& out) {
  const EvalOptions eval = resolve_eval(flags);
  auto [model, data] = load_model_and_data(ckpt, data_path);
  check_horizons(eval, model.config);
  const MetricReport r = evaluate(model, data, flags.batch_size, eval);
  const std::string table = r.to_csv();
  out << table;
  if (!out_path.empty()) {
    write_text(out_path, table);
    echo_config(out_path, Json{{"command", "eval"},
                               {"checkpoint", ckpt},
                               {"data", data_path},
                               {"model", to_json(model.config)},
                               {"eval", {{"fps", eval.fps}, {"horizons", eval.horizons}, {"root_joint", eval.root_joint}}},
                               {"batch_size", flags.batch_size}});
  }
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& data_path, const std::string& out_path,
                std::size_t batch_size, std::ostream& out) {
  auto [model, data] = load_model_and_data(ckpt, data_path);
  const ModelConfig& c = model.config;
  std::vector<MotionSequence> preds(data.size());
  BatchIterator it(data, batch_size, c.history, c.total, std::nullopt);
  while (auto batch = it.next()) {
    const Tensor pred = model_forward(model, batch->history).pred;  // (B*M, D, T)
    const auto v = pred.data();
    const std::size_t m = batch->persons, d = c.pose_dim(), t = c.total;
    for (std::size_t b = 0; b < batch->sequence_ids.size(); ++b) {
      auto& seq = preds[batch->sequence_ids[b]];
      seq.persons = m;
      seq.frames = t;
      seq.joints = c.joints;
      seq.fps = data[batch->sequence_ids[b]].fps;
      seq.positions.resize(m * t * d);
      for (std::size_t p = 0; p < m; ++p)
        for (std::size_t f = 0; f < t; ++f)
          for (std::size_t a = 0; a < d; ++a)
            seq.positions[(p * t + f) * d + a] = static_cast<float>(v[((b * m + p) * d + a) * t + f]);
    }
  }
  write_dataset(preds, out_path);
  echo_config(out_path, Json{{"command", "predict"}, {"checkpoint", ckpt}, {"data", data_path},
                             {"model", to_json(c)}, {"batch_size", batch_size}});
  out << "sequences " << preds.size() << " frames " << c.total << "\n";
  return 0;
}

int cmd_inspect_routing(const std::string& ckpt, const std::string& data_path, const std::string& out_path,
                        std::size_t batch_size, std::ostream& out) {
  auto [model, data] = load_model_and_data(ckpt, data_path);
  const ModelConfig& c = model.config;
  std::ofstream rec(out_path, std::ios::trunc);
  if (!rec) throw std::runtime_error("cannot write '" + out_path + "'");
  std::vector<std::vector<double>> mass(c.moe_layers, std::vector<double>(c.n_experts, 0.0));
  std::size_t samples = 0;
  BatchIterator it(data, batch_size, c.history, c.total, std::nullopt);
  while (auto batch = it.next()) {
    const ForwardResult r = model_forward(model, batch->history);
    for (std::size_t l = 0; l < r.decisions.size(); ++l) {
      const auto& d = r.decisions[l];
      rec << d.to_json_lines(l, samples);
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t e = 0; e < d.n_experts; ++e) mass[l][e] += d.weight(b, e);
    }
    samples += r.decisions.front().batch;
  }
  out << "samples " << samples << " layers " << c.moe_layers << "\n";
  out << "layer";
  for (std::size_t e = 0; e < c.n_experts; ++e) out << ",e" << e << ":" << to_string(c.pool[e]);
  out << "\n";
  double total = 0.0;
  for (std::size_t l = 0; l < mass.size(); ++l) {
    out << l;
    for (double m : mass[l]) {
      out << "," << m;
      total += m;
    }
    out << "\n";
  }
  out << "total_mass " << total << "\n";
  echo_config(out_path, Json{{"command", "inspect-routing"}, {"checkpoint", ckpt}, {"data", data_path},
                             {"model", to_json(c)}, {"batch_size", batch_size}});
  return 0;
}

int cmd_export_features(const std::string& ckpt, const std::string& data_path, const std::string& out_path,
                        std::size_t layer, std::size_t max_samples, std::uint64_t seed, std::ostream& out) {
  auto [model, data] = load_model_and_data(ckpt, data_path);
  const ModelConfig& c = model.config;
  if (layer >= c.moe_layers) throw ConfigError("--layer: model has " + std::to_string(c.moe_layers) + " MoE layers");
  // Layer input features for every sample, in dataset order.
  std::vector<Tensor> inputs;
  {
    BatchIterator it(data, 64, c.history, c.total, std::nullopt);
    while (auto batch = it.next()) {
      Tensor e = model_features(model, batch->history);
      for (std::size_t l = 0; l < layer; ++l) {
        e = moe_layer_forward(model.layers[l].router, model.layers[l].blocks, c.pool, e, c.scan_options()).output;
      }
      inputs.push_back(e);
    }
  }
  const std::size_t d = c.feature_dim(), t = c.total;
  std::vector<std::pair<std::size_t, std::size_t>> rows;  // (chunk, row)
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t r = 0; r < inputs[i].dim(0); ++r) rows.emplace_back(i, r);
  std::vector<std::size_t> pick(rows.size());
  for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
  if (max_samples > 0 && max_samples < pick.size()) {
    Rng rng(seed);
    for (std::size_t i = pick.size(); i > 1; --i) std::swap(pick[i - 1], pick[rng.index(i)]);
    pick.resize(max_samples);
    std::sort(pick.begin(), pick.end());
  }
  const std::uint32_t width = static_cast<std::uint32_t>(d + t);
  std::string buf = "STMF";
  auto put = [&buf](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
  };
  put(1);
  put(static_cast<std::uint32_t>(pick.size() * c.pool.size()));
  put(width);
  for (std::size_t s = 0; s < pick.size(); ++s) {
    const auto [chunk, row] = rows[pick[s]];
    const Tensor x = ops::slice(inputs[chunk], 0, row, row + 1);
    for (std::size_t e = 0; e < c.pool.size(); ++e) {
      const Tensor y = expert_forward(c.pool[e], model.layers[layer].blocks, x, c.scan_options());
      put(static_cast<std::uint32_t>(c.pool[e]));
      put(static_cast<std::uint32_t>(pick[s]));
      const Tensor over_t = ops::reduce_mean(y, 2);  // (1, D)
      const Tensor over_d = ops::reduce_mean(y, 1);  // (1, T)
      for (double v : over_t.data()) put(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      for (double v : over_d.data()) put(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  write_text(out_path, buf);
  echo_config(out_path, Json{{"command", "export-features"}, {"checkpoint", ckpt}, {"data", data_path},
                             {"model", to_json(c)}, {"layer", layer}, {"samples", max_samples}, {"seed", seed}});
  out << "rows " << pick.size() * c.pool.size() << " width " << width << "\n";
  return 0;
}

int cmd_bench(const std::string& config_path, BenchOptions opts, const std::string& out_path, std::ostream& out) {
  if (!config_path.empty()) opts.ssm = load_run_config(config_path).model.ssm;
  const BenchReport r = run_bench(opts);
  const std::string text = r.to_text();
  out << text;
  if (!out_path.empty()) {
    write_text(out_path, text);
    Json lengths = opts.lengths;
    echo_config(out_path, Json{{"command", "bench"}, {"lengths", lengths}, {"channels", opts.channels},
                               {"batch", opts.batch}, {"repeats", opts.repeats}, {"seed", opts.seed}});
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatiotemporal mixture-of-experts motion prediction"};
  app.require_subcommand(1);
  app.footer(schema_text());

  std::optional<std::uint64_t> seed;
  std::string spec, out_path, config, ckpt, data, resume;
  std::optional<std::size_t> epochs;
  std::size_t batch_size = 64, layer = 0, samples = 0;
  EvalFlags eval_flags;
  BenchOptions bench;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic MMP1 dataset");
  synth->add_option("--spec", spec, "Generator spec (JSON)")->required();
  synth->add_option("--out", out_path, "Output MMP1 file")->required();
  synth->add_option("--seed", seed, "Override the generator seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Run configuration (JSON)")->required();
  train->add_option("--seed", seed, "Override the config seed");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--epochs", epochs, "Override trainer.epochs (total, including resumed epochs)");

  auto add_model_io = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", ckpt, "STMC checkpoint")->required();
    cmd->add_option("--data", data, "MMP1 dataset")->required();
    cmd->add_option("--seed", seed, "Seed (unused by deterministic evaluation)");
  };

  auto* eval = app.add_subcommand("eval", "JPE/APE table at the configured horizons");
  add_model_io(eval);
  eval->add_option("--out", out_path, "Write the CSV table here");
  eval->add_option("--config", eval_flags.config, "Take eval options from a run configuration");
  eval->add_option("--fps", eval_flags.fps, "Frames per second");
  eval->add_option("--horizons", eval_flags.horizons, "Horizons in seconds");
  eval->add_option("--root-joint", eval_flags.root_joint, "Root joint index for APE");
  eval->add_option("--batch-size", batch_size, "Evaluation batch size");

  auto* predict = app.add_subcommand("predict", "Write full-length predictions as MMP1");
  add_model_io(predict);
  predict->add_option("--out", out_path, "Output MMP1 file")->required();
  predict->add_option("--batch-size", batch_size, "Batch size");

  auto* inspect = app.add_subcommand("inspect-routing", "Dump gate decisions as JSON lines");
  add_model_io(inspect);
  inspect->add_option("--out", out_path, "Output JSON-lines file")->required();
  inspect->add_option("--batch-size", batch_size, "Batch size");

  auto* features = app.add_subcommand("export-features", "Export pooled per-expert outputs");
  add_model_io(features);
  features->add_option("--out", out_path, "Output STMF file")->required();
  features->add_option("--layer", layer, "MoE layer whose experts are exported");
  features->add_option("--samples", samples, "Random subset size (0: all samples)");

  auto* benchcmd = app.add_subcommand("bench", "Time the bidirectional block against sequence length");
  benchcmd->add_option("--config", config, "Take SSM sizes from a run configuration");
  benchcmd->add_option("--lengths", bench.lengths, "Sequence lengths");
  benchcmd->add_option("--channels", bench.channels, "Channel width");
  benchcmd->add_option("--batch", bench.batch, "Batch size");
  benchcmd->add_option("--repeats", bench.repeats, "Timed repeats per length");
  benchcmd->add_option("--out", out_path, "Write the report here");
  benchcmd->add_option("--seed", seed, "Parameter seed");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*synth) return cmd_synth(spec, out_path, seed, out);
    if (*train) return cmd_train(config, seed, resume, epochs, out);
    eval_flags.batch_size = batch_size;
    if (*eval) return cmd_eval(ckpt, data, eval_flags, out_path, out);
    if (*predict) return cmd_predict(ckpt, data, out_path, batch_size, out);
    if (*inspect) return cmd_inspect_routing(ckpt, data, out_path, batch_size, out);
    if (*features) return cmd_export_features(ckpt, data, out_path, layer, samples, seed.value_or(0), out);
    if (*benchcmd) {
      bench.seed = seed.value_or(0);
      return cmd_bench(config, bench, out_path, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace stmoe
