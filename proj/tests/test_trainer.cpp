#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "stmoe/trainer.hpp"
#include "test_util.hpp"

using namespace stmoe;
using namespace stmoe::testing;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.joints = 3;
  c.history = 5;
  c.total = 8;
  c.persons = 2;
  c.codec_hidden = 8;
  c.ssm = {2, 4, 3, 0};
  return c;
}

std::vector<MotionSequence> tiny_data(std::size_t n, std::uint64_t seed) {
  SynthSpec s;
  s.sequences = n;
  s.frames = 8;
  s.joints = 3;
  s.seed = seed;
  return synth_generate(s);
}

FitOptions fit_options(std::size_t epochs) {
  FitOptions o;
  o.trainer.batch_size = 2;
  o.trainer.precision = "float64";
  o.eval.horizons = {0.04, 0.12};
  o.epochs = epochs;
  return o;
}

std::vector<std::vector<double>> snapshot(const StMoeModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : model_parameters(m)) out.push_back(values(t));
  return out;
}

}  // namespace

TEST(Schedule, PaperRates) {
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.01, 0), 0.01);
  EXPECT_NEAR(lr_at_epoch(0.01, 50), 0.001, 1e-15);
  EXPECT_NEAR(lr_at_epoch(0.01, 100), 1e-4, 1e-16);
  for (std::size_t e = 0; e < 300; ++e) {
    EXPECT_GT(lr_at_epoch(0.01, e + 1), 0.0);
    EXPECT_LT(lr_at_epoch(0.01, e + 1), lr_at_epoch(0.01, e));
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  NamedTensors params{{"w", Tensor({1}, {0.5}, true)}};
  OptimState st = make_optim_state(params, {});
  const std::vector<std::vector<double>> g{{1.0}};
  adam_step(st, params, g, 0.01);
  EXPECT_NEAR(params[0].second.data()[0], 0.5 - 0.01 / (1.0 + 1e-8), 1e-16);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MatchesHandRecurrence) {
  Rng rng(1);
  NamedTensors params{{"a", rand_uniform({3}, -1, 1, rng, true)}, {"b", rand_uniform({2}, -1, 1, rng, true)}};
  OptimState st = make_optim_state(params, {});
  std::vector<double> w(params[0].second.data().begin(), params[0].second.data().end());
  std::vector<double> m(3, 0), v(3, 0);
  for (int step = 1; step <= 10; ++step) {
    const std::vector<std::vector<double>> g{values(rand_uniform({3}, -2, 2, rng)), {}};
    const double lr = 0.01 * step;
    adam_step(st, params, g, lr);
    for (std::size_t k = 0; k < 3; ++k) {
      m[k] = 0.9 * m[k] + 0.1 * g[0][k];
      v[k] = 0.999 * v[k] + 0.001 * g[0][k] * g[0][k];
      const double mh = m[k] / (1 - std::pow(0.9, step)), vh = v[k] / (1 - std::pow(0.999, step));
      w[k] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(params[0].second.data()[k], w[k], 1e-14);
}

TEST(Adam, ZeroGradientLeavesParametersAndIndependence) {
  NamedTensors params{{"a", Tensor({2}, {1, 2}, true)}, {"b", Tensor({1}, {3}, true)}};
  OptimState st = make_optim_state(params, {});
  for (int i = 0; i < 5; ++i) adam_step(st, params, std::vector<std::vector<double>>{{0, 0}, {1}}, 0.1);
  EXPECT_EQ(values(params[0].second), (std::vector<double>{1, 2}));
  EXPECT_NE(params[1].second.data()[0], 3.0);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  NamedTensors params{{"layer.w", Tensor({2}, {1, 2}, true)}};
  OptimState st = make_optim_state(params, {});
  try {
    adam_step(st, params, std::vector<std::vector<double>>{{0, NAN}}, 0.1);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("layer.w"), std::string::npos);
  }
}

TEST(Fit, ZeroEpochsChangesNothing) {
  StMoeModel model = make_model(tiny_model(), 1);
  TrainState st = make_train_state(model, {}, 2);
  const auto before = snapshot(model);
  EXPECT_TRUE(fit(model, st, tiny_data(4, 3), {}, fit_options(0)).empty());
  EXPECT_EQ(snapshot(model), before);
}

TEST(Fit, DeterministicAndLossDecreases) {
  const auto data = tiny_data(6, 4);
  auto run = [&] {
    StMoeModel model = make_model(tiny_model(), 5);
    TrainState st = make_train_state(model, {}, 6);
    return fit(model, st, data, data, fit_options(4));
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].train_loss, b[i].train_loss);
    EXPECT_EQ(*a[i].val_jpe, *b[i].val_jpe);
    EXPECT_EQ(a[i].epoch, i + 1);
  }
  EXPECT_LT(a.back().train_loss, a.front().train_loss);
}

TEST(Fit, ResumeEqualsUninterrupted) {
  const auto data = tiny_data(5, 7);
  StMoeModel full = make_model(tiny_model(), 8);
  TrainState full_st = make_train_state(full, {}, 9);
  fit(full, full_st, data, {}, fit_options(5));

  StMoeModel part = make_model(tiny_model(), 8);
  TrainState part_st = make_train_state(part, {}, 9);
  fit(part, part_st, data, {}, fit_options(3));
  const auto path = fs::temp_directory_path() / "stmoe_resume.stmc";
  save_checkpoint(path.string(), part, part_st);
  auto [resumed, resumed_st] = load_checkpoint(path.string());
  EXPECT_EQ(resumed_st.epoch, 3u);
  fit(resumed, resumed_st, data, {}, fit_options(2));
  EXPECT_EQ(snapshot(resumed), snapshot(full));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  StMoeModel model = make_model(tiny_model(), 10);
  TrainState st = make_train_state(model, {}, 11);
  fit(model, st, tiny_data(3, 12), {}, fit_options(1));
  const std::string bytes = serialize_checkpoint(model, st);
  const Checkpoint c = parse_checkpoint(bytes);
  StMoeModel other = make_model(tiny_model(), 99);
  TrainState other_st = make_train_state(other, {}, 98);
  restore_checkpoint(c, other, other_st);
  EXPECT_EQ(snapshot(other), snapshot(model));
  EXPECT_EQ(serialize_checkpoint(other, other_st), bytes);
}

TEST(Checkpoint, MismatchedConfigNamesField) {
  StMoeModel model = make_model(tiny_model(), 13);
  TrainState st = make_train_state(model, {}, 14);
  const Checkpoint c = parse_checkpoint(serialize_checkpoint(model, st));
  ModelConfig other_cfg = tiny_model();
  other_cfg.codec_hidden = 9;
  StMoeModel other = make_model(other_cfg, 13);
  TrainState other_st = make_train_state(other, {}, 14);
  try {
    restore_checkpoint(c, other, other_st);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.codec_hidden"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, CorruptionAndVersionDetected) {
  StMoeModel model = make_model(tiny_model(), 15);
  TrainState st = make_train_state(model, {}, 16);
  const std::string bytes = serialize_checkpoint(model, st);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(parse_checkpoint(flipped), std::runtime_error);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(parse_checkpoint(version), std::runtime_error);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 40)), std::runtime_error);
  EXPECT_THROW(parse_checkpoint("XXXX" + bytes.substr(4)), std::runtime_error);
}

TEST(Evaluate, ReportsConfiguredHorizons) {
  const StMoeModel model = make_model(tiny_model(), 17);
  EvalOptions ev;
  ev.horizons = {0.04, 0.12};
  const auto r = evaluate(model, tiny_data(3, 18), 2, ev);
  ASSERT_EQ(r.jpe_at.size(), 2u);
  EXPECT_GT(r.jpe_avg, 0.0);
  EXPECT_GE(r.jpe_avg, r.ape_avg * 0.0);
  EXPECT_GT(evaluate_loss(model, tiny_data(3, 18), 2, {}), 0.0);
}
