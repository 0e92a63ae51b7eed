#include <gtest/gtest.h>

#include <cmath>

#include "stmoe/gradcheck.hpp"
#include "stmoe/pose_codec.hpp"
#include "stmoe/tape.hpp"
#include "test_util.hpp"

using namespace stmoe;
using namespace stmoe::testing;

namespace {

Tensor identity(std::size_t n) {
  Tensor t = Tensor::zeros({n, n}, true);
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

}  // namespace

TEST(Pad, RepeatsLastFrame) {
  Rng rng(1);
  const Tensor h = rand_uniform({2, 3, 50}, -1, 1, rng);
  const Tensor p = pad_sequence(h, 75);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 75}));
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t d = 0; d < 3; ++d) {
      std::size_t copies = 0;
      for (std::size_t f = 0; f < 75; ++f) {
        if (f < 50) {
          EXPECT_EQ(p.at({m, d, f}), h.at({m, d, f}));
        }
        if (f >= 49) copies += p.at({m, d, f}) == h.at({m, d, 49});
      }
      EXPECT_EQ(copies, 26u);
    }
}

TEST(Pad, FullLengthIsIdentity) {
  Rng rng(2);
  const Tensor h = rand_uniform({1, 4, 6}, -1, 1, rng);
  EXPECT_TRUE(bit_equal(pad_sequence(h, 6), h));
}

TEST(Pad, SingleFrame) {
  const Tensor p = pad_sequence(Tensor({1, 2, 1}, {3, -4}), 3);
  EXPECT_EQ(values(p), (std::vector<double>{3, 3, 3, -4, -4, -4}));
}

TEST(Pad, TooLongHistoryRejected) { EXPECT_THROW(pad_sequence(Tensor::zeros({1, 2, 5}), 4), std::invalid_argument); }

TEST(Gcn, IdentityLayerPassesThrough) {
  GcnLayer layer{identity(3), identity(2), Tensor::zeros({2}, true), Activation::kNone, 0.0, false};
  Rng rng(3);
  const Tensor x = rand_uniform({2, 3, 2}, -1, 1, rng);
  EXPECT_TRUE(bit_equal(gcn_layer_forward(layer, x), x));
}

TEST(Gcn, ZeroAdjacencyGivesActivatedBias) {
  GcnLayer layer{Tensor::zeros({3, 3}, true), identity(2), Tensor({2}, {0.5, -2}, true), Activation::kTanh, 0.0, false};
  Rng rng(4);
  const Tensor y = gcn_layer_forward(layer, rand_uniform({2, 3, 2}, -1, 1, rng));
  for (std::size_t i = 0; i < y.numel(); i += 2) {
    EXPECT_DOUBLE_EQ(y.data()[i], std::tanh(0.5));
    EXPECT_DOUBLE_EQ(y.data()[i + 1], std::tanh(-2.0));
  }
}

TEST(Gcn, MatchesTripleLoop) {
  const Tensor a({3, 3}, {0.5, -1, 2, 0.25, 1, 0, -0.75, 0.1, 1.5}, true);
  const Tensor w({2, 2}, {1.5, -0.5, 0.25, 2}, true);
  const Tensor b({2}, {0.1, -0.2}, true);
  GcnLayer layer{a, w, b, Activation::kTanh, 0.0, false};
  Rng rng(5);
  const Tensor x = rand_uniform({1, 3, 2}, -1, 1, rng);
  const Tensor y = gcn_layer_forward(layer, x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t o = 0; o < 2; ++o) {
      double s = b.data()[o];
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t c = 0; c < 2; ++c) s += a.at({i, j}) * x.at({0, j, c}) * w.at({c, o});
      EXPECT_NEAR(y.at({0, i, o}), std::tanh(s), 1e-14);
    }
}

TEST(Gcn, ShapeMismatchRejected) {
  Rng rng(6);
  const GcnLayer layer = make_gcn_layer(3, 4, 5, Activation::kTanh, 0.0, false, rng);
  EXPECT_THROW(gcn_layer_forward(layer, Tensor::zeros({1, 3, 5})), ShapeError);
  EXPECT_THROW(gcn_layer_forward(layer, Tensor::zeros({1, 2, 4})), ShapeError);
}

TEST(Gcn, DropoutOnlyInTraining) {
  Rng rng(7);
  const GcnLayer layer = make_gcn_layer(4, 6, 6, Activation::kTanh, 0.5, true, rng);
  const Tensor x = rand_uniform({3, 4, 6}, -1, 1, rng);
  const Tensor eval_a = gcn_layer_forward(layer, x);
  EXPECT_TRUE(bit_equal(eval_a, gcn_layer_forward(layer, x)));
  Rng drop(8);
  const Tensor train = gcn_layer_forward(layer, x, ForwardMode{&drop});
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < train.numel(); ++i) {
    if (train.data()[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(train.data()[i], 2.0 * eval_a.data()[i], 1e-14);  // inverted scaling 1 / keep
    }
  }
  EXPECT_GT(zeros, 0u);
  EXPECT_LT(zeros, train.numel());
}

TEST(Codec, InitMatchesLayout) {
  Rng rng(9);
  const PoseCodec codec = make_pose_codec(45, 75, 64, 0.1, rng);
  EXPECT_EQ(codec.encoder[0].weight.shape(), (Shape{75, 64}));
  EXPECT_EQ(codec.encoder[2].weight.shape(), (Shape{64, 75}));
  EXPECT_TRUE(codec.encoder[1].residual);
  EXPECT_EQ(codec.encoder[2].activation, Activation::kNone);
  for (const auto* stack : {&codec.encoder, &codec.decoder})
    for (const auto& layer : *stack) {
      for (std::size_t i = 0; i < 45; ++i)
        for (std::size_t j = 0; j < 45; ++j) EXPECT_NEAR(layer.adjacency.at({i, j}), i == j ? 1.0 : 0.0, 0.07);
      for (double v : layer.bias.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Codec, ShapesPreservedAndEvalDeterministic) {
  Rng rng(10);
  const PoseCodec codec = make_pose_codec(45, 75, 16, 0.1, rng);
  const Tensor x = rand_uniform({2, 45, 75}, -1, 1, rng);
  const Tensor e = encode(codec, x);
  EXPECT_EQ(e.shape(), x.shape());
  EXPECT_EQ(decode(codec, x).shape(), x.shape());
  EXPECT_TRUE(bit_equal(e, encode(codec, x)));
}

TEST(Codec, EncodeAndDecodeGradientsMatchFiniteDifferences) {
  Rng rng(11);
  const PoseCodec codec = make_pose_codec(4, 5, 6, 0.0, rng);
  const Tensor x = rand_uniform({2, 4, 5}, -1, 1, rng);
  auto enc = [&](const Tensor& in) { return ops::reduce_mean(encode(codec, in)); };
  auto dec = [&](const Tensor& in) { return ops::reduce_mean(decode(codec, in)); };
  EXPECT_LT(finite_difference_check(enc, x).max_rel_error, 1e-4);
  EXPECT_LT(finite_difference_check(dec, x).max_rel_error, 1e-4);
}

TEST(Codec, ZeroDecoderGivesZero) {
  Rng rng(12);
  PoseCodec codec = make_pose_codec(4, 5, 6, 0.0, rng);
  for (auto& layer : codec.decoder) {
    for (auto& v : layer.weight.mutable_data()) v = 0.0;
    for (auto& v : layer.bias.mutable_data()) v = 0.0;
  }
  for (double v : values(decode(codec, rand_uniform({2, 4, 5}, -1, 1, rng)))) EXPECT_EQ(v, 0.0);
}

TEST(Codec, EveryParameterReceivesGradient) {
  Rng rng(13);
  const PoseCodec codec = make_pose_codec(6, 8, 10, 0.0, rng);
  NamedTensors params;
  collect_parameters(codec, "codec.", params);
  EXPECT_EQ(params.size(), 18u);
  const Tensor x = rand_uniform({3, 6, 8}, -1, 1, rng);
  const Tensor w = rand_uniform({3, 6, 8}, -1, 1, rng);
  Tape tape;
  TapeScope scope(tape);
  backward(weighted_sum(decode(codec, encode(codec, x)), w));
  for (const auto& [name, t] : params) {
    ASSERT_TRUE(t.has_grad()) << name;
    double m = 0;
    for (double g : t.grad()) m = std::max(m, std::abs(g));
    EXPECT_GT(m, 0.0) << name;
  }
}
