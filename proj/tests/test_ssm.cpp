#include <gtest/gtest.h>

#include <cmath>

#include "fd_suite.hpp"
#include "oracles.hpp"
#include "stmoe/tape.hpp"

using namespace stmoe;
using namespace stmoe::testing;

namespace {

struct ScanInputs {
  Tensor a_bar, b_bar, c, u;
};

ScanInputs random_scan(Rng& rng) {
  const std::size_t b = 1 + rng.index(3), l = 1 + rng.index(12), d = 1 + rng.index(5), n = 1 + rng.index(5);
  return {rand_uniform({b, l, d, n}, 0.0, 1.0, rng), rand_uniform({b, l, d, n}, -1, 1, rng),
          rand_uniform({b, l, n}, -1, 1, rng), rand_uniform({b, l, d}, -1, 1, rng)};
}

}  // namespace

TEST(Discretize, ScalarCase) {
  const auto [ab, bb] = ssm::discretize(Tensor({1, 1, 1}, {1.0}), Tensor({1, 1}, {-1.0}), Tensor({1, 1, 1}, {2.0}));
  EXPECT_NEAR(ab.item(), 0.36787944117144233, 1e-15);
  EXPECT_DOUBLE_EQ(bb.item(), 2.0);
}

TEST(Discretize, SmallStepLimit) {
  const auto [ab, bb] = ssm::discretize(Tensor({1, 1, 1}, {1e-12}), Tensor({1, 1}, {-3.0}), Tensor({1, 1, 1}, {5.0}));
  EXPECT_NEAR(ab.item(), 1.0, 1e-11);
  EXPECT_NEAR(bb.item(), 0.0, 1e-11);
}

TEST(Discretize, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 1 + rng.index(2), l = 1 + rng.index(6), d = 1 + rng.index(4), n = 1 + rng.index(4);
    const Tensor delta = rand_uniform({b, l, d}, 0.01, 2, rng);
    const Tensor a = rand_uniform({d, n}, -4, -0.1, rng);
    const Tensor bm = rand_uniform({b, l, n}, -1, 1, rng);
    const auto [ab, bb] = ssm::discretize(delta, a, bm);
    const auto [oa, ob] = discretize_loop_oracle(delta, a, bm);
    EXPECT_LT(max_rel_diff(ab.data(), oa), 1e-14);
    EXPECT_LT(max_rel_diff(bb.data(), ob), 1e-14);
  }
}

TEST(Discretize, NonPositiveStepRejected) {
  EXPECT_THROW(ssm::discretize(Tensor({1, 2, 1}, {0.5, 0.0}), Tensor({1, 1}, {-1}), Tensor({1, 2, 1}, {1, 1})),
               std::domain_error);
}

TEST(Scan, ZeroInputGivesZeroOutput) {
  Rng rng(3);
  auto s = random_scan(rng);
  s.u = Tensor::zeros(s.u.shape());
  for (double v : values(ssm::selective_scan(s.a_bar, s.b_bar, s.c, s.u))) EXPECT_EQ(v, 0.0);
}

TEST(Scan, SingleStepHasNoRecurrence) {
  const Tensor y = ssm::selective_scan(Tensor({1, 1, 1, 2}, {0.9, 0.4}), Tensor({1, 1, 1, 2}, {2, 3}),
                                       Tensor({1, 1, 2}, {5, 7}), Tensor({1, 1, 1}, {0.5}));
  EXPECT_DOUBLE_EQ(y.item(), 5 * 2 * 0.5 + 7 * 3 * 0.5);
}

TEST(Scan, TwoStepsByHand) {
  // h1 = 2 * 3 = 6; h2 = 0.5 * 6 + 4 * -1 = -1; y2 = 1.5 * -1.
  const Tensor y = ssm::selective_scan(Tensor({1, 2, 1, 1}, {0.7, 0.5}), Tensor({1, 2, 1, 1}, {2, 4}),
                                       Tensor({1, 2, 1}, {1, 1.5}), Tensor({1, 2, 1}, {3, -1}));
  EXPECT_DOUBLE_EQ(y.data()[0], 6.0);
  EXPECT_DOUBLE_EQ(y.data()[1], -1.5);
}

TEST(Scan, KernelAndReferenceMatchLoopOracle) {
  Rng rng(4);
  for (int seed = 0; seed < 20; ++seed) {
    const auto s = random_scan(rng);
    const auto oracle = scan_loop_oracle(s.a_bar, s.b_bar, s.c, s.u);
    EXPECT_LT(max_rel_diff(ssm::selective_scan(s.a_bar, s.b_bar, s.c, s.u).data(), oracle), 1e-12);
    EXPECT_LT(max_rel_diff(ssm::selective_scan_reference(s.a_bar, s.b_bar, s.c, s.u).data(), oracle), 1e-12);
  }
}

TEST(Scan, FusedMatchesDiscretizeThenScan) {
  Rng rng(5);
  for (int seed = 0; seed < 20; ++seed) {
    const std::size_t b = 1 + rng.index(2), l = 1 + rng.index(10), d = 1 + rng.index(4), n = 1 + rng.index(4);
    const Tensor delta = rand_uniform({b, l, d}, 0.001, 1, rng);
    const Tensor a = rand_uniform({d, n}, -5, -0.5, rng);
    const Tensor bm = rand_uniform({b, l, n}, -1, 1, rng);
    const Tensor cm = rand_uniform({b, l, n}, -1, 1, rng);
    const Tensor u = rand_uniform({b, l, d}, -1, 1, rng);
    const auto [oa, ob] = discretize_loop_oracle(delta, a, bm);
    const auto oracle = scan_loop_oracle(Tensor({b, l, d, n}, oa), Tensor({b, l, d, n}, ob), cm, u);
    EXPECT_LT(max_rel_diff(ssm::selective_scan_fused(delta, a, bm, cm, u).data(), oracle), 1e-12);
  }
}

TEST(Scan, KernelGradientMatchesReferenceGradient) {
  Rng rng(6);
  for (int seed = 0; seed < 5; ++seed) {
    const auto s = random_scan(rng);
    const Tensor w = rand_uniform(s.u.shape(), -1, 1, rng);
    auto grads = [&](bool reference) {
      std::vector<Tensor> in{s.a_bar, s.b_bar, s.c, s.u};
      for (auto& t : in) t = Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
      Tape tape;
      TapeScope scope(tape);
      const Tensor y = reference ? ssm::selective_scan_reference(in[0], in[1], in[2], in[3])
                                 : ssm::selective_scan(in[0], in[1], in[2], in[3]);
      backward(weighted_sum(y, w));
      std::vector<std::vector<double>> g;
      for (auto& t : in) g.emplace_back(t.grad().begin(), t.grad().end());
      return g;
    };
    const auto gk = grads(false), gr = grads(true);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(max_rel_diff(gk[i], gr[i], 1e-9), 1e-10) << "input " << i;
  }
}

TEST(Scan, LongScanStaysFinite) {
  Rng rng(7);
  ssm::SsmSizes sizes{2, 4, 4, 0};
  const auto block = ssm::make_mamba_block(2, sizes, rng);
  const Tensor x = rand_uniform({1, 10000, 2}, -1, 1, rng);
  for (double v : values(ssm::mamba_block_forward(block, x))) ASSERT_TRUE(std::isfinite(v));
}

TEST(MambaBlock, ShapePreserved) {
  Rng rng(8);
  const auto block = ssm::make_mamba_block(5, {}, rng);
  EXPECT_EQ(ssm::mamba_block_forward(block, rand_uniform({2, 7, 5}, -1, 1, rng)).shape(), (Shape{2, 7, 5}));
  EXPECT_THROW(ssm::mamba_block_forward(block, rand_uniform({2, 7, 4}, -1, 1, rng)), ShapeError);
}

TEST(MambaBlock, CanonicalInit) {
  Rng rng(9);
  const auto block = ssm::make_mamba_block(20, {}, rng);
  EXPECT_EQ(block.dt_rank, 2u);  // ceil(20 / 16)
  EXPECT_EQ(block.in_proj.shape(), (Shape{20, 80}));
  EXPECT_EQ(block.x_proj.shape(), (Shape{40, 2 + 32}));
  for (double b : block.dt_bias.data()) {
    const double dt = std::log1p(std::exp(b));
    EXPECT_GE(dt, 1e-3 * (1 - 1e-12));
    EXPECT_LE(dt, 1e-1 * (1 + 1e-12));
  }
  for (std::size_t c = 0; c < 40; ++c)
    for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(-std::exp(block.a_log.at({c, k})), -double(k + 1), 1e-12);
}

TEST(MambaBlock, OnlyOutProjNonzeroGivesZero) {
  Rng rng(10);
  auto block = ssm::make_mamba_block(3, {2, 2, 3, 0}, rng);
  for (Tensor* t : {&block.in_proj, &block.conv_weight, &block.conv_bias, &block.x_proj, &block.dt_proj,
                    &block.dt_bias, &block.a_log})
    for (auto& v : t->mutable_data()) v = 0.0;
  for (double v : values(ssm::mamba_block_forward(block, rand_uniform({1, 4, 3}, -1, 1, rng)))) EXPECT_EQ(v, 0.0);
}

TEST(BiBlock, ReversalEquivariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    auto block = ssm::make_bi_block(4, {2, 3, 3, 0}, rng);
    condition_for_fd(block.mamba, rng);
    const Tensor x = rand_uniform({2, 6, 4}, -1, 1, rng);
    const Tensor lhs = ssm::bidirectional_core(block, ops::reverse_axis(x, 1));
    const Tensor rhs = ops::reverse_axis(ssm::bidirectional_core(block, x), 1);
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
  }
}

TEST(BiBlock, ZeroOutProjPassesInputThrough) {
  Rng rng(11);
  auto block = ssm::make_bi_block(4, {2, 3, 3, 0}, rng);
  for (auto& v : block.mamba.out_proj.mutable_data()) v = 0.0;
  const Tensor x = rand_uniform({1, 5, 4}, -1, 1, rng);
  EXPECT_TRUE(bit_equal(ssm::bidirectional_core(block, x), x));
  const Tensor ln = ssm::layer_norm(block.ln_inner, x);
  const Tensor expect = ssm::layer_norm(block.ln_outer, ops::add(ln, ssm::feed_forward(block.ffn, ln)));
  EXPECT_LE(max_abs_diff(ssm::bidirectional_forward(block, x), expect), 1e-15);
}

TEST(BiBlock, DirectionalModesDropOneBranch) {
  Rng rng(12);
  auto block = ssm::make_bi_block(3, {2, 2, 3, 0}, rng);
  condition_for_fd(block.mamba, rng);
  const Tensor x = rand_uniform({1, 5, 3}, -1, 1, rng);
  const Tensor m = ssm::mamba_block_forward(block.mamba, x);
  const Tensor mr = ops::reverse_axis(ssm::mamba_block_forward(block.mamba, ops::reverse_axis(x, 1)), 1);
  EXPECT_LE(max_abs_diff(ssm::bidirectional_core(block, x, {ssm::ScanMode::kForward, true}), ops::add(m, x)), 1e-15);
  EXPECT_LE(max_abs_diff(ssm::bidirectional_core(block, x, {ssm::ScanMode::kBackward, true}), ops::add(mr, x)), 1e-15);
  const Tensor zero = Tensor::zeros({1, 5, 3});
  const Tensor ln = ssm::layer_norm(block.ln_inner, zero);
  const Tensor expect = ssm::layer_norm(block.ln_outer, ops::add(ln, ssm::feed_forward(block.ffn, ln)));
  EXPECT_LE(max_abs_diff(ssm::bidirectional_forward(block, zero, {ssm::ScanMode::kForward, true}), expect), 1e-12);
}

TEST(BiBlock, NoFlipBackKeepsBackwardBranchReversed) {
  Rng rng(13);
  auto block = ssm::make_bi_block(3, {2, 2, 3, 0}, rng);
  condition_for_fd(block.mamba, rng);
  const Tensor x = rand_uniform({1, 5, 3}, -1, 1, rng);
  const Tensor m = ssm::mamba_block_forward(block.mamba, x);
  const Tensor mb = ssm::mamba_block_forward(block.mamba, ops::reverse_axis(x, 1));
  EXPECT_LE(max_abs_diff(ssm::bidirectional_core(block, x, {ssm::ScanMode::kBidirectional, false}),
                         ops::add(ops::add(m, mb), x)),
            1e-15);
}

TEST(BiBlock, BothDirectionsShareOneParameterSet) {
  Rng rng(14);
  const auto block = ssm::make_bi_block(6, {}, rng);
  NamedTensors bi, single;
  ssm::collect_parameters(block, "", bi);
  ssm::collect_parameters(block.mamba, "", single);
  const std::size_t c = 6;
  const std::size_t ln_ffn = 4 * c + (c * 2 * c + 2 * c) + (2 * c * c + c);
  EXPECT_EQ(count_elements(bi), count_elements(single) + ln_ffn);
}
