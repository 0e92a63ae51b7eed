#include <gtest/gtest.h>

#include "fd_suite.hpp"

using namespace stmoe;
using namespace stmoe::testing;

class PrimitiveGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferencesAtFiveSeeds) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const FdCase c = make_fd_case(GetParam(), seed);
    EXPECT_LT(run_fd_case(c, seed), 1e-6) << GetParam() << " seed " << seed;
  }
}

std::vector<std::string> all_primitives() {
  std::vector<std::string> out;
  for (auto n : primitive_names()) out.emplace_back(n);
  return out;
}

INSTANTIATE_TEST_SUITE_P(Registry, PrimitiveGradient, ::testing::ValuesIn(all_primitives()),
                         [](const auto& info) { return info.param; });

TEST(CompositeGradient, MambaBlock) {
  const auto r = fd_mamba_block(3);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(CompositeGradient, BidirectionalWrapper) {
  const auto r = fd_bi_block(4);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(CompositeGradient, BidirectionalWrapperWithoutFlipBack) {
  const auto r = fd_bi_block(5, {ssm::ScanMode::kBidirectional, false});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(CompositeGradient, MicroModelLoss) {
  const auto r = fd_model_loss(6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_LE(r.skipped, 5u);
}

TEST(KinkAwareCheck, SkipsStencilsThatCrossZero) {
  Tensor p({3}, {0.5, 3e-6, -0.25}, true);
  const NamedTensors params{{"p", p}};
  std::size_t skipped = 0;
  std::string worst;
  const double e = check_parameters_kink_aware([&] { return ops::reduce_sum(ops::square(ops::relu(p))); }, params,
                                               &worst, &skipped);
  EXPECT_EQ(skipped, 1u);
  EXPECT_LT(e, 1e-9);
}
