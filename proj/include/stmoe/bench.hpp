#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stmoe/ssm.hpp"

namespace stmoe {

struct BenchOptions {
  std::vector<std::size_t> lengths{32, 64, 128, 256};
  std::size_t channels = 16;
  std::size_t batch = 4;
  std::size_t repeats = 5;
  ssm::SsmSizes ssm;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t length = 0;
  double forward_min_ms = 0, forward_median_ms = 0;
  double train_min_ms = 0, train_median_ms = 0;  // forward + backward
};

struct BenchReport {
  std::vector<BenchRow> rows;
  /// Least-squares slope of log(min time) against log(length).
  double forward_exponent = 0;
  double train_exponent = 0;

  std::string to_text() const;
};

/// Times the bidirectional block on (batch, L, channels) inputs.
BenchReport run_bench(const BenchOptions& opts);

double fit_loglog_exponent(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace stmoe
