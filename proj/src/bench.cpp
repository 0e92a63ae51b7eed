#include "stmoe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "stmoe/ops.hpp"
#include "stmoe/tape.hpp"

namespace stmoe {

double fit_loglog_exponent(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_loglog_exponent: need two or more points");
  double mx = 0, my = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw std::invalid_argument("fit_loglog_exponent: values must be positive");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

namespace {

template <class F>
std::pair<double, double> time_ms(std::size_t repeats, F&& body) {
  body();  // warm-up
  std::vector<double> ms;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t h = ms.size() / 2;
  const double median = ms.size() % 2 ? ms[h] : 0.5 * (ms[h - 1] + ms[h]);
  return {ms.front(), median};
}

}  // namespace

BenchReport run_bench(const BenchOptions& opts) {
  if (opts.lengths.size() < 2 || opts.repeats < 1) throw std::invalid_argument("run_bench: need 2+ lengths and 1+ repeats");
  Rng rng(opts.seed);
  const ssm::BiBlockParams block = ssm::make_bi_block(opts.channels, opts.ssm, rng);
  BenchReport report;
  std::vector<double> xs, fwd, train;
  for (std::size_t len : opts.lengths) {
    const Tensor x = normal_tensor({opts.batch, len, opts.channels}, 1.0, rng, false);
    BenchRow row;
    row.length = len;
    std::tie(row.forward_min_ms, row.forward_median_ms) =
        time_ms(opts.repeats, [&] { (void)ssm::bidirectional_forward(block, x); });
    std::tie(row.train_min_ms, row.train_median_ms) = time_ms(opts.repeats, [&] {
      Tape tape;
      TapeScope scope(tape);
      backward(ops::reduce_mean(ssm::bidirectional_forward(block, x)));
    });
    xs.push_back(static_cast<double>(len));
    fwd.push_back(row.forward_min_ms);
    train.push_back(row.train_min_ms);
    report.rows.push_back(row);
  }
  report.forward_exponent = fit_loglog_exponent(xs, fwd);
  report.train_exponent = fit_loglog_exponent(xs, train);
  return report;
}

std::string BenchReport::to_text() const {
  std::string out = "length,forward_min_ms,forward_median_ms,train_min_ms,train_median_ms\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.4f,%.4f,%.4f,%.4f\n", r.length, r.forward_min_ms, r.forward_median_ms,
                  r.train_min_ms, r.train_median_ms);
    out += line;
  }
  std::snprintf(line, sizeof line, "exponent_forward,%.4f\nexponent_train,%.4f\n", forward_exponent, train_exponent);
  out += line;
  return out;
}

}  // namespace stmoe
