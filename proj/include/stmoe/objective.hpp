#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stmoe/config.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe {

// Loss operands are (M_total, J, 3, T).

/// lambda/(J M t) * sum of squared joint errors over frames [0, t)
/// + 1/(J M (T - t)) * the same sum over frames [t, T).
Tensor spatial_loss(const Tensor& pred, const Tensor& gt, std::size_t t, const LossWeights& w);

/// Mean squared difference of first-order frame differences.
Tensor temporal_consistency_loss(const Tensor& pred, const Tensor& gt);

Tensor total_loss(const Tensor& pred, const Tensor& gt, std::size_t t, const LossWeights& w);

/// Mean Euclidean joint error over persons and joints; operands (M, J, 3).
double jpe(const Tensor& pred, const Tensor& gt);
/// jpe after subtracting each person's root joint from pred and gt.
double ape(const Tensor& pred, const Tensor& gt, std::size_t root_index);

struct MetricReport {
  std::vector<double> horizons;  // seconds
  std::vector<double> jpe_at;
  std::vector<double> ape_at;
  double jpe_avg = 0.0;
  double ape_avg = 0.0;

  /// "metric,0.2s,...,Avg" header and one row each for JPE and APE.
  std::string to_csv() const;
};

/// 1-based index of `seconds` within a prediction window of `window` frames.
std::size_t horizon_frame(double seconds, double fps, std::size_t window);

/// pred, gt: (M, J, 3, T); frames [t, T) are the prediction window.
MetricReport report_at_horizons(const Tensor& pred, const Tensor& gt, std::size_t t, double fps,
                                const std::vector<double>& horizons, std::size_t root_index = 0);

/// Per-frame JPE/APE sums over a whole dataset, weighted by person count.
class MetricAccumulator {
 public:
  MetricAccumulator(std::size_t t, std::size_t total, double fps, std::vector<double> horizons,
                    std::size_t root_index);

  void add(const Tensor& pred, const Tensor& gt);
  std::size_t persons() const { return persons_; }
  MetricReport report() const;

 private:
  std::size_t t_, total_;
  double fps_;
  std::vector<double> horizons_;
  std::size_t root_;
  std::size_t persons_ = 0;
  std::vector<double> jpe_sum_;  // per predicted frame, summed over persons
  std::vector<double> ape_sum_;
};

}  // namespace stmoe
