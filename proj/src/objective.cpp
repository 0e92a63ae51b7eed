#include "stmoe/objective.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "stmoe/ops.hpp"

namespace stmoe {

namespace {

void check_pair(const char* op, const Tensor& pred, const Tensor& gt, std::size_t rank) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(op) + ": pred " + shape_str(pred.shape()) + " and gt " + shape_str(gt.shape()) +
                     " differ");
  }
  if (pred.rank() != rank || pred.dim(2) != 3) {
    throw ShapeError(std::string(op) + ": expected " + (rank == 4 ? "(M, J, 3, T)" : "(M, J, 3)") + ", got " +
                     shape_str(pred.shape()));
  }
}

// Per-person per-joint Euclidean error at frame f of (M, J, 3, T) data,
// optionally root-aligned.
double frame_error(const double* p, const double* g, std::size_t m, std::size_t j, std::size_t frames, std::size_t f,
                   const std::size_t* root) {
  auto at = [&](const double* d, std::size_t person, std::size_t joint, std::size_t c) {
    return d[((person * j + joint) * 3 + c) * frames + f];
  };
  double sum = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < j; ++b) {
      double sq = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        double dp = at(p, a, b, c);
        double dg = at(g, a, b, c);
        if (root) {
          dp -= at(p, a, *root, c);
          dg -= at(g, a, *root, c);
        }
        sq += (dp - dg) * (dp - dg);
      }
      sum += std::sqrt(sq);
    }
  }
  return sum;
}

}  // namespace

Tensor spatial_loss(const Tensor& pred, const Tensor& gt, std::size_t t, const LossWeights& w) {
  check_pair("spatial_loss", pred, gt, 4);
  const std::size_t m = pred.dim(0), j = pred.dim(1), total = pred.dim(3);
  if (t == 0 || t >= total) throw std::invalid_argument("spatial_loss: need 0 < t < T");
  const Tensor sq = ops::reduce_sum(ops::square(ops::sub(pred, gt)), 2);  // (M, J, T)
  const double jm = static_cast<double>(j * m);
  const Tensor hist = ops::reduce_sum(ops::slice(sq, 2, 0, t));
  const Tensor fut = ops::reduce_sum(ops::slice(sq, 2, t, total));
  return ops::add(ops::scale(hist, w.lambda_hist / (jm * static_cast<double>(t))),
                  ops::scale(fut, 1.0 / (jm * static_cast<double>(total - t))));
}

Tensor temporal_consistency_loss(const Tensor& pred, const Tensor& gt) {
  check_pair("temporal_consistency_loss", pred, gt, 4);
  const std::size_t total = pred.dim(3);
  if (total < 2) throw std::invalid_argument("temporal_consistency_loss: need at least 2 frames");
  auto velocity = [total](const Tensor& x) {
    return ops::sub(ops::slice(x, 3, 1, total), ops::slice(x, 3, 0, total - 1));
  };
  return ops::reduce_mean(ops::square(ops::sub(velocity(pred), velocity(gt))));
}

Tensor total_loss(const Tensor& pred, const Tensor& gt, std::size_t t, const LossWeights& w) {
  return ops::add(ops::scale(spatial_loss(pred, gt, t, w), w.alpha),
                  ops::scale(temporal_consistency_loss(pred, gt), w.beta));
}

double jpe(const Tensor& pred, const Tensor& gt) {
  check_pair("jpe", pred, gt, 3);
  const std::size_t m = pred.dim(0), j = pred.dim(1);
  if (m * j == 0) return 0.0;
  return frame_error(pred.data().data(), gt.data().data(), m, j, 1, 0, nullptr) / static_cast<double>(m * j);
}

double ape(const Tensor& pred, const Tensor& gt, std::size_t root_index) {
  check_pair("ape", pred, gt, 3);
  const std::size_t m = pred.dim(0), j = pred.dim(1);
  if (root_index >= j) {
    throw std::out_of_range("ape: root index " + std::to_string(root_index) + " outside " + std::to_string(j) +
                            " joints");
  }
  if (m == 0) return 0.0;
  return frame_error(pred.data().data(), gt.data().data(), m, j, 1, 0, &root_index) / static_cast<double>(m * j);
}

std::size_t horizon_frame(double seconds, double fps, std::size_t window) {
  const double raw = seconds * fps;
  const double n = std::round(raw);
  if (std::abs(raw - n) > 1e-6) {
    throw std::invalid_argument("horizon " + std::to_string(seconds) + " s is not a whole frame at " +
                                std::to_string(fps) + " fps");
  }
  if (n < 1 || n > static_cast<double>(window)) {
    throw std::out_of_range("horizon " + std::to_string(seconds) + " s (frame " + std::to_string(n) +
                            ") lies outside the " + std::to_string(window) + "-frame prediction window");
  }
  return static_cast<std::size_t>(n);
}

MetricAccumulator::MetricAccumulator(std::size_t t, std::size_t total, double fps, std::vector<double> horizons,
                                     std::size_t root_index)
    : t_(t), total_(total), fps_(fps), horizons_(std::move(horizons)), root_(root_index),
      jpe_sum_(total > t ? total - t : 0, 0.0), ape_sum_(total > t ? total - t : 0, 0.0) {
  if (t >= total) throw std::invalid_argument("MetricAccumulator: history must be shorter than the sequence");
  for (double h : horizons_) horizon_frame(h, fps_, total_ - t_);
}

void MetricAccumulator::add(const Tensor& pred, const Tensor& gt) {
  check_pair("MetricAccumulator::add", pred, gt, 4);
  const std::size_t m = pred.dim(0), j = pred.dim(1);
  if (pred.dim(3) != total_) throw ShapeError("MetricAccumulator::add: frame count does not match");
  if (root_ >= j) throw std::out_of_range("MetricAccumulator::add: root joint outside joint range");
  const double inv_j = 1.0 / static_cast<double>(j);
  for (std::size_t f = t_; f < total_; ++f) {
    jpe_sum_[f - t_] += frame_error(pred.data().data(), gt.data().data(), m, j, total_, f, nullptr) * inv_j;
    ape_sum_[f - t_] += frame_error(pred.data().data(), gt.data().data(), m, j, total_, f, &root_) * inv_j;
  }
  persons_ += m;
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.horizons = horizons_;
  if (persons_ == 0) {
    r.jpe_at.assign(horizons_.size(), 0.0);
    r.ape_at.assign(horizons_.size(), 0.0);
    return r;
  }
  const double inv = 1.0 / static_cast<double>(persons_);
  for (double h : horizons_) {
    const std::size_t n = horizon_frame(h, fps_, total_ - t_);
    r.jpe_at.push_back(jpe_sum_[n - 1] * inv);
    r.ape_at.push_back(ape_sum_[n - 1] * inv);
  }
  for (std::size_t i = 0; i < jpe_sum_.size(); ++i) {
    r.jpe_avg += jpe_sum_[i];
    r.ape_avg += ape_sum_[i];
  }
  const double frames = static_cast<double>(jpe_sum_.size());
  r.jpe_avg *= inv / frames;
  r.ape_avg *= inv / frames;
  return r;
}

MetricReport report_at_horizons(const Tensor& pred, const Tensor& gt, std::size_t t, double fps,
                                const std::vector<double>& horizons, std::size_t root_index) {
  check_pair("report_at_horizons", pred, gt, 4);
  MetricAccumulator acc(t, pred.dim(3), fps, horizons, root_index);
  acc.add(pred, gt);
  return acc.report();
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "metric";
  for (double h : horizons) {
    // Whole seconds keep one decimal ("1.0s") to match the 0.2s-style columns.
    std::ostringstream label;
    label << h;
    if (label.str().find_first_of(".e") == std::string::npos) label << ".0";
    os << ',' << label.str() << 's';
  }
  os << ",Avg\n" << std::fixed << std::setprecision(3);
  auto row = [&](const char* name, const std::vector<double>& v, double avg) {
    os << name;
    for (double x : v) os << ',' << x;
    os << ',' << avg << '\n';
  };
  row("JPE", jpe_at, jpe_avg);
  row("APE", ape_at, ape_avg);
  return os.str();
}

}  // namespace stmoe
