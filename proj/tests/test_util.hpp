#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "stmoe/ops.hpp"
#include "stmoe/random.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::testing {

inline Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

/// Entries with magnitude in [lo, hi] and random sign.
inline Tensor rand_signed(Shape shape, double lo, double hi, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

/// Owning copy; safe to iterate when `t` is a temporary.
inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    m = std::max(m, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// sum(w * y) for a fixed weight tensor w.
inline Tensor weighted_sum(const Tensor& y, const Tensor& w) { return ops::reduce_sum(ops::mul(y, w)); }

}  // namespace stmoe::testing
