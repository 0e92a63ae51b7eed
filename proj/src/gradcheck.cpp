#include "stmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmoe/tape.hpp"

namespace stmoe {

namespace {

void require_float64(const char* op) {
  if (precision() != Precision::kFloat64) {
    throw std::logic_error(std::string(op) + ": finite differences need float64 precision");
  }
}

double scalar_value(const Tensor& y, std::size_t index) {
  if (y.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar, got " + shape_str(y.shape()));
  const double v = y.item();
  if (!std::isfinite(v)) {
    throw std::domain_error("finite_difference_check: non-finite value while perturbing element " +
                            std::to_string(index));
  }
  return v;
}

// `evaluate(i, delta)` returns f with element i shifted by delta.
template <class Eval>
GradCheckResult compare(std::span<const double> analytic, std::size_t n, double eps, Eval evaluate) {
  GradCheckResult r;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = analytic.empty() ? 0.0 : analytic[i];
    if (!std::isfinite(a)) {
      throw std::domain_error("finite_difference_check: non-finite gradient at element " + std::to_string(i));
    }
    const double fd = (evaluate(i, eps) - evaluate(i, -eps)) / (2.0 * eps);
    const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    if (err > r.max_rel_error || i == 0) r = {err, i, a, fd};
  }
  return r;
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  require_float64("finite_difference_check");
  const std::vector<double> base(x.data().begin(), x.data().end());
  Tensor leaf(x.shape(), base, true);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f(leaf);
    scalar_value(y, 0);
    if (y.requires_grad()) backward(y);
  }
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  return compare(analytic, base.size(), eps, [&](std::size_t i, double delta) {
    std::vector<double> shifted = base;
    shifted[i] += delta;
    return scalar_value(f(Tensor(x.shape(), std::move(shifted))), i);
  });
}

GradCheckResult finite_difference_check_inplace(const std::function<Tensor()>& f, Tensor param, double eps) {
  require_float64("finite_difference_check_inplace");
  if (!param.requires_grad()) throw std::invalid_argument("finite_difference_check_inplace: tensor has requires_grad = false");
  param.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f();
    scalar_value(y, 0);
    if (y.requires_grad()) backward(y);
  }
  const std::vector<double> analytic(param.grad().begin(), param.grad().end());
  param.zero_grad();
  auto values = param.mutable_data();
  return compare(analytic, values.size(), eps, [&](std::size_t i, double delta) {
    const double saved = values[i];
    values[i] = saved + delta;
    double v = 0.0;
    try {
      v = scalar_value(f(), i);
    } catch (...) {
      values[i] = saved;
      throw;
    }
    values[i] = saved;
    return v;
  });
}

}  // namespace stmoe
