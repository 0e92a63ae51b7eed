#pragma once

#include <cstddef>
#include <functional>

#include "stmoe/tensor.hpp"

namespace stmoe {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of scalar f at x with central differences of
/// step eps. Error per element is |a - fd| / max(|a|, |fd|, 1e-8). Requires
/// float64 precision.
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        double eps = 1e-5);

/// Same check against a tensor f closes over (typically a model parameter),
/// perturbed in place and restored afterwards.
GradCheckResult finite_difference_check_inplace(const std::function<Tensor()>& f, Tensor param, double eps = 1e-5);

}  // namespace stmoe
