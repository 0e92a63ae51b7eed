#include "stmoe/dct.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "stmoe/ops.hpp"

namespace stmoe {

namespace {

void check_trailing(const char* op, const DctBasis& basis, const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() != basis.length()) {
    throw ShapeError(std::string(op) + ": trailing axis of " + shape_str(x.shape()) + " must have length " +
                     std::to_string(basis.length()));
  }
}

}  // namespace

DctBasis::DctBasis(std::size_t length) : length_(length) {
  if (length == 0) throw std::invalid_argument("DctBasis: length must be positive");
  const double t = static_cast<double>(length);
  std::vector<double> m(length * length);
  std::vector<double> mt(length * length);
  for (std::size_t k = 0; k < length; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / t) : std::sqrt(2.0 / t);
    for (std::size_t n = 0; n < length; ++n) {
      const double v = s * std::cos(std::numbers::pi * static_cast<double>((2 * n + 1) * k) / (2.0 * t));
      m[k * length + n] = v;
      mt[n * length + k] = v;
    }
  }
  matrix_ = Tensor({length, length}, std::move(m));
  matrix_t_ = Tensor({length, length}, std::move(mt));
}

namespace {

// matmul wants a row axis; a bare sequence gets a temporary one.
Tensor apply_rows(const Tensor& x, const Tensor& m) {
  if (x.rank() > 1) return ops::matmul(x, m);
  return ops::reshape(ops::matmul(ops::reshape(x, {1, x.dim(0)}), m), x.shape());
}

}  // namespace

Tensor dct_forward(const DctBasis& basis, const Tensor& x) {
  check_trailing("dct_forward", basis, x);
  return apply_rows(x, basis.matrix_t());
}

Tensor dct_inverse(const DctBasis& basis, const Tensor& c) {
  check_trailing("dct_inverse", basis, c);
  return apply_rows(c, basis.matrix());
}

}  // namespace stmoe
