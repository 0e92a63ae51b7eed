#pragma once

#include <cstddef>

#include "stmoe/tensor.hpp"

namespace stmoe {

/// Orthonormal DCT-II basis of length T:
/// M[k][n] = s_k cos(pi (2n + 1) k / (2T)), s_0 = sqrt(1/T), s_k = sqrt(2/T).
class DctBasis {
 public:
  explicit DctBasis(std::size_t length);

  std::size_t length() const { return length_; }
  /// (T, T), rows are basis vectors.
  const Tensor& matrix() const { return matrix_; }
  const Tensor& matrix_t() const { return matrix_t_; }

 private:
  std::size_t length_;
  Tensor matrix_;
  Tensor matrix_t_;
};

/// DCT along the trailing axis.
Tensor dct_forward(const DctBasis& basis, const Tensor& x);
Tensor dct_inverse(const DctBasis& basis, const Tensor& c);

}  // namespace stmoe
