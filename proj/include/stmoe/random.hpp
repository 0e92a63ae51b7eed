#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "stmoe/tensor.hpp"

namespace stmoe {

/// Seeded 64-bit Mersenne Twister with portable uniform/normal draws, so the
/// same seed yields the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; no cached second value.
  double normal();
  /// Uniform integer on [0, n).
  std::size_t index(std::size_t n);

  std::string serialize() const;
  void deserialize(std::string_view state);

 private:
  std::mt19937_64 engine_;
};

/// Tensor with entries drawn from U(-bound, bound).
Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad = true);
/// Tensor with i.i.d. N(0, stddev^2) entries.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

}  // namespace stmoe
