#include <limits>
#include "stmoe/random.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace stmoe {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v = engine_();
  while (v >= limit) v = engine_();
  return static_cast<std::size_t>(v % n);
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::deserialize(std::string_view state) {
  std::istringstream is{std::string(state)};
  is >> engine_;
  if (is.fail()) throw std::runtime_error("Rng: corrupt generator state");
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace stmoe
