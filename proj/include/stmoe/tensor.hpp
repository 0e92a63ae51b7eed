#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes violate a primitive's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Storage precision of primitive outputs. Values are always held as
/// float64; in float32 mode every primitive result is rounded to the nearest
/// float32 before it is stored.
enum class Precision { kFloat64, kFloat32 };

Precision precision();
void set_precision(Precision p);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

class TapeState;

namespace detail {

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this leaf
  bool requires_grad = false;
  std::uint64_t id = 0;
  // Set only for tape-recorded outputs.
  std::weak_ptr<TapeState> tape;
  std::size_t node = kNoNode;
};

std::uint64_t next_tensor_id();

}  // namespace detail

/// Shared handle to a dense row-major float64 array. Copies alias the same
/// storage; values are treated as immutable once a tensor has been used as
/// a primitive input (parameters are the exception and are only updated by
/// the optimizer between steps).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(int axis) const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return impl_->node == detail::kNoNode; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values with no tape history and requires_grad = false.
  Tensor detach() const;

  std::uint64_t id() const { return impl_->id; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Normalizes a possibly negative axis against `rank`.
std::size_t normalize_axis(int axis, std::size_t rank, const char* op);

}  // namespace stmoe

namespace stmoe {

/// Parameter tensors in registration order, keyed by dotted path.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::size_t count_elements(const NamedTensors& tensors);

}  // namespace stmoe
