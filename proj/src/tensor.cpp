#include "stmoe/tensor.hpp"

#include <atomic>
#include <sstream>

namespace stmoe {

namespace {
std::atomic<Precision> g_precision{Precision::kFloat64};
std::atomic<std::uint64_t> g_next_id{1};
}  // namespace

std::uint64_t detail::next_tensor_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

Precision precision() { return g_precision.load(std::memory_order_relaxed); }
void set_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const auto r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
  impl_->id = detail::next_tensor_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const { return impl_->shape[normalize_axis(axis, rank(), "dim")]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: index rank mismatch for shape " + shape_str(shape()));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("at: index out of range on axis " + std::to_string(axis));
    off = off * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[off];
}

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw std::logic_error("set_requires_grad: only leaf tensors can change requires_grad");
  impl_->requires_grad = value;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

}  // namespace stmoe

namespace stmoe {

std::size_t count_elements(const NamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

}  // namespace stmoe
