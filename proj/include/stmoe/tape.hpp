#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "stmoe/tensor.hpp"

namespace stmoe {

/// Everything a backward rule may read or write for one recorded node.
/// `grad_in[i]` is null when input i does not need a gradient; rules must
/// accumulate (+=) into non-null buffers.
struct BackwardContext {
  std::span<const double> grad_out;
  std::span<const double> out;
  std::vector<std::span<const double>> in;
  std::vector<std::vector<double>*> grad_in;
};

using BackwardFn = std::function<void(BackwardContext&)>;

struct TapeNode {
  std::string_view op;
  std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
  std::shared_ptr<detail::TensorImpl> output;
  BackwardFn backward;
};

class TapeState {
 public:
  std::vector<TapeNode> nodes;
};

/// Ordered record of primitive applications. Nodes are appended in
/// execution order, so inputs always precede the nodes that consume them.
class Tape {
 public:
  Tape() : state_(std::make_shared<TapeState>()) {}

  std::size_t size() const { return state_->nodes.size(); }
  const std::vector<TapeNode>& nodes() const { return state_->nodes; }
  const std::shared_ptr<TapeState>& state() const { return state_; }

 private:
  std::shared_ptr<TapeState> state_;
};

/// Makes `tape` the recording target for the current thread until destroyed.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Wraps freshly computed values as a primitive result. When a tape is
/// active and some input requires a gradient, the application is appended
/// to the tape with `backward` as its rule. Applies the precision policy.
Tensor make_result(std::string_view op, std::span<const Tensor> inputs, Shape shape,
                   std::vector<double> values, BackwardFn backward);

/// True when a result computed from `inputs` will be recorded.
bool will_record(std::span<const Tensor> inputs);

using GradMap = std::map<std::uint64_t, Tensor>;

/// Reverse-mode sweep from a scalar loss. Accumulates into the `grad` field
/// of every requires_grad leaf reached and returns those gradients keyed by
/// leaf id.
GradMap backward(const Tensor& loss);

}  // namespace stmoe
