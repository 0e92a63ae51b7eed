#include "stmoe/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace stmoe {

namespace {
thread_local Tape* t_active_tape = nullptr;
}

TapeScope::TapeScope(Tape& tape) : previous_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = previous_; }

Tape* active_tape() { return t_active_tape; }

bool will_record(std::span<const Tensor> inputs) {
  if (t_active_tape == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

Tensor make_result(std::string_view op, std::span<const Tensor> inputs, Shape shape, std::vector<double> values,
                   BackwardFn backward) {
  if (precision() == Precision::kFloat32) {
    for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
  }
  Tensor out(std::move(shape), std::move(values), false);
  if (!will_record(inputs)) return out;

  auto& state = t_active_tape->state();
  TapeNode node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const auto& t : inputs) node.inputs.push_back(t.impl());
  node.output = out.impl();
  node.backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->tape = state;
  out.impl()->node = state->nodes.size();
  state->nodes.push_back(std::move(node));
  return out;
}

GradMap backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss tensor");
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  const auto& root = loss.impl();
  auto state = root->tape.lock();
  if (!state || root->node == detail::kNoNode) {
    throw std::logic_error("backward: loss was not produced under an active tape (detached)");
  }

  std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
  grads[root.get()] = {1.0};

  BackwardContext ctx;
  for (std::size_t i = root->node + 1; i-- > 0;) {
    auto& node = state->nodes[i];
    auto it = grads.find(node.output.get());
    if (it == grads.end()) continue;
    std::vector<double> grad_out = std::move(it->second);
    grads.erase(it);

    ctx.grad_out = grad_out;
    ctx.out = node.output->data;
    ctx.in.clear();
    ctx.grad_in.clear();
    for (const auto& input : node.inputs) {
      ctx.in.emplace_back(input->data);
      if (input->requires_grad) {
        auto& buf = grads[input.get()];
        if (buf.empty()) buf.assign(input->data.size(), 0.0);
        ctx.grad_in.push_back(&buf);
      } else {
        ctx.grad_in.push_back(nullptr);
      }
    }
    node.backward(ctx);
  }

  GradMap result;
  for (auto& [impl, g] : grads) {
    if (impl->node != detail::kNoNode || !impl->requires_grad) continue;
    auto* leaf = const_cast<detail::TensorImpl*>(impl);
    if (leaf->grad.empty()) {
      leaf->grad = std::move(g);
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) leaf->grad[k] += g[k];
    }
    result.emplace(leaf->id, Tensor(leaf->shape, leaf->grad, false));
  }
  return result;
}

}  // namespace stmoe
