#include <algorithm>

#include "kdmt/autodiff.hpp"
#include "kdmt/error.hpp"

namespace kdmt::ad {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& Tape::value(std::size_t id) const {
  const Node& node = nodes_[id];
  return node.external ? *node.external : node.value;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_view(const Tensor& value) {
  nodes_.push_back(Node{{}, &value, {}, false, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, {}, true, {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& param, bool trainable) {
  if (!trainable) return constant_view(param.value);
  nodes_.push_back(Node{{}, &param.value, {}, true, {}, &param});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs,
                 BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this)
      throw ContractError("operation mixes variables from different tapes");
    needs = needs || requires_grad(in.id());
  }
  Node node{std::move(value), nullptr, {}, needs, {}, nullptr};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_accumulator(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(value(id).shape(), 0.0);
  return node.grad;
}

Tape::GradSlot Tape::grad_slot(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) {
    node.grad = Tensor::uninitialized(value(id).shape());
    return {node.grad, true};
  }
  return {node.grad, false};
}

void Tape::backward(Var loss) {
  if (!loss.valid() || &loss.tape() != this)
    throw ContractError("backward: loss is not recorded on this tape");
  if (loss.value().size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        to_string(loss.shape()));

  for (Node& node : nodes_) node.grad = Tensor();
  if (!requires_grad(loss.id())) return;
  nodes_[loss.id()].grad = Tensor(loss.shape(), 1.0);

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, id);
  }

  for (Node& node : nodes_) {
    if (!node.param || node.grad.empty()) continue;
    auto dst = node.param->grad.data();
    auto src = node.grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

}  // namespace kdmt::ad
