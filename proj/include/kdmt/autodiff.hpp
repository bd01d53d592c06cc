#pragma once

// Minimal reverse-mode automatic differentiation.
//
// A Tape records every operation of one forward pass. Values live on the
// tape; a Var is a lightweight handle (tape + node id). The tape is rebuilt
// for each forward pass and is confined to the thread that owns it.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "kdmt/tensor.hpp"

namespace kdmt::ad {

/// A trainable tensor with its gradient accumulator.
struct Parameter {
  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  // Gradient after Tape::backward; empty tensor when the node was unreachable.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called once during backward with the id of the node being processed.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Refers to an external tensor without copying; it must outlive the tape.
  Var constant_view(const Tensor& value);
  // Leaf that requires a gradient (readable through Var::grad).
  Var variable(Tensor value);
  // Leaf bound to a parameter. backward() accumulates into param.grad.
  // Non-trainable parameters enter as constants.
  Var parameter(Parameter& param, bool trainable = true);

  // Appends an op result. The backward rule is kept only when some input
  // requires a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  // Requires a single-element loss on this tape. Gradients are recomputed
  // from scratch on every call and then added into bound parameters.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Output gradient of a node; empty if nothing flowed into it.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  // Gradient accumulator of an input, allocated as zeros on first use.
  Tensor& grad_accumulator(std::size_t id);

  // Gradient buffer of an input. When `fresh` is true nothing has flowed in
  // yet and the contents are unspecified: the caller must assign, not add.
  struct GradSlot {
    Tensor& grad;
    bool fresh;
  };
  GradSlot grad_slot(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
};

// Rows/keys of a padded attention batch laid out as [batch*len x d_model].
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  bool causal = false;
  // batch*key_len flags, true = key position is padding. Empty = no padding.
  std::vector<bool> key_padding;
};

inline constexpr double kMaskValue = -1e9;

Var matmul(Var a, Var b);
// x[N x in] * weight[in x out] + bias[out], fused.
Var linear(Var x, Var weight, Var bias);
Var add(Var a, Var b);
// x[N x d] + bias[d] broadcast over rows.
Var add_bias(Var x, Var bias);
Var multiply(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
// Numerically stable softmax along `axis`.
Var softmax(Var x, std::size_t axis);
// Log-softmax along the last axis of a matrix.
Var log_softmax(Var x);
// Token-averaged NLL; rows whose target equals pad_id are excluded.
Var cross_entropy(Var logits, std::span<const int> targets, int pad_id);
// Gathers rows of `table`; backward scatter-adds.
Var embedding_lookup(Var table, std::span<const int> ids);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat(std::span<const Var> parts, std::size_t axis);
// Sets masked entries to `value` (pre-softmax masking uses kMaskValue).
Var mask_fill(Var x, const std::vector<bool>& mask, double value = kMaskValue);
// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, std::mt19937_64& rng);
// Multi-head scaled dot-product attention over a padded batch.
// q: [B*Tq x d], k, v: [B*Tk x d]. Masked scores use kMaskValue.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

}  // namespace kdmt::ad
