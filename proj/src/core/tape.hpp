// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "core/tensor.hpp"

namespace trydit::ad {

// Additive-mask stand-in for -inf. Finite so that score arithmetic never
// produces NaN from (-inf) - (-inf); masked positions are hard-zeroed
// after the softmax instead.
constexpr double kMaskedSentinel = std::numeric_limits<double>::lowest() / 2;

inline bool is_masked_logit(double m) { return m <= kMaskedSentinel * 0.5; }

class Tape;

// Handle to a node on a tape. Plain index; only meaningful together with
// the tape that produced it.
struct Var {
  std::int32_t idx = -1;
  Var() = default;
  explicit Var(std::int32_t i) : idx(i) {}
  bool valid() const { return idx >= 0; }
};

using BackwardFn = std::function<void(Tape&, const Tensor& out_grad, Var out)>;

// Reverse-mode tape. Values are immutable once recorded; backward walks
// nodes in exact reverse recording order. One backward per tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& val(Var v) const;
  bool requires_grad(Var v) const;
  bool has_grad(Var v) const;
  const Tensor& grad(Var v) const;  // throws if no grad was accumulated
  Tensor grad_or_zeros(Var v) const;

  void backward(Var scalar_loss);

  // Low-level node creation; ops outside this class (e.g. rotary
  // encoding) build on it. requires_grad of the result is the OR over
  // parents; fn is dropped entirely when nothing upstream needs grads.
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
  void accum_grad(Var v, const Tensor& g);  // no-op for non-grad nodes

  std::size_t size() const { return nodes_.size(); }
  std::int64_t fully_masked_rows() const { return fully_masked_rows_; }

  // ---- ops ----
  Var add(Var a, Var b);  // same shape, or b broadcast as a length-cols row
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise, same broadcast rule as add
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var matmul(Var a, Var b);
  Var transpose(Var a);  // rank-2
  Var reshape(Var a, Shape s);
  Var concat(const std::vector<Var>& parts, int axis);
  Var slice(Var a, int axis, std::int64_t start, std::int64_t len);
  Var silu(Var a);
  Var rms_norm(Var a, double eps, Var gain);  // over last dim
  Var softmax_lastdim(Var a);
  Var softmax_lastdim(Var a, Var additive_mask);  // mask same shape, entries 0 or sentinel
  Var sum_all(Var a);
  Var mean_all(Var a);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_set = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var softmax_impl(Var a, Var mask, bool has_mask);

  std::vector<Node> nodes_;
  std::int64_t fully_masked_rows_ = 0;
  bool backward_done_ = false;
};

}  // namespace trydit::ad
