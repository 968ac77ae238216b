#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is a dynamic tape: every op appends one node holding its value and
// a closure that pushes the node's gradient back to its inputs. Nodes are
// created in topological order, so backward is a single reverse sweep.
// Graphs are rebuilt per training step and are not shared between threads.

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "rankmask/tensor.hpp"

namespace rankmask::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return graph_ != nullptr; }
  Graph& graph() const;
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

enum class Op {
  leaf,
  constant,
  matmul,
  bmm,
  add,
  mul,
  scale,
  tanh,
  sum,
  mean,
  softmax_rows,
  log_softmax_rows,
  nll_loss,
  gather_rows,
  reshape,
  concat,
  zero_mask,
  select_row,
};

std::string_view op_name(Op op);

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  /// Fills gradients of `loss` with respect to every node that depends on a
  /// leaf. `loss` must hold exactly one element.
  void backward(Var loss);

  /// Gradient of the last backward() target with respect to `v`; zeros when
  /// `v` is not on a path from a leaf to the loss.
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id()).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id()).inputs; }

  // Op construction interface used by the free functions below.
  Var record(Op op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulator of node `id`, zero-initialised on first touch.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& incoming_grad(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Op op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
};

// Linear algebra
Var matmul(Var a, Var b);  ///< [m x k] . [k x n]
Var bmm(Var a, Var b);     ///< [B x m x k] . [B x k x n]

// Elementwise. `b` broadcasts into the shape of `a`: trailing-aligned, each
// extent of `b` equal to that of `a` or 1. The result has the shape of `a`.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var tanh(Var a);

// Reductions to a scalar.
Var sum(Var a);
Var mean(Var a);

// Normalisation over the last axis.
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

/// Mean over rows of -log_probs[row, labels[row]]. A rank-1 input is one row.
Var nll_loss(Var log_probs, std::span<const std::size_t> labels);

/// Rows of a [V x d] table selected by `indices`, giving [n x d].
Var gather_rows(Var table, std::span<const std::size_t> indices);

Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
/// Zeroes the given indices along `axis`.
Var zero_mask(Var x, std::size_t axis, std::span<const std::size_t> indices);
/// Row `row` of a rank-2 tensor as a [1 x n] tensor.
Var select_row(Var x, std::size_t row);

/// Central-difference estimate of df/dx, one coordinate at a time.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double step = 1e-5);

}  // namespace rankmask::ad
