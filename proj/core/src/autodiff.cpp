#include "rankmask/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rankmask/error.hpp"

namespace rankmask::ad {

namespace {

Graph& same_graph(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(op) + ": invalid Var");
  if (&a.graph() != &b.graph()) throw ContractError(std::string(op) + ": operands live on different graphs");
  return a.graph();
}

Graph& graph_of(Var a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid Var");
  return a.graph();
}

// C[m x n] += A[m x k] . B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m x k] += dC[m x n] . B[k x n]^T, through a transposed copy of B so the
// inner loop runs over contiguous memory.
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) {
      const double dv = dc[i];
      double* arow = da + i * k;
      for (std::size_t p = 0; p < k; ++p) arow[p] += dv * b[p];
    }
    return;
  }
  std::vector<double> bt(k * n);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    double* arow = da + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double dv = drow[j];
      const double* brow = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) arow[p] += dv * brow[p];
    }
  }
}

// dB[k x n] += A[m x k]^T . dC[m x n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* brow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * drow[j];
    }
  }
}

// Maps each element of `out` to the element of `b` it reads.
struct BroadcastPlan {
  enum class Kind { same, suffix, general } kind;
  std::size_t b_size = 0;
  std::vector<std::size_t> map;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::same: return i;
      case Kind::suffix: return i % b_size;
      default: return map[i];
    }
  }
};

BroadcastPlan plan_broadcast(const Shape& out, const Shape& b, const char* op) {
  BroadcastPlan plan;
  plan.b_size = shape_size(b);
  if (out == b) {
    plan.kind = BroadcastPlan::Kind::same;
    return plan;
  }
  if (b.size() > out.size()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b) + " into " + shape_string(out));
  }
  const std::size_t offset = out.size() - b.size();
  bool suffix = true;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const std::size_t bd = b[i];
    const std::size_t od = out[offset + i];
    if (bd != od && bd != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b) + " into " +
                           shape_string(out));
    }
    if (bd != od) suffix = false;
  }
  if (suffix) {
    plan.kind = BroadcastPlan::Kind::suffix;
    return plan;
  }
  plan.kind = BroadcastPlan::Kind::general;
  // Stride of b along each output axis; zero where b is broadcast.
  std::vector<std::size_t> stride(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = b.size(); i-- > 0;) {
    if (b[i] != 1) stride[offset + i] = s;
    s *= b[i];
  }
  const std::size_t n = shape_size(out);
  plan.map.resize(n);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t bi = 0;
  for (std::size_t e = 0; e < n; ++e) {
    plan.map[e] = bi;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      bi += stride[ax];
      if (idx[ax] < out[ax]) break;
      bi -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return plan;
}

std::size_t last_extent(const Shape& shape, const char* op) {
  if (shape.empty()) throw DimensionError(std::string(op) + ": needs rank >= 1");
  if (shape.back() == 0) throw DimensionError(std::string(op) + ": empty last axis in " + shape_string(shape));
  return shape.back();
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::bmm: return "bmm";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::tanh: return "tanh";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::softmax_rows: return "softmax_rows";
    case Op::log_softmax_rows: return "log_softmax_rows";
    case Op::nll_loss: return "nll_loss";
    case Op::gather_rows: return "gather_rows";
    case Op::reshape: return "reshape";
    case Op::concat: return "concat";
    case Op::zero_mask: return "zero_mask";
    case Op::select_row: return "select_row";
  }
  return "unknown";
}

Graph& Var::graph() const {
  if (!graph_) throw ContractError("Var is not attached to a graph");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(id_); }

Var Graph::leaf(Tensor value) {
  nodes_.push_back(Node{Op::leaf, std::move(value), {}, {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{Op::constant, std::move(value), {}, {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Op op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
  nodes_.push_back(Node{op, std::move(value), {}, std::move(inputs), needs ? std::move(backward) : BackwardFn{},
                        needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

void Graph::backward(Var loss) {
  if (!loss.valid() || &loss.graph() != this) throw ContractError("backward: loss is not on this graph");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
  for (Node& node : nodes_) node.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.size() == 0 || !node.backward) continue;
    node.backward(*this, i);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.size() == node.value.size() && node.value.size() > 0) return node.grad;
  return Tensor(node.value.shape(), 0.0);
}

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n}, 0.0);
  gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(Op::matmul, std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph& gr, std::size_t self) {
    const double* dc = gr.incoming_grad(self).data().data();
    if (gr.requires_grad(ia)) gemm_nt(dc, gr.value(ib).data().data(), gr.grad_buffer(ia).data().data(), m, k, n);
    if (gr.requires_grad(ib)) gemm_tn(gr.value(ia).data().data(), dc, gr.grad_buffer(ib).data().data(), m, k, n);
  });
}

Var bmm(Var a, Var b) {
  Graph& g = same_graph(a, b, "bmm");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1]) {
    throw DimensionError("bmm: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
  Tensor out(Shape{batch, m, n}, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.value().data().data() + t * m * k, b.value().data().data() + t * k * n, out.data().data() + t * m * n,
            m, k, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(Op::bmm, std::move(out), {ia, ib}, [ia, ib, batch, m, k, n](Graph& gr, std::size_t self) {
    const double* dc = gr.incoming_grad(self).data().data();
    for (std::size_t t = 0; t < batch; ++t) {
      if (gr.requires_grad(ia)) {
        gemm_nt(dc + t * m * n, gr.value(ib).data().data() + t * k * n, gr.grad_buffer(ia).data().data() + t * m * k,
                m, k, n);
      }
      if (gr.requires_grad(ib)) {
        gemm_tn(gr.value(ia).data().data() + t * m * k, dc + t * m * n, gr.grad_buffer(ib).data().data() + t * k * n,
                m, k, n);
      }
    }
  });
}

Var add(Var a, Var b) {
  Graph& g = same_graph(a, b, "add");
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), "add");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[plan(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(Op::add, std::move(out), {ia, ib}, [ia, ib, plan = std::move(plan)](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    if (gr.requires_grad(ia)) {
      auto da = gr.grad_buffer(ia).data();
      for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
    }
    if (gr.requires_grad(ib)) {
      auto db = gr.grad_buffer(ib).data();
      for (std::size_t i = 0; i < dc.size(); ++i) db[plan(i)] += dc[i];
    }
  });
}

Var mul(Var a, Var b) {
  Graph& g = same_graph(a, b, "mul");
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), "mul");
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[plan(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(Op::mul, std::move(out), {ia, ib}, [ia, ib, plan = std::move(plan)](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    const auto av = gr.value(ia).data();
    const auto bv2 = gr.value(ib).data();
    if (gr.requires_grad(ia)) {
      auto da = gr.grad_buffer(ia).data();
      for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * bv2[plan(i)];
    }
    if (gr.requires_grad(ib)) {
      auto db = gr.grad_buffer(ib).data();
      for (std::size_t i = 0; i < dc.size(); ++i) db[plan(i)] += dc[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Graph& g = graph_of(a, "scale");
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t ia = a.id();
  return g.record(Op::scale, std::move(out), {ia}, [ia, factor](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    auto da = gr.grad_buffer(ia).data();
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * factor;
  });
}

Var tanh(Var a) {
  Graph& g = graph_of(a, "tanh");
  Tensor out = a.value();
  for (double& v : out.data()) v = std::tanh(v);
  const std::size_t ia = a.id();
  return g.record(Op::tanh, std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    const auto y = gr.value(self).data();
    auto da = gr.grad_buffer(ia).data();
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i] * (1.0 - y[i] * y[i]);
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a, "sum");
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return g.record(Op::sum, Tensor::scalar(total), {ia}, [ia](Graph& gr, std::size_t self) {
    const double dc = gr.incoming_grad(self)[0];
    for (double& v : gr.grad_buffer(ia).data()) v += dc;
  });
}

Var mean(Var a) {
  Graph& g = graph_of(a, "mean");
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const std::size_t ia = a.id();
  return g.record(Op::mean, Tensor::scalar(total / static_cast<double>(n)), {ia},
                  [ia, n](Graph& gr, std::size_t self) {
                    const double dc = gr.incoming_grad(self)[0] / static_cast<double>(n);
                    for (double& v : gr.grad_buffer(ia).data()) v += dc;
                  });
}

Var softmax_rows(Var x) {
  Graph& g = graph_of(x, "softmax_rows");
  const std::size_t cols = last_extent(x.shape(), "softmax_rows");
  Tensor out = x.value();
  auto ov = out.data();
  const std::size_t rows = ov.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = ov.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= z;
  }
  const std::size_t ix = x.id();
  return g.record(Op::softmax_rows, std::move(out), {ix}, [ix, rows, cols](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    const auto y = gr.value(self).data();
    auto dx = gr.grad_buffer(ix).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += dc[o + j] * y[o + j];
      for (std::size_t j = 0; j < cols; ++j) dx[o + j] += y[o + j] * (dc[o + j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  Graph& g = graph_of(x, "log_softmax_rows");
  const std::size_t cols = last_extent(x.shape(), "log_softmax_rows");
  Tensor out = x.value();
  auto ov = out.data();
  const std::size_t rows = ov.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = ov.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) row[j] -= lse;
  }
  const std::size_t ix = x.id();
  return g.record(Op::log_softmax_rows, std::move(out), {ix}, [ix, rows, cols](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    const auto y = gr.value(self).data();
    auto dx = gr.grad_buffer(ix).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) total += dc[o + j];
      for (std::size_t j = 0; j < cols; ++j) dx[o + j] += dc[o + j] - std::exp(y[o + j]) * total;
    }
  });
}

Var nll_loss(Var log_probs, std::span<const std::size_t> labels) {
  Graph& g = graph_of(log_probs, "nll_loss");
  const Shape& s = log_probs.shape();
  if (s.empty() || s.size() > 2) throw DimensionError("nll_loss: expected rank 1 or 2, got " + shape_string(s));
  const std::size_t cols = last_extent(s, "nll_loss");
  const std::size_t rows = s.size() == 2 ? s[0] : 1;
  if (labels.size() != rows) {
    throw DimensionError("nll_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                         " rows");
  }
  const auto lp = log_probs.value().data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) {
      throw IndexError("nll_loss: label " + std::to_string(labels[r]) + " out of range for " +
                       std::to_string(cols) + " classes");
    }
    const double* row = lp.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    if (std::abs(mx + std::log(z)) > 1e-9) {
      throw ContractError("nll_loss: row " + std::to_string(r) + " is not a log-distribution");
    }
    total -= row[labels[r]];
  }
  std::vector<std::size_t> y(labels.begin(), labels.end());
  const std::size_t il = log_probs.id();
  return g.record(Op::nll_loss, Tensor::scalar(total / static_cast<double>(rows)), {il},
                  [il, rows, cols, y = std::move(y)](Graph& gr, std::size_t self) {
                    const double dc = gr.incoming_grad(self)[0] / static_cast<double>(rows);
                    auto dl = gr.grad_buffer(il).data();
                    for (std::size_t r = 0; r < rows; ++r) dl[r * cols + y[r]] -= dc;
                  });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  Graph& g = graph_of(table, "gather_rows");
  const Shape& s = table.shape();
  if (s.size() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_string(s));
  const std::size_t vocab = s[0], width = s[1];
  Tensor out(Shape{indices.size(), width}, 0.0);
  const auto tv = table.value().data();
  auto ov = out.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= vocab) {
      throw IndexError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + indices[r] * width, width, ov.data() + r * width);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return g.record(Op::gather_rows, std::move(out), {it},
                  [it, width, idx = std::move(idx)](Graph& gr, std::size_t self) {
                    const auto dc = gr.incoming_grad(self).data();
                    auto dt = gr.grad_buffer(it).data();
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      double* dst = dt.data() + idx[r] * width;
                      const double* src = dc.data() + r * width;
                      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                    }
                  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a, "reshape");
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return g.record(Op::reshape, std::move(out), {ia}, [ia](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    auto da = gr.grad_buffer(ia).data();
    for (std::size_t i = 0; i < dc.size(); ++i) da[i] += dc[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Graph& g = graph_of(parts[0], "concat");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> blocks;  // per-part contiguous block length
  for (const Var& p : parts) {
    same_graph(parts[0], p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: shape " + shape_string(s) + " does not match " + shape_string(first));
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  for (const Var& p : parts) blocks.push_back(p.shape()[axis] * inner);
  Tensor out(out_shape, 0.0);
  auto ov = out.data();
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto pv = parts[k].value().data();
      std::copy_n(pv.data() + o * blocks[k], blocks[k], ov.data() + pos);
      pos += blocks[k];
    }
  }
  std::vector<std::size_t> inputs = ids;
  return g.record(Op::concat, std::move(out), std::move(inputs),
                  [ids, blocks, outer](Graph& gr, std::size_t self) {
                    const auto dc = gr.incoming_grad(self).data();
                    std::size_t at = 0;
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t k = 0; k < ids.size(); ++k) {
                        if (gr.requires_grad(ids[k])) {
                          double* dst = gr.grad_buffer(ids[k]).data().data() + o * blocks[k];
                          for (std::size_t j = 0; j < blocks[k]; ++j) dst[j] += dc[at + j];
                        }
                        at += blocks[k];
                      }
                    }
                  });
}

Var zero_mask(Var x, std::size_t axis, std::span<const std::size_t> indices) {
  Graph& g = graph_of(x, "zero_mask");
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("zero_mask: axis out of range for " + shape_string(s));
  std::vector<char> keep(s[axis], 1);
  for (std::size_t i : indices) {
    if (i >= s[axis]) {
      throw IndexError("zero_mask: index " + std::to_string(i) + " out of range for extent " +
                       std::to_string(s[axis]));
    }
    keep[i] = 0;
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t mid = s[axis];
  Tensor out = x.value();
  auto ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < mid; ++m) {
      if (keep[m]) continue;
      std::fill_n(ov.data() + (o * mid + m) * inner, inner, 0.0);
    }
  }
  const std::size_t ix = x.id();
  return g.record(Op::zero_mask, std::move(out), {ix},
                  [ix, outer, mid, inner, keep = std::move(keep)](Graph& gr, std::size_t self) {
                    const auto dc = gr.incoming_grad(self).data();
                    auto dx = gr.grad_buffer(ix).data();
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t m = 0; m < mid; ++m) {
                        if (!keep[m]) continue;
                        const std::size_t base = (o * mid + m) * inner;
                        for (std::size_t j = 0; j < inner; ++j) dx[base + j] += dc[base + j];
                      }
                    }
                  });
}

Var select_row(Var x, std::size_t row) {
  Graph& g = graph_of(x, "select_row");
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("select_row: expected rank 2, got " + shape_string(s));
  if (row >= s[0]) {
    throw IndexError("select_row: row " + std::to_string(row) + " out of range for " + std::to_string(s[0]) +
                     " rows");
  }
  const std::size_t cols = s[1];
  const auto xv = x.value().data();
  Tensor out(Shape{1, cols}, std::vector<double>(xv.begin() + row * cols, xv.begin() + (row + 1) * cols));
  const std::size_t ix = x.id();
  return g.record(Op::select_row, std::move(out), {ix}, [ix, row, cols](Graph& gr, std::size_t self) {
    const auto dc = gr.incoming_grad(self).data();
    auto dx = gr.grad_buffer(ix).data();
    for (std::size_t j = 0; j < cols; ++j) dx[row * cols + j] += dc[j];
  });
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw ContractError("finite_difference_grad: step must be positive");
  Tensor grad(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace rankmask::ad
