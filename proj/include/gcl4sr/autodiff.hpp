#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcl4sr/error.hpp"
#include "gcl4sr/rng.hpp"
#include "gcl4sr/tensor.hpp"

namespace gcl4sr::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients produced by one backward pass.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  /// Gradient of the loss w.r.t. `v`; zeros when `v` is not on a path to it.
  Tensor operator[](const Var& v) const {
    const Tensor& g = grads_.at(v.id());
    if (g.empty()) return Tensor(shapes_.at(v.id()));
    return g;
  }

 private:
  std::vector<Tensor> grads_;
  std::vector<Shape> shapes_;
};

/// Ordered record of operations. Node ids are assigned in creation order,
/// which is a topological order, so backward is a single reverse sweep.
class Tape {
 public:
  // Receives the gradient flowing into the node's output and pushes
  // contributions to its inputs via Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), true, {}, "leaf"); }
  Var constant(Tensor value) { return push(std::move(value), false, {}, "constant"); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records an op result. `backward` is dropped when no input needs grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, const char* op) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward), op);
  }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* op) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (&v.tape() != this) throw Error(std::string(op) + ": input recorded on a different tape");
      needs = needs || requires_grad(v.id());
    }
    Var out = push(std::move(value), needs, {}, op);
    if (needs) nodes_.back().backward = std::move(backward);
    return out;
  }

  /// Adds `g` into the gradient slot of node `id` (no-op for constants).
  void accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    if (g.shape() != nodes_[id].value.shape()) throw ShapeError("accumulate: gradient shape mismatch");
    Tensor& slot = grads_[id];
    if (slot.empty()) {
      slot = g;
    } else {
      slot += g;
    }
  }

  Tensor& grad_slot(std::size_t id) {
    Tensor& slot = grads_[id];
    if (slot.empty()) slot = Tensor(nodes_[id].value.shape());
    return slot;
  }

  Gradients backward(const Var& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + to_string(loss.value().shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id()] = Tensor(loss.value().shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (grads_[i].empty() || !nodes_[i].backward) continue;
      // Inputs always have smaller ids, so slot i is not written while read.
      const Tensor& g = grads_[i];
      nodes_[i].backward(*this, g);
    }
    std::vector<Shape> shapes;
    shapes.reserve(nodes_.size());
    for (const auto& n : nodes_) shapes.push_back(n.value.shape());
    return Gradients(std::exchange(grads_, {}), std::move(shapes));
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward, const char* op) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// out (n x m) += a (n x k) * b (k x m)
inline void gemm_nn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * m;
      double* crow = C + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// out (n x m) += a (n x k) * b^T, b is (m x k)
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = A + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = B + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * m + j] += s;
    }
  }
}

// out (k x m) += a^T * b, a is (n x k), b is (n x m)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      double* crow = C + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

}  // namespace detail

inline constexpr double kLogFloor = 1e-12;
inline constexpr double kLayerNormEps = 1e-8;

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul");
  detail::require_rank2(B, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: " + to_string(A.shape()) + " x " + to_string(B.shape()));
  }
  Tensor out = Tensor::zeros(A.rows(), B.cols());
  detail::gemm_nn(A, B, out);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::gemm_nt(g, t.value(ib), t.grad_slot(ia));
    if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia), g, t.grad_slot(ib));
  }, "matmul");
}

/// a * b^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul_nt");
  detail::require_rank2(B, "matmul_nt");
  if (A.cols() != B.cols()) {
    throw ShapeError("matmul_nt: " + to_string(A.shape()) + " x " + to_string(B.shape()) + "^T");
  }
  Tensor out = Tensor::zeros(A.rows(), B.rows());
  detail::gemm_nt(A, B, out);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) detail::gemm_nn(g, t.value(ib), t.grad_slot(ia));
    if (t.requires_grad(ib)) detail::gemm_tn(g, t.value(ia), t.grad_slot(ib));
  }, "matmul_nt");
}

inline Var transpose(const Var& x) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "transpose");
  Tensor out = Tensor::zeros(X.cols(), X.rows());
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(j, i) = X(i, j);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(j, i) += g(i, j);
  }, "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

/// Broadcast add of a 1 x m row to every row of an n x m matrix.
inline Var add_row(const Var& x, const Var& row) {
  const Tensor& X = x.value();
  const Tensor& R = row.value();
  detail::require_rank2(X, "add_row");
  if (R.rows() != 1 || R.cols() != X.cols()) {
    throw ShapeError("add_row: " + to_string(X.shape()) + " + " + to_string(R.shape()));
  }
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += R[j];
  const std::size_t ix = x.id(), ir = row.id();
  return x.tape().record(std::move(out), {x, row}, [ix, ir](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (t.requires_grad(ir)) {
      Tensor& gr = t.grad_slot(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
    }
  }, "add_row");
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_slot(ia);
      const Tensor& B = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_slot(ib);
      const Tensor& A = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  }, "mul");
}

/// Scales each row i of an n x m matrix by column-vector entry col(i, 0).
inline Var mul_col(const Var& x, const Var& col) {
  const Tensor& X = x.value();
  const Tensor& C = col.value();
  detail::require_rank2(X, "mul_col");
  if (C.cols() != 1 || C.rows() != X.rows()) {
    throw ShapeError("mul_col: " + to_string(X.shape()) + " * " + to_string(C.shape()));
  }
  Tensor out = X;
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) *= C[i];
  const std::size_t ix = x.id(), ic = col.id();
  return x.tape().record(std::move(out), {x, col}, [ix, ic](Tape& t, const Tensor& g) {
    const Tensor& X = t.value(ix);
    const Tensor& C = t.value(ic);
    if (t.requires_grad(ix)) {
      Tensor& gx = t.grad_slot(ix);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * C[i];
    }
    if (t.requires_grad(ic)) {
      Tensor& gc = t.grad_slot(ic);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j) * X(i, j);
        gc[i] += s;
      }
    }
  }, "mul_col");
}

inline Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= s;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, s](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  }, "scale");
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Concatenation along the last axis.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros(n, total);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const Tensor& P = p.value();
    for (std::size_t i = 0; i < n; ++i)
      std::copy(P.row_span(i).begin(), P.row_span(i).end(), out.row_span(i).begin() + static_cast<std::ptrdiff_t>(off));
    off += P.cols();
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts.front().tape().record(std::move(out), parts, [ids, offsets](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gp = t.grad_slot(ids[k]);
      for (std::size_t i = 0; i < gp.rows(); ++i)
        for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, offsets[k] + j);
    }
  }, "concat_cols");
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_rows");
    if (p.cols() != m) throw ShapeError("concat_rows: column count mismatch");
    total += p.rows();
  }
  Tensor out = Tensor::zeros(total, m);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().values().begin(), p.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(off * m));
    off += p.rows();
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts.front().tape().record(std::move(out), parts, [ids, offsets](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gp = t.grad_slot(ids[k]);
      const std::size_t base = offsets[k] * g.cols();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[base + i];
    }
  }, "concat_rows");
}

/// Row lookup: out[r] = table[indices[r]] (embedding lookup).
inline Var gather_rows(const Var& table, std::span<const std::size_t> indices) {
  const Tensor& T = table.value();
  detail::require_rank2(T, "gather_rows");
  Tensor out = Tensor::zeros(indices.size(), T.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= T.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " + to_string(T.shape()));
    }
    std::copy(T.row_span(indices[r]).begin(), T.row_span(indices[r]).end(), out.row_span(r).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table}, [it, idx = std::move(idx)](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_slot(it);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = gt.row_span(idx[r]);
      auto src = g.row_span(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }, "gather_rows");
}

/// Weighted edge entry for `propagate`: out[target] += weight * x[source].
struct WeightedEdge {
  std::size_t target;
  std::size_t source;
  double weight;
};

/// Sparse-adjacency product A * x with A given as an edge list; rows of the
/// output with no incoming edge are zero.
inline Var propagate(const Var& x, std::vector<WeightedEdge> edges, std::size_t out_rows) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "propagate");
  Tensor out = Tensor::zeros(out_rows, X.cols());
  for (const auto& e : edges) {
    if (e.target >= out_rows || e.source >= X.rows()) throw ShapeError("propagate: edge endpoint out of range");
    auto dst = out.row_span(e.target);
    auto src = X.row_span(e.source);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += e.weight * src[j];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, edges = std::move(edges)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (const auto& e : edges) {
      auto dst = gx.row_span(e.source);
      auto src = g.row_span(e.target);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += e.weight * src[j];
    }
  }, "propagate");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (double& v : gx.values()) v += g[0];
  }, "sum");
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / n);
}

/// Mean over the rows selected by `mask` (all rows when absent) -> 1 x m.
inline Var masked_mean_rows(const Var& x, const std::vector<bool>* mask = nullptr) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "masked_mean_rows");
  if (mask && mask->size() != X.rows()) throw ShapeError("masked_mean_rows: mask length mismatch");
  std::size_t count = 0;
  for (std::size_t i = 0; i < X.rows(); ++i) count += (!mask || (*mask)[i]) ? 1 : 0;
  if (count == 0) throw ShapeError("masked_mean_rows: every row is masked");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<bool> keep(X.rows(), true);
  if (mask) keep = *mask;
  Tensor out = Tensor::zeros(1, X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    if (!keep[i]) continue;
    for (std::size_t j = 0; j < X.cols(); ++j) out[j] += X(i, j) * inv;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, keep = std::move(keep), inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < gx.rows(); ++i) {
      if (!keep[i]) continue;
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g[j] * inv;
    }
  }, "masked_mean_rows");
}

/// Picks x(i, cols[i]) for each row -> n x 1.
inline Var pick(const Var& x, std::span<const std::size_t> cols) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "pick");
  if (cols.size() != X.rows()) throw ShapeError("pick: one column index per row required");
  Tensor out = Tensor::zeros(X.rows(), 1);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    if (cols[i] >= X.cols()) throw ShapeError("pick: column index out of range");
    out[i] = X(i, cols[i]);
  }
  std::vector<std::size_t> c(cols.begin(), cols.end());
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c = std::move(c)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < c.size(); ++i) gx(i, c[i]) += g[i];
  }, "pick");
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var sigmoid(const Var& x) {
  Tensor out = detail::map(x.value(), [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  const std::size_t ix = x.id();
  Tensor y = out;
  return x.tape().record(std::move(out), {x}, [ix, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  }, "sigmoid");
}

inline Var relu(const Var& x) {
  Tensor out = detail::map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    const Tensor& X = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += X[i] > 0.0 ? g[i] : 0.0;
  }, "relu");
}

inline Var exp(const Var& x) {
  Tensor out = detail::map(x.value(), [](double v) { return std::exp(v); });
  Tensor y = out;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  }, "exp");
}

/// Natural log with its argument floored at kLogFloor; the floor region has
/// zero gradient.
inline Var log(const Var& x) {
  Tensor out = detail::map(x.value(), [](double v) { return std::log(std::max(v, kLogFloor)); });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    const Tensor& X = t.value(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += X[i] > kLogFloor ? g[i] / X[i] : 0.0;
  }, "log");
}

/// Row-wise softmax over the last axis, max-subtracted. Entries where
/// `mask(i, j)` is false get probability exactly 0.
inline Var softmax_rows(const Var& x, const std::vector<bool>* mask = nullptr) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "softmax_rows");
  const std::size_t n = X.rows(), m = X.cols();
  if (mask && mask->size() != n * m) throw ShapeError("softmax_rows: mask size mismatch");
  auto allowed = [&](std::size_t i, std::size_t j) { return !mask || (*mask)[i * m + j]; };
  Tensor out = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j)
      if (allowed(i, j)) mx = std::max(mx, X(i, j));
    if (mx == -INFINITY) throw ShapeError("softmax_rows: row " + std::to_string(i) + " fully masked");
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (!allowed(i, j)) continue;
      out(i, j) = std::exp(X(i, j) - mx);
      s += out(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= s;
  }
  Tensor y = out;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  }, "softmax_rows");
}

/// Per-row layer normalization with learned 1 x m gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = kLayerNormEps) {
  const Tensor& X = x.value();
  detail::require_rank2(X, "layer_norm");
  const std::size_t n = X.rows(), m = X.cols();
  if (gain.value().size() != m || bias.value().size() != m) throw ShapeError("layer_norm: gain/bias width mismatch");
  Tensor xhat = Tensor::zeros(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += X(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) xhat(i, j) = (X(i, j) - mu) * inv_std[i];
  }
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  Tensor out = Tensor::zeros(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) = xhat(i, j) * G[j] + B[j];
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const std::size_t n = xhat.rows(), m = xhat.cols();
        const Tensor& G = t.value(ig);
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_slot(ig);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gg[j] += g(i, j) * xhat(i, j);
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_slot(ib);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += g(i, j);
        }
        if (t.requires_grad(ix)) {
          Tensor& gx = t.grad_slot(ix);
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = g(i, j) * G[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d *= inv_m;
            mean_dx *= inv_m;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = g(i, j) * G[j];
              gx(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        }
      },
      "layer_norm");
}

/// Inverted dropout; the identity when `train` is false or p == 0.
inline Var dropout(const Var& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: probability must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(x.value().shape());
  for (double& v : mask.values()) v = rng.bernoulli(p) ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, mask = std::move(mask)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  }, "dropout");
}

// ---------------------------------------------------------------------------
// Similarities and distances

namespace detail {
// Row norms are clamped from below so all-zero rows (e.g. a dead ReLU
// output) give similarity 0 instead of dividing by zero.
inline constexpr double kCosineNormFloor = 1e-8;
inline double clamped_norm(double squared) { return std::max(std::sqrt(squared), kCosineNormFloor); }
// 1/|x|^2 where the norm is live, 0 where the floor is active.
inline double norm_slope(double norm) { return norm > kCosineNormFloor ? 1.0 / (norm * norm) : 0.0; }
}  // namespace detail

/// Cosine similarity of aligned row pairs -> n x 1.
inline Var cosine_rows(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_same_shape(A, B, "cosine_rows");
  detail::require_rank2(A, "cosine_rows");
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out = Tensor::zeros(n, 1);
  std::vector<double> na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      dot += A(i, j) * B(i, j);
      sa += A(i, j) * A(i, j);
      sb += B(i, j) * B(i, j);
    }
    na[i] = detail::clamped_norm(sa);
    nb[i] = detail::clamped_norm(sb);
    out[i] = dot / (na[i] * nb[i]);
  }
  Tensor c = out;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, c = std::move(c), na = std::move(na), nb = std::move(nb)](Tape& t, const Tensor& g) {
                           const Tensor& A = t.value(ia);
                           const Tensor& B = t.value(ib);
                           const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
                           for (std::size_t i = 0; i < A.rows(); ++i) {
                             const double inv = 1.0 / (na[i] * nb[i]);
                             const double self_a = detail::norm_slope(na[i]), self_b = detail::norm_slope(nb[i]);
                             for (std::size_t j = 0; j < A.cols(); ++j) {
                               if (ga_on) t.grad_slot(ia)(i, j) += g[i] * (B(i, j) * inv - c[i] * A(i, j) * self_a);
                               if (gb_on) t.grad_slot(ib)(i, j) += g[i] * (A(i, j) * inv - c[i] * B(i, j) * self_b);
                             }
                           }
                         },
                         "cosine_rows");
}

/// All-pairs cosine similarity between rows of a (n x d) and b (m x d) -> n x m.
inline Var cosine_matrix(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "cosine_matrix");
  detail::require_rank2(B, "cosine_matrix");
  if (A.cols() != B.cols()) throw ShapeError("cosine_matrix: feature width mismatch");
  auto norms = [](const Tensor& X) {
    std::vector<double> r(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) {
      double s = 0.0;
      for (double v : X.row_span(i)) s += v * v;
      r[i] = detail::clamped_norm(s);
    }
    return r;
  };
  std::vector<double> na = norms(A), nb = norms(B);
  Tensor out = Tensor::zeros(A.rows(), B.rows());
  detail::gemm_nt(A, B, out);
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < B.rows(); ++j) out(i, j) /= na[i] * nb[j];
  Tensor c = out;
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, c = std::move(c), na = std::move(na), nb = std::move(nb)](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        const std::size_t d = A.cols();
        // d c_ij / d a_i = b_j / (|a_i||b_j|) - c_ij a_i / |a_i|^2
        if (t.requires_grad(ia)) {
          Tensor& ga = t.grad_slot(ia);
          for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < B.rows(); ++j) {
              const double w = g(i, j);
              if (w == 0.0) continue;
              const double inv = 1.0 / (na[i] * nb[j]);
              const double self = c(i, j) * detail::norm_slope(na[i]);
              for (std::size_t k = 0; k < d; ++k) ga(i, k) += w * (B(j, k) * inv - self * A(i, k));
            }
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_slot(ib);
          for (std::size_t i = 0; i < A.rows(); ++i)
            for (std::size_t j = 0; j < B.rows(); ++j) {
              const double w = g(i, j);
              if (w == 0.0) continue;
              const double inv = 1.0 / (na[i] * nb[j]);
              const double self = c(i, j) * detail::norm_slope(nb[j]);
              for (std::size_t k = 0; k < d; ++k) gb(j, k) += w * (A(i, k) * inv - self * B(j, k));
            }
        }
      },
      "cosine_matrix");
}

/// Squared Euclidean distances between all row pairs -> n x m.
inline Var pairwise_sqdist(const Var& a, const Var& b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "pairwise_sqdist");
  detail::require_rank2(B, "pairwise_sqdist");
  if (A.cols() != B.cols()) throw ShapeError("pairwise_sqdist: feature width mismatch");
  Tensor out = Tensor::zeros(A.rows(), B.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < B.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < A.cols(); ++k) {
        const double diff = A(i, k) - B(j, k);
        s += diff * diff;
      }
      out(i, j) = s;
    }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < B.rows(); ++j) {
        const double w = 2.0 * g(i, j);
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < A.cols(); ++k) {
          const double diff = A(i, k) - B(j, k);
          if (ga_on) t.grad_slot(ia)(i, k) += w * diff;
          if (gb_on) t.grad_slot(ib)(j, k) -= w * diff;
        }
      }
  }, "pairwise_sqdist");
}

}  // namespace gcl4sr::ad
