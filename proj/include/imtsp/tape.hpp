#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "imtsp/params.hpp"
#include "imtsp/tensor.hpp"

namespace imtsp {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

/// Records a computation for reverse-mode differentiation.
///
/// Every node keeps its forward value, its parents, a backward rule that
/// pushes the node's adjoint into its parents, and a tangent rule used by
/// the forward-mode Jacobian-vector product. Leaves are either constants or
/// parameters bound to a ParamStore entry. A tape is single-threaded; run
/// independent samples on independent tapes.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;
  using TangentFn = std::function<Tensor(const Tape&, std::size_t, const std::vector<Tensor>&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    TangentFn tangent;
    bool requires_grad = false;
    bool non_smooth = false;
    const ParamStore* store = nullptr;
    std::size_t param_index = 0;
    const char* op = "";
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.op = "constant";
    check_finite(n.value, n.op);
    return push_node(std::move(n));
  }

  /// Leaf bound to `store[name]`. The store must outlive every backward or
  /// jvp call that refers to it.
  Var param(const ParamStore& store, std::string_view name) {
    Node n;
    n.param_index = store.index_of(name);
    n.value = store.tensor(n.param_index);
    n.store = &store;
    n.requires_grad = true;
    n.op = "param";
    return push_node(std::move(n));
  }

  /// Appends an interior node. Used by the op library below.
  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, TangentFn tangent,
           const char* op) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = op;
    for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.tangent = std::move(tangent);
    return push_node(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(std::size_t id) const { return force_all_ || nodes_[id].requires_grad; }

  void mark_non_smooth(std::size_t id) { nodes_[id].non_smooth = true; }
  bool has_non_smooth() const {
    return std::any_of(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.non_smooth; });
  }

  /// Adjoint buffer of a node, zero-initialised on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }
  const Tensor& grad_if_any(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse sweep from a scalar output; gradients for every listed store.
  /// Parameters of a store that never reached the output get zero.
  std::vector<GradientSample> backward(Var out, std::initializer_list<const ParamStore*> stores) {
    sweep(out);
    std::vector<GradientSample> result;
    for (const ParamStore* s : stores) result.push_back(collect(*s));
    return result;
  }

  GradientSample backward(Var out, const ParamStore& wrt) { return std::move(backward(out, {&wrt})[0]); }

  /// Gradient of a scalar output with respect to an arbitrary recorded node.
  Tensor backward_to(Var out, Var wrt) {
    sweep(out, /*all_nodes=*/true);
    const Tensor& g = nodes_[wrt.id].grad;
    return g.empty() ? Tensor(nodes_[wrt.id].value.shape(), 0.0) : g;
  }

  /// Forward-mode Jacobian-vector product: propagates `tangent` (flat,
  /// aligned with `store`) through the recorded graph and returns the
  /// tangents of `outputs`. Leaves of other stores have zero tangent.
  std::vector<Tensor> jvp(const ParamStore& store, std::span<const double> tangent,
                          std::span<const Var> outputs) const {
    if (tangent.size() != store.size())
      throw ShapeError("jvp: tangent length " + std::to_string(tangent.size()) + " vs store size " +
                       std::to_string(store.size()));
    std::size_t last = 0;
    for (const Var& v : outputs) last = std::max(last, v.id);
    std::vector<Tensor> tangents(last + 1);
    for (std::size_t id = 0; id <= last; ++id) {
      const Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      if (n.store) {
        if (n.store != &store) continue;
        const std::size_t off = store.offset(n.param_index);
        std::vector<double> t(tangent.begin() + static_cast<std::ptrdiff_t>(off),
                              tangent.begin() + static_cast<std::ptrdiff_t>(off + n.value.size()));
        tangents[id] = Tensor(n.value.shape(), std::move(t));
        continue;
      }
      bool any = false;
      for (std::size_t p : n.parents) any = any || !tangents[p].empty();
      if (any && n.tangent) tangents[id] = n.tangent(*this, id, tangents);
    }
    std::vector<Tensor> out;
    for (const Var& v : outputs)
      out.push_back(tangents[v.id].empty() ? Tensor(nodes_[v.id].value.shape(), 0.0) : tangents[v.id]);
    return out;
  }

 private:
  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  static void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                                            shape_string(t.shape()));
  }

  void sweep(Var out, bool all_nodes = false) {
    if (out.tape != this) throw ArgumentError("backward: output belongs to another tape");
    if (nodes_[out.id].value.size() != 1)
      throw ShapeError("backward: output of shape " + shape_string(nodes_[out.id].value.shape()) +
                       " is not scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    force_all_ = all_nodes;
    grad(out.id)[0] = 1.0;
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      if (!n.requires_grad && !all_nodes) continue;
      n.backward(*this, id);
    }
    force_all_ = false;
  }

  GradientSample collect(const ParamStore& store) const {
    GradientSample g(store.layout());
    for (const Node& n : nodes_) {
      if (n.store != &store || n.grad.empty()) continue;
      const std::size_t off = store.offset(n.param_index);
      for (std::size_t k = 0; k < n.grad.size(); ++k) g.values[off + k] += n.grad[k];
    }
    return g;
  }

  std::vector<Node> nodes_;
  bool force_all_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// =============================================================================
// Dense kernels
// =============================================================================

namespace detail {

/// C (n×m) += op(A) · op(B), where op transposes when the flag is set.
inline void gemm_acc(const Tensor& A, bool ta, const Tensor& B, bool tb, Tensor& C) {
  const std::size_t n = C.rows(), m = C.cols();
  const std::size_t k = ta ? A.rows() : A.cols();
  const std::size_t ac = A.cols(), bc = B.cols();
  const double* a = A.data().data();
  const double* b = B.data().data();
  double* c = C.data().data();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = a[i * ac + l];
        if (av == 0.0) continue;
        const double* brow = b + l * bc;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double* arow = a + i * ac;
        const double* brow = b + j * bc;
        double acc = 0.0;
        for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
        c[i * m + j] += acc;
      }
  } else if (ta && !tb) {
    for (std::size_t l = 0; l < k; ++l)
      for (std::size_t i = 0; i < n; ++i) {
        const double av = a[l * ac + i];
        if (av == 0.0) continue;
        const double* brow = b + l * bc;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t l = 0; l < k; ++l) acc += a[l * ac + i] * b[j * bc + l];
        c[i * m + j] += acc;
      }
  }
}

inline void require_rank2(const Tensor& t, const char* op, const char* what) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": " + what + " must be a matrix, got " + shape_string(t.shape()));
}

enum class Broadcast { same, row, scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (a.shape().size() == 2 && b.rows() == 1 && b.cols() == a.cols() && b.size() == a.cols())
    return Broadcast::row;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

/// Reduces an adjoint of a's shape back to b's (broadcast) shape.
inline void reduce_into(const Tensor& g, Broadcast kind, Tensor& gb) {
  switch (kind) {
    case Broadcast::same:
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      break;
    case Broadcast::scalar: {
      double acc = 0.0;
      for (double v : g.vec()) acc += v;
      gb[0] += acc;
      break;
    }
    case Broadcast::row:
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g.at(r, c);
      break;
  }
}

inline double bcast(const Tensor& b, Broadcast kind, std::size_t flat, std::size_t cols) {
  switch (kind) {
    case Broadcast::same: return b[flat];
    case Broadcast::scalar: return b[0];
    case Broadcast::row: return b[flat % cols];
  }
  return 0.0;
}

inline Tensor expand(const Tensor& b, Broadcast kind, const Shape& shape) {
  Tensor out(shape);
  const std::size_t cols = out.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bcast(b, kind, i, cols);
  return out;
}

}  // namespace detail

// =============================================================================
// Operations
// =============================================================================

/// a · b, or a · bᵀ when `transpose_b` is set. Both operands are matrices.
inline Var matmul(Var a, Var b, bool transpose_b = false) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "matmul", "lhs");
  detail::require_rank2(B, "matmul", "rhs");
  const std::size_t k_b = transpose_b ? B.cols() : B.rows();
  if (A.cols() != k_b)
    throw ShapeError("matmul: cannot multiply " + shape_string(A.shape()) + " by " +
                     (transpose_b ? "transposed " : "") + shape_string(B.shape()));
  const std::size_t m = transpose_b ? B.rows() : B.cols();
  Tensor C({A.rows(), m});
  detail::gemm_acc(A, false, B, transpose_b, C);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(
      std::move(C), {ia, ib},
      [ia, ib, transpose_b](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) detail::gemm_acc(g, false, tp.value(ib), !transpose_b, tp.grad(ia));
        if (tp.needs_grad(ib)) {
          if (transpose_b)
            detail::gemm_acc(g, true, tp.value(ia), false, tp.grad(ib));
          else
            detail::gemm_acc(tp.value(ia), true, g, false, tp.grad(ib));
        }
      },
      [ia, ib, transpose_b](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        Tensor out(tp.value(self).shape(), 0.0);
        if (!tan[ia].empty()) detail::gemm_acc(tan[ia], false, tp.value(ib), transpose_b, out);
        if (!tan[ib].empty()) detail::gemm_acc(tp.value(ia), false, tan[ib], transpose_b, out);
        return out;
      },
      "matmul");
}

/// a + b with b either the same shape, a single row broadcast over a's
/// rows, or a scalar.
inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind(A, B, "add");
  Tensor C = A;
  const std::size_t cols = C.cols();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += detail::bcast(B, kind, i, cols);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(
      std::move(C), {ia, ib},
      [ia, ib, kind](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
          Tensor& ga = tp.grad(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ib)) detail::reduce_into(g, kind, tp.grad(ib));
      },
      [ia, ib, kind](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        Tensor out(tp.value(self).shape(), 0.0);
        if (!tan[ia].empty()) out = tan[ia];
        if (!tan[ib].empty()) {
          const std::size_t cols = out.cols();
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += detail::bcast(tan[ib], kind, i, cols);
        }
        return out;
      },
      "add");
}

/// Elementwise product; b may be a scalar.
inline Var multiply(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind(A, B, "multiply");
  if (kind == detail::Broadcast::row)
    throw ShapeError("multiply: row broadcast unsupported for " + shape_string(A.shape()) + " and " +
                     shape_string(B.shape()));
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= detail::bcast(B, kind, i, 1);
  const std::size_t ia = a.id, ib = b.id;
  return t.push(
      std::move(C), {ia, ib},
      [ia, ib, kind](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& A = tp.value(ia);
        const Tensor& B = tp.value(ib);
        if (tp.needs_grad(ia)) {
          Tensor& ga = tp.grad(ia);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::bcast(B, kind, i, 1);
        }
        if (tp.needs_grad(ib)) {
          Tensor prod(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) prod[i] = g[i] * A[i];
          detail::reduce_into(prod, kind, tp.grad(ib));
        }
      },
      [ia, ib, kind](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        const Tensor& A = tp.value(ia);
        const Tensor& B = tp.value(ib);
        Tensor out(tp.value(self).shape(), 0.0);
        for (std::size_t i = 0; i < out.size(); ++i) {
          if (!tan[ia].empty()) out[i] += tan[ia][i] * detail::bcast(B, kind, i, 1);
          if (!tan[ib].empty()) out[i] += A[i] * detail::bcast(tan[ib], kind, i, 1);
        }
        return out;
      },
      "multiply");
}

/// Multiplication by a compile-time-free constant (no node for the scalar).
inline Var scale(Var a, double s) {
  Tensor C = a.value();
  for (double& v : C.vec()) v *= s;
  const std::size_t ia = a.id;
  return a.tape->push(
      std::move(C), {ia},
      [ia, s](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
      },
      [ia, s](const Tape&, std::size_t, const std::vector<Tensor>& tan) {
        Tensor out = tan[ia];
        for (double& v : out.vec()) v *= s;
        return out;
      },
      "scale");
}

/// a + s for a constant scalar s.
inline Var shift(Var a, double s) { return add(a, a.tape->constant(Tensor::scalar(s))); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return add(a, scale(b, -1.0)); }
inline Var operator*(Var a, Var b) { return multiply(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

namespace detail {

template <class F, class DF>
Var unary(Var a, F f, DF df, const char* op) {
  Tensor C = a.value();
  for (double& v : C.vec()) v = f(v);
  const std::size_t ia = a.id;
  // df receives (input, output).
  return a.tape->push(
      std::move(C), {ia},
      [ia, df](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(self);
        Tensor& ga = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
      },
      [ia, df](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        const Tensor& x = tp.value(ia);
        const Tensor& y = tp.value(self);
        Tensor out = tan[ia];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= df(x[i], y[i]);
        return out;
      },
      op);
}

}  // namespace detail

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

/// Natural log; any non-positive input raises NumericError.
inline Var log(Var a) {
  for (double v : a.value().vec())
    if (!(v > 0.0))
      throw NumericError("log: non-positive input " + std::to_string(v) + " in tensor of shape " +
                         shape_string(a.shape()));
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

/// Row-wise softmax of a matrix, max-subtracted.
inline Var softmax_rows(Var a) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "softmax_rows", "input");
  Tensor C(A.shape());
  const std::size_t R = A.rows(), K = A.cols();
  for (std::size_t r = 0; r < R; ++r) {
    double mx = A.at(r, 0);
    for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, A.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < K; ++c) z += (C.at(r, c) = std::exp(A.at(r, c) - mx));
    for (std::size_t c = 0; c < K; ++c) C.at(r, c) /= z;
  }
  const std::size_t ia = a.id;
  // dy = y ⊙ (dx − ⟨y, dx⟩) per row; the same form serves both directions.
  auto apply = [](const Tensor& y, const Tensor& d, Tensor& out) {
    const std::size_t R = y.rows(), K = y.cols();
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < K; ++c) dot += y.at(r, c) * d.at(r, c);
      for (std::size_t c = 0; c < K; ++c) out.at(r, c) += y.at(r, c) * (d.at(r, c) - dot);
    }
  };
  return a.tape->push(
      std::move(C), {ia},
      [ia, apply](Tape& tp, std::size_t self) { apply(tp.value(self), tp.grad(self), tp.grad(ia)); },
      [ia, apply](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        Tensor out(tp.value(self).shape(), 0.0);
        apply(tp.value(self), tan[ia], out);
        return out;
      },
      "softmax_rows");
}

/// Sum of all elements, as a 1×1 tensor.
inline Var sum(Var a) {
  double acc = 0.0;
  for (double v : a.value().vec()) acc += v;
  const std::size_t ia = a.id;
  return a.tape->push(
      Tensor::scalar(acc), {ia},
      [ia](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0];
        for (double& v : tp.grad(ia).vec()) v += g;
      },
      [ia](const Tape&, std::size_t, const std::vector<Tensor>& tan) {
        double acc = 0.0;
        for (double v : tan[ia].vec()) acc += v;
        return Tensor::scalar(acc);
      },
      "sum");
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Mean over rows of a matrix: (R×C) → (1×C).
inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "mean_rows", "input");
  Tensor avg({1, A.rows()}, 1.0 / static_cast<double>(A.rows()));
  return matmul(a.tape->constant(std::move(avg)), a);
}

/// Largest element and its flat index (first occurrence). The gradient
/// flows to that element only; a tie marks the node non-smooth.
struct MaxResult {
  Var value;
  std::size_t index;
  bool tie;
};

inline MaxResult max_with_index(Var a) {
  const Tensor& A = a.value();
  if (A.empty()) throw ShapeError("max_with_index: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < A.size(); ++i)
    if (A[i] > A[best]) best = i;
  bool tie = false;
  const double tol = 1e-12 * std::max(1.0, std::abs(A[best]));
  for (std::size_t i = 0; i < A.size(); ++i)
    if (i != best && std::abs(A[i] - A[best]) <= tol) tie = true;
  const std::size_t ia = a.id;
  Var out = a.tape->push(
      Tensor::scalar(A[best]), {ia},
      [ia, best](Tape& tp, std::size_t self) { tp.grad(ia)[best] += tp.grad(self)[0]; },
      [ia, best](const Tape&, std::size_t, const std::vector<Tensor>& tan) {
        return Tensor::scalar(tan[ia][best]);
      },
      "max_with_index");
  if (tie) a.tape->mark_non_smooth(out.id);
  return {out, best, tie};
}

/// Concatenation of two matrices along columns (axis 1) or rows (axis 0).
inline Var concat(Var a, Var b, int axis = 1) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank2(A, "concat", "lhs");
  detail::require_rank2(B, "concat", "rhs");
  if ((axis == 1 && A.rows() != B.rows()) || (axis == 0 && A.cols() != B.cols()) || (axis != 0 && axis != 1))
    throw ShapeError("concat(axis=" + std::to_string(axis) + "): incompatible " + shape_string(A.shape()) +
                     " and " + shape_string(B.shape()));
  const std::size_t R = axis == 1 ? A.rows() : A.rows() + B.rows();
  const std::size_t C = axis == 1 ? A.cols() + B.cols() : A.cols();
  Tensor out({R, C});
  // Maps output flat index → (source 0/1, source flat index).
  auto locate = [axis, ac = A.cols(), ar = A.rows(), bc = B.cols(), C](std::size_t flat) {
    const std::size_t r = flat / C, c = flat % C;
    if (axis == 1) return c < ac ? std::pair{0, r * ac + c} : std::pair{1, r * bc + (c - ac)};
    return r < ar ? std::pair{0, r * ac + c} : std::pair{1, (r - ar) * bc + c};
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto [src, j] = locate(i);
    out[i] = src == 0 ? A[j] : B[j];
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(
      std::move(out), {ia, ib},
      [ia, ib, locate](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const bool na = tp.needs_grad(ia), nb = tp.needs_grad(ib);
        for (std::size_t i = 0; i < g.size(); ++i) {
          auto [src, j] = locate(i);
          if (src == 0 && na) tp.grad(ia)[j] += g[i];
          if (src == 1 && nb) tp.grad(ib)[j] += g[i];
        }
      },
      [ia, ib, locate](const Tape& tp, std::size_t self, const std::vector<Tensor>& tan) {
        Tensor out(tp.value(self).shape(), 0.0);
        for (std::size_t i = 0; i < out.size(); ++i) {
          auto [src, j] = locate(i);
          const Tensor& t = src == 0 ? tan[ia] : tan[ib];
          if (!t.empty()) out[i] = t[j];
        }
        return out;
      },
      "concat");
}

/// Selects rows of a matrix (with repetition allowed).
inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  const Tensor& A = a.value();
  detail::require_rank2(A, "gather_rows", "input");
  const std::size_t C = A.cols();
  Tensor out({rows.size(), C});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= A.rows())
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " +
                       shape_string(A.shape()));
    std::copy_n(A.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * C), C,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * C));
  }
  const std::size_t ia = a.id;
  return a.tape->push(
      std::move(out), {ia},
      [ia, rows, C](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(ia);
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t c = 0; c < C; ++c) ga[rows[r] * C + c] += g[r * C + c];
      },
      [ia, rows, C](const Tape&, std::size_t, const std::vector<Tensor>& tan) {
        Tensor out({rows.size(), C});
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t c = 0; c < C; ++c) out[r * C + c] = tan[ia][rows[r] * C + c];
        return out;
      },
      "gather_rows");
}

/// Selects elements by flat index into a 1×k row.
inline Var gather(Var a, std::vector<std::size_t> flat) {
  const Tensor& A = a.value();
  Tensor out({1, flat.size()});
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= A.size())
      throw ShapeError("gather: index " + std::to_string(flat[i]) + " out of range for " +
                       shape_string(A.shape()));
    out[i] = A[flat[i]];
  }
  const std::size_t ia = a.id;
  return a.tape->push(
      std::move(out), {ia},
      [ia, flat](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(ia);
        for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += g[i];
      },
      [ia, flat](const Tape&, std::size_t, const std::vector<Tensor>& tan) {
        Tensor out({1, flat.size()});
        for (std::size_t i = 0; i < flat.size(); ++i) out[i] = tan[ia][flat[i]];
        return out;
      },
      "gather");
}

/// Row-major reinterpretation; no data movement in either direction.
inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(shape);
  const std::size_t ia = a.id;
  return a.tape->push(
      std::move(out), {ia},
      [ia](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      [ia, shape](const Tape&, std::size_t, const std::vector<Tensor>& tan) { return tan[ia].reshaped(shape); },
      "reshape");
}

/// Same value, cut from the graph: gradients do not flow through it.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

}  // namespace imtsp
