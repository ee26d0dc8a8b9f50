#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "csn/errors.hpp"
#include "csn/tensor.hpp"

namespace csn {

/// A trainable tensor together with its accumulated gradient.
struct Param {
  Tensor value;
  Tensor grad;
  std::uint64_t id = 0;
  std::string name;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor v, std::string param_name = {})
      : value(std::move(v)), grad(Tensor::zeros_like(value)), id(next_id()), name(std::move(param_name)) {}

  void zero_grad() { grad.fill(0.0); }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking the node list backwards
/// is a valid topological order. Gradients of nodes that do not depend on any
/// Param are never materialized. A tape is single-threaded.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(64); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

  /// Leaf bound to `p`; backward() adds into p.grad. Frozen params enter as constants.
  Var param(Param& p) {
    if (!p.trainable) return constant(p.value);
    const Var v = push(p.value, {}, nullptr, true);
    nodes_[v.index()].param = &p;
    return v;
  }

  Var record(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor& value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }

  /// Gradient buffer of node i, allocated as zeros on first use.
  Tensor& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and accumulates into every bound Param.
  void backward(Var root) {
    if (!root.value().is_scalar()) {
      throw ContractError("backward() requires a scalar root, got shape " + to_string(root.shape()));
    }
    grad(root.index()).fill(1.0);
    for (std::size_t i = root.index() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || !n.has_grad) continue;
      auto dst = n.param->grad.data();
      const auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    Backward backward;
    Param* param = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, Backward backward, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(index_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const Tensor& dC = t.grad(self);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.requires_grad(ia)) {
      // dA = dC * B^T
      const auto bt = kernels::transpose(B.data().data(), k, n);
      kernels::matmul_acc(dC.data().data(), bt.data(), t.grad(ia).data().data(), m, n, k);
    }
    if (t.requires_grad(ib)) {
      // dB = A^T * dC
      kernels::matmul_tn_acc(A.data().data(), dC.data().data(), t.grad(ib).data().data(), m, k, n);
    }
  });
}

/// a(m x k) * w(n x k)^T
inline Var matmul_nt(Var a, Var w) {
  detail::same_tape(a, w);
  Tensor out = matmul_nt(a.value(), w.value());
  const std::size_t ia = a.index(), iw = w.index();
  return a.tape().record(std::move(out), {ia, iw}, [ia, iw](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const Tensor& W = t.value(iw);
    const Tensor& dC = t.grad(self);
    const std::size_t m = A.rows(), k = A.cols(), n = W.rows();
    if (t.requires_grad(ia)) {
      kernels::matmul_acc(dC.data().data(), W.data().data(), t.grad(ia).data().data(), m, n, k);
    }
    if (t.requires_grad(iw)) {
      // dW(n x k) = dC^T(n x m) * A(m x k)
      kernels::matmul_tn_acc(dC.data().data(), A.data().data(), t.grad(iw).data().data(), m, n, k);
    }
  });
}

/// Adds a length-n bias vector to every row of an m x n matrix.
inline Var add_bias(Var x, Var bias) {
  detail::same_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& B = bias.value();
  if (!X.is_matrix() || !B.is_vector() || B.size() != X.cols()) {
    throw DimensionError("add_bias shape mismatch: " + to_string(X.shape()) + " + " + to_string(B.shape()));
  }
  Tensor out = X;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += B[c];
  }
  const std::size_t ix = x.index(), ib = bias.index();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    if (t.requires_grad(ix)) {
      auto dx = t.grad(ix).data();
      for (std::size_t k = 0; k < dx.size(); ++k) dx[k] += dC[k];
    }
    if (t.requires_grad(ib)) {
      Tensor& db = t.grad(ib);
      for (std::size_t r = 0; r < dC.rows(); ++r) {
        const auto row = dC.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
    }
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] += b.value()[k];
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto d = t.grad(in).data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += dC[k];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= b.value()[k];
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += dC[k];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] -= dC[k];
    }
  });
}

/// Hadamard product. `b` may also be a vector broadcast across the rows of a
/// matrix `a`; its gradient is then summed over rows.
inline Var elementwise_mul(Var a, Var b) {
  detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool broadcast = A.is_matrix() && B.is_vector() && B.size() == A.cols();
  if (!broadcast && A.shape() != B.shape()) {
    throw DimensionError("elementwise_mul shape mismatch: " + to_string(A.shape()) + " vs " +
                         to_string(B.shape()));
  }
  Tensor out = A;
  const std::size_t width = broadcast ? B.size() : out.size();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] *= B[k % width];
  const std::size_t ia = a.index(), ib = b.index();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, width](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const Tensor& dC = t.grad(self);
    if (t.requires_grad(ia)) {
      auto d = t.grad(ia).data();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] += dC[k] * B[k % width];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad(ib).data();
      for (std::size_t k = 0; k < dC.size(); ++k) d[k % width] += dC[k] * A[k];
    }
  });
}

namespace detail {

// max(0, x) with derivative 0 at the kink.
inline Var rectify(Var a) {
  Tensor out = a.value();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = out[k] > 0.0 ? out[k] : 0.0;
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const Tensor& dC = t.grad(self);
    auto d = t.grad(ia).data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (A[k] > 0.0) d[k] += dC[k];
  });
}

}  // namespace detail

inline Var relu(Var a) { return detail::rectify(a); }

/// max{0, s}. Accepts scalars and, elementwise, vectors of per-triplet margins.
inline Var hinge(Var s) { return detail::rectify(s); }

/// ||a||_2 of a vector; the gradient at the zero vector is zero.
inline Var euclidean_norm(Var a) {
  const Tensor& A = a.value();
  if (A.rank() > 1) throw DimensionError("euclidean_norm expects a vector, got " + to_string(A.shape()));
  double ss = 0.0;
  for (double v : A.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  const std::size_t ia = a.index();
  return a.tape().record(Tensor::scalar(norm), {ia}, [ia, norm](Tape& t, std::size_t self) {
    if (norm == 0.0) return;
    const Tensor& A = t.value(ia);
    const double up = t.grad(self)[0] / norm;
    auto d = t.grad(ia).data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += A[k] * up;
  });
}

/// Per-row Euclidean norms of an m x n matrix, as a length-m vector.
inline Var row_norms(Var a) {
  const Tensor& A = a.value();
  if (!A.is_matrix()) throw DimensionError("row_norms expects a matrix, got " + to_string(A.shape()));
  Tensor out(Shape{A.rows()});
  for (std::size_t r = 0; r < A.rows(); ++r) {
    double ss = 0.0;
    for (double v : A.row(r)) ss += v * v;
    out[r] = std::sqrt(ss);
  }
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const Tensor& norms = t.value(self);
    const Tensor& dC = t.grad(self);
    Tensor& dA = t.grad(ia);
    for (std::size_t r = 0; r < A.rows(); ++r) {
      if (norms[r] == 0.0) continue;
      const double up = dC[r] / norms[r];
      const auto src = A.row(r);
      auto dst = dA.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c] * up;
    }
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.index();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double up = t.grad(self)[0];
    auto d = t.grad(ia).data();
    for (double& v : d) v += up;
  });
}

inline Var scale(Var a, double k) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= k;
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia, k](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    auto d = t.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i] * k;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var add_scalar(Var a, double k) {
  Tensor out = a.value();
  for (double& v : out.data()) v += k;
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    auto d = t.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
  });
}

inline Var sum_squares(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const std::size_t ia = a.index();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const Tensor& A = t.value(ia);
    const double up = 2.0 * t.grad(self)[0];
    auto d = t.grad(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += A[i] * up;
  });
}

/// Rows [begin, begin + count) of a matrix.
inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& A = a.value();
  if (!A.is_matrix() || count == 0 || begin + count > A.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + to_string(A.shape()));
  }
  const std::size_t width = A.cols();
  Tensor out(Shape{count, width});
  std::copy_n(A.data().begin() + static_cast<std::ptrdiff_t>(begin * width), count * width, out.data().begin());
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia, begin, width](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    auto d = t.grad(ia).data().subspan(begin * width, dC.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += dC[i];
  });
}

/// Column c of a matrix as a vector.
inline Var column(Var a, std::size_t c) {
  const Tensor& A = a.value();
  if (!A.is_matrix()) throw DimensionError("column expects a matrix, got " + to_string(A.shape()));
  if (c >= A.cols()) throw IndexError("column " + std::to_string(c) + " out of range for " + to_string(A.shape()));
  Tensor out(Shape{A.rows()});
  for (std::size_t r = 0; r < A.rows(); ++r) out[r] = A.at(r, c);
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia, c](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    Tensor& d = t.grad(ia);
    for (std::size_t r = 0; r < dC.size(); ++r) d.at(r, c) += dC[r];
  });
}

/// Builds an m x rows(a) matrix whose i-th row is column cols[i] of a.
inline Var gather_columns(Var a, std::vector<std::size_t> cols) {
  const Tensor& A = a.value();
  if (!A.is_matrix()) throw DimensionError("gather_columns expects a matrix, got " + to_string(A.shape()));
  if (cols.empty()) throw ContractError("gather_columns needs at least one column");
  const std::size_t d = A.rows();
  Tensor out(Shape{cols.size(), d});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= A.cols()) {
      throw IndexError("column " + std::to_string(cols[i]) + " out of range for " + to_string(A.shape()));
    }
    for (std::size_t r = 0; r < d; ++r) out.at(i, r) = A.at(r, cols[i]);
  }
  const std::size_t ia = a.index();
  return a.tape().record(std::move(out), {ia}, [ia, cols = std::move(cols)](Tape& t, std::size_t self) {
    const Tensor& dC = t.grad(self);
    Tensor& dA = t.grad(ia);
    const std::size_t d = dA.rows();
    for (std::size_t i = 0; i < cols.size(); ++i)
      for (std::size_t r = 0; r < d; ++r) dA.at(r, cols[i]) += dC.at(i, r);
  });
}

/// Mean negative log-likelihood of integer labels under row-wise softmax(logits).
inline Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  const Tensor& L = logits.value();
  if (!L.is_matrix() || labels.size() != L.rows()) {
    throw DimensionError("softmax_cross_entropy: logits " + to_string(L.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t m = L.rows(), k = L.cols();
  Tensor probs(Shape{m, k});
  double nll = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (labels[r] >= k) throw IndexError("label " + std::to_string(labels[r]) + " out of range");
    const auto row = L.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) probs.at(r, c) = std::exp(row[c] - mx) / z;
    nll -= (row[labels[r]] - mx) - std::log(z);
  }
  nll /= static_cast<double>(m);
  const std::size_t il = logits.index();
  return logits.tape().record(Tensor::scalar(nll), {il},
                              [il, probs = std::move(probs), labels = std::move(labels)](Tape& t, std::size_t self) {
                                const double up = t.grad(self)[0] / static_cast<double>(probs.rows());
                                Tensor& d = t.grad(il);
                                for (std::size_t r = 0; r < probs.rows(); ++r) {
                                  for (std::size_t c = 0; c < probs.cols(); ++c) {
                                    const double target = c == labels[r] ? 1.0 : 0.0;
                                    d.at(r, c) += (probs.at(r, c) - target) * up;
                                  }
                                }
                              });
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Var(Tape&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_entry = 0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients against central differences over every
/// entry of every param. Relative error uses max(|analytic|, |numeric|, 1e-8)
/// as the denominator. `fault` is added to each analytic entry before the
/// comparison; it exists only to prove the harness can fail.
inline GradCheckResult grad_check_detailed(const ScalarFn& fn, const std::vector<Param*>& params, double eps,
                                           double fault = 0.0) {
  if (!(eps > 0.0)) throw ContractError("grad_check eps must be positive");
  auto evaluate = [&fn]() {
    Tape tape;
    const Var out = fn(tape);
    if (!out.value().is_scalar()) {
      throw ContractError("grad_check function must return a scalar, got shape " + to_string(out.shape()));
    }
    return out.value()[0];
  };

  for (Param* p : params) p->zero_grad();
  {
    Tape tape;
    const Var out = fn(tape);
    tape.backward(out);
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    const Tensor analytic = p.grad;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double saved = p.value[k];
      p.value[k] = saved + eps;
      const double plus = evaluate();
      p.value[k] = saved - eps;
      const double minus = evaluate();
      p.value[k] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k] + fault;
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_param = pi;
        result.worst_entry = k;
      }
    }
  }
  return result;
}

inline double grad_check(const ScalarFn& fn, const std::vector<Param*>& params, double eps) {
  return grad_check_detailed(fn, params, eps).max_relative_error;
}

}  // namespace csn
