#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "savae/autodiff.hpp"

// Differentiable primitives. Each one computes its forward value eagerly and
// records a vector-Jacobian product for the reverse pass.
namespace savae::ad {

namespace detail {

inline Tape& tape_of(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ShapeError("operands live on different tapes");
  return a.tape();
}

inline void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_to_string(t.shape()));
}

inline bool is_row_of(const Tensor& row, const Tensor& m) {
  return row.rows() == 1 && row.cols() == m.cols() && row.size() == m.cols() && m.rank() == 2 &&
         row.shape() != m.shape();
}

/// Elementwise unary op whose derivative is expressible from (input, output).
template <class Fwd, class Deriv>
Var unary(const char* name, Var a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto& in = a.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  auto ia = a.id();
  return a.tape().record(name, std::move(out), {ia}, [ia, deriv](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_matrix("matmul", A);
  detail::require_matrix("matmul", B);
  if (A.cols() != B.rows()) throw ShapeError("matmul", A.shape(), B.shape());
  Tensor out(Shape{A.rows(), B.cols()});
  out.mat().noalias() = A.mat() * B.mat();
  auto ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).mat().noalias() += g.mat() * t.value(ib).mat().transpose();
    if (t.requires_grad(ib)) t.grad_buffer(ib).mat().noalias() += t.value(ia).mat().transpose() * g.mat();
  });
}

/// a + b for equal shapes, or a (m x n) + b (one row of n) broadcast over rows.
inline Var add(Var a, Var b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  auto ia = a.id(), ib = b.id();
  if (A.shape() == B.shape()) {
    Tensor out = A;
    out.vec() += B.vec();
    return tape.record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
      const auto& g = t.grad_buffer(self);
      if (t.requires_grad(ia)) t.grad_buffer(ia).vec() += g.vec();
      if (t.requires_grad(ib)) t.grad_buffer(ib).vec() += g.vec();
    });
  }
  if (!detail::is_row_of(B, A)) throw ShapeError("add", A.shape(), B.shape());
  Tensor out = A;
  out.mat().rowwise() += B.mat().row(0);
  return tape.record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).vec() += g.vec();
    if (t.requires_grad(ib)) t.grad_buffer(ib).mat().row(0) += g.mat().colwise().sum();
  });
}

inline Var sub(Var a, Var b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("sub", A.shape(), B.shape());
  Tensor out = A;
  out.vec() -= B.vec();
  auto ia = a.id(), ib = b.id();
  return tape.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).vec() += g.vec();
    if (t.requires_grad(ib)) t.grad_buffer(ib).vec() -= g.vec();
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  auto& tape = detail::tape_of(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("mul", A.shape(), B.shape());
  Tensor out = A;
  out.vec().array() *= B.vec().array();
  auto ia = a.id(), ib = b.id();
  return tape.record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ia)) t.grad_buffer(ia).vec().array() += g.vec().array() * t.value(ib).vec().array();
    if (t.requires_grad(ib)) t.grad_buffer(ib).vec().array() += g.vec().array() * t.value(ia).vec().array();
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  out.vec() *= s;
  auto ia = a.id();
  return a.tape().record("scale", std::move(out), {ia}, [ia, s](Tape& t, NodeId self) {
    t.grad_buffer(ia).vec() += s * t.grad_buffer(self).vec();
  });
}

inline Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  out.vec().array() += s;
  auto ia = a.id();
  return a.tape().record("add_scalar", std::move(out), {ia}, [ia](Tape& t, NodeId self) {
    t.grad_buffer(ia).vec() += t.grad_buffer(self).vec();
  });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      "sigmoid", a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var square(Var a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Elementwise square root; inputs must be positive for a finite gradient.
inline Var sqrt(Var a) {
  return detail::unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

/// Sum of all elements, as a scalar.
inline Var sum(Var a) {
  Tensor out = Tensor::scalar(a.value().vec().sum());
  auto ia = a.id();
  return a.tape().record("sum", std::move(out), {ia}, [ia](Tape& t, NodeId self) {
    t.grad_buffer(ia).vec().array() += t.grad_buffer(self)[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Per-row sums of a matrix: (m x n) -> (m x 1).
inline Var row_sum(Var a) {
  detail::require_matrix("row_sum", a.value());
  const auto& A = a.value();
  Tensor out(Shape{A.rows(), 1});
  out.mat() = A.mat().rowwise().sum();
  auto ia = a.id();
  return a.tape().record("row_sum", std::move(out), {ia}, [ia](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    t.grad_buffer(ia).mat().colwise() += g.mat().col(0);
  });
}

/// Sums consecutive blocks of `rows` rows: (k*rows x n) -> (rows x n).
inline Var block_sum(Var a, std::size_t rows) {
  const auto& A = a.value();
  detail::require_matrix("block_sum", A);
  if (rows == 0 || A.rows() % rows != 0)
    throw ShapeError("block_sum: " + std::to_string(A.rows()) + " rows not divisible by " + std::to_string(rows));
  const auto r = static_cast<Eigen::Index>(rows);
  const auto blocks = static_cast<Eigen::Index>(A.rows() / rows);
  Tensor out(Shape{rows, A.cols()});
  for (Eigen::Index b = 0; b < blocks; ++b) out.mat() += A.mat().middleRows(b * r, r);
  auto ia = a.id();
  return a.tape().record("block_sum", std::move(out), {ia}, [ia, r, blocks](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    auto G = t.grad_buffer(ia).mat();
    for (Eigen::Index b = 0; b < blocks; ++b) G.middleRows(b * r, r) += g.mat();
  });
}

/// Row-wise negative log softmax probability of the target class:
/// out[i] = logsumexp(logits[i, :]) - logits[i, target[i]], shape (m x 1).
inline Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  const auto& L = logits.value();
  detail::require_matrix("softmax_cross_entropy", L);
  const std::size_t m = L.rows(), n = L.cols();
  if (targets.size() != m)
    throw ShapeError("softmax_cross_entropy", L.shape(), Shape{targets.size()});
  Tensor probs(Shape{m, n});
  Tensor out(Shape{m, 1});
  auto P = probs.mat();
  auto X = L.mat();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n)
      throw VocabError(targets[i], static_cast<long>(n));
    const double mx = X.row(i).maxCoeff();
    P.row(i) = (X.row(i).array() - mx).exp();
    const double z = P.row(i).sum();
    P.row(i) /= z;
    out[i] = (mx + std::log(z)) - X(i, targets[i]);
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  auto il = logits.id();
  return logits.tape().record(
      "softmax_cross_entropy", std::move(out), {il},
      [il, probs = std::move(probs), tgt = std::move(tgt)](Tape& t, NodeId self) {
        const auto& g = t.grad_buffer(self);
        auto G = t.grad_buffer(il).mat();
        const auto Pm = probs.mat();
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          G.row(i) += g[i] * Pm.row(i);
          G(i, tgt[i]) -= g[i];
        }
      });
}

/// Gathers rows of `table` (V x E): out[i, :] = table[indices[i], :].
inline Var embedding_lookup(Var table, std::span<const int> indices) {
  const auto& T = table.value();
  if (T.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_to_string(T.shape()));
  const std::size_t rows = T.rows(), e = T.cols();
  Tensor out(Shape{indices.size(), e});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= rows)
      throw VocabError(indices[i], static_cast<long>(rows));
    out.mat().row(i) = T.mat().row(indices[i]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  auto it = table.id();
  return table.tape().record("embedding_lookup", std::move(out), {it},
                             [it, idx = std::move(idx)](Tape& t, NodeId self) {
                               const auto& g = t.grad_buffer(self);
                               auto G = t.grad_buffer(it).mat();
                               for (std::size_t i = 0; i < idx.size(); ++i) G.row(idx[i]) += g.mat().row(i);
                             });
}

/// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& tape = parts.front().tape();
  const auto& first = parts.front().value();
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    detail::tape_of(parts.front(), p);
    const auto& v = p.value();
    detail::require_matrix("concat", v);
    if (axis == 1) {
      if (v.rows() != first.rows()) throw ShapeError("concat", first.shape(), v.shape());
      cols += v.cols();
    } else {
      if (v.cols() != first.cols()) throw ShapeError("concat", first.shape(), v.shape());
      rows += v.rows();
    }
  }
  if (axis == 1) rows = first.rows();
  else cols = first.cols();
  Tensor out(Shape{rows, cols});
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const auto r = static_cast<Eigen::Index>(v.rows()), c = static_cast<Eigen::Index>(v.cols());
    if (axis == 1) out.mat().block(0, static_cast<Eigen::Index>(off), r, c) = v.mat();
    else out.mat().block(static_cast<Eigen::Index>(off), 0, r, c) = v.mat();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += axis == 1 ? v.cols() : v.rows();
  }
  auto parents = ids;
  return tape.record("concat", std::move(out), std::move(parents),
                     [ids = std::move(ids), offsets = std::move(offsets), axis](Tape& t, NodeId self) {
                       const auto& g = t.grad_buffer(self);
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (!t.requires_grad(ids[k])) continue;
                         auto G = t.grad_buffer(ids[k]).mat();
                         const auto o = static_cast<Eigen::Index>(offsets[k]);
                         if (axis == 1) G += g.mat().block(0, o, G.rows(), G.cols());
                         else G += g.mat().block(o, 0, G.rows(), G.cols());
                       }
                     });
}

/// Half-open range [begin, end) of rows (axis 0) or columns (axis 1).
inline Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const auto& A = a.value();
  detail::require_matrix("slice", A);
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? A.rows() : A.cols();
  if (begin > end || end > extent)
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     shape_to_string(A.shape()));
  const auto b = static_cast<Eigen::Index>(begin), len = static_cast<Eigen::Index>(end - begin);
  Tensor out(axis == 0 ? Shape{end - begin, A.cols()} : Shape{A.rows(), end - begin});
  if (axis == 0) out.mat() = A.mat().middleRows(b, len);
  else out.mat() = A.mat().middleCols(b, len);
  auto ia = a.id();
  return a.tape().record("slice", std::move(out), {ia}, [ia, axis, b, len](Tape& t, NodeId self) {
    const auto& g = t.grad_buffer(self);
    auto G = t.grad_buffer(ia).mat();
    if (axis == 0) G.middleRows(b, len) += g.mat();
    else G.middleCols(b, len) += g.mat();
  });
}

/// Reparameterized draw z = mu + exp(log_var / 2) * eps, eps ~ N(0, I) taken
/// from the tape's noise stream in row-major order.
inline Var gaussian_sample(Var mu, Var log_var) {
  auto& tape = detail::tape_of(mu, log_var);
  const auto& M = mu.value();
  const auto& LV = log_var.value();
  if (M.shape() != LV.shape()) throw ShapeError("gaussian_sample", M.shape(), LV.shape());
  Tensor eps(M.shape());
  for (auto& e : eps.values()) e = tape.noise().normal();
  Tensor out(M.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = M[i] + std::exp(0.5 * LV[i]) * eps[i];
  auto im = mu.id(), il = log_var.id();
  return tape.record("gaussian_sample", std::move(out), {im, il},
                     [im, il, eps = std::move(eps)](Tape& t, NodeId self) {
                       const auto& g = t.grad_buffer(self);
                       if (t.requires_grad(im)) t.grad_buffer(im).vec() += g.vec();
                       if (t.requires_grad(il)) {
                         const auto& lv = t.value(il);
                         auto& gl = t.grad_buffer(il);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gl[i] += g[i] * 0.5 * std::exp(0.5 * lv[i]) * eps[i];
                       }
                     });
}

}  // namespace savae::ad
