#pragma once

// Matrix-level primitives on plain Arrays. Every primitive here has a
// differentiable twin over Var in tape.hpp with the same name and
// semantics, so model code written against `ops::` runs either eagerly or
// on a tape.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "infoflow/core/array.hpp"
#include "infoflow/core/linalg.hpp"

namespace infoflow::ops {

namespace detail {

inline Index broadcast_dim(Index a, Index b, const char* who) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw ShapeError(std::string(who) + ": cannot broadcast " + std::to_string(a) +
                   " against " + std::to_string(b));
}

inline Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

/// Sums a broadcast gradient back down to the operand's shape.
inline Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Matrix r = g;
  if (rows == 1 && r.rows() != 1) r = r.colwise().sum().eval();
  if (cols == 1 && r.cols() != 1) r = r.rowwise().sum().eval();
  return r;
}

template <typename F>
Matrix zip(const Matrix& a, const Matrix& b, const char* who, F f) {
  const Index r = broadcast_dim(a.rows(), b.rows(), who);
  const Index c = broadcast_dim(a.cols(), b.cols(), who);
  if (a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c) return f(a, b);
  return f(expand(a, r, c), expand(b, r, c));
}

}  // namespace detail

inline const Array& value_of(const Array& a) { return a; }

inline Array matmul(const Array& a, const Array& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + a.shape_str() + " x " + b.shape_str());
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.mat() * b.mat();
  return Array(std::move(out));
}

inline Array add(const Array& a, const Array& b) {
  return Array(detail::zip(a.mat(), b.mat(), "add",
                           [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; }));
}

inline Array sub(const Array& a, const Array& b) {
  return Array(detail::zip(a.mat(), b.mat(), "sub",
                           [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; }));
}

/// Elementwise product.
inline Array mul(const Array& a, const Array& b) {
  return Array(detail::zip(a.mat(), b.mat(), "mul", [](const Matrix& x, const Matrix& y) -> Matrix {
    return x.cwiseProduct(y);
  }));
}

inline Array div(const Array& a, const Array& b) {
  return Array(detail::zip(a.mat(), b.mat(), "div", [](const Matrix& x, const Matrix& y) -> Matrix {
    return x.cwiseQuotient(y);
  }));
}

inline Array scale(const Array& a, double s) { return Array(Matrix(a.mat() * s)); }
inline Array add_scalar(const Array& a, double s) {
  return Array(Matrix(a.mat().array() + s));
}
inline Array neg(const Array& a) { return Array(Matrix(-a.mat())); }
inline Array exp(const Array& a) { return Array(Matrix(a.mat().array().exp())); }
inline Array log(const Array& a) { return Array(Matrix(a.mat().array().log())); }
inline Array tanh(const Array& a) { return Array(Matrix(a.mat().array().tanh())); }
inline Array relu(const Array& a) { return Array(Matrix(a.mat().cwiseMax(0.0))); }
inline Array square(const Array& a) { return Array(Matrix(a.mat().array().square())); }

inline Array transpose(const Array& a) { return Array(Matrix(a.mat().transpose())); }

inline Array sum(const Array& a) { return Array::scalar(a.mat().sum()); }
inline Array mean(const Array& a) {
  if (a.empty()) throw ShapeError("mean of empty array");
  return Array::scalar(a.mat().sum() / static_cast<double>(a.size()));
}
/// n x c -> n x 1.
inline Array row_sum(const Array& a) { return Array(Matrix(a.mat().rowwise().sum())); }
/// n x c -> 1 x c.
inline Array col_sum(const Array& a) { return Array(Matrix(a.mat().colwise().sum())); }
inline Array col_mean(const Array& a) {
  if (a.rows() == 0) throw ShapeError("col_mean of empty array");
  return Array(Matrix(a.mat().colwise().sum() / static_cast<double>(a.rows())));
}

inline Array gather_cols(const Array& a, const std::vector<Index>& idx) {
  Matrix out(a.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= a.cols()) throw ShapeError("gather_cols: index out of range");
    out.col(static_cast<Index>(j)) = a.mat().col(idx[j]);
  }
  return Array(std::move(out));
}

inline Array gather_rows(const Array& a, const std::vector<Index>& idx) {
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.mat().row(idx[i]);
  }
  return Array(std::move(out));
}

/// Places the columns of each part at the given destination indices of an
/// n x total result. Destination sets must partition [0, total).
inline Matrix scatter_cols_raw(const std::vector<const Matrix*>& parts,
                               const std::vector<std::vector<Index>>& dest, Index total) {
  if (parts.empty()) throw ShapeError("scatter_cols: no parts");
  const Index n = parts.front()->rows();
  Matrix out(n, total);
  std::vector<char> seen(static_cast<std::size_t>(total), 0);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p]->rows() != n || parts[p]->cols() != static_cast<Index>(dest[p].size()))
      throw ShapeError("scatter_cols: part shape mismatch");
    for (std::size_t j = 0; j < dest[p].size(); ++j) {
      const Index d = dest[p][j];
      if (d < 0 || d >= total || seen[static_cast<std::size_t>(d)])
        throw ShapeError("scatter_cols: destinations do not partition the columns");
      seen[static_cast<std::size_t>(d)] = 1;
      out.col(d) = parts[p]->col(static_cast<Index>(j));
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw ShapeError("scatter_cols: destinations do not cover all columns");
  return out;
}

inline Array scatter_cols(const std::vector<Array>& parts,
                          const std::vector<std::vector<Index>>& dest, Index total) {
  std::vector<const Matrix*> raw;
  for (const auto& p : parts) raw.push_back(&p.mat());
  return Array(scatter_cols_raw(raw, dest, total));
}

inline Array concat_cols(const std::vector<Array>& parts) {
  std::vector<std::vector<Index>> dest;
  Index at = 0;
  for (const auto& p : parts) {
    std::vector<Index> d(static_cast<std::size_t>(p.cols()));
    std::iota(d.begin(), d.end(), at);
    at += p.cols();
    dest.push_back(std::move(d));
  }
  return scatter_cols(parts, dest, at);
}

inline Matrix logsumexp_rows_raw(const Matrix& a) {
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const double mx = a.row(i).maxCoeff();
    out(i, 0) = mx + std::log((a.row(i).array() - mx).exp().sum());
  }
  return out;
}

/// n x c -> n x 1, stable log(sum(exp(row))).
inline Array logsumexp_rows(const Array& a) { return Array(logsumexp_rows_raw(a.mat())); }

inline Array add_identity(const Array& a, double lambda) {
  if (a.rows() != a.cols()) throw ShapeError("add_identity: non-square " + a.shape_str());
  Matrix m = a.mat();
  m.diagonal().array() += lambda;
  return Array(std::move(m));
}

inline Array log_det_pd(const Array& a) { return Array::scalar(infoflow::log_det_pd(a.mat())); }
inline Array solve_pd(const Array& m, const Array& b) { return infoflow::solve_pd(m, b); }

}  // namespace infoflow::ops
