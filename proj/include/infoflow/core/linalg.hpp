#pragma once

#include <cmath>

#include "infoflow/core/array.hpp"

namespace infoflow {

namespace detail {

inline void require_square_symmetric(const Matrix& m, const char* who) {
  if (m.rows() != m.cols())
    throw ShapeError(std::string(who) + ": expected square matrix, got " +
                     shape_string(m.rows(), m.cols()));
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < i; ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-10 * scale)
        throw ShapeError(std::string(who) + ": matrix is not symmetric at (" +
                         std::to_string(i) + "," + std::to_string(j) + ")");
}

}  // namespace detail

/// Lower-triangular Cholesky factor L with M = L L^T.
///
/// No pivoting. A non-positive pivot raises NotPositiveDefiniteError naming
/// the failing leading minor (1-based).
inline Matrix cholesky_lower(const Matrix& m) {
  const Index n = m.rows();
  Matrix l = Matrix::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double d = m(j, j);
    for (Index k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0)) throw NotPositiveDefiniteError(static_cast<std::size_t>(j + 1), d);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (Index i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Solves L L^T X = B given the lower factor.
inline Matrix cholesky_solve(const Matrix& l, const Matrix& b) {
  Matrix x = l.triangularView<Eigen::Lower>().solve(b);
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return x;
}

inline double log_det_pd(const Matrix& m) {
  detail::require_square_symmetric(m, "log_det_pd");
  const Matrix l = cholesky_lower(m);
  double s = 0.0;
  for (Index i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

inline double log_det_pd(const Array& m) { return log_det_pd(m.mat()); }

inline Matrix solve_pd(const Matrix& m, const Matrix& b) {
  detail::require_square_symmetric(m, "solve_pd");
  if (b.rows() != m.rows())
    throw ShapeError("solve_pd: right-hand side has " + std::to_string(b.rows()) +
                     " rows, matrix dimension is " + std::to_string(m.rows()));
  return cholesky_solve(cholesky_lower(m), b);
}

inline Array solve_pd(const Array& m, const Array& b) { return Array(solve_pd(m.mat(), b.mat())); }

inline Matrix inverse_pd(const Matrix& m) {
  return solve_pd(m, Matrix::Identity(m.rows(), m.cols()));
}

}  // namespace infoflow
