#pragma once

// Normal-theory information between a response Y and a reduction T(X),
// computed from the (p + m) joint covariance in block form.

#include <algorithm>
#include <cmath>
#include <type_traits>

#include "infoflow/core/ops.hpp"
#include "infoflow/core/tape.hpp"

namespace infoflow {

struct CovBlocks {
  Matrix yy;  // p x p
  Matrix yt;  // p x m
  Matrix tt;  // m x m

  Index p() const noexcept { return yy.rows(); }
  Index m() const noexcept { return tt.rows(); }

  Matrix joint() const {
    Matrix j(p() + m(), p() + m());
    j.topLeftCorner(p(), p()) = yy;
    j.topRightCorner(p(), m()) = yt;
    j.bottomLeftCorner(m(), p()) = yt.transpose();
    j.bottomRightCorner(m(), m()) = tt;
    return j;
  }

  static CovBlocks from_joint(const Matrix& j, Index p) {
    const Index m = j.rows() - p;
    if (j.rows() != j.cols() || p < 1 || m < 1) throw ShapeError("CovBlocks: bad joint matrix");
    return {j.topLeftCorner(p, p), j.topRightCorner(p, m), j.bottomRightCorner(m, m)};
  }
};

inline Matrix centered(const Matrix& a) { return a.rowwise() - a.colwise().mean(); }

/// Centered sample covariances with 1/(N-1) normalization.
inline CovBlocks empirical_cov(const Array& y, const Array& t) {
  const Index n = y.rows();
  if (t.rows() != n) throw ShapeError("empirical_cov: Y and T row counts differ");
  if (n < y.cols() + t.cols() + 1)
    throw DataError("empirical_cov: need N >= p + m + 1 samples, got " + std::to_string(n));
  const Matrix yc = centered(y.mat()), tc = centered(t.mat());
  const double s = 1.0 / static_cast<double>(n - 1);
  CovBlocks c;
  c.yy = yc.transpose() * yc * s;
  c.yt = yc.transpose() * tc * s;
  c.tt = tc.transpose() * tc * s;
  // Round the products to exact symmetry.
  c.yy = (0.5 * (c.yy + c.yy.transpose())).eval();
  c.tt = (0.5 * (c.tt + c.tt.transpose())).eval();
  return c;
}

inline Matrix schur_complement(const CovBlocks& c, double jitter) {
  if (c.yt.rows() != c.p() || c.yt.cols() != c.m()) throw ShapeError("CovBlocks: inconsistent");
  Matrix tt = c.tt;
  tt.diagonal().array() += jitter;
  const Matrix s = c.yy - c.yt * solve_pd(tt, Matrix(c.yt.transpose()));
  return 0.5 * (s + s.transpose());
}

/// I = 1/2 ln det S_YY - 1/2 ln det(S_YY - S_YT S_TT^-1 S_TY), in nats.
inline double gaussian_mi(const CovBlocks& c) {
  const double v = 0.5 * (log_det_pd(c.yy) - log_det_pd(schur_complement(c, 0.0)));
  if (v < 0.0 && v > -1e-12) return 0.0;
  return v;
}

/// ln det(S_YY - S_YT (S_TT + jitter I)^-1 S_TY).
inline double schur_objective(const CovBlocks& c, double jitter) {
  if (jitter < 0.0) throw Error("schur_objective: jitter must be non-negative");
  return log_det_pd(schur_complement(c, jitter));
}

/// Differentiable Schur objective of a raw reduction output `t` (N x m)
/// against a centered response `yc` (N x p). T is standardized over the
/// batch first, so trace(S_TT) / m = 1 and the scale-aware jitter
/// `jitter_factor * trace(S_TT) / m` reduces to `jitter_factor`.
template <typename V, typename Y>
V schur_loss(const V& t, const Y& yc, double jitter_factor) {
  const Index n = t.rows();
  if (yc.rows() != n) throw ShapeError("schur_loss: T and Y row counts differ");
  const double s = 1.0 / static_cast<double>(n - 1);
  V y;
  if constexpr (std::is_same_v<Y, V>)
    y = yc;
  else
    y = ops::lift(t, Array(yc));
  const V tc = ops::sub(t, ops::col_mean(t));
  const V var = ops::add_scalar(ops::scale(ops::col_sum(ops::square(tc)), s), 1e-12);
  const V th = ops::mul(tc, ops::exp(ops::scale(ops::log(var), -0.5)));
  const V tt = ops::scale(ops::matmul(ops::transpose(th), th), s);
  const V ty = ops::scale(ops::matmul(ops::transpose(th), y), s);
  const V yy = ops::scale(ops::matmul(ops::transpose(y), y), s);
  const V x = ops::solve_pd(ops::add_identity(tt, jitter_factor), ty);
  return ops::log_det_pd(ops::sub(yy, ops::matmul(ops::transpose(ty), x)));
}

}  // namespace infoflow
