#pragma once

#include <algorithm>
#include <cmath>

#include "infoflow/core/array.hpp"
#include "infoflow/core/random.hpp"

namespace infoflow::testing {

inline Array random_array(Index rows, Index cols, Rng& rng, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * standard_normal(rng);
  return Array(std::move(m));
}

/// A A^T + n I for a Gaussian A: comfortably positive definite.
inline Matrix random_spd(Index n, Rng& rng, double ridge = 1.0) {
  Matrix a(n, n);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
  Matrix s = a * a.transpose();
  s.diagonal().array() += ridge;
  return 0.5 * (s + s.transpose());
}

/// Sup-norm error relative to the reference, floored so zero gradients
/// compare absolutely.
inline double rel_err(const Array& got, const Array& want, double floor = 1e-6) {
  const double scale = std::max(want.mat().cwiseAbs().maxCoeff(), floor);
  return (got.mat() - want.mat()).cwiseAbs().maxCoeff() / scale;
}

}  // namespace infoflow::testing
