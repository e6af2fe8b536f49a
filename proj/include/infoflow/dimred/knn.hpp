#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "infoflow/core/array.hpp"

namespace infoflow {

/// k-NN joint density estimate (k / N) / Vol_k at `point`.
///
/// Neighbours are ranked by Chebyshev distance. Vol_k is the axis-aligned
/// box prod_j 2 |delta_j|, delta being the offset to the k-th neighbour. One
/// sample row identical to the query is treated as the query itself and
/// skipped; N stays the full sample size.
inline double knn_joint_density(std::span<const double> point, const Array& sample, Index k) {
  const Index n = sample.rows(), dim = sample.cols();
  if (static_cast<Index>(point.size()) != dim)
    throw ShapeError("knn_joint_density: point has wrong dimension");
  if (k < 1 || k >= n) throw Error("knn_joint_density: need 1 <= k < N");

  struct Cand {
    double dist;
    Index row;
  };
  std::vector<Cand> cand;
  cand.reserve(static_cast<std::size_t>(n));
  bool self_skipped = false;
  for (Index i = 0; i < n; ++i) {
    double dist = 0.0;
    for (Index j = 0; j < dim; ++j)
      dist = std::max(dist, std::abs(sample(i, j) - point[static_cast<std::size_t>(j)]));
    if (dist == 0.0 && !self_skipped) {
      self_skipped = true;
      continue;
    }
    cand.push_back({dist, i});
  }
  if (static_cast<Index>(cand.size()) < k) throw Error("knn_joint_density: too few neighbours");
  std::nth_element(cand.begin(), cand.begin() + (k - 1), cand.end(), [](const Cand& a, const Cand& b) {
    return a.dist < b.dist || (a.dist == b.dist && a.row < b.row);
  });
  const Index nb = cand[static_cast<std::size_t>(k - 1)].row;
  double vol = 1.0;
  for (Index j = 0; j < dim; ++j)
    vol *= 2.0 * std::abs(sample(nb, j) - point[static_cast<std::size_t>(j)]);
  if (!(vol > 0.0))
    throw DataError("knn_joint_density: k-th neighbour box has zero volume (duplicate coordinates)");
  return (static_cast<double>(k) / static_cast<double>(n)) / vol;
}

}  // namespace infoflow
