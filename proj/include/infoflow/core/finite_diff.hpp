#pragma once

#include <cmath>
#include <functional>

#include "infoflow/core/array.hpp"

namespace infoflow {

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
inline Array finite_diff_grad(const std::function<double(const Array&)>& f, const Array& x,
                              double eps) {
  if (!(eps > 0.0)) throw Error("finite_diff_grad: eps must be positive");
  Matrix g(x.rows(), x.cols());
  Matrix probe = x.mat();
  for (Index i = 0; i < x.size(); ++i) {
    const double x0 = probe.data()[i];
    probe.data()[i] = x0 + eps;
    const double fp = f(Array(probe));
    probe.data()[i] = x0 - eps;
    const double fm = f(Array(probe));
    probe.data()[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NonFiniteError("finite_diff_grad: f is not finite near coordinate " +
                           std::to_string(i));
    g.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return Array(std::move(g));
}

}  // namespace infoflow
