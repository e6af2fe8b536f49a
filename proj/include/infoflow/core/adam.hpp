#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "infoflow/core/array.hpp"

namespace infoflow {

struct AdamState {
  std::vector<Array> first;
  std::vector<Array> second;
  std::uint64_t step = 0;
  double beta1 = 0.99;
  double beta2 = 0.99;
  double learning_rate = 0.01;
  double epsilon = 1e-8;

  /// Zero accumulators shaped like `params`.
  static AdamState for_params(std::span<const Array> params, double learning_rate,
                              double beta1 = 0.99, double beta2 = 0.99) {
    if (!(learning_rate > 0.0)) throw Error("adam: learning rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw Error("adam: betas must lie in (0, 1)");
    AdamState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.learning_rate = learning_rate;
    for (const Array& p : params) {
      s.first.emplace_back(p.rows(), p.cols(), 0.0);
      s.second.emplace_back(p.rows(), p.cols(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update, in place on `params` and `state`.
inline void adam_step(std::vector<Array>& params, std::span<const Array> grads, AdamState& state) {
  if (grads.size() != params.size() || state.first.size() != params.size() ||
      state.second.size() != params.size())
    throw ShapeError("adam_step: parameter/gradient/state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!same_shape(params[i], grads[i]) || !same_shape(params[i], state.first[i]) ||
        !same_shape(params[i], state.second[i]))
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(i));
  }
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i].mat();
    Matrix m = state.beta1 * state.first[i].mat() + (1.0 - state.beta1) * g;
    Matrix v = state.beta2 * state.second[i].mat() + (1.0 - state.beta2) * g.cwiseAbs2();
    Matrix p = params[i].mat().array() -
               state.learning_rate * (m.array() / c1) /
                   ((v.array() / c2).sqrt() + state.epsilon);
    params[i] = Array(std::move(p));
    state.first[i] = Array(std::move(m));
    state.second[i] = Array(std::move(v));
  }
  state.step += 1;
}

}  // namespace infoflow
