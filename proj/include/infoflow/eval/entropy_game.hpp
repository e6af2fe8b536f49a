#pragma once

// Pairwise sharpness comparison by summed conditional log-likelihoods, with
// a percentile bootstrap over example-level differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "infoflow/core/linalg.hpp"
#include "infoflow/core/random.hpp"
#include "infoflow/forecast/forecast.hpp"

namespace infoflow {

/// Anything that turns one raw predictor row into a forecast grid.
struct Forecaster {
  std::string name;
  std::function<DensityGrid(const Eigen::RowVectorXd& x)> density;
};

inline Forecaster flow_forecaster(std::string name, FlowModel model, Reducer reducer, GridSpec spec) {
  return {std::move(name), [model = std::move(model), reducer = std::move(reducer), spec](const Eigen::RowVectorXd& x) {
            const Array t = reducer.apply(Array(Matrix(x)));
            return conditional_density(model, t.mat().row(0), spec);
          }};
}

/// Cell-centred grid of N(mean, cov), normalized like conditional_density.
inline DensityGrid gaussian_density(const Eigen::Vector2d& mean, const Eigen::Matrix2d& cov, const GridSpec& spec) {
  validate(spec);
  const Eigen::LLT<Eigen::Matrix2d> llt(cov);
  if (llt.info() != Eigen::Success) throw NotPositiveDefiniteError(2, cov.determinant());
  const Eigen::Matrix2d inv = llt.solve(Eigen::Matrix2d::Identity());
  const double log_norm = -std::log(2.0 * std::numbers::pi) - 0.5 * std::log(cov.determinant());
  DensityGrid g;
  g.axes = spec.axes;
  g.cell_area = spec.axes[0].width() * spec.axes[1].width();
  Matrix lp(spec.axes[0].cells, spec.axes[1].cells);
  for (Index i = 0; i < lp.rows(); ++i)
    for (Index j = 0; j < lp.cols(); ++j) {
      const Eigen::Vector2d d = Eigen::Vector2d(spec.axes[0].center(i), spec.axes[1].center(j)) - mean;
      lp(i, j) = log_norm - 0.5 * d.dot(inv * d);
    }
  const double top = lp.maxCoeff();
  if (top < kLogDensityFloor) throw OutOfDistributionError("gaussian_density: grid misses the forecast mass");
  g.values = (lp.array() - top).exp().matrix();
  const double z = g.values.sum() * g.cell_area;
  g.values /= z;
  g.log_normalizer = top + std::log(z);
  return g;
}

/// y | x ~ N(B x + c, S) with B p x d. Climatology is B = 0, c and S the
/// marginal moments.
inline Forecaster gaussian_forecaster(std::string name, Matrix coef, Eigen::Vector2d intercept, Eigen::Matrix2d cov,
                                      GridSpec spec) {
  if (coef.rows() != 2) throw ShapeError("gaussian_forecaster: coefficient matrix must have 2 rows");
  return {std::move(name), [coef = std::move(coef), intercept, cov, spec](const Eigen::RowVectorXd& x) {
            if (x.size() != coef.cols()) throw ShapeError("gaussian_forecaster: wrong predictor count");
            const Eigen::Vector2d mean = coef * x.transpose() + intercept;
            return gaussian_density(mean, cov, spec);
          }};
}

inline CalibrationReport evaluate(const Forecaster& f, const ExampleSet& data, const CalibrationWeights& w = {}) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  return score_grids([&](Index i) { return f.density(data.predictors.mat().row(i)); }, data.responses, w);
}

struct EntropyGameResult {
  std::string a, b;
  double score = 0.0;               // sum of ln q_A - ln q_B
  std::vector<double> differences;  // per scored example
  std::uint64_t floored_a = 0;      // terms using a grid floor density
  std::uint64_t floored_b = 0;
  std::uint64_t dropped = 0;        // skipped by either forecaster
  double ci_lo = 0.0, ci_hi = 0.0;  // bootstrap interval on the score, if computed

  std::uint64_t n() const { return differences.size(); }
  double mean() const { return differences.empty() ? 0.0 : score / static_cast<double>(differences.size()); }
};

/// Positive score means A is sharper. Examples skipped (out of
/// distribution) by either side are dropped and counted.
inline EntropyGameResult entropy_game(const std::string& a, const CalibrationReport& ra, const std::string& b,
                                      const CalibrationReport& rb) {
  if (ra.examples.size() != rb.examples.size())
    throw ShapeError("entropy_game: forecasters were scored on different example counts");
  EntropyGameResult out;
  out.a = a;
  out.b = b;
  for (std::size_t i = 0; i < ra.examples.size(); ++i) {
    const ExampleScore &ea = ra.examples[i], &eb = rb.examples[i];
    if (ea.skipped || eb.skipped) {
      ++out.dropped;
      continue;
    }
    out.differences.push_back(ea.log_q - eb.log_q);
    out.floored_a += ea.floored;
    out.floored_b += eb.floored;
  }
  if (out.differences.empty()) throw DataError("entropy_game: no example was scored by both forecasters");
  for (double d : out.differences) out.score += d;
  return out;
}

inline EntropyGameResult entropy_game(const Forecaster& fa, const Forecaster& fb, const ExampleSet& test) {
  return entropy_game(fa.name, evaluate(fa, test), fb.name, evaluate(fb, test));
}

/// The (B, A) game. Negation is exact in floating point, so the score and
/// interval are exact negatives of the (A, B) ones.
inline EntropyGameResult reversed(const EntropyGameResult& g) {
  EntropyGameResult r = g;
  std::swap(r.a, r.b);
  std::swap(r.floored_a, r.floored_b);
  for (double& d : r.differences) d = -d;
  r.score = 0.0;
  for (double d : r.differences) r.score += d;
  r.ci_lo = -g.ci_hi;
  r.ci_hi = -g.ci_lo;
  return r;
}

/// Percentile bootstrap interval on the sum of `differences`. The interval
/// uses order statistics symmetric in rank, so negated inputs give an
/// exactly negated interval.
inline std::pair<double, double> bootstrap_interval(const std::vector<double>& differences, double level,
                                                    int resamples, std::uint64_t seed) {
  if (differences.empty()) throw DataError("bootstrap_interval: no differences");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_interval: level must lie in (0, 1)");
  if (resamples < 1) throw ConfigError("bootstrap_interval: need at least one resample");
  Rng rng(seed);
  const std::size_t n = differences.size();
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> sums(static_cast<std::size_t>(resamples));
  for (double& s : sums) {
    s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += differences[pick(rng)];
  }
  std::sort(sums.begin(), sums.end());
  const auto r = sums.size();
  const auto lo = std::min(static_cast<std::size_t>(std::floor(0.5 * (1.0 - level) * static_cast<double>(r))), r - 1);
  return {sums[lo], sums[r - 1 - lo]};
}

}  // namespace infoflow
