#pragma once

// Conditional forecast densities on a response lattice (p = 2), their
// highest-density contours, hit rates and calibration-based checkpoint
// selection.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "infoflow/data/examples.hpp"
#include "infoflow/data/grid_series.hpp"
#include "infoflow/dimred/reducer.hpp"
#include "infoflow/flow/flow.hpp"
#include "infoflow/flow/train.hpp"
#include "infoflow/forecast/calibration.hpp"
#include "json.hpp"

namespace infoflow {

/// Uniform lattice of `cells` cells on [lo, hi]; values live at cell centres.
struct GridAxis {
  double lo = 0.0;
  double hi = 1.0;
  Index cells = 128;

  double width() const { return (hi - lo) / static_cast<double>(cells); }
  double center(Index i) const { return lo + (static_cast<double>(i) + 0.5) * width(); }
};

struct GridSpec {
  std::array<GridAxis, 2> axes;
};

inline void validate(const GridSpec& spec) {
  for (const auto& a : spec.axes)
    if (!(std::isfinite(a.lo) && std::isfinite(a.hi) && a.hi > a.lo) || a.cells < 2)
      throw ConfigError("grid spec: each axis needs finite lo < hi and at least 2 cells");
}

/// Bounding box of the responses, widened by `expand` of its extent on each
/// side, with `cells` cells per axis.
inline GridSpec default_grid_spec(const Array& responses, Index cells = 128, double expand = 0.25) {
  if (responses.cols() != 2) throw ShapeError("grid spec: the density grid supports p = 2 only");
  if (responses.rows() < 2) throw DataError("grid spec: need at least two responses");
  if (cells < 2 || !(expand >= 0.0)) throw ConfigError("grid spec: need cells >= 2 and expand >= 0");
  GridSpec spec;
  for (Index j = 0; j < 2; ++j) {
    const double lo = responses.mat().col(j).minCoeff(), hi = responses.mat().col(j).maxCoeff();
    if (!(hi > lo)) throw DataError("grid spec: response component " + std::to_string(j + 1) + " is constant");
    const double pad = expand * (hi - lo);
    spec.axes[static_cast<std::size_t>(j)] = {lo - pad, hi + pad, cells};
  }
  return spec;
}

/// Normalized conditional density; values(i, j) sits at
/// (axes[0].center(i), axes[1].center(j)).
struct DensityGrid {
  std::array<GridAxis, 2> axes;
  Matrix values;
  double cell_area = 0.0;
  double log_normalizer = 0.0;  // ln of the Riemann sum before normalizing

  double mass() const { return values.sum() * cell_area; }

  /// Smallest positive cell density.
  double floor_density() const {
    double m = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < values.size(); ++i)
      if (values.data()[i] > 0.0) m = std::min(m, values.data()[i]);
    return m;
  }

  bool contains(double y1, double y2) const {
    return y1 >= axes[0].lo && y1 <= axes[0].hi && y2 >= axes[1].lo && y2 <= axes[1].hi;
  }

  /// Bilinear interpolation between cell centres, held constant in the half
  /// cell along the box edge. Empty outside the box.
  std::optional<double> interpolate(double y1, double y2) const {
    if (!contains(y1, y2)) return std::nullopt;
    auto locate = [](const GridAxis& a, double y, Index& i0, double& frac) {
      const double u = std::clamp((y - a.lo) / a.width() - 0.5, 0.0, static_cast<double>(a.cells - 1));
      i0 = std::min(static_cast<Index>(std::floor(u)), a.cells - 2);
      frac = u - static_cast<double>(i0);
    };
    Index i = 0, j = 0;
    double fx = 0.0, fy = 0.0;
    locate(axes[0], y1, i, fx);
    locate(axes[1], y2, j, fy);
    return (1 - fx) * (1 - fy) * values(i, j) + fx * (1 - fy) * values(i + 1, j) +
           (1 - fx) * fy * values(i, j + 1) + fx * fy * values(i + 1, j + 1);
  }
};

/// ln 1e-300: below this everywhere, the conditioning vector is treated as
/// out of distribution.
inline const double kLogDensityFloor = std::log(1e-300);

/// q(y | t) on the lattice: exp(joint log density at (y_cell, t)) divided by
/// its cell-centred Riemann sum.
inline DensityGrid conditional_density(const FlowModel& model, const Eigen::RowVectorXd& t,
                                       const GridSpec& spec) {
  validate(spec);
  if (model.p != 2) throw ShapeError("conditional_density: the density grid supports p = 2 only");
  if (t.size() != model.m)
    throw ShapeError("conditional_density: expected " + std::to_string(model.m) + " conditioning values");
  if (!t.allFinite()) throw NonFiniteError("conditional_density: conditioning vector is not finite");
  const GridAxis& ax = spec.axes[0];
  const GridAxis& ay = spec.axes[1];
  const Index n1 = ax.cells, n2 = ay.cells;
  Matrix pts(n1 * n2, 2 + model.m);
  for (Index i = 0; i < n1; ++i)
    for (Index j = 0; j < n2; ++j) {
      const Index r = i * n2 + j;
      pts(r, 0) = ax.center(i);
      pts(r, 1) = ay.center(j);
      pts.row(r).tail(model.m) = t;
    }
  const Eigen::VectorXd lp = log_density_batch(model, pts);
  const double top = lp.maxCoeff();
  if (top < kLogDensityFloor)
    throw OutOfDistributionError("conditional_density: every cell density is below 1e-300 (max ln density " +
                                 std::to_string(top) + "); conditioning vector is out of distribution");
  DensityGrid g;
  g.axes = spec.axes;
  g.cell_area = ax.width() * ay.width();
  g.values = Matrix(n1, n2);
  for (Index i = 0; i < n1; ++i)
    for (Index j = 0; j < n2; ++j) g.values(i, j) = std::exp(lp(i * n2 + j) - top);
  const double z = g.values.sum() * g.cell_area;
  g.values /= z;
  g.log_normalizer = top + std::log(z);
  return g;
}

struct ContourLevel {
  double nominal = 0.0;
  double threshold = 0.0;
  double mass = 0.0;  // achieved enclosed mass
};

namespace detail {

/// Cell densities sorted in descending order.
inline std::vector<double> sorted_desc(const DensityGrid& g) {
  std::vector<double> v(g.values.data(), g.values.data() + g.values.size());
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

inline ContourLevel hdr_from_sorted(const std::vector<double>& v, double cell_area, double nominal) {
  if (!(nominal > 0.0 && nominal < 1.0)) throw ConfigError("hdr_threshold: nominal must lie in (0, 1)");
  if (v.empty() || !(v.front() > 0.0)) throw DataError("hdr_threshold: grid has no positive density");
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < v.size() && v[i] > 0.0; ++i) {
    cum += v[i] * cell_area;
    last = i;
    if (cum >= nominal) break;
  }
  ContourLevel out{nominal, v[last], 0.0};
  for (std::size_t i = 0; i < v.size() && v[i] >= out.threshold; ++i) out.mass += v[i] * cell_area;
  return out;
}

}  // namespace detail

/// Density threshold of the smallest superlevel set holding at least
/// `nominal` mass. Cells tied with the threshold are all included; if the
/// positive cells never reach `nominal`, all of them are.
inline ContourLevel hdr_threshold(const DensityGrid& g, double nominal) {
  return detail::hdr_from_sorted(detail::sorted_desc(g), g.cell_area, nominal);
}

using ContourLevels = std::array<ContourLevel, 2>;

inline ContourLevels contour_levels(const DensityGrid& g, const CalibrationWeights& w = {}) {
  const auto v = detail::sorted_desc(g);
  return {detail::hdr_from_sorted(v, g.cell_area, w.nominal[0]),
          detail::hdr_from_sorted(v, g.cell_area, w.nominal[1])};
}

/// Whether y falls inside each contour; outside the box is a miss at both.
inline std::array<bool, 2> hit(const DensityGrid& g, const ContourLevels& levels, double y1, double y2) {
  const auto q = g.interpolate(y1, y2);
  if (!q) return {false, false};
  return {*q >= levels[0].threshold, *q >= levels[1].threshold};
}

/// One example scored against its forecast grid.
struct ExampleScore {
  bool skipped = false;    // out-of-distribution conditioning
  bool hit683 = false;
  bool hit954 = false;
  double log_q = std::numeric_limits<double>::quiet_NaN();  // ln q(y | t) at the observation
  bool floored = false;    // zero interpolated density replaced by the grid floor
};

struct CalibrationReport {
  std::uint64_t n = 0;        // evaluated examples
  std::uint64_t skipped = 0;
  std::uint64_t hits683 = 0;
  std::uint64_t hits954 = 0;
  double hr683 = 0.0;
  double hr954 = 0.0;
  double sc = 0.0;
  std::vector<ExampleScore> examples;

  /// Mean ln q over evaluated examples.
  double mean_log_q() const {
    double s = 0.0;
    std::uint64_t k = 0;
    for (const auto& e : examples)
      if (!e.skipped) {
        s += e.log_q;
        ++k;
      }
    return k == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(k);
  }

  std::uint64_t floored() const {
    return static_cast<std::uint64_t>(
        std::count_if(examples.begin(), examples.end(), [](const ExampleScore& e) { return e.floored; }));
  }
};

/// Scores observation i of `y` against grid_for(i). Out-of-distribution
/// conditioning is counted as a skip while skips stay within
/// `max_skip_fraction` of N.
template <typename GridFn>
CalibrationReport score_grids(GridFn&& grid_for, const Array& y, const CalibrationWeights& w = {},
                              double max_skip_fraction = 0.01) {
  if (y.rows() == 0) throw DataError("hit_rate: empty dataset");
  if (y.cols() != 2) throw ShapeError("hit_rate: the density grid supports p = 2 only");
  CalibrationReport rep;
  rep.examples.resize(static_cast<std::size_t>(y.rows()));
  for (Index i = 0; i < y.rows(); ++i) {
    ExampleScore& e = rep.examples[static_cast<std::size_t>(i)];
    DensityGrid g;
    try {
      g = grid_for(i);
    } catch (const OutOfDistributionError&) {
      e.skipped = true;
      ++rep.skipped;
      continue;
    }
    const ContourLevels lv = contour_levels(g, w);
    const double y1 = y(i, 0), y2 = y(i, 1);
    const auto h = hit(g, lv, y1, y2);
    e.hit683 = h[0];
    e.hit954 = h[1];
    double q = g.interpolate(y1, y2).value_or(0.0);
    if (!(q > 0.0)) {
      q = g.floor_density();
      e.floored = true;
    }
    e.log_q = std::log(q);
    rep.hits683 += h[0];
    rep.hits954 += h[1];
  }
  const auto total = static_cast<std::uint64_t>(y.rows());
  if (static_cast<double>(rep.skipped) > max_skip_fraction * static_cast<double>(total))
    throw OutOfDistributionError("hit_rate: " + std::to_string(rep.skipped) + " of " + std::to_string(total) +
                                 " examples have out-of-distribution conditioning");
  rep.n = total - rep.skipped;
  if (rep.n == 0) throw OutOfDistributionError("hit_rate: every example was skipped");
  rep.hr683 = static_cast<double>(rep.hits683) / static_cast<double>(rep.n);
  rep.hr954 = static_cast<double>(rep.hits954) / static_cast<double>(rep.n);
  rep.sc = calibration_score_counts(rep.hits683, rep.hits954, rep.n, w);
  return rep;
}

/// Scores each (t_i, y_i) pair against the flow's conditional grid at t_i.
inline CalibrationReport score_examples(const FlowModel& model, const Array& t, const Array& y,
                                        const GridSpec& spec, const CalibrationWeights& w = {},
                                        double max_skip_fraction = 0.01) {
  if (t.rows() != y.rows()) throw ShapeError("hit_rate: conditioning and response counts differ");
  return score_grids([&](Index i) { return conditional_density(model, t.mat().row(i), spec); }, y, w,
                     max_skip_fraction);
}

inline CalibrationReport hit_rate(const FlowModel& model, const Reducer& reducer, const ExampleSet& data,
                                  const GridSpec& spec, const CalibrationWeights& w = {}) {
  if (data.size() == 0) throw DataError("hit_rate: empty dataset");
  return score_examples(model, reducer.apply(data.predictors), data.responses, spec, w);
}

struct CheckpointSelection {
  std::size_t index = 0;
  std::vector<CalibrationReport> reports;  // one per checkpoint, in order
};

/// Checkpoint with the smallest validation s_c; ties go to the later step.
inline CheckpointSelection select_checkpoint(const std::vector<FlowCheckpoint>& checkpoints,
                                             const Reducer& reducer, const ExampleSet& validation,
                                             const GridSpec& spec, const CalibrationWeights& w = {}) {
  if (checkpoints.empty()) throw Error("select_checkpoint: no checkpoints");
  if (validation.size() == 0) throw DataError("select_checkpoint: empty validation set");
  const Array t = reducer.apply(validation.predictors);
  CheckpointSelection sel;
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    sel.reports.push_back(score_examples(checkpoints[k].model, t, validation.responses, spec, w));
    const auto& best = checkpoints[sel.index];
    const double sc = sel.reports.back().sc, best_sc = sel.reports[sel.index].sc;
    if (k == 0 || sc < best_sc || (sc == best_sc && checkpoints[k].step >= best.step)) sel.index = k;
  }
  return sel;
}

// --- export ----------------------------------------------------------------------

inline nlohmann::json density_grid_metadata(const DensityGrid& g, const ContourLevels& levels) {
  nlohmann::json j;
  j["version"] = "density-grid-v1";
  j["axes"] = nlohmann::json::array();
  for (const auto& a : g.axes) j["axes"].push_back({{"lo", a.lo}, {"hi", a.hi}, {"cells", a.cells}});
  j["cell_area"] = g.cell_area;
  j["log_normalizer"] = g.log_normalizer;
  j["mass"] = g.mass();
  j["contours"] = nlohmann::json::array();
  for (const auto& l : levels)
    j["contours"].push_back({{"nominal", l.nominal}, {"threshold", l.threshold}, {"mass", l.mass}});
  return j;
}

/// Writes `y1,y2,density` rows at cell centres plus a JSON sidecar with the
/// axes and contour levels.
inline void export_density_grid(const DensityGrid& g, const ContourLevels& levels,
                                const std::filesystem::path& csv_path,
                                const std::filesystem::path& json_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw Error("export_density_grid: cannot write " + csv_path.string());
  csv << "y1,y2,density\n";
  for (Index i = 0; i < g.values.rows(); ++i)
    for (Index j = 0; j < g.values.cols(); ++j)
      csv << detail::format_double(g.axes[0].center(i)) << ',' << detail::format_double(g.axes[1].center(j))
          << ',' << detail::format_double(g.values(i, j)) << '\n';
  if (!csv) throw Error("export_density_grid: write failed for " + csv_path.string());
  std::ofstream js(json_path);
  if (!js) throw Error("export_density_grid: cannot write " + json_path.string());
  js << density_grid_metadata(g, levels).dump(2) << '\n';
  if (!js) throw Error("export_density_grid: write failed for " + json_path.string());
}

}  // namespace infoflow
