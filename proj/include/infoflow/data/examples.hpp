#pragma once

#include <cstdint>
#include <vector>

#include "infoflow/core/array.hpp"
#include "infoflow/core/ops.hpp"
#include "infoflow/data/grid_series.hpp"

namespace infoflow {

/// Paired (response, predictor) samples.
///
/// Predictor layout is lag-major (newest step first), then the lattice in
/// row-major order, then (u, v).
struct ExampleSet {
  Array responses;   // N x p
  Array predictors;  // N x d
  int lags = 0;
  int center_row = 0;
  int center_col = 0;
  int lattice_rows = 0;
  int lattice_cols = 0;
  std::vector<SliceLabel> labels;     // source slice per example
  std::vector<std::int64_t> times;    // time of the newest predictor step

  Index size() const noexcept { return responses.rows(); }
  Index response_dim() const noexcept { return responses.cols(); }
  Index predictor_dim() const noexcept { return predictors.cols(); }

  /// Flat predictor coordinate of (lag, row, col, component).
  Index predictor_index(int lag, int row, int col, int comp) const {
    return ((static_cast<Index>(lag) * lattice_rows + row) * lattice_cols + col) * 2 + comp;
  }

  ExampleSet subset(const std::vector<Index>& idx) const {
    ExampleSet out;
    out.responses = ops::gather_rows(responses, idx);
    out.predictors = ops::gather_rows(predictors, idx);
    out.lags = lags;
    out.center_row = center_row;
    out.center_col = center_col;
    out.lattice_rows = lattice_rows;
    out.lattice_cols = lattice_cols;
    for (Index i : idx) {
      if (!labels.empty()) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
      if (!times.empty()) out.times.push_back(times[static_cast<std::size_t>(i)]);
    }
    return out;
  }
};

/// Slides a (k+1)-step window over the series: the example anchored at step
/// i has predictors from steps i, i-1, ..., i-k and the center cell at step
/// i+1 as response. Windows that leave their seasonal slice are dropped.
inline ExampleSet build_examples(const GridSeries& series, int lags, int center_row,
                                 int center_col) {
  if (lags < 0) throw DataError("build_examples: lag count must be non-negative");
  if (center_row < 0 || center_row >= series.rows() || center_col < 0 ||
      center_col >= series.cols())
    throw DataError("build_examples: center (" + std::to_string(center_row) + "," +
                    std::to_string(center_col) + ") is outside the " +
                    std::to_string(series.rows()) + "x" + std::to_string(series.cols()) +
                    " lattice");
  const auto T = series.length();
  if (T < static_cast<std::size_t>(lags) + 2)
    throw DataError("build_examples: series of length " + std::to_string(T) +
                    " is too short for k = " + std::to_string(lags) + " (need k + 2)");

  const auto& times = series.times();
  const auto& labels = series.labels();
  std::vector<std::size_t> anchors;
  for (std::size_t i = static_cast<std::size_t>(lags); i + 1 < T; ++i) {
    const std::size_t first = i - static_cast<std::size_t>(lags);
    if (labels[first] != labels[i + 1]) continue;
    if (times[i + 1] - times[first] != lags + 1) continue;
    anchors.push_back(i);
  }
  if (anchors.empty()) throw DataError("build_examples: no window fits inside a single slice");

  const Index step_width = static_cast<Index>(series.cells()) * 2;
  const Index d = step_width * (lags + 1);
  Matrix x(static_cast<Index>(anchors.size()), d);
  Matrix y(static_cast<Index>(anchors.size()), 2);
  ExampleSet out;
  for (std::size_t n = 0; n < anchors.size(); ++n) {
    const std::size_t i = anchors[n];
    const auto row = static_cast<Index>(n);
    for (int lag = 0; lag <= lags; ++lag) {
      const double* src = series.step_data(i - static_cast<std::size_t>(lag));
      for (Index j = 0; j < step_width; ++j) x(row, lag * step_width + j) = src[j];
    }
    y(row, 0) = series.value(i + 1, center_row, center_col, 0);
    y(row, 1) = series.value(i + 1, center_row, center_col, 1);
    out.labels.push_back(labels[i]);
    out.times.push_back(times[i]);
  }
  out.responses = Array(std::move(y));
  out.predictors = Array(std::move(x));
  out.lags = lags;
  out.center_row = center_row;
  out.center_col = center_col;
  out.lattice_rows = series.rows();
  out.lattice_cols = series.cols();
  return out;
}

}  // namespace infoflow
