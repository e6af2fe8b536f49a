#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "infoflow/core/error.hpp"

namespace infoflow {

enum class Season { Q1, Q2, Q3, Q4 };

inline std::string_view to_string(Season s) {
  static constexpr std::string_view names[] = {"Q1", "Q2", "Q3", "Q4"};
  return names[static_cast<int>(s)];
}

inline Season parse_season(std::string_view s) {
  if (s == "Q1") return Season::Q1;
  if (s == "Q2") return Season::Q2;
  if (s == "Q3") return Season::Q3;
  if (s == "Q4") return Season::Q4;
  throw ParseError("unknown season '" + std::string(s) + "' (expected Q1|Q2|Q3|Q4)");
}

/// (year, season) identifying one seasonal slice of the record.
struct SliceLabel {
  int year = 0;
  Season season = Season::Q1;
  auto operator<=>(const SliceLabel&) const = default;
};

inline std::string to_string(const SliceLabel& l) {
  return std::to_string(l.year) + "-" + std::string(to_string(l.season));
}

/// Time-indexed lattice of (u, v) wind vectors in m/s.
///
/// Times are 3-hour step indices, strictly increasing; a slice is a maximal
/// run of consecutive times sharing one label.
class GridSeries {
 public:
  GridSeries() = default;
  GridSeries(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0) throw DataError("grid series: lattice must be non-empty");
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t length() const noexcept { return times_.size(); }
  std::size_t cells() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }

  const std::vector<std::int64_t>& times() const noexcept { return times_; }
  const std::vector<SliceLabel>& labels() const noexcept { return labels_; }

  /// Appends one time step; `uv` holds rows*cols*2 values, row-major, (u, v)
  /// innermost.
  void push_step(std::int64_t time, SliceLabel label, std::vector<double> uv) {
    if (uv.size() != cells() * 2) throw DataError("grid series: wrong number of values in step");
    if (!times_.empty() && time <= times_.back())
      throw DataError("grid series: times must be strictly increasing");
    for (double x : uv)
      if (!std::isfinite(x)) throw DataError("grid series: non-finite value");
    times_.push_back(time);
    labels_.push_back(label);
    values_.insert(values_.end(), uv.begin(), uv.end());
  }

  /// Component 0 = u (zonal), 1 = v (meridional).
  double value(std::size_t step, int row, int col, int comp) const {
    return values_[((step * rows_ + row) * cols_ + col) * 2 + comp];
  }

  const double* step_data(std::size_t step) const { return values_.data() + step * cells() * 2; }

  bool operator==(const GridSeries&) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<std::int64_t> times_;
  std::vector<SliceLabel> labels_;
  std::vector<double> values_;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line, const char* what) {
  field = trim(field);
  T v{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size())
    throw ParseError("line " + std::to_string(line) + ": cannot parse " + what + " '" +
                     std::string(field) + "'");
  return v;
}

inline std::string format_double(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Parses the `time,row,col,u,v,year,season` interchange format. Rows may
/// come in any order; every (time, row, col) of every slice must be present
/// exactly once and each slice must cover a contiguous run of times.
inline GridSeries parse_grid_series(std::string_view text) {
  struct Cell {
    int row, col;
    double u, v;
  };
  struct Step {
    SliceLabel label;
    std::size_t first_line;
    std::vector<Cell> cells;
  };
  std::map<std::int64_t, Step> steps;
  int rows = 0, cols = 0;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) {
      if (nl >= text.size()) break;
      continue;
    }
    if (!header_seen) {
      if (line != "time,row,col,u,v,year,season")
        throw ParseError("line 1: expected header 'time,row,col,u,v,year,season'");
      header_seen = true;
      continue;
    }
    const auto f = detail::split_csv_line(line);
    if (f.size() != 7)
      throw ParseError("line " + std::to_string(line_no) + ": expected 7 fields, got " +
                       std::to_string(f.size()));
    const auto time = detail::parse_number<std::int64_t>(f[0], line_no, "time");
    const auto row = detail::parse_number<int>(f[1], line_no, "row");
    const auto col = detail::parse_number<int>(f[2], line_no, "col");
    const auto u = detail::parse_number<double>(f[3], line_no, "u");
    const auto v = detail::parse_number<double>(f[4], line_no, "v");
    const auto year = detail::parse_number<int>(f[5], line_no, "year");
    Season season;
    try {
      season = parse_season(detail::trim(f[6]));
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!std::isfinite(u) || !std::isfinite(v))
      throw ParseError("line " + std::to_string(line_no) + ": non-finite wind value");
    if (time < 0 || row < 0 || col < 0)
      throw ParseError("line " + std::to_string(line_no) + ": negative time/row/col");
    rows = std::max(rows, row + 1);
    cols = std::max(cols, col + 1);
    auto [it, fresh] = steps.try_emplace(time, Step{{year, season}, line_no, {}});
    if (!fresh && it->second.label != SliceLabel{year, season})
      throw ParseError("line " + std::to_string(line_no) + ": time " + std::to_string(time) +
                       " carries two different slice labels");
    it->second.cells.push_back({row, col, u, v});
  }
  if (!header_seen) throw ParseError("empty grid series file");
  if (steps.empty()) throw ParseError("grid series file has no data rows");

  GridSeries series(rows, cols);
  std::map<SliceLabel, std::int64_t> last_time_of;
  const std::size_t n_cells = static_cast<std::size_t>(rows) * cols;
  for (auto& [time, step] : steps) {
    std::vector<double> uv(n_cells * 2, 0.0);
    std::vector<char> seen(n_cells, 0);
    for (const Cell& c : step.cells) {
      const auto idx = static_cast<std::size_t>(c.row) * cols + c.col;
      if (seen[idx])
        throw ParseError("duplicate cell (time " + std::to_string(time) + ", row " +
                         std::to_string(c.row) + ", col " + std::to_string(c.col) + ")");
      seen[idx] = 1;
      uv[idx * 2] = c.u;
      uv[idx * 2 + 1] = c.v;
    }
    for (std::size_t idx = 0; idx < n_cells; ++idx) {
      if (!seen[idx])
        throw DataError("gap: missing (time " + std::to_string(time) + ", row " +
                        std::to_string(idx / cols) + ", col " + std::to_string(idx % cols) + ")");
    }
    auto prev = last_time_of.find(step.label);
    if (prev != last_time_of.end() && prev->second + 1 != time)
      throw DataError("gap: slice " + to_string(step.label) + " jumps from time " +
                      std::to_string(prev->second) + " to " + std::to_string(time) +
                      " (missing time " + std::to_string(prev->second + 1) + ", row 0, col 0)");
    last_time_of[step.label] = time;
    series.push_step(time, step.label, std::move(uv));
  }
  return series;
}

inline GridSeries load_grid_series(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open grid series file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_grid_series(ss.str());
}

/// Shortest round-trip decimal encoding, so reloading is exact.
inline void write_grid_series(std::ostream& out, const GridSeries& s) {
  out << "time,row,col,u,v,year,season\n";
  for (std::size_t t = 0; t < s.length(); ++t) {
    const auto& lab = s.labels()[t];
    const std::string tail =
        "," + std::to_string(lab.year) + "," + std::string(to_string(lab.season)) + "\n";
    for (int r = 0; r < s.rows(); ++r)
      for (int c = 0; c < s.cols(); ++c)
        out << s.times()[t] << ',' << r << ',' << c << ','
            << detail::format_double(s.value(t, r, c, 0)) << ','
            << detail::format_double(s.value(t, r, c, 1)) << tail;
  }
}

inline void save_grid_series(const std::string& path, const GridSeries& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write grid series file '" + path + "'");
  write_grid_series(out, s);
  if (!out) throw DataError("write failed for '" + path + "'");
}

}  // namespace infoflow
