#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "infoflow/core/error.hpp"

namespace infoflow {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

/// Immutable dense row-major 2-D array of finite reals.
///
/// Vectors are stored as n x 1 columns or 1 x n rows; scalars as 1 x 1.
/// Construction rejects NaN and infinities, so every Array that exists is
/// finite.
class Array {
 public:
  Array() = default;

  Array(Index rows, Index cols, double fill = 0.0) : m_(Matrix::Constant(rows, cols, fill)) {
    check_finite();
  }

  explicit Array(Matrix m) : m_(std::move(m)) { check_finite(); }

  template <typename Derived>
  explicit Array(const Eigen::MatrixBase<Derived>& expr) : m_(expr) {
    check_finite();
  }

  static Array scalar(double v) { return Array(1, 1, v); }

  static Array column(std::span<const double> v) {
    Matrix m(static_cast<Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
    return Array(std::move(m));
  }

  static Array row(std::span<const double> v) {
    Matrix m(1, static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Index>(i)) = v[i];
    return Array(std::move(m));
  }

  static Array from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const auto r = static_cast<Index>(rows.size());
    const auto c = r == 0 ? Index{0} : static_cast<Index>(rows.begin()->size());
    Matrix m(r, c);
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != c) throw ShapeError("from_rows: ragged rows");
      Index j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return Array(std::move(m));
  }

  static Array identity(Index n) { return Array(Matrix::Identity(n, n)); }

  /// Dimension sizes, outermost first.
  std::vector<Index> shape() const { return {m_.rows(), m_.cols()}; }
  Index rows() const noexcept { return m_.rows(); }
  Index cols() const noexcept { return m_.cols(); }
  Index size() const noexcept { return m_.size(); }
  bool empty() const noexcept { return m_.size() == 0; }

  double operator()(Index r, Index c) const { return m_(r, c); }
  double operator[](Index i) const { return m_.data()[i]; }

  const Matrix& mat() const noexcept { return m_; }
  std::span<const double> data() const noexcept {
    return {m_.data(), static_cast<std::size_t>(m_.size())};
  }
  std::vector<double> to_vector() const { return {m_.data(), m_.data() + m_.size()}; }

  double item() const {
    if (m_.rows() != 1 || m_.cols() != 1)
      throw ShapeError("item() on non-scalar array " + shape_string(m_.rows(), m_.cols()));
    return m_(0, 0);
  }

  std::string shape_str() const { return shape_string(m_.rows(), m_.cols()); }

 private:
  void check_finite() const {
    const double* p = m_.data();
    for (Index i = 0; i < m_.size(); ++i) {
      if (!std::isfinite(p[i]))
        throw NonFiniteError("non-finite value at flat index " + std::to_string(i) +
                             " of array " + shape_str());
    }
  }

  Matrix m_;
};

inline bool same_shape(const Array& a, const Array& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

inline bool bitwise_equal(const Array& a, const Array& b) {
  if (!same_shape(a, b)) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

inline double max_abs_diff(const Array& a, const Array& b) {
  if (!same_shape(a, b)) throw ShapeError("max_abs_diff: shape mismatch");
  return (a.mat() - b.mat()).cwiseAbs().maxCoeff();
}

}  // namespace infoflow
