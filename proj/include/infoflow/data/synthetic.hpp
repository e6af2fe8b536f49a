#pragma once

// Synthetic wind-like series for desk-scale validation.
//
//   gaussian-var     x_{t+1} = A x_t + e_t over all (cell, component) pairs,
//                    A = rho * (K kron R): K a row-normalised Gaussian
//                    kernel on lattice distance, R a 2x2 rotation. The
//                    innovations e_t are spatially and u/v correlated. Joint
//                    second moments follow from the discrete Lyapunov
//                    equation S = A S A^T + Q.
//   ring             the center cell traces a noisy circle of fixed radius
//                    with drifting phase; other cells show phase-shifted
//                    noisy copies. Center marginal is an annulus.
//   pca-adversarial  every non-center cell = common AR(1) factor + private
//                    white noise; the center response is driven by the
//                    private noise of a few cells. The leading principal
//                    components of the predictors track the factor, which
//                    carries no information about the response.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "infoflow/core/linalg.hpp"
#include "infoflow/core/random.hpp"
#include "infoflow/data/examples.hpp"
#include "infoflow/data/grid_series.hpp"

namespace infoflow {

enum class ProcessFamily { GaussianVar, Ring, PcaAdversarial };

inline std::string_view to_string(ProcessFamily f) {
  switch (f) {
    case ProcessFamily::GaussianVar: return "gaussian-var";
    case ProcessFamily::Ring: return "ring";
    case ProcessFamily::PcaAdversarial: return "pca-adversarial";
  }
  return "?";
}

inline ProcessFamily parse_process_family(std::string_view s) {
  if (s == "gaussian-var") return ProcessFamily::GaussianVar;
  if (s == "ring") return ProcessFamily::Ring;
  if (s == "pca-adversarial") return ProcessFamily::PcaAdversarial;
  throw ConfigError("unknown process family '" + std::string(s) + "'");
}

struct SyntheticConfig {
  ProcessFamily family = ProcessFamily::GaussianVar;
  int rows = 5;
  int cols = 5;
  int first_year = 1990;
  int years = 11;
  std::vector<Season> seasons = {Season::Q1};
  int steps_per_slice = 1504;

  // gaussian-var
  double spectral_radius = 0.5;
  double length_scale = 1.0;
  double rotation = 0.3;  // radians
  double noise_sd = 1.0;
  double noise_length_scale = 3.0;  // spatial correlation of innovations, cells
  double noise_uv_corr = 0.5;

  // ring
  double ring_radius = 6.0;
  double radial_sd = 0.6;
  double angular_drift = 0.15;
  double angular_sd = 0.25;
  double phase_gradient = 0.1;
  double cell_noise = 0.8;

  // pca-adversarial
  double factor_sd = 1.0;
  double factor_phi = 0.95;
  int signal_cells = 2;
  double signal_strength = 0.9;
};

/// Solves S = A S A^T + Q by Smith doubling. Requires spectral radius < 1.
inline Matrix solve_discrete_lyapunov(const Matrix& a, const Matrix& q) {
  Matrix s = q;
  Matrix ak = a;
  for (int it = 0; it < 64; ++it) {
    s += ak * s * ak.transpose();
    ak = (ak * ak).eval();
    if (ak.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  return 0.5 * (s + s.transpose());
}

struct GaussianVarModel {
  Matrix transition;  // A, n x n with n = rows*cols*2
  Matrix noise_cov;   // Q
  Matrix noise_chol;  // lower factor of Q
  Matrix stationary;  // S

  /// Analytic I(center response; current step) in nats. The response is
  /// A_c x_t + e_c, so I = 1/2 ln det S_cc - 1/2 ln det Q_cc.
  double center_mutual_information(int rows, int cols, int center_row, int center_col) const {
    (void)rows;
    const Index c = (static_cast<Index>(center_row) * cols + center_col) * 2;
    const Matrix scc = stationary.block(c, c, 2, 2);
    const Matrix qcc = noise_cov.block(c, c, 2, 2);
    return 0.5 * (log_det_pd(scc) - log_det_pd(qcc));
  }
};

inline double spectral_radius(const Matrix& a) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(a);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline GaussianVarModel gaussian_var_model(const SyntheticConfig& cfg) {
  const int cells = cfg.rows * cfg.cols;
  Matrix k(cells, cells);
  for (int i = 0; i < cells; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < cells; ++j) {
      const double dr = i / cfg.cols - j / cfg.cols;
      const double dc = i % cfg.cols - j % cfg.cols;
      k(i, j) = std::exp(-(dr * dr + dc * dc) / (2.0 * cfg.length_scale * cfg.length_scale));
      row_sum += k(i, j);
    }
    k.row(i) /= row_sum;
  }
  Matrix rot(2, 2);
  rot << std::cos(cfg.rotation), -std::sin(cfg.rotation), std::sin(cfg.rotation),
      std::cos(cfg.rotation);
  const Index n = static_cast<Index>(cells) * 2;
  GaussianVarModel m;
  m.transition = Matrix::Zero(n, n);
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j)
      m.transition.block(2 * i, 2 * j, 2, 2) = cfg.spectral_radius * k(i, j) * rot;
  const double rho = spectral_radius(m.transition);
  if (!(rho < 1.0))
    throw ConfigError("gaussian-var: transition spectral radius " + std::to_string(rho) +
                      " is not below 1 (unstable)");
  if (!(std::abs(cfg.noise_uv_corr) < 1.0) || !(cfg.noise_sd > 0.0))
    throw ConfigError("gaussian-var: need noise_sd > 0 and |noise_uv_corr| < 1");
  m.noise_cov = Matrix(n, n);
  for (int i = 0; i < cells; ++i)
    for (int j = 0; j < cells; ++j) {
      const double dr = i / cfg.cols - j / cfg.cols;
      const double dc = i % cfg.cols - j % cfg.cols;
      const double kq =
          cfg.noise_length_scale > 0.0
              ? std::exp(-(dr * dr + dc * dc) /
                         (2.0 * cfg.noise_length_scale * cfg.noise_length_scale))
              : (i == j ? 1.0 : 0.0);
      Matrix c2(2, 2);
      c2 << 1.0, cfg.noise_uv_corr, cfg.noise_uv_corr, 1.0;
      m.noise_cov.block(2 * i, 2 * j, 2, 2) = cfg.noise_sd * cfg.noise_sd * kq * c2;
    }
  // Gaussian kernels are PD in exact arithmetic; a tiny ridge keeps the
  // factor well defined at long length scales.
  m.noise_cov.diagonal().array() += 1e-6 * cfg.noise_sd * cfg.noise_sd;
  m.noise_chol = cholesky_lower(m.noise_cov);
  m.stationary = solve_discrete_lyapunov(m.transition, m.noise_cov);
  return m;
}

namespace detail {

inline void validate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.rows <= 0 || cfg.cols <= 0) throw ConfigError("synthetic: lattice must be non-empty");
  if (cfg.years <= 0 || cfg.seasons.empty() || cfg.steps_per_slice <= 0)
    throw ConfigError("synthetic: need at least one slice of positive length");
  if (cfg.family == ProcessFamily::PcaAdversarial) {
    if (!(std::abs(cfg.factor_phi) < 1.0))
      throw ConfigError("pca-adversarial: factor AR coefficient must lie in (-1, 1)");
    if (cfg.signal_cells < 1 || cfg.signal_cells >= cfg.rows * cfg.cols)
      throw ConfigError("pca-adversarial: signal cell count out of range");
    if (!(cfg.signal_strength >= 0.0 && cfg.signal_strength < 1.0))
      throw ConfigError("pca-adversarial: signal strength must lie in [0, 1)");
  }
}

/// Non-center cells ordered by distance to the lattice center, ties by index.
inline std::vector<int> cells_by_distance(int rows, int cols) {
  const int cr = rows / 2, cc = cols / 2;
  std::vector<int> cells;
  for (int i = 0; i < rows * cols; ++i)
    if (i != cr * cols + cc) cells.push_back(i);
  std::stable_sort(cells.begin(), cells.end(), [&](int a, int b) {
    const int da = (a / cols - cr) * (a / cols - cr) + (a % cols - cc) * (a % cols - cc);
    const int db = (b / cols - cr) * (b / cols - cr) + (b % cols - cc) * (b % cols - cc);
    return da < db;
  });
  return cells;
}

}  // namespace detail

/// Generates a reproducible series. Slices are laid out back to back in
/// time (year-major, then season) with the process running continuously.
inline GridSeries gen_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  detail::validate_synthetic(cfg);
  Rng rng(seed);
  const int cells = cfg.rows * cfg.cols;
  const Index n = static_cast<Index>(cells) * 2;
  const int cr = cfg.rows / 2, cc = cfg.cols / 2;
  const int center = cr * cfg.cols + cc;

  std::vector<SliceLabel> slice_of_step;
  for (int y = 0; y < cfg.years; ++y)
    for (Season s : cfg.seasons)
      for (int t = 0; t < cfg.steps_per_slice; ++t)
        slice_of_step.push_back({cfg.first_year + y, s});

  GridSeries series(cfg.rows, cfg.cols);
  std::vector<double> uv(static_cast<std::size_t>(n));

  switch (cfg.family) {
    case ProcessFamily::GaussianVar: {
      const GaussianVarModel model = gaussian_var_model(cfg);
      const Matrix chol = cholesky_lower(model.stationary);
      Eigen::VectorXd z(n), x(n);
      for (Index i = 0; i < n; ++i) z(i) = standard_normal(rng);
      x = chol * z;  // start in the stationary law, no burn-in needed
      for (std::size_t t = 0; t < slice_of_step.size(); ++t) {
        for (Index i = 0; i < n; ++i) uv[static_cast<std::size_t>(i)] = x(i);
        series.push_step(static_cast<std::int64_t>(t), slice_of_step[t], uv);
        for (Index i = 0; i < n; ++i) z(i) = standard_normal(rng);
        x = model.transition * x + model.noise_chol * z;
      }
      break;
    }
    case ProcessFamily::Ring: {
      std::uniform_real_distribution<double> unif(0.0, 2.0 * std::numbers::pi);
      double phase = unif(rng);
      for (std::size_t t = 0; t < slice_of_step.size(); ++t) {
        const double radius = cfg.ring_radius + cfg.radial_sd * standard_normal(rng);
        for (int i = 0; i < cells; ++i) {
          const auto k = static_cast<std::size_t>(i) * 2;
          if (i == center) {
            uv[k] = radius * std::cos(phase);
            uv[k + 1] = radius * std::sin(phase);
          } else {
            const double shift = cfg.phase_gradient * ((i % cfg.cols) - cc + (i / cfg.cols) - cr);
            uv[k] = radius * std::cos(phase + shift) + cfg.cell_noise * standard_normal(rng);
            uv[k + 1] = radius * std::sin(phase + shift) + cfg.cell_noise * standard_normal(rng);
          }
        }
        series.push_step(static_cast<std::int64_t>(t), slice_of_step[t], uv);
        phase += cfg.angular_drift + cfg.angular_sd * standard_normal(rng);
      }
      break;
    }
    case ProcessFamily::PcaAdversarial: {
      const auto order = detail::cells_by_distance(cfg.rows, cfg.cols);
      const std::vector<int> signal(order.begin(), order.begin() + cfg.signal_cells);
      const double innov = cfg.factor_sd * std::sqrt(1.0 - cfg.factor_phi * cfg.factor_phi);
      const double weight = cfg.signal_strength / std::sqrt(static_cast<double>(cfg.signal_cells));
      const double resid = std::sqrt(1.0 - cfg.signal_strength * cfg.signal_strength);
      double factor[2] = {cfg.factor_sd * standard_normal(rng), cfg.factor_sd * standard_normal(rng)};
      std::vector<double> noise(static_cast<std::size_t>(n));
      std::vector<double> prev_noise(static_cast<std::size_t>(n));
      for (auto& e : prev_noise) e = standard_normal(rng);
      for (std::size_t t = 0; t < slice_of_step.size(); ++t) {
        for (auto& e : noise) e = standard_normal(rng);
        for (int i = 0; i < cells; ++i) {
          for (int comp = 0; comp < 2; ++comp) {
            const auto k = static_cast<std::size_t>(i) * 2 + comp;
            if (i == center) {
              double drive = 0.0;
              for (int s : signal) drive += prev_noise[static_cast<std::size_t>(s) * 2 + comp];
              uv[k] = weight * drive + resid * standard_normal(rng);
            } else {
              uv[k] = factor[comp] + noise[k];
            }
          }
        }
        series.push_step(static_cast<std::int64_t>(t), slice_of_step[t], uv);
        prev_noise.swap(noise);
        for (double& f : factor) f = cfg.factor_phi * f + innov * standard_normal(rng);
      }
      break;
    }
  }
  return series;
}

/// Jointly normal (y, x) sample with known covariance, for checking the
/// reduction stage directly without a lattice.
struct JointNormalSample {
  ExampleSet examples;
  Matrix joint_cov;  // (p + d) square, response block first
  Matrix coefficients;  // p x d, E[y | x] = B x
  Matrix noise_cov;     // p x p
};

inline JointNormalSample gen_joint_normal(int d, int p, Index n, std::uint64_t seed,
                                          double signal = 1.5) {
  Rng rng(seed);
  Matrix g(d, d);
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  Matrix sxx = g * g.transpose() / static_cast<double>(d);
  sxx.diagonal().array() += 0.5;
  Matrix b(p, d);
  for (Index i = 0; i < b.size(); ++i)
    b.data()[i] = signal * standard_normal(rng) / std::sqrt(static_cast<double>(d));
  const Matrix noise = Matrix::Identity(p, p);

  JointNormalSample out;
  out.coefficients = b;
  out.noise_cov = noise;
  out.joint_cov = Matrix(p + d, p + d);
  out.joint_cov.topLeftCorner(p, p) = b * sxx * b.transpose() + noise;
  out.joint_cov.topRightCorner(p, d) = b * sxx;
  out.joint_cov.bottomLeftCorner(d, p) = sxx * b.transpose();
  out.joint_cov.bottomRightCorner(d, d) = sxx;

  const Matrix lx = cholesky_lower(sxx);
  Matrix x(n, d), y(n, p);
  Eigen::VectorXd z(d);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) z(j) = standard_normal(rng);
    x.row(i) = (lx * z).transpose();
    Eigen::VectorXd yi = b * x.row(i).transpose();
    for (Index j = 0; j < p; ++j) yi(j) += standard_normal(rng);
    y.row(i) = yi.transpose();
  }
  out.examples.responses = Array(std::move(y));
  out.examples.predictors = Array(std::move(x));
  return out;
}

}  // namespace infoflow
