#pragma once

// Coupling-layer normalizing flow over joint vectors v = (y, t) with a
// Gaussian-mixture latent.
//
// Each coupling layer pushes the A coordinates through the monotone map
//   h(x) = a x + b + c / (1 + (d x + g)^2)
// whose five parameters per coordinate come from a residual ReLU network
// of the B coordinates; B passes through unchanged.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "infoflow/core/ops.hpp"
#include "infoflow/core/random.hpp"
#include "infoflow/core/tape.hpp"
#include "infoflow/dimred/reducer.hpp"
#include "json.hpp"

namespace infoflow {

// --- the scalar coupling function -----------------------------------------

inline constexpr double kCouplingMargin = 1e-3;
/// |c| < (8 sqrt 3 / 9) a / d keeps h' > 0: max_z 2z / (1 + z^2)^2 = 9 / (8 sqrt 3).
inline constexpr double kCouplingBound = 8.0 * std::numbers::sqrt3 / 9.0 * (1.0 - kCouplingMargin);

/// a', b', d' pass through s tanh(x / s) before exponentiation so a, b, d
/// stay within [e^-s, e^s]; without it, inputs far from the training range
/// drive the piecewise-linear theta-net into exp overflow.
inline constexpr double kLogScaleBound = 10.0;

inline double soft_bound(double x) { return kLogScaleBound * std::tanh(x / kLogScaleBound); }

struct CouplingParams {
  double a, b, c, d, g;
};

inline CouplingParams constrain_theta(const std::array<double, 5>& raw) {
  for (double r : raw)
    if (!std::isfinite(r)) throw NonFiniteError("constrain_theta: non-finite raw parameter");
  const double a = std::exp(soft_bound(raw[0])), d = std::exp(soft_bound(raw[3]));
  return {a, std::exp(soft_bound(raw[1])), kCouplingBound * a / d * std::tanh(raw[2]), d, raw[4]};
}

inline double h_tilde(const CouplingParams& t, double x) {
  const double z = t.d * x + t.g;
  return t.a * x + t.b + t.c / (1.0 + z * z);
}

inline double h_tilde_prime(const CouplingParams& t, double x) {
  const double z = t.d * x + t.g, q = 1.0 + z * z;
  return t.a - 2.0 * t.c * t.d * z / (q * q);
}

/// Solves h(x) = target by Newton's method inside the bracket implied by
/// the affine part, falling back to bisection. Returns false if 200
/// iterations do not converge.
inline bool invert_h_tilde(const CouplingParams& t, double target, double& x) {
  const double ac = std::abs(t.c);
  double lo = (target - t.b - ac) / t.a, hi = (target - t.b + ac) / t.a;
  if (ac == 0.0) {
    x = (target - t.b) / t.a;
    return true;
  }
  x = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double f = h_tilde(t, x) - target;
    if (std::abs(f) <= 1e-14 * std::max(1.0, std::abs(target))) return true;
    if (f > 0.0)
      hi = x;
    else
      lo = x;
    if (hi - lo <= 1e-15 * std::max(1.0, std::abs(x))) return true;
    double next = x - f / h_tilde_prime(t, x);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    x = next;
  }
  return false;
}

// --- model ------------------------------------------------------------------

struct CouplingSpec {
  std::vector<Index> a;  // transformed coordinates
  std::vector<Index> b;  // conditioning coordinates
};

/// Theta-net parameters, in order: (W_k, b_k) for each of `depth` ReLU
/// blocks, then head W, head b, and the linear skip from the input.
struct FlowModel {
  Index p = 0;
  Index m = 0;
  int depth = 7;
  int width = 32;
  std::vector<CouplingSpec> layers;
  std::vector<std::vector<Array>> theta;
  Array logits;   // 1 x K
  Array means;    // K x D
  Array log_std;  // K x D
  Array mean;     // 1 x D, joint standardization
  Array scale;    // 1 x D
  int step = 0;

  Index dim() const noexcept { return p + m; }
  Index components() const noexcept { return logits.cols(); }

  std::vector<Array> flat_params() const {
    std::vector<Array> out;
    for (const auto& layer : theta) out.insert(out.end(), layer.begin(), layer.end());
    out.push_back(logits);
    out.push_back(means);
    out.push_back(log_std);
    return out;
  }

  void set_flat_params(const std::vector<Array>& flat) {
    std::size_t at = 0;
    for (auto& layer : theta)
      for (auto& w : layer) {
        if (!same_shape(w, flat.at(at))) throw ShapeError("flow: parameter shape mismatch");
        w = flat[at++];
      }
    logits = flat.at(at++);
    means = flat.at(at++);
    log_std = flat.at(at++);
    if (at != flat.size()) throw ShapeError("flow: wrong parameter count");
  }

  Array standardize(const Array& v) const {
    if (v.cols() != dim()) throw ShapeError("flow: expected " + std::to_string(dim()) + " columns");
    return Array(Matrix((v.mat().rowwise() - mean.mat().row(0)).array().rowwise() /
                        scale.mat().row(0).array()));
  }

  Array unstandardize(const Array& s) const {
    return Array(Matrix((s.mat().array().rowwise() * scale.mat().row(0).array()).rowwise() +
                        mean.mat().row(0).array()));
  }

  /// log |d standardized / d raw|, added to standardized log densities.
  double standardization_logdet() const { return -scale.mat().array().log().sum(); }
};

/// Default partition: layer 1 transforms y given t, layer 2 t given y;
/// `pairs` repeats that pattern.
inline std::vector<CouplingSpec> default_partition(Index p, Index m, int pairs = 1) {
  CouplingSpec first, second;
  for (Index i = 0; i < p; ++i) first.a.push_back(i);
  for (Index i = p; i < p + m; ++i) first.b.push_back(i);
  second.a = first.b;
  second.b = first.a;
  std::vector<CouplingSpec> out;
  for (int k = 0; k < pairs; ++k) {
    out.push_back(first);
    out.push_back(second);
  }
  return out;
}

struct FlowInit {
  int depth = 7;
  int width = 32;
  int components = 5;
  int pairs = 1;
  double head_sd = 0.01;
  double latent_mean_sd = 0.5;
};

/// Fresh model: He-initialized hidden blocks, small head and skip, latent
/// means from N(0, 0.5^2), unit scales, equal weights. Standardization is
/// the identity until set by training.
inline FlowModel init_flow(Index p, Index m, const FlowInit& init, Rng& rng) {
  if (p < 1 || m < 1) throw ConfigError("flow: p and m must be >= 1");
  if (init.depth < 1 || init.width < 1 || init.components < 1 || init.pairs < 1)
    throw ConfigError("flow: depth, width, components and pairs must be >= 1");
  FlowModel f;
  f.p = p;
  f.m = m;
  f.depth = init.depth;
  f.width = init.width;
  f.layers = default_partition(p, m, init.pairs);
  const Index dim = p + m;
  auto normal = [&](Index r, Index c, double sd) {
    Matrix w(r, c);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = sd * standard_normal(rng);
    return Array(std::move(w));
  };
  for (const auto& spec : f.layers) {
    const auto nb = static_cast<Index>(spec.b.size()), out = 5 * static_cast<Index>(spec.a.size());
    std::vector<Array> w;
    Index in = nb;
    for (int k = 0; k < init.depth; ++k) {
      w.push_back(normal(in, init.width, std::sqrt(2.0 / static_cast<double>(in))));
      w.emplace_back(1, init.width, 0.0);
      in = init.width;
    }
    w.push_back(normal(init.width, out, init.head_sd));
    w.emplace_back(1, out, 0.0);
    w.push_back(normal(nb, out, init.head_sd));
    f.theta.push_back(std::move(w));
  }
  f.logits = Array(1, init.components, 0.0);
  f.means = normal(init.components, dim, init.latent_mean_sd);
  f.log_std = Array(init.components, dim, 0.0);
  f.mean = Array(1, dim, 0.0);
  f.scale = Array(1, dim, 1.0);
  return f;
}

/// Sets every theta-net weight to zero, so each layer adds 1 to its A half.
inline void zero_theta_nets(FlowModel& f) {
  for (auto& layer : f.theta)
    for (auto& w : layer) w = Array(w.rows(), w.cols(), 0.0);
}

// --- generic evaluation -------------------------------------------------------

/// Parameters of a flow in evaluation mode V (Array or Var).
template <typename V>
struct FlowParams {
  std::vector<std::vector<V>> theta;
  V logits, means, log_std;
};

inline FlowParams<Array> params_of(const FlowModel& f) {
  return {f.theta, f.logits, f.means, f.log_std};
}

template <typename V>
V theta_net(const std::vector<V>& w, int depth, const V& in) {
  V h = in;
  for (int k = 0; k < depth; ++k) h = ops::relu(ops::add(ops::matmul(h, w[2 * k]), w[2 * k + 1]));
  const auto d = static_cast<std::size_t>(depth);
  return ops::add(ops::add(ops::matmul(h, w[2 * d]), w[2 * d + 1]), ops::matmul(in, w[2 * d + 2]));
}

namespace detail {

inline std::vector<Index> strided(Index start, Index count) {
  std::vector<Index> idx(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + 5 * i;
  return idx;
}

/// Raw theta output for conditioning rows `vb`. On plain arrays, a block
/// whose rows are all equal is evaluated once and left as a single row; the
/// coupling arithmetic broadcasts it.
template <typename V>
V theta_for(const std::vector<V>& w, int depth, const V& vb) {
  if constexpr (std::is_same_v<V, Array>) {
    const Matrix& m = vb.mat();
    bool uniform = m.rows() > 1;
    for (Index i = 1; uniform && i < m.rows(); ++i) uniform = m.row(i) == m.row(0);
    if (uniform) return theta_net(w, depth, ops::gather_rows(vb, {0}));
  }
  return theta_net(w, depth, vb);
}

}  // namespace detail

template <typename V>
struct CouplingOut {
  V w;       // N x D
  V logdet;  // N x 1
};

template <typename V>
CouplingOut<V> coupling_forward(const CouplingSpec& spec, const std::vector<V>& w, int depth,
                                const V& v) {
  const auto r = static_cast<Index>(spec.a.size());
  const V va = ops::gather_cols(v, spec.a);
  const V vb = ops::gather_cols(v, spec.b);
  const V raw = detail::theta_for(w, depth, vb);
  auto bounded_exp = [&](Index k) {
    const V x = ops::gather_cols(raw, detail::strided(k, r));
    return ops::exp(ops::scale(ops::tanh(ops::scale(x, 1.0 / kLogScaleBound)), kLogScaleBound));
  };
  const V a = bounded_exp(0);
  const V b = bounded_exp(1);
  const V d = bounded_exp(3);
  const V g = ops::gather_cols(raw, detail::strided(4, r));
  const V c = ops::scale(ops::mul(ops::div(a, d), ops::tanh(ops::gather_cols(raw, detail::strided(2, r)))),
                         kCouplingBound);
  const V z = ops::add(ops::mul(d, va), g);
  const V q = ops::add_scalar(ops::square(z), 1.0);
  const V h = ops::add(ops::add(ops::mul(a, va), b), ops::div(c, q));
  const V hp = ops::sub(a, ops::scale(ops::div(ops::mul(ops::mul(c, d), z), ops::square(q)), 2.0));
  return {ops::scatter_cols(std::vector<V>{h, vb}, {spec.a, spec.b}, v.cols()),
          ops::row_sum(ops::log(hp))};
}

/// phi(v) in standardized coordinates, with the total log |det dphi/dv|.
template <typename V>
CouplingOut<V> flow_forward(const FlowModel& f, const FlowParams<V>& p, const V& v) {
  if (v.cols() != f.dim()) throw ShapeError("flow_forward: wrong input dimension");
  CouplingOut<V> out{v, V{}};
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    auto step = coupling_forward(f.layers[l], p.theta[l], f.depth, out.w);
    out.w = step.w;
    out.logdet = l == 0 ? step.logdet : ops::add(out.logdet, step.logdet);
  }
  return out;
}

inline CouplingOut<Array> flow_forward(const FlowModel& f, const Array& v) {
  return flow_forward(f, params_of(f), v);
}

/// log sum_k pi_k N(w; mu_k, diag sigma_k^2), one value per row (N x 1).
template <typename V>
V latent_logpdf(const FlowParams<V>& p, const V& w) {
  const Index k_count = p.logits.cols(), dim = w.cols();
  if (p.means.cols() != dim) throw ShapeError("latent_logpdf: dimension mismatch");
  const double norm = -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
  const V log_weights = ops::sub(p.logits, ops::logsumexp_rows(p.logits));
  std::vector<V> terms;
  for (Index k = 0; k < k_count; ++k) {
    const V ls = ops::gather_rows(p.log_std, {k});
    const V z = ops::mul(ops::sub(w, ops::gather_rows(p.means, {k})), ops::exp(ops::neg(ls)));
    terms.push_back(
        ops::sub(ops::scale(ops::row_sum(ops::square(z)), -0.5), ops::add_scalar(ops::row_sum(ls), -norm)));
  }
  return ops::logsumexp_rows(ops::add(ops::concat_cols(terms), log_weights));
}

/// Per-row log density in standardized coordinates (N x 1).
template <typename V>
V standardized_log_density(const FlowModel& f, const FlowParams<V>& p, const V& v) {
  const auto fw = flow_forward(f, p, v);
  return ops::add(latent_logpdf(p, fw.w), fw.logdet);
}

/// Mean log-likelihood of raw joint rows, in standardized coordinates.
inline double nf_loglik(const FlowModel& f, const Array& raw_batch) {
  if (raw_batch.rows() == 0) throw ShapeError("nf_loglik: empty batch");
  return ops::mean(standardized_log_density(f, params_of(f), f.standardize(raw_batch))).item();
}

/// Per-row log density of raw joint rows (N x 1), including the
/// standardization Jacobian.
inline Array log_density(const FlowModel& f, const Array& raw) {
  return ops::add_scalar(standardized_log_density(f, params_of(f), f.standardize(raw)),
                         f.standardization_logdet());
}

/// Same values as log_density, evaluated with fused Eigen expressions and a
/// single finiteness check at the end. Used for density grids, where the
/// per-op checks of the generic path dominate the cost.
inline Eigen::VectorXd log_density_batch(const FlowModel& f, const Matrix& raw) {
  const Index n = raw.rows(), dim = f.dim();
  if (raw.cols() != dim) throw ShapeError("log_density_batch: expected " + std::to_string(dim) + " columns");
  Eigen::MatrixXd v = (raw.rowwise() - f.mean.mat().row(0)).array().rowwise() / f.scale.mat().row(0).array();
  Eigen::VectorXd logdet = Eigen::VectorXd::Constant(n, f.standardization_logdet());
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    const CouplingSpec& spec = f.layers[l];
    const auto& w = f.theta[l];
    const auto nb = static_cast<Index>(spec.b.size());
    Eigen::MatrixXd vb(n, nb);
    for (Index j = 0; j < nb; ++j) vb.col(j) = v.col(spec.b[static_cast<std::size_t>(j)]);
    bool uniform = n > 1;
    for (Index i = 1; uniform && i < n; ++i) uniform = vb.row(i) == vb.row(0);
    const Eigen::MatrixXd in = uniform ? Eigen::MatrixXd(vb.topRows(1)) : vb;
    Eigen::MatrixXd h = in;
    for (int k = 0; k < f.depth; ++k) {
      const auto kk = static_cast<std::size_t>(2 * k);
      h = ((h * w[kk].mat()).rowwise() + w[kk + 1].mat().row(0)).cwiseMax(0.0);
    }
    const auto dd = static_cast<std::size_t>(2 * f.depth);
    const Eigen::MatrixXd th =
        ((h * w[dd].mat()).rowwise() + w[dd + 1].mat().row(0)) + in * w[dd + 2].mat();
    for (std::size_t j = 0; j < spec.a.size(); ++j) {
      const auto c0 = static_cast<Index>(5 * j);
      auto bexp = [&](Index c) {
        return Eigen::ArrayXd((th.col(c).array() / kLogScaleBound).tanh() * kLogScaleBound).exp().eval();
      };
      Eigen::ArrayXd a = bexp(c0), b = bexp(c0 + 1), d = bexp(c0 + 3);
      Eigen::ArrayXd g = th.col(c0 + 4).array();
      Eigen::ArrayXd c = kCouplingBound * (a / d) * th.col(c0 + 2).array().tanh();
      if (uniform) {
        a = Eigen::ArrayXd::Constant(n, a(0));
        b = Eigen::ArrayXd::Constant(n, b(0));
        c = Eigen::ArrayXd::Constant(n, c(0));
        d = Eigen::ArrayXd::Constant(n, d(0));
        g = Eigen::ArrayXd::Constant(n, g(0));
      }
      const Index col = spec.a[j];
      const Eigen::ArrayXd x = v.col(col).array();
      const Eigen::ArrayXd z = d * x + g;
      const Eigen::ArrayXd q = z.square() + 1.0;
      v.col(col) = (a * x + b + c / q).matrix();
      logdet.array() += (a - 2.0 * c * d * z / q.square()).log();
    }
  }
  const Index kc = f.components();
  const double norm = -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
  const Eigen::RowVectorXd logits = f.logits.mat().row(0);
  const double lse_w = ops::logsumexp_rows_raw(f.logits.mat())(0, 0);
  Eigen::MatrixXd terms(n, kc);
  for (Index k = 0; k < kc; ++k) {
    const Eigen::RowVectorXd mu = f.means.mat().row(k), ls = f.log_std.mat().row(k);
    const Eigen::RowVectorXd inv = (-ls.array()).exp();
    terms.col(k) = -0.5 * ((v.rowwise() - mu).array().rowwise() * inv.array()).square().rowwise().sum().matrix();
    terms.col(k).array() += norm - ls.sum() + logits(k) - lse_w;
  }
  const Eigen::VectorXd top = terms.rowwise().maxCoeff();
  Eigen::VectorXd out = top.array() + (terms.colwise() - top).array().exp().rowwise().sum().log();
  out += logdet;
  if (!out.allFinite()) throw NonFiniteError("log_density_batch: non-finite log density");
  return out;
}

// --- inversion and sampling --------------------------------------------------

/// phi^{-1}(w), standardized coordinates.
inline Array flow_inverse(const FlowModel& f, const Array& w) {
  if (w.cols() != f.dim()) throw ShapeError("flow_inverse: wrong input dimension");
  Matrix v = w.mat();
  for (std::size_t l = f.layers.size(); l-- > 0;) {
    const CouplingSpec& spec = f.layers[l];
    const Array raw = detail::theta_for(f.theta[l], f.depth, ops::gather_cols(Array(v), spec.b));
    for (Index i = 0; i < v.rows(); ++i) {
      const Index ri = raw.rows() == 1 ? 0 : i;
      for (std::size_t j = 0; j < spec.a.size(); ++j) {
        const auto c0 = static_cast<Index>(5 * j);
        const CouplingParams t = constrain_theta(
            {raw(ri, c0), raw(ri, c0 + 1), raw(ri, c0 + 2), raw(ri, c0 + 3), raw(ri, c0 + 4)});
        const Index col = spec.a[j];
        double x = 0.0;
        if (!invert_h_tilde(t, v(i, col), x))
          throw Error("flow_inverse: root finder did not converge for coordinate " +
                      std::to_string(col) + " of row " + std::to_string(i) + " in layer " +
                      std::to_string(l));
        v(i, col) = x;
      }
    }
  }
  return Array(std::move(v));
}

/// n draws from the latent mixture (standardized coordinates).
inline Array sample_latent(const FlowModel& f, Index n, Rng& rng) {
  const Matrix lw = f.logits.mat().array() - ops::logsumexp_rows_raw(f.logits.mat())(0, 0);
  std::vector<double> weights(static_cast<std::size_t>(f.components()));
  for (Index k = 0; k < f.components(); ++k) weights[static_cast<std::size_t>(k)] = std::exp(lw(0, k));
  std::discrete_distribution<Index> pick(weights.begin(), weights.end());
  Matrix out(n, f.dim());
  for (Index i = 0; i < n; ++i) {
    const Index k = pick(rng);
    for (Index j = 0; j < f.dim(); ++j)
      out(i, j) = f.means(k, j) + std::exp(f.log_std(k, j)) * standard_normal(rng);
  }
  return Array(std::move(out));
}

/// n joint draws in raw coordinates.
inline Array sample_flow(const FlowModel& f, Index n, Rng& rng) {
  return f.unstandardize(flow_inverse(f, sample_latent(f, n, rng)));
}

// --- serialization -------------------------------------------------------------

inline nlohmann::json flow_to_json(const FlowModel& f) {
  nlohmann::json j;
  j["version"] = "flow-v1";
  j["p"] = f.p;
  j["m"] = f.m;
  j["depth"] = f.depth;
  j["width"] = f.width;
  j["step"] = f.step;
  j["layers"] = nlohmann::json::array();
  for (std::size_t l = 0; l < f.layers.size(); ++l) {
    nlohmann::json layer;
    layer["a"] = f.layers[l].a;
    layer["b"] = f.layers[l].b;
    layer["theta"] = nlohmann::json::array();
    for (const Array& w : f.theta[l]) layer["theta"].push_back(array_to_json(w));
    j["layers"].push_back(std::move(layer));
  }
  j["latent"] = {{"logits", array_to_json(f.logits)},
                 {"means", array_to_json(f.means)},
                 {"log_std", array_to_json(f.log_std)}};
  j["standardization"] = {{"mean", array_to_json(f.mean)}, {"scale", array_to_json(f.scale)}};
  return j;
}

inline FlowModel flow_from_json(const nlohmann::json& j) {
  try {
    if (const auto v = j.at("version").get<std::string>(); v != "flow-v1")
      throw ParseError("flow: version mismatch: expected flow-v1, found " + v);
    FlowModel f;
    f.p = j.at("p").get<Index>();
    f.m = j.at("m").get<Index>();
    f.depth = j.at("depth").get<int>();
    f.width = j.at("width").get<int>();
    f.step = j.at("step").get<int>();
    for (const auto& layer : j.at("layers")) {
      f.layers.push_back({layer.at("a").get<std::vector<Index>>(), layer.at("b").get<std::vector<Index>>()});
      std::vector<Array> w;
      for (const auto& a : layer.at("theta")) w.push_back(array_from_json(a));
      if (w.size() != static_cast<std::size_t>(2 * f.depth + 3))
        throw ParseError("flow: theta-net has wrong number of arrays");
      f.theta.push_back(std::move(w));
    }
    const auto& lat = j.at("latent");
    f.logits = array_from_json(lat.at("logits"));
    f.means = array_from_json(lat.at("means"));
    f.log_std = array_from_json(lat.at("log_std"));
    f.mean = array_from_json(j.at("standardization").at("mean"));
    f.scale = array_from_json(j.at("standardization").at("scale"));
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("flow: malformed document: ") + e.what());
  }
}

}  // namespace infoflow
