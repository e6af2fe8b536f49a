#pragma once

// Dimension reductions T: R^d -> R^m. Learned kinds (affine, shallow-net)
// minimize the Schur objective; pca and grid-pick are the unsupervised and
// correlation-screening baselines.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "infoflow/core/adam.hpp"
#include "infoflow/core/random.hpp"
#include "infoflow/data/examples.hpp"
#include "infoflow/dimred/covariance.hpp"
#include "json.hpp"

namespace infoflow {

enum class ReducerKind { Affine, ShallowNet, Pca, GridPick };
enum class Activation { Tanh, Relu };

inline std::string to_string(ReducerKind k) {
  switch (k) {
    case ReducerKind::Affine: return "affine";
    case ReducerKind::ShallowNet: return "shallow-net";
    case ReducerKind::Pca: return "pca";
    case ReducerKind::GridPick: return "grid-pick";
  }
  return "?";
}

inline ReducerKind parse_reducer_kind(std::string_view s) {
  if (s == "affine") return ReducerKind::Affine;
  if (s == "shallow-net") return ReducerKind::ShallowNet;
  if (s == "pca") return ReducerKind::Pca;
  if (s == "grid-pick") return ReducerKind::GridPick;
  throw ConfigError("unknown reducer kind '" + std::string(s) +
                    "' (expected affine|shallow-net|pca|grid-pick)");
}

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + std::string(s) + "' (expected tanh|relu)");
}

struct ReducerTrainConfig {
  ReducerKind kind = ReducerKind::ShallowNet;
  int hidden = 64;
  Activation activation = Activation::Tanh;
  int iterations = 2000;
  double learning_rate = 0.01;
  double beta1 = 0.99;
  double beta2 = 0.99;
  double jitter = 1e-6;  // relative to trace(S_TT) / m
  std::uint64_t seed = 0;
  Index full_batch_limit = 20000;
  Index minibatch = 2048;
  int eval_every = 100;  // full-data objective checks in minibatch mode
};

/// Learned kinds keep parameters in this order:
///   affine       {Ws d x m, bs 1 x m}
///   shallow-net  {W1 d x h, b1 1 x h, W2 h x m, Ws d x m, bs 1 x m}
///   pca          {P d x m}
struct Reducer {
  ReducerKind kind = ReducerKind::Affine;
  Activation activation = Activation::Tanh;
  Index input_dim = 0;
  Index output_dim = 0;
  Array in_mean;   // 1 x d
  Array in_scale;  // 1 x d
  std::vector<Array> params;
  std::vector<Index> selected;  // grid-pick coordinates
  Array out_mean;               // 1 x m, learned kinds only
  Array out_scale;
  std::vector<double> history;             // objective per training step
  std::vector<double> explained_variance;  // pca only, fractions

  Array standardize(const Array& x) const {
    if (x.cols() != input_dim)
      throw ShapeError("reducer: expected " + std::to_string(input_dim) + " predictors, got " +
                       std::to_string(x.cols()));
    return Array(Matrix((x.mat().rowwise() - in_mean.mat().row(0)).array().rowwise() /
                        in_scale.mat().row(0).array()));
  }

  /// N x d -> N x m.
  Array apply(const Array& x) const;
};

namespace detail {

template <typename V>
V activate(const V& a, Activation act) {
  return act == Activation::Tanh ? ops::tanh(a) : ops::relu(a);
}

template <typename V>
V reducer_forward(ReducerKind kind, Activation act, const V& xs, const std::vector<V>& p) {
  if (kind == ReducerKind::Affine) return ops::add(ops::matmul(xs, p[0]), p[1]);
  if (kind == ReducerKind::ShallowNet) {
    const V h = activate(ops::add(ops::matmul(xs, p[0]), p[1]), act);
    return ops::add(ops::add(ops::matmul(h, p[2]), ops::matmul(xs, p[3])), p[4]);
  }
  throw Error("reducer_forward: not a learned reducer kind");
}

inline void fit_input_standardization(const Matrix& x, Reducer& r) {
  const Index n = x.rows();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mean).array().square().colwise().sum() /
                           static_cast<double>(std::max<Index>(n - 1, 1)))
                              .sqrt();
  for (Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 0.0)) sd(j) = 1.0;  // constant coordinate: centre only
  r.input_dim = x.cols();
  r.in_mean = Array(Matrix(mean));
  r.in_scale = Array(Matrix(sd));
}

inline Matrix gaussian_matrix(Index rows, Index cols, double sd, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * standard_normal(rng);
  return m;
}

}  // namespace detail

inline Array Reducer::apply(const Array& x) const {
  switch (kind) {
    case ReducerKind::GridPick:
      if (x.cols() != input_dim) throw ShapeError("reducer: wrong predictor count");
      return ops::gather_cols(x, selected);
    case ReducerKind::Pca:
      return ops::matmul(standardize(x), params.at(0));
    default: {
      const Array t = detail::reducer_forward(kind, activation, standardize(x), params);
      return Array(Matrix((t.mat().rowwise() - out_mean.mat().row(0)).array().rowwise() /
                          out_scale.mat().row(0).array()));
    }
  }
}

/// Thrown when training hits a non-finite or non-PD objective. Carries the
/// best iterate seen before the failure.
class ReducerDivergedError : public TrainingError {
 public:
  ReducerDivergedError(const std::string& what, Reducer best)
      : TrainingError(what), best_(std::move(best)) {}
  const Reducer& best() const noexcept { return best_; }

 private:
  Reducer best_;
};

namespace detail {

inline void finish_learned(Reducer& r, const Array& xs) {
  const Matrix t = reducer_forward(r.kind, r.activation, xs, r.params).mat();
  const Eigen::RowVectorXd mean = t.colwise().mean();
  Eigen::RowVectorXd sd =
      ((t.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(t.rows() - 1))
          .sqrt();
  for (Index j = 0; j < sd.size(); ++j)
    if (!(sd(j) > 0.0)) sd(j) = 1.0;
  r.out_mean = Array(Matrix(mean));
  r.out_scale = Array(Matrix(sd));
}

}  // namespace detail

/// Schur objective of the learned reducer on (x, y), with the same gauge
/// and jitter as training.
inline double reducer_objective(const Reducer& r, const Array& x, const Array& y,
                                double jitter = 1e-6) {
  const Array t = r.apply(x);
  return schur_loss(t, Array(centered(y.mat())), jitter).item();
}

/// Minimizes the Schur objective with Adam. Returns the best iterate by
/// full-data objective, so the result never scores worse than the
/// initialization.
inline Reducer train_reducer(const Array& x, const Array& y, Index m,
                             const ReducerTrainConfig& cfg) {
  if (cfg.kind != ReducerKind::Affine && cfg.kind != ReducerKind::ShallowNet)
    throw ConfigError("train_reducer: kind must be affine or shallow-net");
  if (m < 1) throw ConfigError("train_reducer: m must be >= 1");
  if (cfg.iterations < 1) throw ConfigError("train_reducer: iterations must be >= 1");
  if (cfg.jitter < 0.0) throw ConfigError("train_reducer: jitter must be >= 0");
  if (cfg.kind == ReducerKind::ShallowNet && cfg.hidden < 1)
    throw ConfigError("train_reducer: hidden width must be >= 1");
  if (x.rows() != y.rows()) throw ShapeError("train_reducer: X and Y row counts differ");
  if (x.rows() < y.cols() + m + 2) throw DataError("train_reducer: too few training examples");

  Reducer r;
  r.kind = cfg.kind;
  r.activation = cfg.activation;
  r.output_dim = m;
  detail::fit_input_standardization(x.mat(), r);
  const Index d = r.input_dim, n = x.rows();
  const auto xs = std::make_shared<const Array>(r.standardize(x));
  const Array yc(centered(y.mat()));

  Rng rng(cfg.seed);
  const double sd_in = 1.0 / std::sqrt(static_cast<double>(d));
  if (cfg.kind == ReducerKind::ShallowNet) {
    const double sd_h = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    r.params.emplace_back(detail::gaussian_matrix(d, cfg.hidden, sd_in, rng));
    r.params.emplace_back(1, cfg.hidden, 0.0);
    r.params.emplace_back(detail::gaussian_matrix(cfg.hidden, m, sd_h, rng));
  }
  r.params.emplace_back(detail::gaussian_matrix(d, m, sd_in, rng));
  r.params.emplace_back(1, m, 0.0);

  const bool full = n <= cfg.full_batch_limit;
  const Index batch = full ? n : std::min(cfg.minibatch, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::size_t cursor = order.size();
  auto next_batch = [&]() {
    std::vector<Index> idx;
    idx.reserve(static_cast<std::size_t>(batch));
    while (static_cast<Index>(idx.size()) < batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    return idx;
  };

  Tape tape;
  std::vector<Var> pv;
  for (const Array& p : r.params) pv.push_back(tape.parameter(p));
  Var xv, yv;
  if (full) {
    xv = tape.constant(xs);
    yv = tape.constant(yc);
  } else {
    const auto idx = next_batch();
    xv = tape.constant(ops::gather_rows(*xs, idx));
    yv = tape.constant(Array(centered(ops::gather_rows(y, idx).mat())));
  }
  Var loss = schur_loss(detail::reducer_forward(r.kind, r.activation, xv, pv), yv, cfg.jitter);

  auto full_objective = [&](const std::vector<Array>& params) {
    return schur_loss(detail::reducer_forward(r.kind, r.activation, *xs, params), yc, cfg.jitter)
        .item();
  };

  AdamState adam = AdamState::for_params(r.params, cfg.learning_rate, cfg.beta1, cfg.beta2);
  std::vector<Array> best = r.params;
  double best_obj = full ? loss.value().item() : full_objective(r.params);
  auto fail = [&](int step, const std::string& why) {
    r.params = best;
    detail::finish_learned(r, *xs);
    throw ReducerDivergedError("train_reducer: diverged at step " + std::to_string(step) + " (" +
                                   why + "); rolled back to best iterate",
                               std::move(r));
  };

  for (int step = 0; step < cfg.iterations; ++step) {
    if (step > 0) {
      try {
        for (std::size_t i = 0; i < pv.size(); ++i) tape.set_leaf(pv[i], r.params[i]);
        if (!full) {
          const auto idx = next_batch();
          tape.set_leaf(xv, ops::gather_rows(*xs, idx));
          tape.set_leaf(yv, Array(centered(ops::gather_rows(y, idx).mat())));
        }
        tape.replay();
      } catch (const Error& e) {
        fail(step, e.what());
      }
    }
    const double obj = loss.value().item();
    r.history.push_back(obj);
    if (full && obj < best_obj) {
      best_obj = obj;
      best = r.params;
    }
    if (!full && step > 0 && step % cfg.eval_every == 0) {
      try {
        const double f = full_objective(r.params);
        if (f < best_obj) {
          best_obj = f;
          best = r.params;
        }
      } catch (const Error& e) {
        fail(step, e.what());
      }
    }
    try {
      const auto grads = reverse_grad(tape, loss);
      adam_step(r.params, grads, adam);
    } catch (const Error& e) {
      fail(step, e.what());
    }
  }
  try {
    const double f = full_objective(r.params);
    if (f < best_obj) best = r.params;
  } catch (const Error&) {
    // final update went bad; the best iterate stands
  }
  r.params = std::move(best);
  detail::finish_learned(r, *xs);
  return r;
}

inline Reducer train_reducer(const ExampleSet& train, Index m, const ReducerTrainConfig& cfg) {
  if (train.size() == 0) throw DataError("train_reducer: empty training set");
  return train_reducer(train.predictors, train.responses, m, cfg);
}

/// Projection onto the top-m principal components of the standardized
/// predictors.
inline Reducer pca_reducer(const Array& x, Index m) {
  const Index n = x.rows(), d = x.cols();
  if (m < 1 || m > d) throw ConfigError("pca_reducer: need 1 <= m <= d");
  if (n <= m) throw DataError("pca_reducer: need more examples than components");
  Reducer r;
  r.kind = ReducerKind::Pca;
  r.output_dim = m;
  detail::fit_input_standardization(x.mat(), r);
  const Matrix xs = r.standardize(x).mat();
  const Eigen::MatrixXd cov = xs.transpose() * xs / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw Error("pca_reducer: eigen-decomposition failed");
  const Eigen::VectorXd ev = es.eigenvalues();  // ascending
  const double top = std::max(ev(d - 1), 0.0);
  Index rank = 0;
  for (Index i = 0; i < d; ++i)
    if (ev(i) > 1e-10 * top) ++rank;
  if (rank < m)
    throw DataError("pca_reducer: predictor covariance has rank " + std::to_string(rank) +
                    " < m = " + std::to_string(m));
  const double total = ev.cwiseMax(0.0).sum();
  Matrix p(d, m);
  for (Index k = 0; k < m; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    p.col(k) = v;
    r.explained_variance.push_back(ev(d - 1 - k) / total);
  }
  r.params.emplace_back(std::move(p));
  return r;
}

inline Reducer pca_reducer(const ExampleSet& train, Index m) {
  return pca_reducer(train.predictors, m);
}

/// Per-coordinate score: max over response components of |Pearson r|.
/// Constant coordinates get NaN.
inline std::vector<double> gridpoint_scores(const Array& x, const Array& y) {
  const Matrix xc = centered(x.mat()), yc = centered(y.mat());
  std::vector<double> score(static_cast<std::size_t>(x.cols()));
  const Eigen::RowVectorXd ynorm = yc.colwise().norm();
  for (Index j = 0; j < x.cols(); ++j) {
    const double xn = xc.col(j).norm();
    double best = std::numeric_limits<double>::quiet_NaN();
    if (xn > 0.0) {
      best = 0.0;
      for (Index k = 0; k < y.cols(); ++k)
        if (ynorm(k) > 0.0)
          best = std::max(best, std::abs(xc.col(j).dot(yc.col(k))) / (xn * ynorm(k)));
    }
    score[static_cast<std::size_t>(j)] = best;
  }
  return score;
}

/// Picks the m predictor coordinates most correlated with the response.
inline Reducer gridpoint_reducer(const Array& x, const Array& y, Index m) {
  const Index d = x.cols();
  if (m < 1 || m > d) throw ConfigError("gridpoint_reducer: need 1 <= m <= d");
  const auto score = gridpoint_scores(x, y);
  std::vector<Index> cand;
  for (Index j = 0; j < d; ++j)
    if (!std::isnan(score[static_cast<std::size_t>(j)])) cand.push_back(j);
  if (static_cast<Index>(cand.size()) < m)
    throw DataError("gridpoint_reducer: fewer than m non-constant predictor coordinates");
  std::stable_sort(cand.begin(), cand.end(), [&](Index a, Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  Reducer r;
  r.kind = ReducerKind::GridPick;
  r.input_dim = d;
  r.output_dim = m;
  r.in_mean = Array(1, d, 0.0);
  r.in_scale = Array(1, d, 1.0);
  r.selected.assign(cand.begin(), cand.begin() + m);
  return r;
}

inline Reducer gridpoint_reducer(const ExampleSet& train, Index m) {
  return gridpoint_reducer(train.predictors, train.responses, m);
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json array_to_json(const Array& a) {
  return {{"shape", {a.rows(), a.cols()}}, {"data", a.to_vector()}};
}

inline Array array_from_json(const nlohmann::json& j) {
  const auto shape = j.at("shape").get<std::vector<Index>>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 ||
      static_cast<std::size_t>(shape[0] * shape[1]) != data.size())
    throw ParseError("array: shape does not match data length");
  Matrix m(shape[0], shape[1]);
  std::copy(data.begin(), data.end(), m.data());
  return Array(std::move(m));
}

inline nlohmann::json reducer_to_json(const Reducer& r) {
  nlohmann::json j;
  j["version"] = "reducer-v1";
  j["kind"] = to_string(r.kind);
  j["activation"] = to_string(r.activation);
  j["input_dim"] = r.input_dim;
  j["output_dim"] = r.output_dim;
  j["in_mean"] = array_to_json(r.in_mean);
  j["in_scale"] = array_to_json(r.in_scale);
  j["params"] = nlohmann::json::array();
  for (const Array& p : r.params) j["params"].push_back(array_to_json(p));
  j["selected"] = r.selected;
  if (!r.out_mean.empty()) {
    j["out_mean"] = array_to_json(r.out_mean);
    j["out_scale"] = array_to_json(r.out_scale);
  }
  j["history"] = r.history;
  j["explained_variance"] = r.explained_variance;
  return j;
}

inline Reducer reducer_from_json(const nlohmann::json& j) {
  try {
    if (const auto v = j.at("version").get<std::string>(); v != "reducer-v1")
      throw ParseError("reducer: version mismatch: expected reducer-v1, found " + v);
    Reducer r;
    r.kind = parse_reducer_kind(j.at("kind").get<std::string>());
    r.activation = parse_activation(j.at("activation").get<std::string>());
    r.input_dim = j.at("input_dim").get<Index>();
    r.output_dim = j.at("output_dim").get<Index>();
    r.in_mean = array_from_json(j.at("in_mean"));
    r.in_scale = array_from_json(j.at("in_scale"));
    for (const auto& p : j.at("params")) r.params.push_back(array_from_json(p));
    r.selected = j.at("selected").get<std::vector<Index>>();
    if (j.contains("out_mean")) {
      r.out_mean = array_from_json(j.at("out_mean"));
      r.out_scale = array_from_json(j.at("out_scale"));
    }
    r.history = j.at("history").get<std::vector<double>>();
    r.explained_variance = j.at("explained_variance").get<std::vector<double>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("reducer: malformed document: ") + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(std::string("reducer: ") + e.what());
  }
}

}  // namespace infoflow
