#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "infoflow/core/adam.hpp"
#include "infoflow/data/examples.hpp"
#include "infoflow/flow/flow.hpp"

namespace infoflow {

struct FlowTrainConfig {
  int steps = 1200;
  Index batch = 150;
  double learning_rate = 0.01;
  double beta1 = 0.99;
  double beta2 = 0.99;
  int warmup = 300;
  int checkpoint_every = 100;
  int max_rollbacks = 2;
  FlowInit init;
  std::uint64_t seed = 0;
};

struct FlowCheckpoint {
  int step = 0;
  FlowModel model;
  double validation_loglik = 0.0;  // mean, standardized coordinates
};

struct FlowTrainResult {
  FlowModel model;
  std::vector<FlowCheckpoint> checkpoints;
  std::vector<double> loss;  // negative mean log-likelihood per step
  int rollbacks = 0;
};

/// Stacks (y, T(x)) row-wise into joint vectors.
inline Array joint_vectors(const Array& y, const Array& t) {
  if (y.rows() != t.rows()) throw ShapeError("joint_vectors: row counts differ");
  return ops::concat_cols({y, t});
}

/// Maximizes the mean log-likelihood of the joint rows with Adam on
/// shuffled minibatches. Checkpoints are full snapshots at every
/// `checkpoint_every` steps strictly after `warmup`. A non-finite loss
/// rolls back to the last checkpoint (or the initial model) with half the
/// learning rate, at most `max_rollbacks` times.
inline FlowTrainResult train_flow(const Array& train_joint, const Array& validation_joint, Index p,
                                  const FlowTrainConfig& cfg) {
  const Index n = train_joint.rows(), dim = train_joint.cols();
  if (n < 2) throw DataError("train_flow: need at least two training rows");
  if (validation_joint.rows() == 0) throw DataError("train_flow: empty validation set");
  if (validation_joint.cols() != dim) throw ShapeError("train_flow: validation dimension differs");
  if (cfg.steps < 1 || cfg.batch < 1 || cfg.checkpoint_every < 1 || cfg.warmup < 0)
    throw ConfigError("train_flow: steps, batch and checkpoint interval must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("train_flow: learning rate must be positive");

  Rng rng(cfg.seed);
  FlowModel model = init_flow(p, dim - p, cfg.init, rng);
  {
    const Matrix& x = train_joint.mat();
    const Eigen::RowVectorXd mu = x.colwise().mean();
    Eigen::RowVectorXd sd =
        ((x.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt();
    for (Index j = 0; j < dim; ++j)
      if (!(sd(j) > 0.0)) throw DataError("train_flow: joint coordinate " + std::to_string(j) + " is constant");
    model.mean = Array(Matrix(mu));
    model.scale = Array(Matrix(sd));
  }
  const Array xs = model.standardize(train_joint);
  const Index batch = std::min(cfg.batch, n);

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

  std::vector<Array> params = model.flat_params();
  Tape tape;
  std::vector<Var> pv;
  for (const Array& a : params) pv.push_back(tape.parameter(a));
  FlowParams<Var> fp;
  std::size_t at = 0;
  for (const auto& layer : model.theta) {
    fp.theta.emplace_back(pv.begin() + static_cast<std::ptrdiff_t>(at),
                          pv.begin() + static_cast<std::ptrdiff_t>(at + layer.size()));
    at += layer.size();
  }
  fp.logits = pv[at];
  fp.means = pv[at + 1];
  fp.log_std = pv[at + 2];
  const Var xb = tape.constant(ops::gather_rows(xs, next_batch()));
  const Var loss = ops::neg(ops::mean(standardized_log_density(model, fp, xb)));

  FlowTrainResult result;
  AdamState adam = AdamState::for_params(params, cfg.learning_rate, cfg.beta1, cfg.beta2);
  FlowModel restore_point = model;
  double lr = cfg.learning_rate;
  int step = 0;
  bool fresh_tape = true;
  while (step < cfg.steps) {
    bool ok = true;
    try {
      if (!fresh_tape) {
        for (std::size_t i = 0; i < pv.size(); ++i) tape.set_leaf(pv[i], params[i]);
        tape.set_leaf(xb, ops::gather_rows(xs, next_batch()));
        tape.replay();
      }
      fresh_tape = false;
      const double l = loss.value().item();
      const auto grads = reverse_grad(tape, loss);
      adam_step(params, grads, adam);
      result.loss.push_back(l);
    } catch (const Error&) {
      ok = false;
    }
    if (!ok) {
      if (result.rollbacks >= cfg.max_rollbacks)
        throw TrainingError("train_flow: non-finite loss at step " + std::to_string(step + 1) +
                            " after " + std::to_string(result.rollbacks) + " rollbacks");
      ++result.rollbacks;
      lr *= 0.5;
      params = restore_point.flat_params();
      adam = AdamState::for_params(params, lr, cfg.beta1, cfg.beta2);
      step = restore_point.step;
      result.loss.resize(static_cast<std::size_t>(step));
      while (!result.checkpoints.empty() && result.checkpoints.back().step > step)
        result.checkpoints.pop_back();
      continue;
    }
    ++step;
    if (step > cfg.warmup && step % cfg.checkpoint_every == 0) {
      FlowModel snap = model;
      snap.set_flat_params(params);
      snap.step = step;
      double vl = 0.0;
      try {
        vl = nf_loglik(snap, validation_joint);
      } catch (const Error&) {
        vl = -std::numeric_limits<double>::infinity();
      }
      result.checkpoints.push_back({step, snap, vl});
      restore_point = snap;
    }
  }
  model.set_flat_params(params);
  model.step = step;
  result.model = std::move(model);
  return result;
}

/// Trains on (y, T(x)) built from the joint-model training split.
inline FlowTrainResult train_flow(const ExampleSet& jm_train, const ExampleSet& validation,
                                  const Reducer& reducer, const FlowTrainConfig& cfg) {
  if (jm_train.size() == 0 || validation.size() == 0)
    throw DataError("train_flow: training and validation sets must be non-empty");
  return train_flow(joint_vectors(jm_train.responses, reducer.apply(jm_train.predictors)),
                    joint_vectors(validation.responses, reducer.apply(validation.predictors)),
                    jm_train.response_dim(), cfg);
}

}  // namespace infoflow
