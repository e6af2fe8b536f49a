#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "infoflow/core/finite_diff.hpp"
#include "infoflow/data/synthetic.hpp"
#include "infoflow/flow/train.hpp"

using namespace infoflow;
using infoflow::testing::random_array;
using infoflow::testing::rel_err;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

FlowModel random_flow(Index p, Index m, std::uint64_t seed, double head_sd = 0.1, int depth = 3,
                      int width = 8, int components = 3) {
  Rng rng(seed);
  FlowInit init;
  init.depth = depth;
  init.width = width;
  init.components = components;
  init.head_sd = head_sd;
  FlowModel f = init_flow(p, m, init, rng);
  // Non-trivial latent so every parameter matters.
  f.logits = random_array(1, components, rng, 0.5);
  f.log_std = random_array(components, p + m, rng, 0.2);
  return f;
}

/// ln |det J| of phi at a single standardized point by central differences.
double fd_logdet(const FlowModel& f, const Matrix& v, double eps = 1e-6) {
  const Index d = f.dim();
  Eigen::MatrixXd j(d, d);
  for (Index k = 0; k < d; ++k) {
    Matrix plus = v, minus = v;
    plus(0, k) += eps;
    minus(0, k) -= eps;
    j.col(k) = ((flow_forward(f, Array(plus)).w.mat() - flow_forward(f, Array(minus)).w.mat()) /
                (2.0 * eps))
                   .transpose();
  }
  return std::log(std::abs(j.determinant()));
}

/// Midpoint-rule integral of exp(log_density) over a box, in chunks.
double integrate_density(const FlowModel& f, double lo, double hi, int per_dim) {
  const Index d = f.dim();
  const double h = (hi - lo) / per_dim;
  Index total = 1;
  for (Index k = 0; k < d; ++k) total *= per_dim;
  double sum = 0.0;
  const Index chunk = 65536;
  for (Index start = 0; start < total; start += chunk) {
    const Index len = std::min(chunk, total - start);
    Matrix pts(len, d);
    for (Index i = 0; i < len; ++i) {
      Index code = start + i;
      for (Index k = 0; k < d; ++k) {
        pts(i, k) = lo + h * (static_cast<double>(code % per_dim) + 0.5);
        code /= per_dim;
      }
    }
    sum += log_density(f, Array(pts)).mat().array().exp().sum();
  }
  return sum * std::pow(h, static_cast<double>(d));
}

}  // namespace

TEST(ConstrainTheta, ZeroRawIsShiftByOne) {
  const CouplingParams t = constrain_theta({0, 0, 0, 0, 0});
  EXPECT_EQ(t.a, 1.0);
  EXPECT_EQ(t.b, 1.0);
  EXPECT_EQ(t.c, 0.0);
  EXPECT_EQ(t.d, 1.0);
  EXPECT_EQ(t.g, 0.0);
  EXPECT_EQ(h_tilde(t, 2.5), 3.5);
}

TEST(ConstrainTheta, SaturatedCHitsMonotonicityBound) {
  const CouplingParams t = constrain_theta({0.3, 0.0, 50.0, -0.2, 0.0});
  EXPECT_NEAR(t.c, 8.0 * std::sqrt(3.0) * t.a / (9.0 * t.d) * (1.0 - 1e-3), 1e-12);
}

TEST(ConstrainTheta, RandomParametersAreStrictlyIncreasing) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::array<double, 5> raw;
    for (auto& r : raw) r = 2.0 * standard_normal(rng);
    raw[2] = 10.0 * standard_normal(rng);  // push c toward the bound
    const CouplingParams t = constrain_theta(raw);
    double min_slope = std::numeric_limits<double>::infinity();
    // Fine grid in z = d x + g, where the rational term varies.
    for (int i = 0; i <= 4000; ++i) {
      const double z = -10.0 + 20.0 * i / 4000.0;
      min_slope = std::min(min_slope, h_tilde_prime(t, (z - t.g) / t.d));
    }
    EXPECT_GT(min_slope, 0.0) << "trial " << trial;
  }
}

TEST(ConstrainTheta, RejectsNonFinite) {
  EXPECT_THROW(constrain_theta({0, std::nan(""), 0, 0, 0}), NonFiniteError);
}

TEST(CouplingForward, ZeroThetaShiftsTransformedHalf) {
  FlowModel f = random_flow(2, 2, 3);
  zero_theta_nets(f);
  Rng rng(2);
  const Array v = random_array(5, 4, rng);
  const auto out = coupling_forward(f.layers[0], f.theta[0], f.depth, v);
  for (Index i = 0; i < 5; ++i) {
    EXPECT_EQ(out.w(i, 0), v(i, 0) + 1.0);
    EXPECT_EQ(out.w(i, 1), v(i, 1) + 1.0);
    EXPECT_EQ(out.w(i, 2), v(i, 2));
    EXPECT_EQ(out.w(i, 3), v(i, 3));
    EXPECT_EQ(out.logdet(i, 0), 0.0);
  }
}

TEST(CouplingForward, LogdetMatchesFiniteDifferenceJacobian) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    FlowModel f = random_flow(2, 2, 100 + static_cast<std::uint64_t>(trial));
    f.layers.resize(1);
    f.theta.resize(1);
    const Array v = random_array(1, 4, rng, 1.5);
    EXPECT_NEAR(flow_forward(f, v).logdet.item(), fd_logdet(f, v.mat()), 1e-5);
  }
}

TEST(CouplingForward, ConditioningIsActive) {
  const FlowModel f = random_flow(2, 2, 5);
  const Array v = Array::from_rows({{0.2, -0.4, 0.7, 1.1}});
  const Array v2 = Array::from_rows({{0.2, -0.4, 0.9, 1.0}});
  const auto a = coupling_forward(f.layers[0], f.theta[0], f.depth, v);
  const auto b = coupling_forward(f.layers[0], f.theta[0], f.depth, v2);
  EXPECT_NE(a.w(0, 0), b.w(0, 0));
  EXPECT_NE(a.w(0, 1), b.w(0, 1));
}

TEST(CouplingForward, UniformConditioningRowsMatchRowwiseEvaluation) {
  const FlowModel f = random_flow(2, 2, 6);
  Rng rng(6);
  Matrix v = random_array(20, 4, rng).mat();
  v.col(2).setConstant(0.3);
  v.col(3).setConstant(-1.2);
  const auto batch = coupling_forward(f.layers[0], f.theta[0], f.depth, Array(v));
  for (Index i = 0; i < 20; ++i) {
    const auto single = coupling_forward(f.layers[0], f.theta[0], f.depth, Array(Matrix(v.row(i))));
    EXPECT_NEAR(batch.w(i, 0), single.w(0, 0), 1e-12);
    EXPECT_NEAR(batch.logdet(i, 0), single.logdet(0, 0), 1e-12);
  }
}

TEST(FlowForward, ZeroThetaIsUnitShift) {
  FlowModel f = random_flow(2, 2, 7);
  zero_theta_nets(f);
  Rng rng(7);
  const Array v = random_array(6, 4, rng);
  const auto out = flow_forward(f, v);
  EXPECT_TRUE(bitwise_equal(out.w, ops::add_scalar(v, 1.0)));
  EXPECT_EQ(out.logdet.mat().cwiseAbs().maxCoeff(), 0.0);
}

TEST(FlowForward, ChangeOfVariablesAtHundredPoints) {
  const FlowModel f = random_flow(2, 2, 8);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const Array v = random_array(1, 4, rng, 2.0);
    const double got = flow_forward(f, v).logdet.item(), want = fd_logdet(f, v.mat());
    EXPECT_LE(std::abs(got - want), 1e-4 * std::max(1.0, std::abs(want))) << "point " << i;
  }
}

TEST(FlowForward, Reproducible) {
  const FlowModel a = random_flow(2, 2, 9), b = random_flow(2, 2, 9);
  Rng rng(9);
  const Array v = random_array(10, 4, rng);
  EXPECT_TRUE(bitwise_equal(flow_forward(a, v).w, flow_forward(b, v).w));
  EXPECT_TRUE(bitwise_equal(log_density(a, v), log_density(b, v)));
}

TEST(FlowForward, DensityIntegratesToOneIn2Plus2) {
  // Mild weights: the midpoint rule cannot resolve the narrow h' spikes that
  // large random theta outputs create.
  const FlowModel f = random_flow(2, 2, 10, 0.03);
  EXPECT_NEAR(integrate_density(f, -9.0, 7.0, 24), 1.0, 1e-2);
}

TEST(FlowForward, DensityIntegratesToOneIn1Plus1) {
  const FlowModel f = random_flow(1, 1, 11, 0.03);
  EXPECT_NEAR(integrate_density(f, -10.0, 8.0, 600), 1.0, 1e-3);
}

TEST(FlowInverse, RoundTripThousandPoints) {
  const FlowModel f = random_flow(2, 2, 12);
  Rng rng(12);
  Matrix v(1000, 4);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = u(rng);
  const Array w = flow_forward(f, Array(v)).w;
  const Array back = flow_inverse(f, w);
  EXPECT_LE((back.mat() - v).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((flow_forward(f, back).w.mat() - w.mat()).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(FlowInverse, ZeroThetaSubtractsOne) {
  FlowModel f = random_flow(2, 2, 13);
  zero_theta_nets(f);
  const Array w = Array::from_rows({{1.0, 2.0, 3.0, 4.0}});
  EXPECT_TRUE(bitwise_equal(flow_inverse(f, w), Array::from_rows({{0.0, 1.0, 2.0, 3.0}})));
}

TEST(FlowInverse, ExtremeTargetsConverge) {
  const FlowModel f = random_flow(2, 2, 14);
  const Array w = Array::from_rows({{50.0, -50.0, 50.0, -50.0}, {-50.0, 50.0, -50.0, 50.0}});
  const Array v = flow_inverse(f, w);
  // Intermediate values reach ~1e4 out here and feed the second layer's
  // theta-net, so only a relative round trip is meaningful.
  EXPECT_LE((flow_forward(f, v).w.mat() - w.mat()).cwiseAbs().maxCoeff(), 1e-6 * 50.0);
}

TEST(FlowInverse, SolverHandlesSteepBump) {
  const CouplingParams t = constrain_theta({-3.0, 0.0, 20.0, 4.0, -2.0});
  for (double target : {-100.0, -1.0, 0.0, 0.5, 1.0, 3.0, 100.0}) {
    double x = 0.0;
    ASSERT_TRUE(invert_h_tilde(t, target, x));
    EXPECT_NEAR(h_tilde(t, x), target, 1e-10 * std::max(1.0, std::abs(target)));
  }
}

TEST(LatentLogpdf, StandardNormalAtOrigin) {
  FlowParams<Array> p{{}, Array(1, 1, 0.0), Array(1, 4, 0.0), Array(1, 4, 0.0)};
  EXPECT_NEAR(latent_logpdf(p, Array(1, 4, 0.0)).item(), -2.0 * kLog2Pi, 1e-15);
  EXPECT_NEAR(-2.0 * kLog2Pi, -3.67575, 1e-5);
}

TEST(LatentLogpdf, IdenticalComponentsCollapse) {
  Rng rng(15);
  const Array mu = random_array(1, 3, rng), ls = random_array(1, 3, rng, 0.3);
  FlowParams<Array> one{{}, Array(1, 1, 0.0), mu, ls};
  FlowParams<Array> two{{}, Array(1, 2, 0.7), ops::concat_cols({ops::transpose(mu), ops::transpose(mu)}),
                        ops::concat_cols({ops::transpose(ls), ops::transpose(ls)})};
  two.means = ops::transpose(two.means);
  two.log_std = ops::transpose(two.log_std);
  const Array w = random_array(7, 3, rng);
  EXPECT_LE(max_abs_diff(latent_logpdf(one, w), latent_logpdf(two, w)), 1e-13);
}

TEST(LatentLogpdf, MatchesNaiveSummation) {
  Rng rng(16);
  const FlowModel f = random_flow(2, 2, 16, 0.3, 3, 8, 5);
  const Array w = random_array(25, 4, rng, 1.5);
  const Array got = latent_logpdf(params_of(f), w);
  double zsum = 0.0;
  for (Index k = 0; k < 5; ++k) zsum += std::exp(f.logits(0, k));
  for (Index i = 0; i < 25; ++i) {
    double total = 0.0;
    for (Index k = 0; k < 5; ++k) {
      double dens = std::exp(f.logits(0, k)) / zsum;
      for (Index j = 0; j < 4; ++j) {
        const double s = std::exp(f.log_std(k, j));
        const double z = (w(i, j) - f.means(k, j)) / s;
        dens *= std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
      }
      total += dens;
    }
    EXPECT_NEAR(got(i, 0), std::log(total), 1e-12);
  }
}

TEST(NfLoglik, IdentityFlowAtLatentMode) {
  FlowModel f = random_flow(2, 2, 17, 0.3, 3, 8, 1);
  zero_theta_nets(f);
  f.logits = Array(1, 1, 0.0);
  f.means = Array(1, 4, 0.0);
  f.log_std = Array(1, 4, 0.0);
  const Array batch(3, 4, -1.0);  // phi(v) = v + 1 = 0
  EXPECT_NEAR(nf_loglik(f, batch), -2.0 * kLog2Pi, 1e-15);
}

TEST(NfLoglik, DuplicatedRowsKeepTheMean) {
  const FlowModel f = random_flow(2, 2, 18);
  const Array row = Array::from_rows({{0.3, -0.1, 1.2, 0.4}});
  EXPECT_NEAR(nf_loglik(f, ops::gather_rows(row, {0, 0, 0, 0})), nf_loglik(f, row), 1e-14);
}

TEST(NfLoglik, GradientMatchesFiniteDifferences) {
  FlowModel f = random_flow(2, 1, 19, 0.3, 3, 4, 2);
  Rng rng(19);
  const Array batch = random_array(6, 3, rng);
  const std::vector<Array> params = f.flat_params();
  Tape tape;
  FlowParams<Var> fp;
  std::size_t at = 0;
  std::vector<Var> pv;
  for (const auto& a : params) pv.push_back(tape.parameter(a));
  for (const auto& layer : f.theta) {
    fp.theta.emplace_back(pv.begin() + static_cast<std::ptrdiff_t>(at),
                          pv.begin() + static_cast<std::ptrdiff_t>(at + layer.size()));
    at += layer.size();
  }
  fp.logits = pv[at];
  fp.means = pv[at + 1];
  fp.log_std = pv[at + 2];
  const Var ll = ops::mean(standardized_log_density(f, fp, tape.constant(batch)));
  const auto grads = reverse_grad(tape, ll);
  ASSERT_EQ(grads.size(), params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto fn = [&](const Array& pk) {
      auto ps = params;
      ps[k] = pk;
      FlowModel g = f;
      g.set_flat_params(ps);
      return nf_loglik(g, batch);
    };
    EXPECT_LE(rel_err(grads[k], finite_diff_grad(fn, params[k], 1e-6), 1e-2), 1e-3) << "param " << k;
  }
}

TEST(FlowJson, RoundTripIsExact) {
  FlowModel f = random_flow(2, 2, 20);
  f.step = 700;
  f.mean = Array::from_rows({{1.0, 2.0, 3.0, 4.0}});
  f.scale = Array::from_rows({{0.5, 1.5, 2.0, 1.0}});
  const FlowModel back = flow_from_json(nlohmann::json::parse(flow_to_json(f).dump()));
  EXPECT_EQ(back.step, 700);
  Rng rng(20);
  const Array v = random_array(9, 4, rng);
  EXPECT_TRUE(bitwise_equal(log_density(back, v), log_density(f, v)));
  EXPECT_THROW(flow_from_json(nlohmann::json{{"version", "flow-v0"}}), ParseError);
}

TEST(TrainFlow, CheckpointScheduleAndDeterminism) {
  Rng rng(21);
  const Array train = random_array(400, 3, rng), val = random_array(100, 3, rng);
  FlowTrainConfig cfg;
  cfg.init.depth = 3;
  cfg.init.width = 8;
  cfg.seed = 5;
  const FlowTrainResult a = train_flow(train, val, 2, cfg);
  ASSERT_EQ(a.checkpoints.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(a.checkpoints[i].step, 400 + 100 * static_cast<int>(i));
    EXPECT_EQ(a.checkpoints[i].model.step, a.checkpoints[i].step);
  }
  EXPECT_EQ(a.loss.size(), 1200u);
  EXPECT_EQ(a.model.step, 1200);
  const FlowTrainResult b = train_flow(train, val, 2, cfg);
  for (std::size_t i = 0; i < 9; ++i)
    EXPECT_EQ(flow_to_json(a.checkpoints[i].model).dump(), flow_to_json(b.checkpoints[i].model).dump());
}

TEST(TrainFlow, LearnsStandardNormal) {
  Rng rng(22);
  const Array train = random_array(4000, 2, rng), val = random_array(500, 2, rng);
  const Array test = random_array(4000, 2, rng);
  FlowTrainConfig cfg;
  cfg.seed = 3;
  const FlowTrainResult r = train_flow(train, val, 1, cfg);
  // Negative differential entropy of N(0, I_2): -ln(2 pi e).
  EXPECT_NEAR(nf_loglik(r.model, test), -(kLog2Pi + 1.0), 0.05);
}

TEST(TrainFlow, RingLossDecreasesAndStaysMonotone) {
  SyntheticConfig sc;
  sc.family = ProcessFamily::Ring;
  sc.rows = 3;
  sc.cols = 3;
  sc.years = 1;
  sc.steps_per_slice = 1500;
  const ExampleSet ex = build_examples(gen_synthetic(sc, 4), 1, 1, 1);
  // Condition on the center cell at the anchor step.
  const Array t = ops::gather_cols(ex.predictors, {ex.predictor_index(0, 1, 1, 0), ex.predictor_index(0, 1, 1, 1)});
  const Array joint = joint_vectors(ex.responses, t);
  FlowTrainConfig cfg;
  cfg.seed = 8;
  cfg.steps = 100;
  const FlowTrainResult early = train_flow(joint, joint, 2, cfg);
  cfg.steps = 1200;
  const FlowTrainResult late = train_flow(joint, joint, 2, cfg);
  EXPECT_GE(nf_loglik(late.model, joint), nf_loglik(early.model, joint));

  // Spot-check monotonicity of coupling blocks produced by the trained nets.
  const Array vs = late.model.standardize(joint);
  for (std::size_t l = 0; l < late.model.layers.size(); ++l) {
    const auto& spec = late.model.layers[l];
    const Array raw = theta_net(late.model.theta[l], late.model.depth,
                                ops::gather_cols(ops::gather_rows(vs, {0, 100, 500, 900, 1400}), spec.b));
    for (Index i = 0; i < raw.rows(); ++i)
      for (std::size_t j = 0; j < spec.a.size(); ++j) {
        const auto c0 = static_cast<Index>(5 * j);
        const CouplingParams cp = constrain_theta(
            {raw(i, c0), raw(i, c0 + 1), raw(i, c0 + 2), raw(i, c0 + 3), raw(i, c0 + 4)});
        for (int g = 0; g < 1000; ++g) EXPECT_GT(h_tilde_prime(cp, -10.0 + 20.0 * g / 999.0), 0.0);
      }
  }
}

TEST(TrainFlow, Validation) {
  Rng rng(23);
  const Array train = random_array(50, 3, rng);
  FlowTrainConfig cfg;
  EXPECT_THROW(train_flow(train, Array(0, 3), 2, cfg), DataError);
  cfg.steps = 0;
  EXPECT_THROW(train_flow(train, train, 2, cfg), ConfigError);
  Matrix constant = train.mat();
  constant.col(1).setConstant(1.0);
  cfg.steps = 10;
  EXPECT_THROW(train_flow(Array(constant), train, 2, cfg), DataError);
}

TEST(LogDensityBatch, MatchesGenericPath) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    FlowModel f = random_flow(2, 3, seed, 0.2);
    Rng rng(seed + 100);
    f.mean = random_array(1, 5, rng, 1.0);
    f.scale = Array(Matrix(random_array(1, 5, rng, 0.3).mat().array().exp()));
    const Array v = random_array(200, 5, rng, 2.0);
    const Eigen::VectorXd fast = log_density_batch(f, v.mat());
    const Array ref = log_density(f, v);
    for (Index i = 0; i < v.rows(); ++i) EXPECT_NEAR(fast(i), ref(i, 0), 1e-10 * (1.0 + std::abs(ref(i, 0))));
  }
}

TEST(LogDensityBatch, UniformConditioningRowsMatch) {
  const FlowModel f = random_flow(2, 2, 9, 0.2);
  Rng rng(4);
  Matrix v = random_array(50, 4, rng, 1.5).mat();
  v.col(2).setConstant(0.7);
  v.col(3).setConstant(-0.4);
  const Eigen::VectorXd fast = log_density_batch(f, v);
  const Array ref = log_density(f, Array(v));
  for (Index i = 0; i < v.rows(); ++i) EXPECT_NEAR(fast(i), ref(i, 0), 1e-10 * (1.0 + std::abs(ref(i, 0))));
}

TEST(LogDensityBatch, RejectsWrongWidth) {
  const FlowModel f = random_flow(2, 2, 3);
  EXPECT_THROW(log_density_batch(f, Matrix(3, 5)), ShapeError);
}
