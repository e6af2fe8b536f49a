#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "infoflow/core/finite_diff.hpp"
#include "infoflow/data/synthetic.hpp"
#include "infoflow/dimred/knn.hpp"
#include "infoflow/dimred/reducer.hpp"

using namespace infoflow;
using infoflow::testing::random_array;
using infoflow::testing::random_spd;
using infoflow::testing::rel_err;

namespace {

/// 1/2 ln(det S_YY det S_TT / det S_joint).
double determinant_ratio_mi(const Matrix& joint, Index p) {
  const Index m = joint.rows() - p;
  const Eigen::MatrixXd j = joint;
  return 0.5 * (std::log(Eigen::MatrixXd(j.topLeftCorner(p, p)).determinant()) +
                std::log(Eigen::MatrixXd(j.bottomRightCorner(m, m)).determinant()) -
                std::log(j.determinant()));
}

Array sample_gaussian(const Matrix& cov, Index n, Rng& rng) {
  const Matrix l = cholesky_lower(cov);
  const Array z = random_array(n, cov.rows(), rng);
  return Array(Matrix(z.mat() * l.transpose()));
}

Array pm_ones_column(Index n) {
  Matrix m(n, 1);
  for (Index i = 0; i < n; ++i) m(i, 0) = (i % 2 == 0) ? 1.0 : -1.0;
  return Array(std::move(m));
}

}  // namespace

TEST(EmpiricalCov, SameColumnGivesEqualBlocks) {
  const Array c = pm_ones_column(10);
  const CovBlocks b = empirical_cov(c, c);
  const double var = 10.0 / 9.0;
  EXPECT_NEAR(b.yy(0, 0), var, 1e-15);
  EXPECT_NEAR(b.yt(0, 0), var, 1e-15);
  EXPECT_NEAR(b.tt(0, 0), var, 1e-15);
}

TEST(EmpiricalCov, ZeroColumn) {
  const CovBlocks b = empirical_cov(pm_ones_column(10), Array(10, 1, 0.0));
  EXPECT_EQ(b.tt(0, 0), 0.0);
  EXPECT_EQ(b.yt(0, 0), 0.0);
}

TEST(EmpiricalCov, SamplingOracle) {
  Rng rng(21);
  const Matrix truth = random_spd(4, rng, 0.1);
  const Array z = sample_gaussian(truth, 10000, rng);
  const Array y = ops::gather_cols(z, {0, 1}), t = ops::gather_cols(z, {2, 3});
  const CovBlocks b = empirical_cov(y, t);
  const CovBlocks want = CovBlocks::from_joint(truth, 2);
  EXPECT_LE((b.yy - want.yy).norm() / want.yy.norm(), 0.05);
  EXPECT_LE((b.yt - want.yt).norm() / want.yt.norm(), 0.05);
  EXPECT_LE((b.tt - want.tt).norm() / want.tt.norm(), 0.05);
}

TEST(EmpiricalCov, TooFewSamples) {
  Rng rng(1);
  EXPECT_THROW(empirical_cov(random_array(4, 2, rng), random_array(4, 2, rng)), DataError);
  EXPECT_NO_THROW(empirical_cov(random_array(5, 2, rng), random_array(5, 2, rng)));
}

TEST(GaussianMi, IndependentBlocksGiveZero) {
  CovBlocks b{Matrix::Identity(2, 2) * 3.0, Matrix::Zero(2, 2), Matrix::Identity(2, 2)};
  EXPECT_EQ(gaussian_mi(b), 0.0);
}

TEST(GaussianMi, BivariateClosedForm) {
  CovBlocks b{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 0.95), Matrix::Constant(1, 1, 1.0)};
  EXPECT_NEAR(gaussian_mi(b), -0.5 * std::log(1.0 - 0.9025), 1e-12);
  EXPECT_NEAR(gaussian_mi(b), 1.1639514504891677, 1e-12);
}

TEST(GaussianMi, DeterminantRatioOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix j = random_spd(5, rng, 0.5);
    EXPECT_NEAR(gaussian_mi(CovBlocks::from_joint(j, 2)), determinant_ratio_mi(j, 2), 1e-9);
  }
}

TEST(GaussianMi, IdentityWithSchurObjective) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const CovBlocks b = CovBlocks::from_joint(random_spd(4, rng, 0.2), 2);
    EXPECT_NEAR(2.0 * gaussian_mi(b) + schur_objective(b, 0.0), log_det_pd(b.yy), 1e-9);
    EXPECT_GE(gaussian_mi(b), 0.0);
  }
}

TEST(GaussianMi, InvariantUnderBlockwiseLinearMaps) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix j = random_spd(4, rng);
    Matrix a = random_array(2, 2, rng).mat(), c = random_array(2, 2, rng).mat();
    a.diagonal().array() += 3.0;
    c.diagonal().array() += 3.0;
    Matrix map = Matrix::Zero(4, 4);
    map.topLeftCorner(2, 2) = a;
    map.bottomRightCorner(2, 2) = c;
    Matrix jm = map * j * map.transpose();
    jm = (0.5 * (jm + jm.transpose())).eval();
    EXPECT_NEAR(gaussian_mi(CovBlocks::from_joint(jm, 2)), gaussian_mi(CovBlocks::from_joint(j, 2)),
                1e-8);
  }
}

TEST(GaussianMi, NonPdSchurIsAnError) {
  CovBlocks b{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 1.0)};
  EXPECT_THROW(gaussian_mi(b), NotPositiveDefiniteError);
}

TEST(SchurObjective, NoCrossCovarianceGivesLogDetYY) {
  Rng rng(2);
  const Matrix yy = random_spd(2, rng);
  CovBlocks b{yy, Matrix::Zero(2, 3), Matrix::Identity(3, 3)};
  EXPECT_NEAR(schur_objective(b, 0.0), log_det_pd(yy), 1e-14);
}

TEST(SchurObjective, PerfectPredictorIsFiniteWithJitter) {
  CovBlocks b{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 1.0)};
  EXPECT_THROW(schur_objective(b, 0.0), NotPositiveDefiniteError);
  const double v = schur_objective(b, 1e-6);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(v, -10.0);
}

TEST(SchurLoss, MatchesBlockFormulaAfterStandardization) {
  Rng rng(3);
  const Array t = random_array(40, 2, rng), y = random_array(40, 2, rng);
  Matrix ts = centered(t.mat());
  for (Index j = 0; j < 2; ++j) ts.col(j) /= std::sqrt(ts.col(j).squaredNorm() / 39.0);
  const CovBlocks b = empirical_cov(y, Array(ts));
  EXPECT_NEAR(schur_loss(t, Array(centered(y.mat())), 0.0).item(), schur_objective(b, 0.0), 1e-9);
}

TEST(SchurLoss, GradientThroughNetworkMatchesFiniteDifferences) {
  Rng rng(12);
  for (int point = 0; point < 10; ++point) {
    const Array x = random_array(30, 5, rng), y = random_array(30, 2, rng);
    const Array yc(centered(y.mat()));
    std::vector<Array> params = {random_array(5, 4, rng, 0.5), random_array(1, 4, rng, 0.5),
                                 random_array(4, 2, rng, 0.5), random_array(5, 2, rng, 0.5),
                                 random_array(1, 2, rng, 0.5)};
    Tape tape;
    std::vector<Var> pv;
    for (const auto& p : params) pv.push_back(tape.parameter(p));
    const Var xv = tape.constant(x);
    const Var loss = schur_loss(
        detail::reducer_forward(ReducerKind::ShallowNet, Activation::Tanh, xv, pv), yc, 1e-6);
    const auto grads = reverse_grad(tape, loss);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto f = [&](const Array& pk) {
        auto ps = params;
        ps[k] = pk;
        return schur_loss(detail::reducer_forward(ReducerKind::ShallowNet, Activation::Tanh, x, ps),
                          yc, 1e-6)
            .item();
      };
      EXPECT_LE(rel_err(grads[k], finite_diff_grad(f, params[k], 1e-6), 1e-3), 1e-4)
          << "point " << point << " param " << k;
    }
  }
}

TEST(TrainReducer, AffineRecoversAnalyticInformation) {
  const JointNormalSample s = gen_joint_normal(40, 2, 5000, 17);
  const double truth = determinant_ratio_mi(s.joint_cov, 2);
  ReducerTrainConfig cfg;
  cfg.kind = ReducerKind::Affine;
  cfg.iterations = 600;
  cfg.seed = 1;
  const Reducer r = train_reducer(s.examples, 2, cfg);
  const double got = gaussian_mi(empirical_cov(s.examples.responses, r.apply(s.examples.predictors)));
  EXPECT_GE(got, 0.95 * truth) << "truth " << truth;
  EXPECT_LE(r.history.back(), r.history.front());
}

TEST(TrainReducer, IndependentResponseCarriesNoInformation) {
  Rng rng(4);
  const Array x = random_array(10000, 20, rng), y = random_array(10000, 2, rng);
  ReducerTrainConfig cfg;
  cfg.hidden = 16;
  cfg.iterations = 300;
  const Reducer r = train_reducer(x, y, 2, cfg);
  EXPECT_LE(gaussian_mi(empirical_cov(y, r.apply(x))), 0.05);
}

TEST(TrainReducer, NeverWorseThanInitialization) {
  const JointNormalSample s = gen_joint_normal(10, 2, 800, 3);
  ReducerTrainConfig cfg;
  cfg.hidden = 8;
  cfg.iterations = 50;
  cfg.learning_rate = 0.5;  // deliberately noisy
  const Reducer r = train_reducer(s.examples, 2, cfg);
  EXPECT_LE(reducer_objective(r, s.examples.predictors, s.examples.responses),
            r.history.front() + 1e-9);
}

TEST(TrainReducer, MinibatchModeImproves) {
  const JointNormalSample s = gen_joint_normal(10, 2, 3000, 9);
  ReducerTrainConfig cfg;
  cfg.kind = ReducerKind::Affine;
  cfg.iterations = 300;
  cfg.full_batch_limit = 1000;
  cfg.minibatch = 512;
  const Reducer r = train_reducer(s.examples, 2, cfg);
  EXPECT_EQ(r.history.size(), 300u);
  const double truth = determinant_ratio_mi(s.joint_cov, 2);
  EXPECT_GE(gaussian_mi(empirical_cov(s.examples.responses, r.apply(s.examples.predictors))),
            0.9 * truth);
}

TEST(TrainReducer, DeterministicForSeed) {
  const JointNormalSample s = gen_joint_normal(8, 2, 400, 2);
  ReducerTrainConfig cfg;
  cfg.hidden = 8;
  cfg.iterations = 40;
  cfg.seed = 77;
  const auto a = reducer_to_json(train_reducer(s.examples, 2, cfg)).dump();
  const auto b = reducer_to_json(train_reducer(s.examples, 2, cfg)).dump();
  EXPECT_EQ(a, b);
  cfg.seed = 78;
  EXPECT_NE(reducer_to_json(train_reducer(s.examples, 2, cfg)).dump(), a);
}

TEST(TrainReducer, ConfigValidation) {
  const JointNormalSample s = gen_joint_normal(4, 2, 100, 2);
  ReducerTrainConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(train_reducer(s.examples, 2, cfg), ConfigError);
  cfg.iterations = 1;
  EXPECT_THROW(train_reducer(s.examples, 0, cfg), ConfigError);
  cfg.jitter = -1;
  EXPECT_THROW(train_reducer(s.examples, 2, cfg), ConfigError);
}

TEST(ReducerJson, RoundTripIsExact) {
  const JointNormalSample s = gen_joint_normal(6, 2, 300, 4);
  ReducerTrainConfig cfg;
  cfg.hidden = 5;
  cfg.iterations = 10;
  const Reducer r = train_reducer(s.examples, 2, cfg);
  const Reducer back = reducer_from_json(nlohmann::json::parse(reducer_to_json(r).dump()));
  EXPECT_TRUE(bitwise_equal(back.apply(s.examples.predictors), r.apply(s.examples.predictors)));
  const Reducer pca = pca_reducer(s.examples, 2);
  EXPECT_TRUE(bitwise_equal(reducer_from_json(reducer_to_json(pca)).apply(s.examples.predictors),
                            pca.apply(s.examples.predictors)));
  EXPECT_THROW(reducer_from_json(nlohmann::json{{"version", "reducer-v0"}}), ParseError);
}

TEST(KnnDensity, HandEnumeration) {
  const Array sample = Array::column(std::vector<double>{0, 1, 2, 3});
  const std::vector<double> q{0.0};
  EXPECT_EQ(knn_joint_density(q, sample, 1), 0.125);
}

TEST(KnnDensity, LargestKBoundedByBoundingBox) {
  Rng rng(10);
  const Array s = random_array(50, 3, rng);
  const std::vector<double> q{0.1, -0.2, 0.3};
  const Matrix range = s.mat().colwise().maxCoeff() - s.mat().colwise().minCoeff();
  const double lo = (49.0 / 50.0) / (2.0 * range.array()).prod();
  EXPECT_GE(knn_joint_density(q, s, 49), lo);
}

TEST(KnnDensity, ScalingHalvesIn1D) {
  Rng rng(11);
  const Array s = random_array(30, 1, rng);
  const std::vector<double> q{0.05}, q2{0.1};
  EXPECT_NEAR(knn_joint_density(q2, ops::scale(s, 2.0), 3), 0.5 * knn_joint_density(q, s, 3), 1e-12);
}

TEST(KnnDensity, Errors) {
  const Array dup = Array::from_rows({{0.0, 0.0}, {1.0, 0.0}, {2.0, 1.0}});
  const std::vector<double> q{0.0, 0.0};
  EXPECT_THROW(knn_joint_density(q, dup, 1), DataError);
  EXPECT_THROW(knn_joint_density(q, dup, 3), Error);
  EXPECT_THROW(knn_joint_density(q, dup, 0), Error);
}

TEST(PcaReducer, RecoversLine) {
  Rng rng(13);
  Matrix x(200, 3);
  for (Index i = 0; i < 200; ++i) {
    const double s = standard_normal(rng);
    x.row(i) << s, 2.0 * s, -s;
  }
  const Reducer r = pca_reducer(Array(x), 1);
  // Standardization maps the direction (1, 2, -1) to (1, 1, -1) / sqrt(3).
  Eigen::Vector3d dir(1, 1, -1);
  dir.normalize();
  EXPECT_GE(std::abs(r.params[0].mat().col(0).dot(dir)), 0.999);
  EXPECT_THROW(pca_reducer(Array(x), 2), DataError);
}

TEST(PcaReducer, IsotropicDataHasEqualVariance) {
  Rng rng(14);
  const Reducer r = pca_reducer(random_array(10000, 3, rng), 3);
  for (double f : r.explained_variance) EXPECT_NEAR(f, 1.0 / 3.0, 0.03);
  const Matrix p = r.params[0].mat();
  EXPECT_LE((p.transpose() * p - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
  for (Index k = 0; k < 3; ++k) {
    Index arg = 0;
    p.col(k).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(p(arg, k), 0.0);
  }
}

TEST(GridpointReducer, CopyOfResponseRanksFirst) {
  Rng rng(15);
  const Array y = random_array(500, 2, rng);
  Matrix x = random_array(500, 6, rng).mat();
  x.col(4) = y.mat().col(1);
  const Reducer r = gridpoint_reducer(Array(x), y, 1);
  EXPECT_EQ(r.selected, std::vector<Index>{4});
}

TEST(GridpointReducer, NoiseCorrelationsAreSmall) {
  Rng rng(16);
  const Array x = random_array(10000, 20, rng), y = random_array(10000, 2, rng);
  const Reducer r = gridpoint_reducer(x, y, 2);
  const auto score = gridpoint_scores(x, y);
  for (Index j : r.selected) EXPECT_LE(score[static_cast<std::size_t>(j)], 0.05);
}

TEST(GridpointReducer, PicksOnePerResponseAndSkipsConstants) {
  Rng rng(17);
  const Array y = random_array(1000, 2, rng);
  Matrix x = random_array(1000, 8, rng).mat();
  x.col(1) = y.mat().col(0) + 0.5 * random_array(1000, 1, rng).mat();
  x.col(6) = y.mat().col(1) + 0.5 * random_array(1000, 1, rng).mat();
  x.col(3).setConstant(2.0);
  const Reducer r = gridpoint_reducer(Array(x), y, 2);
  std::vector<Index> sel = r.selected;
  std::sort(sel.begin(), sel.end());
  EXPECT_EQ(sel, (std::vector<Index>{1, 6}));
  EXPECT_TRUE(std::isnan(gridpoint_scores(Array(x), y)[3]));
  EXPECT_TRUE(bitwise_equal(r.apply(Array(x)), ops::gather_cols(Array(x), r.selected)));
}

TEST(GridpointReducer, TiesGoToLowerIndex) {
  Rng rng(18);
  const Array y = random_array(100, 1, rng);
  Matrix x(100, 3);
  x.col(0) = random_array(100, 1, rng).mat();
  x.col(1) = y.mat();
  x.col(2) = y.mat();
  EXPECT_EQ(gridpoint_reducer(Array(x), y, 1).selected, std::vector<Index>{1});
}
