#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "crokit.hpp"
#include "oracles.hpp"

using namespace crokit;

namespace {

Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

Mat random_rows(Index n, Index d, std::mt19937_64& rng, double sd = 1.0) {
  Mat M(n, d);
  for (Index i = 0; i < n; ++i) M.row(i) = oracle::random_vec(d, rng, sd).transpose();
  return M;
}

CoverageRegressor constant_regressor(Index covariates, double p) {
  CoverageRegressor r;
  r.net = make_regressor_net(covariates, 0);
  r.phi = r.net.make_params();
  r.phi.matrix(r.net.bias_name(0))(0, 0) = std::log(p / (1.0 - p));
  return r;
}

// Oracle 1 - eps ellipsoid of a single-component env's conditional law.
Ellipsoid oracle_set(const MixtureEnv& env, const Vec& psi, double level) {
  const GaussianMixture law = conditional_oracle(env, psi);
  const double q = boost::math::quantile(boost::math::chi_squared(static_cast<double>(env.dim())), level);
  return Ellipsoid::from_covariance(law.means()[0], law.covariances()[0], q);
}

MixtureEnv single_env() {
  MixtureComponent c;
  c.weight = 1.0;
  c.mean = (Vec(4) << 0.5, -0.5, 1.0, 0.2).finished();
  c.cov = covariance_from({1.0, 1.0, 0.7, 0.9}, {{1, .2, .5, -.3}, {.2, 1, .3, .4}, {.5, .3, 1, .2}, {-.3, .4, .2, 1}});
  return MixtureEnv(2, 2, {c});
}

struct Toy {
  SetPredictor pred;
  ParamVector theta;
  Mat psi, xi;
  std::vector<Vec> warm;
};

// Small predictor whose initial sets cover part of a standard-normal batch.
Toy make_toy(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SetPredictorConfig cfg;
  cfg.covariates = 2;
  cfg.dim = 2;
  cfg.hidden = {4};
  cfg.output_init_scale = 0.5;
  Toy t{SetPredictor(cfg), {}, random_rows(n, 2, rng), random_rows(n, 2, rng), {}};
  t.theta = t.pred.init(rng);
  t.warm.assign(static_cast<std::size_t>(n), PortfolioProblem(2).uniform());
  return t;
}

LossOptions toy_options(double gamma) {
  LossOptions o;
  o.alpha = 0.5;
  o.epsilon = 0.1;
  o.gamma = gamma;
  o.beta = 3.0;
  o.solver.max_steps = 200;
  o.regressor.ridge = 1e-2;
  o.regressor.fit_tolerance = 1e-12;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// coverage

TEST(FitRegressor, ConstantLabelsGiveTheirMean) {
  std::mt19937_64 rng(1);
  const Mat psi = random_rows(50, 2, rng);
  RegressorConfig cfg;
  cfg.ridge = 1e-4;
  const CoverageRegressor r = fit_regressor(psi, Vec::Constant(50, 0.7), cfg);
  for (Index i = 0; i < 50; ++i) EXPECT_NEAR(r.predict(psi.row(i).transpose()), 0.7, 1e-3);
  EXPECT_LE(r.grad_norm, cfg.fit_tolerance);
}

TEST(FitRegressor, HalfLabelsGiveZeroParameters) {
  std::mt19937_64 rng(2);
  const Mat psi = random_rows(40, 3, rng);
  for (double ridge : {0.0, 1e-4, 1e-1}) {
    RegressorConfig cfg;
    cfg.ridge = ridge;
    const CoverageRegressor r = fit_regressor(psi, Vec::Constant(40, 0.5), cfg);
    EXPECT_LE(r.phi.values().cwiseAbs().maxCoeff(), 1e-8) << ridge;
  }
}

TEST(FitRegressor, SeparableDataStaysFiniteAndBeatsIntercept) {
  std::mt19937_64 rng(3);
  const Mat psi = random_rows(60, 2, rng);
  Vec y(60);
  for (Index i = 0; i < 60; ++i) y(i) = psi(i, 0) + 0.5 * psi(i, 1) > 0 ? 1.0 : 0.0;
  RegressorConfig cfg;
  cfg.ridge = 1e-4;
  const CoverageRegressor r = fit_regressor(psi, y, cfg);
  EXPECT_TRUE(r.phi.values().allFinite());
  const double fitted = logistic_nll(r.net, r.phi, psi, y, 0.0, false).value;
  // Refit with the covariates zeroed out: the intercept-only optimum.
  const CoverageRegressor base = fit_regressor(Mat::Zero(60, 2), y, cfg);
  const double intercept = logistic_nll(base.net, base.phi, Mat::Zero(60, 2), y, 0.0, false).value;
  EXPECT_LT(fitted, intercept);
}

TEST(FitRegressor, DeterministicAndRejectsBadLabels) {
  std::mt19937_64 rng(4);
  const Mat psi = random_rows(30, 2, rng);
  Vec y = (oracle::random_vec(30, rng).array() > 0).cast<double>();
  RegressorConfig cfg;
  cfg.hidden = 3;
  cfg.seed = 9;
  EXPECT_EQ(fit_regressor(psi, y, cfg).phi.values(), fit_regressor(psi, y, cfg).phi.values());
  y(0) = 1.5;
  EXPECT_THROW(fit_regressor(psi, y, cfg), InputError);
  EXPECT_THROW(fit_regressor(Mat(0, 2), Vec(0), cfg), InputError);
}

TEST(FitRegressor, NonConvergenceReportsGradientNorm) {
  std::mt19937_64 rng(5);
  const Mat psi = random_rows(30, 2, rng);
  RegressorConfig cfg;
  cfg.max_iterations = 1;
  cfg.fit_tolerance = 1e-300;
  try {
    fit_regressor(psi, (oracle::random_vec(30, rng).array() > 0).cast<double>().matrix(), cfg);
    FAIL() << "expected a NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("gradient norm"), std::string::npos);
  }
}

TEST(FitRegressor, HardAndSoftLabelsAgreeAsBetaGrows) {
  std::mt19937_64 rng(6);
  const Mat psi = random_rows(80, 2, rng);
  const Mat xi = random_rows(80, 2, rng);
  const Ellipsoid set = Ellipsoid::from_covariance(Vec::Zero(2), Mat::Identity(2, 2) * 1.5);
  Vec hard(80), soft(80);
  for (Index i = 0; i < 80; ++i) {
    hard(i) = contains(set, xi.row(i).transpose()) ? 1.0 : 0.0;
    soft(i) = smooth_membership(set, xi.row(i).transpose(), 1e4);
  }
  const RegressorConfig cfg;
  EXPECT_LE((fit_regressor(psi, hard, cfg).phi.values() - fit_regressor(psi, soft, cfg).phi.values()).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(CoverageLoss, Examples) {
  const Mat psi = Mat::Zero(5, 1);
  EXPECT_NEAR(coverage_loss(constant_regressor(1, 0.9), psi, 0.1), 0.0, 1e-28);
  EXPECT_NEAR(coverage_loss(constant_regressor(1, 1.0 - 1e-17), psi, 0.1), 0.01, 1e-15);
  // Predictions 0.8 at psi = -1 and (numerically) 1.0 at psi = +1.
  CoverageRegressor r = constant_regressor(1, 0.5);
  const double lo = std::log(0.8 / 0.2), hi = 40.0;
  r.phi.matrix(r.net.bias_name(0))(0, 0) = 0.5 * (lo + hi);
  r.phi.matrix(r.net.weight_name(0))(0, 0) = 0.5 * (hi - lo);
  Mat two(2, 1);
  two << -1.0, 1.0;
  EXPECT_NEAR(coverage_loss(r, two, 0.1), 0.01, 1e-14);
}

TEST(CoverageLoss, PermutationInvariant) {
  std::mt19937_64 rng(7);
  const Mat psi = random_rows(40, 2, rng);
  RegressorConfig cfg;
  const CoverageRegressor r = fit_regressor(psi, (oracle::random_vec(40, rng).array() > -0.8).cast<double>().matrix(), cfg);
  Mat shuffled = psi;
  std::vector<Index> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (Index k = 0; k < 40; ++k) shuffled.row(k) = psi.row(perm[static_cast<std::size_t>(k)]);
  EXPECT_NEAR(coverage_loss(r, psi, 0.1), coverage_loss(r, shuffled, 0.1), 1e-15);
}

TEST(CoverageLoss, LabelGradientMatchesRefitFiniteDifferences) {
  std::mt19937_64 rng(8);
  const Mat psi = random_rows(40, 2, rng);
  std::uniform_real_distribution<double> u(0.1, 0.95);
  Vec y(40);
  for (Index i = 0; i < 40; ++i) y(i) = u(rng);
  RegressorConfig cfg;
  cfg.fit_tolerance = 1e-12;
  const CoverageRegressor r = fit_regressor(psi, y, cfg);
  const Mat eval = random_rows(25, 2, rng);
  const CoverageLossGrad g = coverage_loss_label_gradient(r, psi, y, eval, 0.1);
  auto f = [&](const Vec& labels) { return coverage_loss(fit_regressor(psi, labels, cfg, &r.phi), eval, 0.1); };
  EXPECT_LE(oracle::rel_err(g.dlabels, oracle::central_gradient(f, y, 1e-5)), 1e-4);
}

TEST(TheoreticalCcLoss, Examples) {
  const MixtureEnv env = default_env();
  std::mt19937_64 rng(9);
  const Mat psi = sample_env(env, 20, 3).psi;
  const SetFunction huge = [](const Vec&) { return Ellipsoid::from_covariance(Vec::Zero(2), 1e6 * Mat::Identity(2, 2)); };
  const SetFunction far = [](const Vec&) { return Ellipsoid::from_covariance(v2(100, 100), 1e-4 * Mat::Identity(2, 2)); };
  EXPECT_NEAR(theoretical_cc_loss(huge, &env, psi, 0.1, 2000), 0.01, 1e-12);
  EXPECT_NEAR(theoretical_cc_loss(far, &env, psi, 0.1, 2000), 0.81, 1e-12);
  EXPECT_THROW(theoretical_cc_loss(huge, nullptr, psi, 0.1), InputError);
}

TEST(TheoreticalCcLoss, OracleSetsGiveZeroLoss) {
  const MixtureEnv env = single_env();
  const Mat psi = sample_env(env, 30, 4).psi;
  const SetFunction sets = [&](const Vec& p) { return oracle_set(env, p, 0.9); };
  EXPECT_LE(theoretical_cc_loss(sets, &env, psi, 0.1, 10000, 5), 1e-3);
}

TEST(TheoreticalCcLoss, DetectsConditionalMiscoverage) {
  const MixtureEnv env = single_env();
  const Mat psi = sample_env(env, 10, 5).psi;
  // Marginally calibrated but conditionally wrong: 80% sets where psi0 < median, 100% elsewhere.
  const SetFunction sets = [&](const Vec& p) { return oracle_set(env, p, p(0) < 0.5 ? 0.8 : 0.9999); };
  EXPECT_GE(theoretical_cc_loss(sets, &env, psi, 0.1, 10000, 6), 0.005);
}

// ---------------------------------------------------------------------------
// training

TEST(EcroLoss, SingleSampleAtAlphaZeroIsTheRealizedCost) {
  Toy t = make_toy(1, 10);
  LossOptions o = toy_options(1.0);
  o.alpha = 0.0;
  const BatchLoss bl = ecro_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
  EXPECT_DOUBLE_EQ(bl.value, PortfolioProblem::cost(bl.points[0].x, t.xi.row(0).transpose()));
  EXPECT_FALSE(bl.phi.has_value());
}

TEST(EcroLoss, Deterministic) {
  Toy t = make_toy(12, 11);
  const LossOptions o = toy_options(1.0);
  const BatchLoss a = ecro_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
  const BatchLoss b = ecro_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.grad, b.grad);
}

TEST(EcroLoss, IdenticalSetsMuGradientMatchesFiniteDifferences) {
  // psi-independent network (no covariates) and one repeated xi.
  SetPredictorConfig cfg;
  cfg.covariates = 0;
  cfg.dim = 2;
  cfg.hidden = {};
  SetPredictor pred(cfg);
  std::mt19937_64 rng(12);
  ParamVector theta = pred.init(rng);
  const Mat psi(6, 0);
  Mat xi(6, 2);
  for (Index i = 0; i < 6; ++i) xi.row(i) << 0.7, -0.2;
  const std::vector<Vec> warm(6, PortfolioProblem(2).uniform());
  LossOptions o = toy_options(1.0);
  o.alpha = 0.5;
  // Shift the centre so the optimum is interior.
  theta.matrix(pred.network().bias_name(0))(0, 0) = 0.2;
  const BatchLoss bl = ecro_loss(pred, theta, psi, xi, warm, o);
  auto f = [&](const Vec& v) {
    ParamVector q = theta;
    q.values() = v;
    return ecro_loss(pred, q, psi, xi, warm, o).value;
  };
  EXPECT_LE(oracle::rel_err(bl.grad, oracle::central_gradient(f, theta.values(), 1e-6)), 1e-2);
}

TEST(DualLoss, EndpointsAndMidpoint) {
  Toy t = make_toy(10, 13);
  const BatchLoss task = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, toy_options(1.0));
  const BatchLoss ecro = ecro_loss(t.pred, t.theta, t.psi, t.xi, t.warm, toy_options(1.0));
  EXPECT_EQ(task.value, ecro.value);
  EXPECT_EQ(task.grad, ecro.grad);

  const BatchLoss cc = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, toy_options(0.0));
  EXPECT_TRUE(cc.points.empty());
  ASSERT_TRUE(cc.phi.has_value());
  EXPECT_EQ(cc.value, cc.cc);

  const BatchLoss mid = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, toy_options(0.5));
  EXPECT_NEAR(mid.value, 0.5 * (task.value + cc.value), 1e-14);
  EXPECT_LE((mid.grad - 0.5 * (task.grad + cc.grad)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DualLoss, GradientMatchesFiniteDifferencesOnToyProblem) {
  for (std::uint64_t seed : {14u, 15u, 16u}) {
    Toy t = make_toy(8, seed);
    const LossOptions o = toy_options(0.5);
    const BatchLoss bl = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
    auto f = [&](const Vec& v) {
      ParamVector q = t.theta;
      q.values() = v;
      return dual_loss(t.pred, q, t.psi, t.xi, t.warm, o, &*bl.phi).value;
    };
    EXPECT_LE(oracle::rel_err(bl.grad, oracle::central_gradient(f, t.theta.values(), 1e-5)), 1e-2) << seed;
  }
}

TEST(DualLoss, BatchOrderInvariance) {
  Toy t = make_toy(10, 17);
  const LossOptions o = toy_options(0.5);
  const BatchLoss a = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
  Mat psi = t.psi, xi = t.xi;
  for (Index i = 0; i < 10; ++i) {
    psi.row(i) = t.psi.row(9 - i);
    xi.row(i) = t.xi.row(9 - i);
  }
  const BatchLoss b = dual_loss(t.pred, t.theta, psi, xi, t.warm, o);
  EXPECT_NEAR(a.value, b.value, 1e-10);
  EXPECT_LE((a.grad - b.grad).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(DualLoss, TruncatedSolvesReturnFeasibleWarmStarts) {
  Toy t = make_toy(10, 18);
  LossOptions o = toy_options(0.5);
  o.solver.max_steps = 2;
  const BatchLoss bl = dual_loss(t.pred, t.theta, t.psi, t.xi, t.warm, o);
  WarmStartBuffer buf(10, 2);
  for (std::size_t i = 0; i < bl.points.size(); ++i) buf.update(i, bl.points[i].x);
  EXPECT_TRUE(buf.all_feasible());
}

namespace {

struct Splits {
  Dataset train, val;
};

Splits synthetic_splits(std::uint64_t seed) {
  const Dataset d = sample_env(default_env().perturbed(seed), 2000, seed);
  return {d.part(Split::train), d.part(Split::validation)};
}

}  // namespace

TEST(Train, ZeroStepLeavesThetaUnchanged) {
  const Splits s = synthetic_splits(1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.optimizer.step = 0.0;
  cfg.seed = 4;
  const TrainResult r = train(TrainMethod::dual, s.train, s.val, cfg);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.theta.values(), r.initial.theta.values());
  EXPECT_FALSE(r.aborted);
}

TEST(Train, EcroLowersTrainingCvar) {
  const Splits s = synthetic_splits(2);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 2;
  const TrainResult r = train(TrainMethod::ecro, s.train, s.val, cfg);
  ASSERT_FALSE(r.history.empty());
  EXPECT_LT(r.history.back().train_cvar, r.initial.train_cvar);
}

TEST(Train, CoverageOnlyTrainingHitsTheTarget) {
  const Splits s = synthetic_splits(3);
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.gamma = 0.0;
  cfg.seed = 3;
  const TrainResult r = train(TrainMethod::dual, s.train, s.val, cfg);
  ASSERT_FALSE(r.history.empty());
  EXPECT_NEAR(r.history.back().train_coverage, 0.9, 0.05);
}

TEST(Train, DualAtGammaOneReproducesEcro) {
  const Splits s = synthetic_splits(4);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  cfg.gamma = 1.0;
  const TrainResult a = train(TrainMethod::dual, s.train, s.val, cfg);
  cfg.gamma = 0.3;  // ignored for ecro
  const TrainResult b = train(TrainMethod::ecro, s.train, s.val, cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t k = 0; k < a.history.size(); ++k) {
    EXPECT_EQ(a.history[k].theta.values(), b.history[k].theta.values());
    EXPECT_EQ(a.history[k].loss, b.history[k].loss);
  }
}

TEST(Train, DivergenceAbortsToLastGoodCheckpoint) {
  const Splits s = synthetic_splits(5);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.optimizer.step = 1e8;
  cfg.track_metrics = false;
  const TrainResult r = train(TrainMethod::ecro, s.train, s.val, cfg);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  EXPECT_TRUE(r.theta.values().allFinite());
  if (!r.history.empty()) {
    EXPECT_EQ(r.theta.values(), r.history.back().theta.values());
  }
}

TEST(Train, LogsOneRecordPerEpoch) {
  const Splits s = synthetic_splits(6);
  std::ostringstream log;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.log = &log;
  const TrainResult r = train(TrainMethod::dual, s.train, s.val, cfg);
  std::istringstream in(log.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"epoch", "loss", "cvar", "coverage", "wall_ms"}) EXPECT_TRUE(j.contains(key)) << key;
    ++n;
  }
  EXPECT_EQ(n, static_cast<int>(r.history.size()));
}

TEST(Train, RejectsInvalidConfig) {
  const Splits s = synthetic_splits(7);
  TrainConfig cfg;
  cfg.gamma = 1.5;
  EXPECT_THROW(train(TrainMethod::dual, s.train, s.val, cfg), InputError);
  cfg.gamma = 0.5;
  cfg.tro_steps = 0;
  EXPECT_THROW(train(TrainMethod::dual, s.train, s.val, cfg), InputError);
}

namespace {

Checkpoint ck(int epoch, double cov, double cvar) {
  Checkpoint c;
  c.epoch = epoch;
  c.val_coverage = cov;
  c.val_cvar = cvar;
  return c;
}

}  // namespace

TEST(SelectModel, Examples) {
  EXPECT_EQ(select_model({ck(1, 0.93, 2.0)}, 0.1).epoch, 1);
  const Checkpoint two = select_model({ck(1, 0.92, 1.2), ck(2, 0.91, 1.0)}, 0.1);
  EXPECT_EQ(two.epoch, 2);
  EXPECT_FALSE(two.flagged);
  const Checkpoint none = select_model({ck(1, 0.5, 0.1), ck(2, 0.7, 0.3)}, 0.1);
  EXPECT_EQ(none.epoch, 2);
  EXPECT_TRUE(none.flagged);
  EXPECT_THROW(select_model({}, 0.1), InputError);
  EXPECT_EQ(select_by_cvar({ck(1, 0.2, 0.5), ck(2, 0.3, 0.4), ck(3, 0.9, 0.6)}).epoch, 2);
}

// ---------------------------------------------------------------------------
// baselines

namespace {

Dataset gaussian_data(Index n, const Vec& m0, const Mat& S0, Index covariates, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Mat C = S0.llt().matrixL();
  Dataset d;
  d.psi = Mat::Zero(n, covariates);
  d.xi.resize(n, m0.size());
  for (Index i = 0; i < n; ++i) d.xi.row(i) = (m0 + C * oracle::random_vec(m0.size(), rng)).transpose();
  d.split.assign(static_cast<std::size_t>(n), Split::train);
  return d;
}

}  // namespace

TEST(FitGaussianEto, RecoversMomentsOfPsiIndependentData) {
  const Vec m0 = v2(1.0, -0.5);
  Mat S0(2, 2);
  S0 << 0.5, 0.2, 0.2, 0.8;
  const Dataset d = gaussian_data(2000, m0, S0, 1, 21);
  FitConfig cfg;
  cfg.hidden = {};
  cfg.epochs = 1500;
  cfg.step = 2e-2;
  const GaussianModel g = fit_gaussian_eto(d, cfg);
  const Vec mean = d.xi.colwise().mean().transpose();
  const Mat C = d.xi.rowwise() - mean.transpose();
  const Mat cov = C.transpose() * C / static_cast<double>(d.size());
  const Ellipsoid e = eto_set(g, Vec::Zero(1), 0.1);
  const Mat fitted_cov = e.shape() / e.r();
  EXPECT_LE((e.mu() - mean).norm(), 0.1 * mean.norm());
  EXPECT_LE((fitted_cov - cov).norm(), 0.1 * cov.norm());

  // Dominates the zero-mean identity-covariance model on training likelihood.
  double fit_nll = 0.0, ref_nll = 0.0;
  for (Index i = 0; i < d.size(); ++i) {
    fit_nll += g.nll(d.psi.row(i).transpose(), d.xi.row(i).transpose());
    ref_nll += 0.5 * d.xi.row(i).squaredNorm();
  }
  EXPECT_LT(fit_nll, ref_nll);
}

TEST(FitGaussianEto, SinglePointMeanIsThatPoint) {
  Dataset d = gaussian_data(1, v2(0.3, -0.8), Mat::Identity(2, 2), 1, 22);
  FitConfig cfg;
  cfg.hidden = {};
  cfg.epochs = 3000;
  cfg.ridge = 1e-1;
  const GaussianModel g = fit_gaussian_eto(d, cfg);
  EXPECT_LE((g.predict(Vec::Zero(1)).first - d.xi.row(0).transpose()).norm(), 1e-3);
}

TEST(EtoSet, ChiSquaredScale) {
  EXPECT_NEAR(chi_squared_radius(2, 0.1), -2.0 * std::log(0.1), 1e-10);
  EXPECT_NEAR(chi_squared_radius(2, 0.1), 4.60517, 1e-5);
  EXPECT_EQ(chi_squared_radius(2, 1.0), 0.0);
  EXPECT_THROW(chi_squared_radius(2, 0.0), InputError);
}

TEST(EtoSet, CoverageUnderItsOwnGaussian) {
  std::mt19937_64 rng(23);
  GaussianModel g = make_gaussian_model(2, 2, {5});
  g.params = g.net.make_params();
  g.net.init_uniform(g.params, rng, 0.5);
  for (int t = 0; t < 3; ++t) {
    const Vec psi = oracle::random_vec(2, rng);
    const Ellipsoid e = eto_set(g, psi, 0.1);
    const Mat S = e.shape() / e.r();
    const Mat C = S.llt().matrixL();
    int hits = 0;
    const int n = 100000;
    for (int k = 0; k < n; ++k) hits += contains(e, e.mu() + C * oracle::random_vec(2, rng)) ? 1 : 0;
    EXPECT_NEAR(static_cast<double>(hits) / n, 0.9, 0.01);
  }
}

TEST(Conformal, RankArithmetic) {
  EXPECT_EQ(conformal_rank(9, 0.1), 9);
  EXPECT_EQ(conformal_rank(19, 0.1), 18);
  EXPECT_EQ(conformal_rank(400, 0.1), 361);
}

namespace {

PointPredictor zero_predictor(Index covariates, Index dim) {
  PointPredictor p;
  p.net = Mlp(MlpShape{covariates, {}, dim, Activation::tanh, Activation::identity}, "");
  p.params = p.net.make_params();
  return p;
}

}  // namespace

TEST(Conformal, RadiusIsTheOrderStatistic) {
  for (Index n : {Index{9}, Index{19}, Index{57}}) {
    const Dataset cal = gaussian_data(n, v2(0.2, 0.1), Mat::Identity(2, 2), 1, 24 + static_cast<std::uint64_t>(n));
    const ConformalCalibration c = calibrate_conformal(zero_predictor(1, 2), ShapeRule::global, cal, 0.1);
    Vec sorted = c.scores;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(c.q, sorted(conformal_rank(n, 0.1) - 1));
    if (n == 9) {
      EXPECT_EQ(c.q, sorted.maxCoeff());
    }
  }
}

TEST(Conformal, TooSmallCalibrationSet) {
  const Dataset cal = gaussian_data(5, v2(0, 0), Mat::Identity(2, 2), 1, 25);
  try {
    calibrate_conformal(zero_predictor(1, 2), ShapeRule::global, cal, 0.1);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("calibration set too small"), std::string::npos);
  }
}

TEST(Conformal, UnitBallAndCoScaling) {
  ConformalCalibration c;
  c.predictor = zero_predictor(1, 2);
  c.sigma_global = Mat::Identity(2, 2);
  c.q = 1.0;
  const Ellipsoid e = conformal_set(c, Vec::Zero(1));
  EXPECT_TRUE(e.mu().isZero(0.0));
  EXPECT_TRUE(e.shape().isApprox(Mat::Identity(2, 2)));
  // Doubling q and the squared test radius together keeps membership.
  std::mt19937_64 rng(26);
  ConformalCalibration c2 = c;
  c2.q = 2.0;
  for (int k = 0; k < 100; ++k) {
    const Vec xi = oracle::random_vec(2, rng);
    EXPECT_EQ(contains(e, xi), contains(conformal_set(c2, Vec::Zero(1)), std::sqrt(2.0) * xi));
  }
}

TEST(Conformal, LocalRuleWithAllNeighboursIsGlobal) {
  std::mt19937_64 rng(27);
  Dataset cal = gaussian_data(60, v2(0.1, 0.3), Mat::Identity(2, 2) * 0.5, 2, 27);
  cal.psi = random_rows(60, 2, rng);
  const PointPredictor p = zero_predictor(2, 2);
  const ConformalCalibration g = calibrate_conformal(p, ShapeRule::global, cal, 0.1);
  const ConformalCalibration l = calibrate_conformal(p, ShapeRule::local_knn, cal, 0.1, 60);
  for (int t = 0; t < 5; ++t) {
    const Vec psi = oracle::random_vec(2, rng);
    EXPECT_LE((conformal_set(g, psi).shape() / g.q - conformal_set(l, psi).shape() / l.q).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Conformal, GlobalSetsCoverExchangeableData) {
  // Few trials here; the acceptance suite runs the full resampling study.
  const MixtureEnv env = default_env();
  double total = 0.0;
  const int trials = 5;
  for (int t = 0; t < trials; ++t) {
    const Dataset d = sample_env(env, 1800, 100 + static_cast<std::uint64_t>(t));
    const Dataset tr = d.subset([] { std::vector<Index> v(600); std::iota(v.begin(), v.end(), 0); return v; }());
    const Dataset cal = d.subset([] { std::vector<Index> v(400); std::iota(v.begin(), v.end(), 600); return v; }());
    const Dataset te = d.subset([] { std::vector<Index> v(800); std::iota(v.begin(), v.end(), 1000); return v; }());
    FitConfig fc;
    fc.hidden = {16};
    fc.epochs = 150;
    const ConformalCalibration c = calibrate_conformal(fit_point_predictor(tr, fc), ShapeRule::global, cal, 0.1);
    int hits = 0;
    for (Index i = 0; i < te.size(); ++i) hits += contains(conformal_set(c, te.psi.row(i).transpose()), te.xi.row(i).transpose());
    total += static_cast<double>(hits) / static_cast<double>(te.size());
  }
  EXPECT_GE(total / trials, 0.88);
  EXPECT_LE(total / trials, 0.94);
}

TEST(Conformal, JsonRoundTrip) {
  const Dataset cal = gaussian_data(40, v2(0.2, 0.1), Mat::Identity(2, 2), 1, 28);
  const PointPredictor p = zero_predictor(1, 2);
  const ConformalCalibration c = calibrate_conformal(p, ShapeRule::local_knn, cal, 0.2, 10);
  const ConformalCalibration back = conformal_from_json(conformal_to_json(c), p.params);
  EXPECT_EQ(back.q, c.q);
  const Vec psi = Vec::Constant(1, 0.0);
  EXPECT_LE((conformal_set(back, psi).shape() - conformal_set(c, psi).shape()).cwiseAbs().maxCoeff(), 1e-15);
}
