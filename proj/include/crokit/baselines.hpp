#pragma once

// Estimate-then-optimize set constructions:
//  - Gaussian MLE: a network emits (nu, L) with precision L L^T; the set is the
//    chi-squared ellipsoid around nu.
//  - Split conformal: a least-squares point predictor, residual shape matrix
//    (global, or from the k nearest calibration neighbours), and a radius from
//    an order statistic of calibration scores.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include "json.hpp"

#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/nn.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

struct FitConfig {
  std::vector<Index> hidden{32, 32};
  int epochs = 400;
  double step = 1e-2;
  /// Penalty on the raw Cholesky outputs (Gaussian model only).
  double ridge = 1e-4;
  std::uint64_t seed = 0;
};

namespace detail {

/// Full-batch Adam over per-sample tape gradients. `sample` returns the loss of
/// one row and accumulates its parameter gradient. If `validation` is set, the
/// parameters with the lowest validation loss are kept.
template <class SampleFn, class ValFn>
double full_batch_adam(ParamVector& params, Index n, const FitConfig& cfg, SampleFn&& sample, ValFn&& validation,
                       bool use_validation) {
  OptimizerConfig oc;
  oc.kind = OptimizerKind::adam;
  oc.step = cfg.step;
  Optimizer opt(oc);
  ParamVector best = params;
  double best_val = std::numeric_limits<double>::infinity();
  double loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Vec grad = Vec::Zero(params.size());
    loss = 0.0;
    for (Index i = 0; i < n; ++i) loss += sample(params, i, grad);
    loss /= static_cast<double>(n);
    grad /= static_cast<double>(n);
    if (!std::isfinite(loss) || !grad.allFinite()) throw NumericError("baseline fit diverged at epoch " + std::to_string(epoch));
    if (use_validation) {
      const double v = validation(params);
      if (v < best_val) {
        best_val = v;
        best = params;
      }
    }
    opt.step(params.values(), grad);
  }
  if (use_validation) {
    const double v = validation(params);
    if (v < best_val) best = params;
    params = best;
  }
  return loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gaussian model

struct GaussianModel {
  Mlp net;
  ParamVector params;
  double ridge = 0.0;

  Index dim() const {
    return static_cast<Index>(std::lround((std::sqrt(8.0 * static_cast<double>(net.shape().outputs) + 9.0) - 3.0) / 2.0));
  }

  /// (nu, L) at psi, with L the lower-triangular precision factor.
  std::pair<Vec, Mat> predict(const Vec& psi) const { return split(net.forward(params, psi), dim()); }

  static std::pair<Vec, Mat> split(const Vec& y, Index m) {
    Mat L = Mat::Zero(m, m);
    Index k = m;
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j <= i; ++j, ++k) L(i, j) = i == j ? std::exp(y(k)) : y(k);
    }
    return {y.head(m), L};
  }

  /// Per-sample negative log-likelihood without the constant term.
  double nll(const Vec& psi, const Vec& xi) const {
    const auto [nu, L] = predict(psi);
    return -L.diagonal().array().log().sum() + 0.5 * (L.transpose() * (xi - nu)).squaredNorm();
  }

  nlohmann::json to_json() const { return {{"net", net.to_json()}, {"ridge", ridge}}; }
};

inline GaussianModel make_gaussian_model(Index covariates, Index dim, const std::vector<Index>& hidden) {
  GaussianModel g;
  g.net = Mlp(MlpShape{covariates, hidden, dim + tri_size(dim), Activation::tanh, Activation::identity}, "");
  return g;
}

/// Maximum likelihood by full-batch Adam; the validation split, when nonempty,
/// selects the epoch with the lowest held-out NLL.
inline GaussianModel fit_gaussian_eto(const Dataset& train, const FitConfig& cfg, const Dataset* validation = nullptr) {
  detail::require(train.size() > 0, "fit_gaussian_eto: empty training split");
  const Index m = train.dim();
  GaussianModel g = make_gaussian_model(train.covariates(), m, cfg.hidden);
  g.ridge = cfg.ridge;
  g.params = g.net.make_params();
  std::mt19937_64 rng(cfg.seed);
  g.net.init_uniform(g.params, rng, 0.1);

  auto sample = [&](const ParamVector& p, Index i, Vec& grad) {
    Tape tape(p);
    const NodeId out = g.net.record(tape, train.psi.row(i).transpose());
    const Vec y = tape.value(out);
    const auto [nu, L] = GaussianModel::split(y, m);
    const Vec e = train.xi.row(i).transpose() - nu;
    const Vec w = L.transpose() * e;
    // dNLL/dL = -diag(1/L_jj) + e w^T on the lower triangle.
    Mat dL = e * w.transpose();
    Vec seed(y.size());
    seed.head(m) = -L * w;
    Index k = m;
    double pen = 0.0;
    for (Index a = 0; a < m; ++a) {
      for (Index b = 0; b <= a; ++b, ++k) {
        const double d = a == b ? (dL(a, a) - 1.0 / L(a, a)) * L(a, a) : dL(a, b);
        seed(k) = d + g.ridge * y(k);
        pen += 0.5 * g.ridge * y(k) * y(k);
      }
    }
    grad += tape.backward(out, seed);
    return -L.diagonal().array().log().sum() + 0.5 * w.squaredNorm() + pen;
  };
  const bool use_val = validation != nullptr && validation->size() > 0;
  auto val = [&](const ParamVector& p) {
    GaussianModel view{g.net, p, g.ridge};
    double s = 0.0;
    for (Index i = 0; i < validation->size(); ++i) s += view.nll(validation->psi.row(i).transpose(), validation->xi.row(i).transpose());
    return s / static_cast<double>(validation->size());
  };
  detail::full_batch_adam(g.params, train.size(), cfg, sample, val, use_val);
  return g;
}

/// chi-squared quantile with m degrees of freedom at level 1 - eps.
inline double chi_squared_radius(Index m, double epsilon) {
  detail::require(m >= 1 && epsilon > 0.0 && epsilon <= 1.0, "chi_squared_radius: need m >= 1 and eps in (0, 1]");
  if (epsilon == 1.0) return 0.0;
  boost::math::chi_squared dist(static_cast<double>(m));
  return boost::math::quantile(dist, 1.0 - epsilon);
}

/// {xi : (xi - nu)^T L L^T (xi - nu) <= chi2_{m, 1-eps}}.
inline Ellipsoid eto_set(const GaussianModel& g, const Vec& psi, double epsilon) {
  const auto [nu, L] = g.predict(psi);
  const Index m = nu.size();
  // Covariance L^{-T} L^{-1}; its Cholesky factor comes from inverting L.
  const Mat Linv = L.triangularView<Eigen::Lower>().solve(Mat::Identity(m, m));
  const Mat cov = Linv.transpose() * Linv;
  return Ellipsoid::from_covariance(nu, cov, chi_squared_radius(m, epsilon));
}

// ---------------------------------------------------------------------------
// Point predictor and conformal calibration

struct PointPredictor {
  Mlp net;
  ParamVector params;

  Vec predict(const Vec& psi) const { return net.forward(params, psi); }
};

inline PointPredictor fit_point_predictor(const Dataset& train, const FitConfig& cfg) {
  detail::require(train.size() > 0, "fit_point_predictor: empty training split");
  PointPredictor p;
  p.net = Mlp(MlpShape{train.covariates(), cfg.hidden, train.dim(), Activation::tanh, Activation::identity}, "");
  p.params = p.net.make_params();
  std::mt19937_64 rng(cfg.seed);
  p.net.init_uniform(p.params, rng, 0.1);
  auto sample = [&](const ParamVector& prm, Index i, Vec& grad) {
    Tape tape(prm);
    const NodeId out = p.net.record(tape, train.psi.row(i).transpose());
    const Vec r = tape.value(out) - train.xi.row(i).transpose();
    grad += tape.backward(out, r);
    return 0.5 * r.squaredNorm();
  };
  auto none = [](const ParamVector&) { return 0.0; };
  detail::full_batch_adam(p.params, train.size(), cfg, sample, none, false);
  return p;
}

enum class ShapeRule { global, local_knn };

struct ConformalCalibration {
  PointPredictor predictor;
  ShapeRule rule = ShapeRule::global;
  Index k = 0;
  double epsilon = 0.1;
  /// Calibrated squared radius.
  double q = 0.0;
  Mat sigma_global;
  /// Calibration covariates (standardized) and residuals, kept for the local rule.
  Mat cal_psi;
  Mat cal_residuals;
  Vec psi_center, psi_scale;
  Vec scores;

  /// Residual shape at psi. `exclude` drops one calibration row from the
  /// neighbourhood (used when scoring that row itself).
  Mat shape_at(const Vec& psi, Index exclude = -1) const {
    if (rule == ShapeRule::global) return sigma_global;
    const Vec z = (psi - psi_center).cwiseQuotient(psi_scale);
    const Index n = cal_psi.rows();
    std::vector<std::pair<double, Index>> dist;
    dist.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      if (i != exclude) dist.emplace_back((cal_psi.row(i).transpose() - z).squaredNorm(), i);
    }
    const Index kk = std::min<Index>(k, static_cast<Index>(dist.size()));
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    Mat R(kk, cal_residuals.cols());
    for (Index a = 0; a < kk; ++a) R.row(a) = cal_residuals.row(dist[static_cast<std::size_t>(a)].second);
    return residual_covariance(R);
  }

  static Mat residual_covariance(const Mat& R) {
    const Index m = R.cols();
    const Vec mean = R.colwise().mean().transpose();
    const Mat C = R.rowwise() - mean.transpose();
    const double denom = R.rows() > 1 ? static_cast<double>(R.rows() - 1) : 1.0;
    return C.transpose() * C / denom + 1e-6 * Mat::Identity(m, m);
  }
};

inline Index default_knn(Index n) { return std::max<Index>(30, n / 20); }

/// Rank of the calibration order statistic used as the radius.
inline Index conformal_rank(Index n, double epsilon) {
  return static_cast<Index>(std::ceil((1.0 - epsilon) * static_cast<double>(n + 1) - 1e-9));
}

inline ConformalCalibration calibrate_conformal(const PointPredictor& predictor, ShapeRule rule, const Dataset& cal,
                                                double epsilon, Index k = 0) {
  detail::require(epsilon > 0.0 && epsilon < 1.0, "calibrate_conformal: eps must lie in (0, 1)");
  const Index n = cal.size();
  const Index rank = conformal_rank(n, epsilon);
  if (n < 1 || rank > n) {
    throw InputError("calibrate_conformal: calibration set too small (" + std::to_string(n) + " points, need " +
                     std::to_string(rank) + ")");
  }
  ConformalCalibration c;
  c.predictor = predictor;
  c.rule = rule;
  c.epsilon = epsilon;
  c.k = rule == ShapeRule::local_knn ? (k > 0 ? k : default_knn(n)) : 0;
  c.cal_residuals.resize(n, cal.dim());
  for (Index i = 0; i < n; ++i) {
    c.cal_residuals.row(i) = (cal.xi.row(i).transpose() - predictor.predict(cal.psi.row(i).transpose())).transpose();
  }
  c.sigma_global = ConformalCalibration::residual_covariance(c.cal_residuals);
  c.psi_center = cal.psi.colwise().mean().transpose();
  c.psi_scale = ((cal.psi.rowwise() - c.psi_center.transpose()).colwise().squaredNorm() /
                 static_cast<double>(std::max<Index>(1, n - 1)))
                    .cwiseSqrt()
                    .transpose();
  for (Index j = 0; j < c.psi_scale.size(); ++j) {
    if (!(c.psi_scale(j) > 0)) c.psi_scale(j) = 1.0;
  }
  c.cal_psi = (cal.psi.rowwise() - c.psi_center.transpose()).array().rowwise() / c.psi_scale.transpose().array();

  c.scores.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Mat S = c.shape_at(cal.psi.row(i).transpose(), rule == ShapeRule::local_knn ? i : -1);
    const Vec e = c.cal_residuals.row(i).transpose();
    c.scores(i) = e.dot(S.llt().solve(e));
  }
  Vec sorted = c.scores;
  std::sort(sorted.begin(), sorted.end());
  c.q = sorted(rank - 1);
  return c;
}

/// Center xi_hat(psi), shape Sigma_res(psi) * q.
inline Ellipsoid conformal_set(const ConformalCalibration& c, const Vec& psi) {
  return Ellipsoid::from_covariance(c.predictor.predict(psi), c.shape_at(psi), c.q);
}

// ---------------------------------------------------------------------------
// Serialization of the non-parameter state; parameters go in checkpoint blobs.

namespace detail {

inline nlohmann::json mat_json(const Mat& M) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(M.cols()));
    for (Index j = 0; j < M.cols(); ++j) r[static_cast<std::size_t>(j)] = M(i, j);
    rows.push_back(r);
  }
  return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", rows}};
}

inline Mat json_mat(const nlohmann::json& j) {
  Mat M(j.at("rows").get<Index>(), j.at("cols").get<Index>());
  const auto& d = j.at("data");
  for (Index i = 0; i < M.rows(); ++i) {
    const auto r = d.at(static_cast<std::size_t>(i)).get<std::vector<double>>();
    require(static_cast<Index>(r.size()) == M.cols(), "matrix json: ragged rows");
    for (Index j2 = 0; j2 < M.cols(); ++j2) M(i, j2) = r[static_cast<std::size_t>(j2)];
  }
  return M;
}

inline nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace detail

inline nlohmann::json conformal_to_json(const ConformalCalibration& c) {
  return {{"net", c.predictor.net.to_json()},
          {"rule", c.rule == ShapeRule::global ? "global" : "local_knn"},
          {"k", c.k},
          {"epsilon", c.epsilon},
          {"q", c.q},
          {"sigma_global", detail::mat_json(c.sigma_global)},
          {"cal_psi", detail::mat_json(c.cal_psi)},
          {"cal_residuals", detail::mat_json(c.cal_residuals)},
          {"psi_center", detail::vec_json(c.psi_center)},
          {"psi_scale", detail::vec_json(c.psi_scale)}};
}

inline ConformalCalibration conformal_from_json(const nlohmann::json& j, ParamVector params) {
  ConformalCalibration c;
  c.predictor.net = Mlp::from_json(j.at("net"));
  c.predictor.params = std::move(params);
  c.rule = j.at("rule").get<std::string>() == "global" ? ShapeRule::global : ShapeRule::local_knn;
  c.k = j.at("k").get<Index>();
  c.epsilon = j.at("epsilon").get<double>();
  c.q = j.at("q").get<double>();
  c.sigma_global = detail::json_mat(j.at("sigma_global"));
  c.cal_psi = detail::json_mat(j.at("cal_psi"));
  c.cal_residuals = detail::json_mat(j.at("cal_residuals"));
  c.psi_center = detail::json_vec(j.at("psi_center"));
  c.psi_scale = detail::json_vec(j.at("psi_scale"));
  return c;
}

}  // namespace crokit
