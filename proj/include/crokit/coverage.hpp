#pragma once

// Conditional-coverage loss. A logistic regressor g_phi(psi) is fitted to
// membership labels y_i = 1{xi_i in U(psi_i)} (soft labels during training);
// the loss is the mean squared gap between g_phi* and the target 1 - eps.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/implicit.hpp"
#include "crokit/logistic.hpp"
#include "crokit/nn.hpp"
#include "crokit/policy.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

struct RegressorConfig {
  /// Width of an optional tanh hidden layer; 0 is plain logistic regression.
  /// A wide regressor fitted on a small batch tracks individual labels, and
  /// the coverage loss then rewards covering every sample.
  Index hidden = 0;
  double ridge = 1e-3;
  double fit_tolerance = 1e-8;
  int max_iterations = 200;
  std::uint64_t seed = 0;
};

struct CoverageRegressor {
  Mlp net;
  ParamVector phi;
  double ridge = 0.0;
  double fit_tolerance = 0.0;
  /// Infinity norm of the regularized NLL gradient at phi.
  double grad_norm = 0.0;
  int iterations = 0;

  double predict(const Vec& psi) const { return forward_logistic(net, phi, psi); }
};

inline Mlp make_regressor_net(Index covariates, Index hidden) {
  MlpShape s{covariates, {}, 1, Activation::tanh, Activation::sigmoid};
  if (hidden > 0) s.hidden = {hidden};
  return Mlp(s, "g.");
}

/// Fits the ridge-regularized logistic NLL to stationarity with Newton steps
/// on the eigenvalue-modified Hessian and Armijo backtracking. `warm`, when given,
/// must have the regressor's layout and is used as the starting point.
inline CoverageRegressor fit_regressor(const Mat& psi, const Vec& labels, const RegressorConfig& cfg,
                                       const ParamVector* warm = nullptr) {
  detail::require(psi.rows() > 0 && psi.rows() == labels.size(), "fit_regressor: batch is empty or labels mismatch");
  detail::require(labels.minCoeff() >= 0.0 && labels.maxCoeff() <= 1.0, "fit_regressor: labels must lie in [0, 1]");
  detail::require(cfg.ridge >= 0 && cfg.max_iterations >= 1, "fit_regressor: invalid configuration");
  CoverageRegressor reg;
  reg.net = make_regressor_net(psi.cols(), cfg.hidden);
  reg.ridge = cfg.ridge;
  reg.fit_tolerance = cfg.fit_tolerance;
  if (warm) {
    detail::require(warm->size() == reg.net.make_params().size(), "fit_regressor: warm start has the wrong layout");
    reg.phi = *warm;
  } else {
    reg.phi = reg.net.make_params();
    std::mt19937_64 rng(cfg.seed);
    reg.net.init_uniform(reg.phi, rng, 0.5);
  }

  NllEval ev = logistic_nll(reg.net, reg.phi, psi, labels, cfg.ridge, true);
  for (int it = 0;; ++it) {
    reg.grad_norm = ev.grad.cwiseAbs().maxCoeff();
    reg.iterations = it;
    if (reg.grad_norm <= cfg.fit_tolerance) return reg;
    if (it >= cfg.max_iterations || !std::isfinite(ev.value)) {
      throw NumericError("fit_regressor: no convergence after " + std::to_string(it) +
                         " iterations, gradient norm " + std::to_string(reg.grad_norm));
    }
    // Newton direction on |H|: negative curvature is flipped rather than
    // followed, tiny eigenvalues are floored. Near a minimum this is plain Newton.
    Eigen::SelfAdjointEigenSolver<Mat> eig(ev.hess);
    const double floor = std::max(1e-10, 1e-8 * eig.eigenvalues().cwiseAbs().maxCoeff());
    const Vec inv = eig.eigenvalues().cwiseAbs().cwiseMax(floor).cwiseInverse();
    Vec dir = -(eig.eigenvectors() * inv.asDiagonal() * (eig.eigenvectors().transpose() * ev.grad));
    double slope = ev.grad.dot(dir);
    if (!dir.allFinite() || !(slope < 0)) {
      dir = -ev.grad;
      slope = -ev.grad.squaredNorm();
    }
    // Predicted decrease below the resolution of the objective: no further
    // progress is representable.
    if (-slope <= 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(ev.value))) return reg;
    double t = 1.0;
    ParamVector trial = reg.phi;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      trial.values() = reg.phi.values() + t * dir;
      const NllEval next = logistic_nll(reg.net, trial, psi, labels, cfg.ridge, false);
      if (std::isfinite(next.value) && next.value <= ev.value + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      throw NumericError("fit_regressor: line search failed, gradient norm " + std::to_string(reg.grad_norm));
    }
    reg.phi = std::move(trial);
    ev = logistic_nll(reg.net, reg.phi, psi, labels, cfg.ridge, true);
  }
}

/// Mean of (g_phi(psi_i) - (1 - eps))^2 over the rows of psi.
inline double coverage_loss(const CoverageRegressor& reg, const Mat& psi, double epsilon) {
  detail::require(psi.rows() > 0, "coverage_loss: empty batch");
  const double target = 1.0 - epsilon;
  double s = 0.0;
  for (Index i = 0; i < psi.rows(); ++i) {
    const double d = reg.predict(psi.row(i).transpose()) - target;
    s += d * d;
  }
  return s / static_cast<double>(psi.rows());
}

/// Gradient of coverage_loss over phi.
inline Vec coverage_loss_param_gradient(const CoverageRegressor& reg, const Mat& psi, double epsilon) {
  const double target = 1.0 - epsilon;
  Vec g = Vec::Zero(reg.phi.size());
  for (Index i = 0; i < psi.rows(); ++i) {
    const Vec p = psi.row(i).transpose();
    g += 2.0 * (reg.predict(p) - target) * logistic_param_gradient(reg.net, reg.phi, p);
  }
  return g / static_cast<double>(psi.rows());
}

/// Loss and its gradient over the labels the regressor was fitted on, through
/// the stationarity condition of the fit. `eval_psi` is where the loss is
/// measured; `fit_psi` and `labels` are the fit data.
struct CoverageLossGrad {
  double value = 0.0;
  Vec dlabels;
};

inline CoverageLossGrad coverage_loss_label_gradient(const CoverageRegressor& reg, const Mat& fit_psi,
                                                     const Vec& labels, const Mat& eval_psi, double epsilon) {
  CoverageLossGrad out;
  out.value = coverage_loss(reg, eval_psi, epsilon);
  const Vec dphi = coverage_loss_param_gradient(reg, eval_psi, epsilon);
  // The fit tolerance is far below this threshold; it only guards misuse.
  out.dlabels = logistic_label_vjp(reg.net, reg.phi, fit_psi, labels, reg.ridge, dphi,
                                   std::max(1e-6, 10.0 * reg.fit_tolerance));
  return out;
}

/// Monte Carlo estimate of E_psi[(P(xi in U(psi) | psi) - (1 - eps))^2] over
/// the rows of psi, with conditional probabilities from the environment's
/// exact conditional law.
inline double theoretical_cc_loss(const SetFunction& sets, const MixtureEnv* env, const Mat& psi, double epsilon,
                                  int n_mc = 10000, std::uint64_t seed = 0) {
  if (env == nullptr) throw InputError("theoretical_cc_loss: no conditional oracle for this data source");
  detail::require(psi.rows() > 0, "theoretical_cc_loss: empty covariate batch");
  double s = 0.0;
  for (Index i = 0; i < psi.rows(); ++i) {
    const Vec p = psi.row(i).transpose();
    const double c =
        conditional_coverage_prob(*env, p, sets(p), n_mc, seed + static_cast<std::uint64_t>(i) * 0x9E3779B97F4A7C15ull);
    s += (c - (1.0 - epsilon)) * (c - (1.0 - epsilon));
  }
  return s / static_cast<double>(psi.rows());
}

}  // namespace crokit
