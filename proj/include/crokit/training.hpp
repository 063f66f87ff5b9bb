#pragma once

// End-to-end training of the set predictor against the downstream CVaR of
// realized costs, optionally mixed with the regression-based conditional
// coverage loss:
//   L(theta) = gamma * CVaR_alpha(-xi_i^T x*_i) + (1 - gamma) * mean (g_phi*(psi_i) - (1 - eps))^2.
// Each epoch runs truncated trust-region solves warm-started from the previous
// epoch's decisions and differentiates the KKT conditions at the iterate.

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "crokit/coverage.hpp"
#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/implicit.hpp"
#include "crokit/nn.hpp"
#include "crokit/policy.hpp"
#include "crokit/risk.hpp"
#include "crokit/solver.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

enum class TrainMethod { ecro, dual };

inline TrainMethod parse_train_method(const std::string& s) {
  if (s == "ecro") return TrainMethod::ecro;
  if (s == "dual" || s == "dts") return TrainMethod::dual;
  throw InputError("unknown training method '" + s + "'");
}

struct LossOptions {
  double alpha = 0.9;
  double epsilon = 0.1;
  double gamma = 0.5;
  double beta = 10.0;
  SolverOptions solver;
  RegressorConfig regressor;
  int jobs = 1;
};

struct BatchLoss {
  double value = 0.0;
  double ecro = 0.0;
  double cc = 0.0;
  Vec grad;
  /// Solver output per batch row; empty when gamma = 0.
  std::vector<KKTPoint> points;
  Vec costs;
  Vec labels;
  /// Fitted regressor parameters; empty when gamma = 1.
  std::optional<ParamVector> phi;
};

/// Rows the coverage regressor is fitted on when they differ from the batch.
struct RegressorData {
  const Mat* psi = nullptr;
  const Mat* xi = nullptr;
};

namespace detail {

struct SampleState {
  std::optional<SetPredictor::Recorded> rec;
  std::optional<Ellipsoid> set;
  double label = 0.0;
  SetGradient dlabel;
};

inline void record_sets(const SetPredictor& pred, const ParamVector& theta, const Mat& psi,
                        std::vector<SampleState>& states, int jobs) {
  states.assign(static_cast<std::size_t>(psi.rows()), SampleState{});
  parallel_for(psi.rows(), jobs, [&](Index i) {
    auto& s = states[static_cast<std::size_t>(i)];
    s.rec.emplace(pred.record(theta, psi.row(i).transpose()));
    try {
      s.set.emplace(build_ellipsoid(s.rec->value));
    } catch (const std::exception& e) {
      throw NumericError("sample " + std::to_string(i) + ": " + e.what());
    }
  });
}

inline void label_samples(const Mat& xi, double beta, std::vector<SampleState>& states, int jobs) {
  parallel_for(static_cast<Index>(states.size()), jobs, [&](Index i) {
    auto& s = states[static_cast<std::size_t>(i)];
    auto [y, g] = smooth_membership_gradient(*s.set, xi.row(i).transpose(), beta);
    s.label = y;
    s.dlabel = std::move(g);
  });
}

/// Sums per-row parameter gradients in row order, so the result does not
/// depend on thread scheduling.
inline Vec sum_rows(const std::vector<Vec>& parts, Index size) {
  Vec g = Vec::Zero(size);
  for (const auto& p : parts) {
    if (p.size() == size) g += p;
  }
  return g;
}

}  // namespace detail

/// Value and theta-gradient of the mixed loss on one batch. `warm` holds one
/// feasible starting point per batch row. `phi_warm` seeds the regressor fit.
inline BatchLoss dual_loss(const SetPredictor& pred, const ParamVector& theta, const Mat& psi, const Mat& xi,
                           const std::vector<Vec>& warm, const LossOptions& opt, const ParamVector* phi_warm = nullptr,
                           const RegressorData& fit_rows = {}) {
  detail::require(psi.rows() == xi.rows() && psi.rows() > 0, "dual_loss: empty batch or row mismatch");
  detail::require(opt.gamma >= 0.0 && opt.gamma <= 1.0, "dual_loss: gamma must lie in [0, 1]");
  detail::require(xi.cols() == pred.dim(), "dual_loss: response dimension does not match the predictor");
  const Index n = psi.rows();
  const Index m = pred.dim();
  const bool task_path = opt.gamma > 0.0;
  const bool cc_path = opt.gamma < 1.0;
  const PortfolioProblem problem(m);

  std::vector<detail::SampleState> states;
  detail::record_sets(pred, theta, psi, states, opt.jobs);

  BatchLoss out;
  std::vector<SetGradient> set_grads(static_cast<std::size_t>(n), SetGradient::zero(m));

  if (task_path) {
    detail::require(static_cast<Index>(warm.size()) == n, "dual_loss: need one warm start per batch row");
    out.points.resize(static_cast<std::size_t>(n));
    out.costs.resize(n);
    parallel_for(n, opt.jobs, [&](Index i) {
      try {
        out.points[static_cast<std::size_t>(i)] =
            solve_cro(problem, *states[static_cast<std::size_t>(i)].set, warm[static_cast<std::size_t>(i)], opt.solver);
      } catch (const std::exception& e) {
        throw NumericError("solver failed on sample " + std::to_string(i) + ": " + e.what());
      }
      out.costs(i) = PortfolioProblem::cost(out.points[static_cast<std::size_t>(i)].x, xi.row(i).transpose());
    });
    const std::vector<double> c(out.costs.data(), out.costs.data() + n);
    const Vec u = cvar_subgradient(c, opt.alpha);
    out.ecro = u.dot(out.costs);
    SensitivityOptions sens;
    // Truncated solves are linearized where they stopped.
    sens.residual_tolerance = std::numeric_limits<double>::infinity();
    parallel_for(n, opt.jobs, [&](Index i) {
      if (u(i) == 0.0) return;
      const auto& s = states[static_cast<std::size_t>(i)];
      const Vec w = opt.gamma * u(i) * PortfolioProblem::cost_gradient(xi.row(i).transpose());
      set_grads[static_cast<std::size_t>(i)] += kkt_vjp(problem, *s.set, out.points[static_cast<std::size_t>(i)], w, sens);
    });
  }

  std::vector<Vec> parts(static_cast<std::size_t>(n));
  std::vector<Vec> fit_parts;
  if (cc_path) {
    const bool separate = fit_rows.psi != nullptr;
    std::vector<detail::SampleState> fit_states;
    if (separate) {
      detail::require(fit_rows.xi != nullptr && fit_rows.psi->rows() == fit_rows.xi->rows(),
                      "dual_loss: regressor rows are incomplete");
      detail::record_sets(pred, theta, *fit_rows.psi, fit_states, opt.jobs);
      detail::label_samples(*fit_rows.xi, opt.beta, fit_states, opt.jobs);
    } else {
      detail::label_samples(xi, opt.beta, states, opt.jobs);
    }
    auto& lstates = separate ? fit_states : states;
    const Mat& fpsi = separate ? *fit_rows.psi : psi;
    Vec labels(static_cast<Index>(lstates.size()));
    for (std::size_t k = 0; k < lstates.size(); ++k) labels(static_cast<Index>(k)) = lstates[k].label;
    const CoverageRegressor reg = fit_regressor(fpsi, labels, opt.regressor, phi_warm);
    const CoverageLossGrad cg = coverage_loss_label_gradient(reg, fpsi, labels, psi, opt.epsilon);
    out.cc = cg.value;
    out.labels = labels;
    out.phi = reg.phi;
    const double w = 1.0 - opt.gamma;
    if (separate) {
      fit_parts.resize(lstates.size());
      parallel_for(static_cast<Index>(lstates.size()), opt.jobs, [&](Index k) {
        auto& s = lstates[static_cast<std::size_t>(k)];
        SetGradient g = s.dlabel;
        g *= w * cg.dlabels(k);
        fit_parts[static_cast<std::size_t>(k)] = pred.backward(*s.rec, raw_gradient(*s.set, g));
      });
    } else {
      for (Index i = 0; i < n; ++i) {
        SetGradient g = states[static_cast<std::size_t>(i)].dlabel;
        g *= w * cg.dlabels(i);
        set_grads[static_cast<std::size_t>(i)] += g;
      }
    }
  }

  parallel_for(n, opt.jobs, [&](Index i) {
    const auto& s = states[static_cast<std::size_t>(i)];
    parts[static_cast<std::size_t>(i)] = pred.backward(*s.rec, raw_gradient(*s.set, set_grads[static_cast<std::size_t>(i)]));
  });
  out.grad = detail::sum_rows(parts, theta.size()) + detail::sum_rows(fit_parts, theta.size());
  out.value = (task_path ? opt.gamma * out.ecro : 0.0) + (cc_path ? (1.0 - opt.gamma) * out.cc : 0.0);
  return out;
}

/// CVaR of realized costs with the gradient through the KKT conditions.
inline BatchLoss ecro_loss(const SetPredictor& pred, const ParamVector& theta, const Mat& psi, const Mat& xi,
                           const std::vector<Vec>& warm, LossOptions opt) {
  opt.gamma = 1.0;
  return dual_loss(pred, theta, psi, xi, warm, opt);
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 40;
  int tro_steps = 5;
  Index batch_size = 100;
  double alpha = 0.9;
  double epsilon = 0.1;
  double gamma = 0.5;
  OptimizerConfig optimizer{OptimizerKind::sgd, 0.5};
  double beta_start = 10.0;
  double beta_end = 50.0;
  std::uint64_t seed = 0;
  /// Fit the coverage regressor on the whole training split instead of the batch.
  bool full_data_regressor = false;
  /// Start each solve from the sample's previous decision; off, every solve starts at the uniform portfolio.
  bool warm_start = true;
  double convergence_tol = 1e-4;
  int convergence_window = 10;
  /// Evaluate hard-label train/validation metrics after every epoch.
  bool track_metrics = true;
  int jobs = 1;
  SetPredictorConfig predictor;
  RegressorConfig regressor;
  /// Line-delimited JSON log, one record per epoch.
  std::ostream* log = nullptr;

  void validate() const {
    detail::require(epochs >= 1, "train: epochs must be positive");
    detail::require(tro_steps >= 1, "train: tro_steps must be at least 1");
    detail::require(batch_size >= 1, "train: batch size must be positive");
    detail::require(gamma >= 0.0 && gamma <= 1.0, "train: gamma must lie in [0, 1]");
    detail::require(alpha >= 0.0 && alpha < 1.0, "train: alpha must lie in [0, 1)");
    detail::require(epsilon > 0.0 && epsilon < 1.0, "train: epsilon must lie in (0, 1)");
    detail::require(optimizer.step >= 0.0, "train: step size must be nonnegative");
    detail::require(beta_start > 0.0 && beta_end > 0.0, "train: beta schedule must be positive");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"tro_steps", tro_steps},
            {"batch_size", batch_size},
            {"alpha", alpha},
            {"epsilon", epsilon},
            {"gamma", gamma},
            {"optimizer", optimizer_name(optimizer.kind)},
            {"step", optimizer.step},
            {"beta_start", beta_start},
            {"beta_end", beta_end},
            {"seed", seed},
            {"full_data_regressor", full_data_regressor},
            {"warm_start", warm_start},
            {"predictor", SetPredictor(predictor).to_json()},
            {"regressor", {{"hidden", regressor.hidden}, {"ridge", regressor.ridge}}}};
  }
};

inline double beta_at(const TrainConfig& cfg, int epoch) {
  if (cfg.epochs <= 1) return cfg.beta_start;
  const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return cfg.beta_start + t * (cfg.beta_end - cfg.beta_start);
}

struct Checkpoint {
  ParamVector theta;
  int epoch = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double train_cvar = std::numeric_limits<double>::quiet_NaN();
  double train_coverage = std::numeric_limits<double>::quiet_NaN();
  double val_cvar = std::numeric_limits<double>::quiet_NaN();
  double val_coverage = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  /// Set by select_model when no checkpoint met the coverage target.
  bool flagged = false;

  nlohmann::json metrics_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"epoch", epoch},
            {"loss", num(loss)},
            {"cvar", num(train_cvar)},
            {"coverage", num(train_coverage)},
            {"val_cvar", num(val_cvar)},
            {"val_coverage", num(val_coverage)},
            {"wall_ms", wall_ms},
            {"flagged", flagged}};
  }
};

struct TrainResult {
  SetPredictor predictor;
  ParamVector theta;
  /// Metrics of the initial parameters (epoch 0).
  Checkpoint initial;
  /// One checkpoint per completed epoch, epochs numbered from 1.
  std::vector<Checkpoint> history;
  bool aborted = false;
  std::string abort_reason;
  bool converged = false;
  double wall_ms = 0.0;
};

inline SetFunction predictor_sets(const SetPredictor& pred, const ParamVector& theta) {
  return [pred, theta](const Vec& psi) { return build_ellipsoid(pred.forward(theta, psi)); };
}

namespace detail {

inline void fill_metrics(Checkpoint& c, const SetPredictor& pred, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg) {
  const SetFunction sets = predictor_sets(pred, c.theta);
  const RiskSpec spec{cfg.alpha, RiskKind::cvar};
  const PolicyOutcome tr = rollout_policy(sets, train.psi, train.xi, full_solve_options(), cfg.jobs);
  c.train_coverage = tr.coverage();
  c.train_cvar = tr.failures.empty() ? tr.risk(spec) : std::numeric_limits<double>::quiet_NaN();
  if (val.size() > 0) {
    const PolicyOutcome va = rollout_policy(sets, val.psi, val.xi, full_solve_options(), cfg.jobs);
    c.val_coverage = va.coverage();
    c.val_cvar = va.failures.empty() ? va.risk(spec) : std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace detail

/// Mini-batch training. For method ecro gamma is forced to 1.
inline TrainResult train(TrainMethod method, const Dataset& train_set, const Dataset& val_set, TrainConfig cfg) {
  if (method == TrainMethod::ecro) cfg.gamma = 1.0;
  cfg.validate();
  detail::require(train_set.size() > 0, "train: empty training split");
  detail::require(val_set.size() == 0 || (val_set.dim() == train_set.dim() && val_set.covariates() == train_set.covariates()),
                  "train: validation split dimensions differ from training split");
  cfg.predictor.covariates = train_set.covariates();
  cfg.predictor.dim = train_set.dim();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainResult res;
  res.predictor = SetPredictor(cfg.predictor);
  std::mt19937_64 init_rng(cfg.seed);
  res.theta = res.predictor.init(init_rng);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66DULL);
  RegressorConfig rcfg = cfg.regressor;
  rcfg.seed = cfg.seed + 7;

  const Index n = train_set.size();
  const Index m = train_set.dim();
  WarmStartBuffer buffer(static_cast<std::size_t>(n), m);
  Optimizer optimizer(cfg.optimizer);
  std::optional<ParamVector> phi;

  LossOptions lo;
  lo.alpha = cfg.alpha;
  lo.epsilon = cfg.epsilon;
  lo.gamma = cfg.gamma;
  lo.solver.max_steps = cfg.tro_steps;
  lo.regressor = rcfg;
  lo.jobs = cfg.jobs;
  RegressorData fit_rows;
  if (cfg.full_data_regressor) fit_rows = {&train_set.psi, &train_set.xi};

  res.initial.theta = res.theta;
  if (cfg.track_metrics) detail::fill_metrics(res.initial, res.predictor, train_set, val_set, cfg);

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    lo.beta = beta_at(cfg, epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    const ParamVector before = res.theta;
    try {
      for (Index start = 0; start < n; start += cfg.batch_size) {
        const Index b = std::min(cfg.batch_size, n - start);
        Mat psi(b, train_set.covariates()), xi(b, m);
        std::vector<Vec> warm(static_cast<std::size_t>(b));
        for (Index k = 0; k < b; ++k) {
          const Index row = order[static_cast<std::size_t>(start + k)];
          psi.row(k) = train_set.psi.row(row);
          xi.row(k) = train_set.xi.row(row);
          warm[static_cast<std::size_t>(k)] = cfg.warm_start ? buffer[static_cast<std::size_t>(row)] : PortfolioProblem(m).uniform();
        }
        const BatchLoss bl = dual_loss(res.predictor, res.theta, psi, xi, warm, lo, phi ? &*phi : nullptr, fit_rows);
        if (!std::isfinite(bl.value) || !bl.grad.allFinite()) throw NumericError("loss is not finite");
        for (std::size_t k = 0; k < bl.points.size(); ++k) {
          buffer.update(static_cast<std::size_t>(order[static_cast<std::size_t>(start) + k]), bl.points[k].x);
        }
        if (bl.phi) phi = bl.phi;
        optimizer.step(res.theta.values(), bl.grad);
        total += bl.value * static_cast<double>(b);
      }
      if (!res.theta.values().allFinite()) throw NumericError("parameters are not finite");
    } catch (const NumericError& e) {
      res.theta = before;
      res.aborted = true;
      res.abort_reason = "epoch " + std::to_string(epoch + 1) + ": " + e.what();
      break;
    }

    Checkpoint c;
    c.theta = res.theta;
    c.epoch = epoch + 1;
    c.loss = total / static_cast<double>(n);
    if (cfg.track_metrics) detail::fill_metrics(c, res.predictor, train_set, val_set, cfg);
    c.wall_ms = elapsed_ms();
    if (cfg.log) *cfg.log << c.metrics_json().dump() << '\n';
    res.history.push_back(std::move(c));

    // Epoch losses are minibatch averages and noisy, so progress is measured
    // by the best loss seen: stop once it has not improved by the relative
    // tolerance for a full window.
    const double now = res.history.back().loss;
    if (now < best_loss - cfg.convergence_tol * std::max(std::abs(best_loss), 1e-12) || epoch == 0) {
      best_loss = now;
      best_epoch = epoch;
    } else if (epoch - best_epoch >= cfg.convergence_window) {
      res.converged = true;
      break;
    }
  }
  res.wall_ms = elapsed_ms();
  return res;
}

/// Among checkpoints whose validation coverage reaches 1 - eps, the one with
/// the lowest validation CVaR; otherwise the most covering one, flagged.
inline Checkpoint select_model(const std::vector<Checkpoint>& history, double epsilon) {
  detail::require(!history.empty(), "select_model: empty history");
  const double target = 1.0 - epsilon - 1e-12;
  const Checkpoint* best = nullptr;
  for (const auto& c : history) {
    if (c.val_coverage >= target && std::isfinite(c.val_cvar) && (best == nullptr || c.val_cvar < best->val_cvar)) best = &c;
  }
  if (best) return *best;
  const Checkpoint* most = &history.front();
  for (const auto& c : history) {
    if (c.val_coverage > most->val_coverage) most = &c;
  }
  Checkpoint out = *most;
  out.flagged = true;
  return out;
}

/// Lowest validation CVaR regardless of coverage (task-only training).
inline Checkpoint select_by_cvar(const std::vector<Checkpoint>& history) {
  detail::require(!history.empty(), "select_by_cvar: empty history");
  const Checkpoint* best = &history.back();
  for (const auto& c : history) {
    if (std::isfinite(c.val_cvar) && (!std::isfinite(best->val_cvar) || c.val_cvar < best->val_cvar)) best = &c;
  }
  return *best;
}

}  // namespace crokit
