#pragma once

// Out-of-sample evaluation: CVaR of realized costs -xi^T x*(psi), marginal
// coverage, oracle conditional coverage at sampled covariates, and comparison
// tables across repeated runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

#include "crokit/data.hpp"
#include "crokit/error.hpp"
#include "crokit/policy.hpp"
#include "crokit/risk.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

struct EvalConfig {
  double alpha = 0.9;
  double epsilon = 0.1;
  /// Covariates drawn from the test split for the conditional-coverage study.
  Index conditional_points = 200;
  int conditional_draws = 4000;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct EvalReport {
  std::string method;
  double alpha = 0.9;
  double epsilon = 0.1;
  double cvar = 0.0;
  double mean_cost = 0.0;
  double marginal_coverage = 0.0;
  Index samples = 0;
  Index failures = 0;
  std::vector<double> costs;
  std::vector<int> covered;
  std::vector<double> conditional_coverage;
  std::map<std::string, double> wall_ms;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"method", method},
            {"cost_convention", "cost = -xi^T x (negative return)"},
            {"alpha", alpha},
            {"epsilon", epsilon},
            {"cvar", cvar},
            {"mean_cost", mean_cost},
            {"marginal_coverage", marginal_coverage},
            {"samples", samples},
            {"failures", failures},
            {"costs", costs},
            {"covered", covered},
            {"conditional_coverage", conditional_coverage},
            {"wall_ms", wall_ms},
            {"config", config}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    try {
      EvalReport r;
      r.method = j.at("method").get<std::string>();
      r.alpha = j.at("alpha").get<double>();
      r.epsilon = j.at("epsilon").get<double>();
      r.cvar = j.at("cvar").get<double>();
      r.mean_cost = j.at("mean_cost").get<double>();
      r.marginal_coverage = j.at("marginal_coverage").get<double>();
      r.samples = j.at("samples").get<Index>();
      r.failures = j.value("failures", Index{0});
      r.costs = j.value("costs", std::vector<double>{});
      r.covered = j.value("covered", std::vector<int>{});
      r.conditional_coverage = j.value("conditional_coverage", std::vector<double>{});
      r.wall_ms = j.value("wall_ms", std::map<std::string, double>{});
      r.config = j.value("config", nlohmann::json::object());
      return r;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("report json: ") + e.what());
    }
  }
};

/// Full solves on every test row; failed solves are excluded from the CVaR and
/// counted. With an oracle, conditional coverage is estimated at covariates
/// drawn uniformly (without replacement) from the test split.
inline EvalReport evaluate(const std::string& method, const SetFunction& sets, const Dataset& test,
                           const EvalConfig& cfg, const MixtureEnv* oracle = nullptr) {
  detail::require(test.size() > 0, "evaluate: empty test split");
  using clock = std::chrono::steady_clock;
  EvalReport r;
  r.method = method;
  r.alpha = cfg.alpha;
  r.epsilon = cfg.epsilon;
  r.samples = test.size();

  auto t0 = clock::now();
  const PolicyOutcome out = rollout_policy(sets, test.psi, test.xi, full_solve_options(), cfg.jobs);
  r.wall_ms["solve"] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  r.failures = static_cast<Index>(out.failures.size());
  r.costs = out.valid_costs();
  if (r.costs.empty()) throw NumericError("evaluate: every solve failed (" + out.failure_messages.front() + ")");
  r.cvar = cvar(r.costs, cfg.alpha);
  r.mean_cost = std::accumulate(r.costs.begin(), r.costs.end(), 0.0) / static_cast<double>(r.costs.size());
  r.covered.assign(out.covered.begin(), out.covered.end());
  r.marginal_coverage = out.coverage();

  if (oracle != nullptr && cfg.conditional_points > 0) {
    t0 = clock::now();
    std::vector<Index> rows(static_cast<std::size_t>(test.size()));
    std::iota(rows.begin(), rows.end(), 0);
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(static_cast<std::size_t>(std::min(cfg.conditional_points, test.size())));
    r.conditional_coverage.assign(rows.size(), 0.0);
    parallel_for(static_cast<Index>(rows.size()), cfg.jobs, [&](Index k) {
      const Vec psi = test.psi.row(rows[static_cast<std::size_t>(k)]).transpose();
      r.conditional_coverage[static_cast<std::size_t>(k)] = conditional_coverage_prob(
          *oracle, psi, sets(psi), cfg.conditional_draws, cfg.seed + 1 + static_cast<std::uint64_t>(k));
    });
    r.wall_ms["conditional"] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  }
  return r;
}

struct CdfPoint {
  double probability = 0.0;
  double cumulative = 0.0;
};

/// Empirical CDF of the conditional-coverage samples at each distinct value.
inline std::vector<CdfPoint> coverage_cdf(std::vector<double> samples) {
  if (samples.empty()) throw InputError("coverage_cdf: no conditional coverage samples");
  std::sort(samples.begin(), samples.end());
  std::vector<CdfPoint> out;
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i + 1 < samples.size() && samples[i + 1] == samples[i]) continue;
    out.push_back({samples[i], static_cast<double>(i + 1) / n});
  }
  return out;
}

inline double quantile_of(std::vector<double> v, double q) {
  detail::require(!v.empty(), "quantile_of: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Interval {
  double mean = 0.0;
  /// Student-t half-width; NaN when there is a single run.
  double half_width = std::numeric_limits<double>::quiet_NaN();
  Index runs = 0;
};

inline Interval t_interval(const std::vector<double>& xs, double confidence = 0.95) {
  detail::require(!xs.empty(), "t_interval: no values");
  detail::require(confidence > 0.0 && confidence < 1.0, "t_interval: confidence must lie in (0, 1)");
  Interval iv;
  iv.runs = static_cast<Index>(xs.size());
  iv.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return iv;
  double ss = 0.0;
  for (double x : xs) ss += (x - iv.mean) * (x - iv.mean);
  const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  boost::math::students_t dist(static_cast<double>(xs.size() - 1));
  const double t = boost::math::quantile(dist, 0.5 + confidence / 2.0);
  iv.half_width = t * sd / std::sqrt(static_cast<double>(xs.size()));
  return iv;
}

struct ComparisonRow {
  std::string method;
  Interval cvar;
  Interval coverage;
};

struct Comparison {
  double alpha = 0.0;
  double epsilon = 0.0;
  double confidence = 0.95;
  std::vector<ComparisonRow> rows;

  std::string to_csv() const {
    std::ostringstream os;
    auto num = [](double v) { return std::isfinite(v) ? detail::format_double(v) : std::string("n/a"); };
    os << "method,runs,cvar_mean,cvar_ci,coverage_mean,coverage_ci\n";
    for (const auto& r : rows) {
      os << r.method << ',' << r.cvar.runs << ',' << num(r.cvar.mean) << ',' << num(r.cvar.half_width) << ','
         << num(r.coverage.mean) << ',' << num(r.coverage.half_width) << '\n';
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("n/a"); };
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : rows) {
      rs.push_back({{"method", r.method},
                    {"runs", r.cvar.runs},
                    {"cvar_mean", r.cvar.mean},
                    {"cvar_ci", num(r.cvar.half_width)},
                    {"coverage_mean", r.coverage.mean},
                    {"coverage_ci", num(r.coverage.half_width)}});
    }
    return {{"alpha", alpha}, {"epsilon", epsilon}, {"confidence", confidence}, {"rows", rs}};
  }
};

/// Groups reports by method (first-seen order) and summarizes each group.
inline Comparison compare(const std::vector<EvalReport>& reports, double confidence = 0.95) {
  detail::require(!reports.empty(), "compare: no reports");
  Comparison c;
  c.alpha = reports.front().alpha;
  c.epsilon = reports.front().epsilon;
  c.confidence = confidence;
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : reports) {
    if (r.alpha != c.alpha || r.epsilon != c.epsilon) {
      throw InputError("compare: reports use different alpha/epsilon (" + r.method + ")");
    }
    if (!groups.count(r.method)) order.push_back(r.method);
    groups[r.method].first.push_back(r.cvar);
    groups[r.method].second.push_back(r.marginal_coverage);
  }
  for (const auto& mth : order) {
    c.rows.push_back({mth, t_interval(groups[mth].first, confidence), t_interval(groups[mth].second, confidence)});
  }
  return c;
}

/// Coverage of each method at several targets (one column per 1 - eps).
inline std::string coverage_sweep_csv(const std::vector<EvalReport>& reports) {
  std::vector<double> targets;
  std::vector<std::string> methods;
  std::map<std::pair<std::string, double>, std::vector<double>> cells;
  for (const auto& r : reports) {
    const double t = 1.0 - r.epsilon;
    if (std::find(targets.begin(), targets.end(), t) == targets.end()) targets.push_back(t);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    cells[{r.method, t}].push_back(r.marginal_coverage);
  }
  std::sort(targets.begin(), targets.end());
  std::ostringstream os;
  os << "method";
  for (double t : targets) os << ",target_" << detail::format_double(t);
  os << '\n';
  for (const auto& mth : methods) {
    os << mth;
    for (double t : targets) {
      const auto it = cells.find({mth, t});
      os << ',';
      if (it == cells.end()) {
        os << "n/a";
      } else {
        os << detail::format_double(t_interval(it->second).mean);
      }
    }
    os << '\n';
  }
  return os.str();
}

/// Per-covariate set parameters plus conditional draws from the oracle, for
/// drawing sets against the true conditional density.
inline nlohmann::json sets_json(const SetFunction& sets, const Mat& psi, const MixtureEnv* oracle, int draws,
                                std::uint64_t seed) {
  nlohmann::json out = nlohmann::json::array();
  for (Index i = 0; i < psi.rows(); ++i) {
    const Vec p = psi.row(i).transpose();
    nlohmann::json e = {{"psi", std::vector<double>(p.data(), p.data() + p.size())}, {"set", sets(p).to_json()}};
    if (oracle != nullptr && draws > 0) {
      const GaussianMixture law = conditional_oracle(*oracle, p);
      std::mt19937_64 rng(seed + static_cast<std::uint64_t>(i));
      nlohmann::json pts = nlohmann::json::array();
      for (int k = 0; k < draws; ++k) {
        const Vec x = law.sample(rng);
        pts.push_back(std::vector<double>(x.data(), x.data() + x.size()));
      }
      e["oracle_samples"] = pts;
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace crokit
