#pragma once

// Rolling out the robust policy x*(psi, U(psi)) over a dataset, and the small
// worker pool used for per-sample work.

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "crokit/error.hpp"
#include "crokit/nn.hpp"
#include "crokit/risk.hpp"
#include "crokit/solver.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The exception of the
/// lowest failing index is rethrown, so failures do not depend on scheduling.
inline void parallel_for(Index n, int jobs, const std::function<void(Index)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::mutex mu;
  Index failed_at = n;
  std::exception_ptr failure;
  auto worker = [&] {
    for (Index i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const int t = static_cast<int>(std::min<Index>(jobs, n));
  for (int k = 0; k < t; ++k) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

using SetFunction = std::function<Ellipsoid(const Vec& psi)>;

struct PolicyOutcome {
  /// Realized cost -xi^T x per sample; NaN where the solve failed.
  Vec costs;
  std::vector<char> covered;
  std::vector<Vec> decisions;
  std::vector<Index> failures;
  std::vector<std::string> failure_messages;

  /// Costs of the samples whose solve succeeded.
  std::vector<double> valid_costs() const {
    std::vector<double> out;
    for (Index i = 0; i < costs.size(); ++i) {
      if (!std::isnan(costs(i))) out.push_back(costs(i));
    }
    return out;
  }

  double coverage() const {
    if (covered.empty()) return 0.0;
    double s = 0.0;
    for (char c : covered) s += c ? 1.0 : 0.0;
    return s / static_cast<double>(covered.size());
  }

  double risk(const RiskSpec& spec) const {
    const auto c = valid_costs();
    return crokit::risk(c, spec);
  }
};

/// Full solves (cold start at the uniform portfolio) for every row.
inline PolicyOutcome rollout_policy(const SetFunction& sets, const Mat& psi, const Mat& xi, const SolverOptions& opt,
                                    int jobs = 1) {
  detail::require(psi.rows() == xi.rows(), "rollout_policy: covariate and response rows differ");
  const Index n = psi.rows();
  const PortfolioProblem problem(xi.cols());
  PolicyOutcome out;
  out.costs = Vec::Constant(n, std::numeric_limits<double>::quiet_NaN());
  out.covered.assign(static_cast<std::size_t>(n), 0);
  out.decisions.assign(static_cast<std::size_t>(n), Vec());
  std::vector<std::string> errors(static_cast<std::size_t>(n));
  parallel_for(n, jobs, [&](Index i) {
    const Vec p = psi.row(i).transpose();
    const Vec z = xi.row(i).transpose();
    try {
      const Ellipsoid set = sets(p);
      out.covered[static_cast<std::size_t>(i)] = contains(set, z) ? 1 : 0;
      const KKTPoint pt = solve_cro(problem, set, problem.uniform(), opt);
      out.decisions[static_cast<std::size_t>(i)] = pt.x;
      out.costs(i) = PortfolioProblem::cost(pt.x, z);
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  });
  for (Index i = 0; i < n; ++i) {
    if (!errors[static_cast<std::size_t>(i)].empty()) {
      out.failures.push_back(i);
      out.failure_messages.push_back(errors[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

inline SolverOptions full_solve_options() {
  SolverOptions o;
  o.max_steps = 200;
  return o;
}

}  // namespace crokit
