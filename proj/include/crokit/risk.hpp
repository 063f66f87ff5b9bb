#pragma once

// Empirical CVaR over a batch of realized costs and a deterministic element of
// its subdifferential. Both come from the same linear program
//   max u^T y  s.t.  u >= 0, 1^T u = 1, u <= 1 / ((1 - alpha) M),
// solved by sorting.

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crokit/error.hpp"

namespace crokit {

enum class RiskKind { cvar, mean, max };

struct RiskSpec {
  double alpha = 0.9;
  RiskKind kind = RiskKind::cvar;
};

namespace detail {

inline void check_risk_args(std::span<const double> costs, double alpha) {
  require(!costs.empty(), "cvar: empty batch");
  require(alpha >= 0.0 && alpha < 1.0, "cvar: alpha must lie in [0, 1)");
}

/// Weights solving the CVaR LP with per-entry cap `cap`. Exact ties at the
/// quantile boundary share the residual weight equally.
inline Eigen::VectorXd capped_weights(std::span<const double> y, double cap) {
  const std::size_t M = y.size();
  std::vector<std::size_t> order(M);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });

  // Number of entries that receive the full cap before the budget runs out.
  const double slots = 1.0 / cap;
  std::size_t full = static_cast<std::size_t>(std::floor(slots + 1e-12));
  full = std::min(full, M);
  double residual = 1.0 - static_cast<double>(full) * cap;
  if (residual < 1e-12) residual = 0.0;

  const std::size_t boundary_pos = (residual > 0.0 && full < M) ? full : full - 1;
  const double boundary = y[order[boundary_pos]];

  Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(M));
  std::size_t above = 0, tied = 0;
  for (std::size_t i = 0; i < M; ++i) {
    if (y[i] > boundary) {
      ++above;
    } else if (y[i] == boundary) {
      ++tied;
    }
  }
  const double tied_weight = (1.0 - static_cast<double>(above) * cap) / static_cast<double>(tied);
  for (std::size_t i = 0; i < M; ++i) {
    if (y[i] > boundary) {
      u(static_cast<Eigen::Index>(i)) = cap;
    } else if (y[i] == boundary) {
      u(static_cast<Eigen::Index>(i)) = tied_weight;
    }
  }
  return u;
}

}  // namespace detail

inline Eigen::VectorXd cvar_subgradient(std::span<const double> costs, double alpha) {
  detail::check_risk_args(costs, alpha);
  const double cap = 1.0 / ((1.0 - alpha) * static_cast<double>(costs.size()));
  return detail::capped_weights(costs, std::min(cap, 1.0));
}

inline double cvar(std::span<const double> costs, double alpha) {
  const Eigen::VectorXd u = cvar_subgradient(costs, alpha);
  return u.dot(Eigen::Map<const Eigen::VectorXd>(costs.data(), static_cast<Eigen::Index>(costs.size())));
}

inline Eigen::VectorXd risk_weights(std::span<const double> costs, const RiskSpec& spec) {
  switch (spec.kind) {
    case RiskKind::mean: return cvar_subgradient(costs, 0.0);
    case RiskKind::max:
      detail::check_risk_args(costs, 0.0);
      return detail::capped_weights(costs, 1.0);
    case RiskKind::cvar: return cvar_subgradient(costs, spec.alpha);
  }
  return cvar_subgradient(costs, spec.alpha);
}

inline double risk(std::span<const double> costs, const RiskSpec& spec) {
  return risk_weights(costs, spec).dot(
      Eigen::Map<const Eigen::VectorXd>(costs.data(), static_cast<Eigen::Index>(costs.size())));
}

inline RiskKind parse_risk_kind(const std::string& s) {
  if (s == "cvar") return RiskKind::cvar;
  if (s == "mean") return RiskKind::mean;
  if (s == "max") return RiskKind::max;
  throw InputError("unknown risk kind '" + s + "'");
}

}  // namespace crokit
