#pragma once

// Robust portfolio problem over the probability simplex
//
//   min_{x in simplex} max_{xi in U} -xi^T x  =  min_x  -mu^T x + sqrt(x^T Sigma x)
//
// solved with a trust-region method whose quadratic model uses the exact
// Hessian and whose subproblem is a small box-and-simplex QP solved by a
// primal active-set method.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crokit/error.hpp"
#include "crokit/nn.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

/// Primal-dual point of the reformulated robust problem.
struct KKTPoint {
  Vec x;
  /// Dual direction of the conjugate reformulation. For the portfolio
  /// instance it coincides with x and is kept for interface symmetry.
  Vec v;
  /// Multipliers of x >= 0.
  Vec lambda;
  /// Multiplier of sum(x) = 1.
  Vec nu;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Objective after every accepted step, starting with the initial point.
  std::vector<double> trace;
};

struct WorstCase {
  double value = 0.0;
  Vec worst_xi;
};

struct SolverOptions {
  int max_steps = 5;
  double initial_radius = 1.0;
  double max_radius = 1.0;
  double shrink = 0.25;
  double grow = 2.0;
  double accept_ratio = 0.1;
  /// KKT residual at which the solve is declared converged.
  double tolerance = 1e-10;
  double activity_tolerance = 1e-8;
};

/// Interface a robust instance offers to the trust-region solver: a smooth
/// convex objective in the decision, its derivatives, and a feasible set of
/// the form {x >= 0, 1^T x = 1}.
template <class P>
concept RobustInstance = requires(const P& p, const Ellipsoid& set, const Vec& x) {
  { p.dim() } -> std::convertible_to<Index>;
  { p.objective(set, x) } -> std::convertible_to<double>;
  { p.gradient(set, x) } -> std::convertible_to<Vec>;
  { p.hessian(set, x) } -> std::convertible_to<Mat>;
};

/// Portfolio instance: cost c(x, xi) = -xi^T x, decisions on the simplex,
/// unbounded uncertainty domain.
class PortfolioProblem {
 public:
  explicit PortfolioProblem(Index assets) : m_(assets) { detail::require(m_ >= 1, "portfolio: need at least one asset"); }

  Index dim() const { return m_; }

  static double cost(const Vec& x, const Vec& xi) { return -xi.dot(x); }
  static Vec cost_gradient(const Vec& xi) { return -xi; }

  double spread(const Ellipsoid& set, const Vec& x) const {
    const double s = std::sqrt(set.r()) * (set.L().transpose() * x).norm();
    if (!(s > 0)) throw NumericError("portfolio: x^T Sigma x vanished (singular shape matrix)");
    return s;
  }

  double objective(const Ellipsoid& set, const Vec& x) const { return -set.mu().dot(x) + spread(set, x); }

  Vec gradient(const Ellipsoid& set, const Vec& x) const {
    const Mat S = set.shape();
    return -set.mu() + S * x / spread(set, x);
  }

  Mat hessian(const Ellipsoid& set, const Vec& x) const {
    const Mat S = set.shape();
    const double s = spread(set, x);
    const Vec Sx = S * x;
    return (S - Sx * Sx.transpose() / (s * s)) / s;
  }

  bool feasible(const Vec& x, double tol = 1e-8) const {
    return x.size() == m_ && x.minCoeff() >= -tol && std::abs(x.sum() - 1.0) <= tol;
  }

  Vec uniform() const { return Vec::Constant(m_, 1.0 / static_cast<double>(m_)); }

 private:
  Index m_;
};

/// max_{xi in set} -xi^T x and its maximizer.
inline WorstCase worst_case_objective(const Ellipsoid& set, const Vec& x) {
  detail::require(x.size() == set.dim(), "worst_case_objective: dimension mismatch");
  const SupportValue s = support_function(set, -x);
  return {s.value, s.maximizer};
}

namespace detail {

/// min 1/2 y^T H y + c^T y  s.t.  1^T y = 1, lo <= y <= hi, from a feasible y.
inline Vec box_simplex_qp(const Mat& H, const Vec& c, const Vec& lo, const Vec& hi, Vec y) {
  const Index n = y.size();
  enum class Bound { free, lower, upper };
  std::vector<Bound> state(n, Bound::free);
  for (Index i = 0; i < n; ++i) {
    if (y(i) <= lo(i)) {
      y(i) = lo(i);
      state[i] = Bound::lower;
    } else if (y(i) >= hi(i)) {
      y(i) = hi(i);
      state[i] = Bound::upper;
    }
  }
  const int max_iter = 20 * static_cast<int>(n) + 50;
  for (int it = 0; it < max_iter; ++it) {
    std::vector<Index> freeset;
    for (Index i = 0; i < n; ++i) {
      if (state[i] == Bound::free) freeset.push_back(i);
    }
    const Vec r = H * y + c;
    const Index nf = static_cast<Index>(freeset.size());
    Vec p = Vec::Zero(n);
    double eta = 0.0;
    if (nf >= 1) {
      Mat K = Mat::Zero(nf + 1, nf + 1);
      Vec rhs(nf + 1);
      for (Index a = 0; a < nf; ++a) {
        for (Index b = 0; b < nf; ++b) K(a, b) = H(freeset[a], freeset[b]);
        K(a, nf) = 1.0;
        K(nf, a) = 1.0;
        rhs(a) = -r(freeset[a]);
      }
      rhs(nf) = 0.0;
      Eigen::FullPivLU<Mat> lu(K);
      Vec sol = lu.isInvertible() ? Vec(lu.solve(rhs)) : Vec(K.completeOrthogonalDecomposition().solve(rhs));
      for (Index a = 0; a < nf; ++a) p(freeset[a]) = sol(a);
      eta = sol(nf);
    }
    const double pscale = std::max(1.0, y.cwiseAbs().maxCoeff());
    if (p.cwiseAbs().maxCoeff() <= 1e-14 * pscale) {
      // Stationary on the current face: check bound multipliers.
      if (nf == 0) {
        double lo_eta = -std::numeric_limits<double>::infinity();
        double hi_eta = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < n; ++i) {
          if (state[i] == Bound::lower) lo_eta = std::max(lo_eta, -r(i));
          if (state[i] == Bound::upper) hi_eta = std::min(hi_eta, -r(i));
        }
        if (std::isinf(lo_eta)) {
          eta = hi_eta;
        } else if (std::isinf(hi_eta)) {
          eta = lo_eta;
        } else {
          eta = 0.5 * (lo_eta + hi_eta);
        }
      } else {
        // Refit eta on the free set for accuracy.
        eta = 0.0;
        for (Index i : freeset) eta -= r(i);
        eta /= static_cast<double>(nf);
      }
      Index worst = -1;
      double worst_mult = -1e-13 * std::max(1.0, r.cwiseAbs().maxCoeff());
      for (Index i = 0; i < n; ++i) {
        double mult = 0.0;
        if (state[i] == Bound::lower) mult = r(i) + eta;
        if (state[i] == Bound::upper) mult = -(r(i) + eta);
        if (state[i] != Bound::free && mult < worst_mult) {
          worst_mult = mult;
          worst = i;
        }
      }
      if (worst < 0) return y;
      state[worst] = Bound::free;
      continue;
    }
    double step = 1.0;
    Index block = -1;
    Bound block_state = Bound::free;
    for (Index i : freeset) {
      if (p(i) < 0) {
        const double t = (lo(i) - y(i)) / p(i);
        if (t < step) {
          step = t;
          block = i;
          block_state = Bound::lower;
        }
      } else if (p(i) > 0) {
        const double t = (hi(i) - y(i)) / p(i);
        if (t < step) {
          step = t;
          block = i;
          block_state = Bound::upper;
        }
      }
    }
    step = std::max(step, 0.0);
    y += step * p;
    if (block >= 0) {
      y(block) = block_state == Bound::lower ? lo(block) : hi(block);
      state[block] = block_state;
    }
  }
  return y;
}

/// Clean a nearly-feasible simplex point: clip tiny negatives and renormalize.
inline Vec clean_simplex(Vec x) {
  x = x.cwiseMax(0.0);
  return x / x.sum();
}

}  // namespace detail

/// Multipliers of the simplex constraints fitted to stationarity at x:
/// g - lambda + nu 1 = 0, lambda >= 0, lambda_i = 0 off the active set.
inline void recover_multipliers(const Vec& x, const Vec& g, double activity_tol, Vec& lambda, Vec& nu) {
  const Index m = x.size();
  double sum = 0.0;
  int count = 0;
  for (Index i = 0; i < m; ++i) {
    if (x(i) > activity_tol) {
      sum += g(i);
      ++count;
    }
  }
  nu = Vec::Constant(1, count > 0 ? -sum / count : -g.minCoeff());
  lambda = Vec::Zero(m);
  for (Index i = 0; i < m; ++i) {
    if (x(i) <= activity_tol) lambda(i) = std::max(0.0, g(i) + nu(0));
  }
}

/// Max-norm of the stacked KKT residual: stationarity, complementarity,
/// equality, and sign violations of x and lambda.
template <RobustInstance P>
double kkt_residual(const P& problem, const Ellipsoid& set, const KKTPoint& point) {
  const Index m = problem.dim();
  detail::require(point.x.size() == m && point.lambda.size() == m && point.nu.size() == 1,
                  "kkt_residual: point dimensions do not match the problem");
  const Vec g = problem.gradient(set, point.x);
  const Vec stat = g - point.lambda + Vec::Constant(m, point.nu(0));
  double res = stat.cwiseAbs().maxCoeff();
  res = std::max(res, (point.lambda.array() * point.x.array()).abs().maxCoeff());
  res = std::max(res, std::abs(point.x.sum() - 1.0));
  res = std::max(res, std::max(0.0, -point.x.minCoeff()));
  res = std::max(res, std::max(0.0, -point.lambda.minCoeff()));
  return res;
}

/// K-step trust-region solve from a feasible warm start.
template <RobustInstance P>
KKTPoint solve_cro(const P& problem, const Ellipsoid& set, const Vec& warm_start, const SolverOptions& opt = {}) {
  const Index m = problem.dim();
  detail::require(set.dim() == m, "solve_cro: set dimension does not match the problem");
  detail::require(opt.max_steps >= 1, "solve_cro: need at least one trust-region step");
  detail::require(warm_start.size() == m && warm_start.allFinite() && warm_start.minCoeff() >= -1e-8 &&
                      std::abs(warm_start.sum() - 1.0) <= 1e-8,
                  "solve_cro: warm start is not on the simplex");
  if (set.degenerate()) throw NumericError("solve_cro: singular shape matrix");

  KKTPoint pt;
  Vec x = detail::clean_simplex(warm_start);
  double f = problem.objective(set, x);
  double radius = opt.initial_radius;
  pt.trace.push_back(f);

  auto stationarity = [&](const Vec& xx, const Vec& g) {
    KKTPoint probe;
    probe.x = xx;
    recover_multipliers(xx, g, opt.activity_tolerance, probe.lambda, probe.nu);
    const Vec stat = g - probe.lambda + Vec::Constant(m, probe.nu(0));
    return stat.cwiseAbs().maxCoeff();
  };

  int it = 0;
  bool at_roundoff = false;
  for (; it < opt.max_steps; ++it) {
    const Vec g = problem.gradient(set, x);
    if (stationarity(x, g) <= opt.tolerance) break;
    const Mat H = problem.hessian(set, x);
    const Vec lo = (x.array() - radius).cwiseMax(0.0);
    const Vec hi = x.array() + radius;
    const Mat Hreg = H + 1e-12 * std::max(1.0, H.diagonal().cwiseAbs().maxCoeff()) * Mat::Identity(m, m);
    const Vec y = detail::box_simplex_qp(Hreg, g - Hreg * x, lo, hi, x);
    const Vec d = y - x;
    const double pred = -(g.dot(d) + 0.5 * d.dot(H * d));
    if (!(pred > 1e-16 * std::max(1.0, std::abs(f)))) {
      // No representable decrease left; the residual is at its roundoff floor.
      at_roundoff = pred >= -1e-14 * std::max(1.0, std::abs(f));
      ++it;
      break;
    }
    const Vec xn = detail::clean_simplex(y);
    const double fn = problem.objective(set, xn);
    const double rho = (f - fn) / pred;
    const double step = d.cwiseAbs().maxCoeff();
    if (rho < 0.25) {
      radius *= opt.shrink;
    } else if (rho > 0.75 && step >= 0.99 * radius) {
      radius = std::min(opt.grow * radius, opt.max_radius);
    }
    if (rho > opt.accept_ratio && fn <= f) {
      x = xn;
      f = fn;
      pt.trace.push_back(f);
    }
  }

  pt.x = x;
  pt.v = x;
  pt.objective = f;
  pt.iterations = it;
  recover_multipliers(x, problem.gradient(set, x), opt.activity_tolerance, pt.lambda, pt.nu);
  const double res = kkt_residual(problem, set, pt);
  pt.converged = res <= std::max(opt.tolerance, 1e-9) || (at_roundoff && res <= 1e-6);
  return pt;
}

/// Per-sample warm starts, one feasible point per training example.
class WarmStartBuffer {
 public:
  WarmStartBuffer() = default;
  WarmStartBuffer(std::size_t samples, Index assets)
      : points_(samples, Vec::Constant(assets, 1.0 / static_cast<double>(assets))) {}

  std::size_t size() const { return points_.size(); }
  const Vec& operator[](std::size_t i) const { return points_.at(i); }

  void update(std::size_t i, const Vec& x) {
    detail::require(x.size() == points_.at(i).size() && x.minCoeff() >= -1e-8 && std::abs(x.sum() - 1.0) <= 1e-8,
                    "warm start buffer: refusing infeasible point for sample " + std::to_string(i));
    points_[i] = detail::clean_simplex(x);
  }

  bool all_feasible(double tol = 1e-8) const {
    return std::all_of(points_.begin(), points_.end(),
                       [&](const Vec& x) { return x.minCoeff() >= -tol && std::abs(x.sum() - 1.0) <= tol; });
  }

 private:
  std::vector<Vec> points_;
};

}  // namespace crokit
