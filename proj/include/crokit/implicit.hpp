#pragma once

// Sensitivities of solver outputs obtained by differentiating optimality
// conditions rather than solver iterations.
//
// Portfolio KKT system at (x, lambda, nu):
//   grad f(x; mu, Sigma) - lambda + nu 1 = 0
//   lambda_i x_i = 0
//   1^T x = 1
// Strictly active bounds (lambda_i > tol) enter as equalities x_i = 0; weakly
// active ones are dropped.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "crokit/error.hpp"
#include "crokit/logistic.hpp"
#include "crokit/nn.hpp"
#include "crokit/solver.hpp"
#include "crokit/uncertainty.hpp"

namespace crokit {

struct SolutionSensitivity {
  /// dx_dmu(i, j) = d x_i / d mu_j.
  Mat dx_dmu;
  /// dx_dSigma[i](j, k) = d x_i along the symmetric perturbation (E_jk + E_kj) / 2.
  std::vector<Mat> dx_dSigma;
  /// The KKT Jacobian was singular and a least-squares solve was used.
  bool degenerate = false;
};

struct SensitivityOptions {
  /// Points with a larger KKT residual are rejected; set to infinity to
  /// linearize around an unconverged iterate.
  double residual_tolerance = 1e-6;
  double strict_activity = 1e-6;
};

namespace detail {

struct KktSystem {
  Mat K;                       // square Jacobian in (x, nu, lambda_A)
  std::vector<Index> active;   // strictly active bounds
  double spread = 0.0;
  Vec Sx;
};

inline KktSystem build_kkt_system(const PortfolioProblem& problem, const Ellipsoid& set, const KKTPoint& pt,
                                  const SensitivityOptions& opt) {
  const Index m = problem.dim();
  detail::require(pt.x.size() == m && pt.lambda.size() == m && pt.nu.size() == 1,
                  "kkt_sensitivity: point dimensions do not match the problem");
  const double res = kkt_residual(problem, set, pt);
  if (res > opt.residual_tolerance) {
    throw InputError("kkt_sensitivity: KKT residual " + std::to_string(res) + " exceeds tolerance");
  }
  KktSystem sys;
  for (Index i = 0; i < m; ++i) {
    if (pt.lambda(i) > opt.strict_activity) sys.active.push_back(i);
  }
  const Index a = static_cast<Index>(sys.active.size());
  const Index n = m + 1 + a;
  sys.K = Mat::Zero(n, n);
  sys.K.topLeftCorner(m, m) = problem.hessian(set, pt.x);
  sys.K.block(0, m, m, 1).setOnes();
  sys.K.block(m, 0, 1, m).setOnes();
  for (Index k = 0; k < a; ++k) {
    const Index i = sys.active[k];
    sys.K(i, m + 1 + k) = -1.0;
    // d(lambda_i * (-x_i)) = -lambda_i dx_i - x_i dlambda_i with x_i = 0.
    sys.K(m + 1 + k, i) = -pt.lambda(i);
  }
  sys.spread = problem.spread(set, pt.x);
  sys.Sx = set.shape() * pt.x;
  return sys;
}

inline Mat solve_square(const Mat& K, const Mat& rhs, bool& degenerate) {
  Eigen::FullPivLU<Mat> lu(K);
  if (lu.isInvertible()) {
    degenerate = false;
    return lu.solve(rhs);
  }
  degenerate = true;
  return K.completeOrthogonalDecomposition().solve(rhs);
}

}  // namespace detail

inline SolutionSensitivity kkt_sensitivity(const PortfolioProblem& problem, const Ellipsoid& set, const KKTPoint& pt,
                                           const SensitivityOptions& opt = {}) {
  const Index m = problem.dim();
  const detail::KktSystem sys = detail::build_kkt_system(problem, set, pt, opt);
  const Index n = sys.K.rows();
  const Vec& x = pt.x;
  const double s = sys.spread;

  // Right-hand sides -dG/dp for p = mu_j (m columns) and Sigma_jk, j <= k.
  std::vector<std::pair<Index, Index>> pairs;
  for (Index j = 0; j < m; ++j) {
    for (Index k = j; k < m; ++k) pairs.emplace_back(j, k);
  }
  Mat rhs = Mat::Zero(n, m + static_cast<Index>(pairs.size()));
  for (Index j = 0; j < m; ++j) rhs(j, j) = 1.0;
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    const auto [j, k] = pairs[c];
    Mat E = Mat::Zero(m, m);
    E(j, k) += 0.5;
    E(k, j) += 0.5;
    const Vec dgrad = E * x / s - sys.Sx * (x.dot(E * x)) / (2.0 * s * s * s);
    rhs.col(m + static_cast<Index>(c)).head(m) = -dgrad;
  }
  SolutionSensitivity out;
  const Mat J = detail::solve_square(sys.K, rhs, out.degenerate);
  out.dx_dmu = J.topLeftCorner(m, m);
  out.dx_dSigma.assign(m, Mat::Zero(m, m));
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    const auto [j, k] = pairs[c];
    for (Index i = 0; i < m; ++i) {
      out.dx_dSigma[i](j, k) = J(i, m + static_cast<Index>(c));
      out.dx_dSigma[i](k, j) = J(i, m + static_cast<Index>(c));
    }
  }
  return out;
}

/// Gradient of w^T x*(mu, Sigma) with respect to (mu, Sigma), by one adjoint
/// solve of the transposed KKT system.
inline SetGradient kkt_vjp(const PortfolioProblem& problem, const Ellipsoid& set, const KKTPoint& pt, const Vec& w,
                           const SensitivityOptions& opt = {}, bool* degenerate = nullptr) {
  const Index m = problem.dim();
  detail::require(w.size() == m, "kkt_vjp: weight dimension mismatch");
  const detail::KktSystem sys = detail::build_kkt_system(problem, set, pt, opt);
  Vec rhs = Vec::Zero(sys.K.rows());
  rhs.head(m) = w;
  bool deg = false;
  const Vec adj = detail::solve_square(sys.K.transpose(), rhs, deg);
  if (degenerate) *degenerate = deg;
  const Vec a = adj.head(m);
  const Vec& x = pt.x;
  const double s = sys.spread;
  SetGradient g;
  g.mu = a;
  g.sigma = -(a * x.transpose() + x * a.transpose()) / (2.0 * s) + (a.dot(sys.Sx) / (2.0 * s * s * s)) * (x * x.transpose());
  return g;
}

struct RegressorSensitivity {
  /// dphi_dy(p, j) = d phi*_p / d y_j.
  Mat dphi_dy;
  double ridge = 0.0;
  /// The Hessian was indefinite or nearly singular and was modified.
  bool modified = false;
};

namespace detail {

/// Inverse of the NLL Hessian at a stationary phi. An indefinite Hessian (the
/// fit can stop at a saddle of a hidden-layer network) is replaced by |H| with
/// floored eigenvalues, matching the direction the fit itself uses.
class NllHessianInverse {
 public:
  NllHessianInverse(const Mlp& net, const ParamVector& phi, const Mat& psi, const Vec& y, double ridge,
                    double stationarity_tol) {
    const NllEval ev = logistic_nll(net, phi, psi, y, ridge, true);
    const double gnorm = ev.grad.cwiseAbs().maxCoeff();
    if (gnorm > stationarity_tol) {
      throw InputError("logistic_sensitivity: phi is not stationary (gradient norm " + std::to_string(gnorm) + ")");
    }
    Eigen::SelfAdjointEigenSolver<Mat> eig(ev.hess);
    if (eig.info() != Eigen::Success) throw NumericError("logistic_sensitivity: eigendecomposition failed");
    const Vec ev_abs = eig.eigenvalues().cwiseAbs();
    const double floor = std::max(1e-10, 1e-8 * ev_abs.maxCoeff());
    modified_ = eig.eigenvalues().minCoeff() < floor;
    V_ = eig.eigenvectors();
    inv_ = ev_abs.cwiseMax(floor).cwiseInverse();
  }

  Mat solve(const Mat& b) const { return V_ * inv_.asDiagonal() * (V_.transpose() * b); }
  bool modified() const { return modified_; }

 private:
  Mat V_;
  Vec inv_;
  bool modified_ = false;
};

}  // namespace detail

/// dphi*/dy = -H^{-1} d(grad NLL)/dy at a stationary phi*.
inline RegressorSensitivity logistic_sensitivity(const Mlp& net, const ParamVector& phi_star, const Mat& psi,
                                                 const Vec& y, double ridge, double stationarity_tol = 1e-6) {
  RegressorSensitivity out;
  out.ridge = ridge;
  const detail::NllHessianInverse hinv(net, phi_star, psi, y, ridge, stationarity_tol);
  out.modified = hinv.modified();
  out.dphi_dy = hinv.solve(logistic_label_jacobian(net, phi_star, psi));
  return out;
}

/// Gradient over labels of a loss whose phi-gradient is `dloss_dphi`.
inline Vec logistic_label_vjp(const Mlp& net, const ParamVector& phi_star, const Mat& psi, const Vec& y, double ridge,
                              const Vec& dloss_dphi, double stationarity_tol = 1e-6) {
  const detail::NllHessianInverse hinv(net, phi_star, psi, y, ridge, stationarity_tol);
  const Vec a = hinv.solve(dloss_dphi);
  return logistic_label_jacobian(net, phi_star, psi).transpose() * a;
}

}  // namespace crokit
