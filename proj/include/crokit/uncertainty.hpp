#pragma once

// Contextual ellipsoidal uncertainty sets
//   U = { xi : (xi - mu)^T Sigma^{-1} (xi - mu) <= 1 },  Sigma = r L L^T.
//
// The support function of this set is mu^T v + sqrt(v^T Sigma v). Note the
// shape matrix (not its inverse) appears under the root; that is the pairing
// consistent with the membership definition and it is what the sampling
// tests check.

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "json.hpp"

#include "crokit/error.hpp"
#include "crokit/nn.hpp"

namespace crokit {

inline constexpr double kMembershipSlack = 1e-12;

class Ellipsoid {
 public:
  Ellipsoid() = default;

  /// L must be lower-triangular with a strictly positive diagonal. r = 0 is
  /// accepted and denotes the single point {mu}.
  Ellipsoid(Vec mu, Mat L, double r) : mu_(std::move(mu)), L_(std::move(L)), r_(r) {
    const Index m = mu_.size();
    detail::require(m >= 1, "ellipsoid: empty center");
    detail::require(L_.rows() == m && L_.cols() == m, "ellipsoid: shape factor must be " + std::to_string(m) + "x" +
                                                          std::to_string(m));
    if (!mu_.allFinite() || !L_.allFinite() || !std::isfinite(r_)) throw NumericError("ellipsoid: non-finite parameters");
    if (r_ < 0) throw NumericError("ellipsoid: negative scale");
    for (Index i = 0; i < m; ++i) {
      if (!(L_(i, i) > 0)) throw NumericError("ellipsoid: Cholesky diagonal must be strictly positive");
      for (Index j = i + 1; j < m; ++j) {
        detail::require(L_(i, j) == 0.0, "ellipsoid: shape factor must be lower-triangular");
      }
    }
  }

  /// {xi : (xi-mu)^T (scale * Sigma)^{-1} (xi-mu) <= 1} for a positive definite Sigma.
  static Ellipsoid from_covariance(Vec mu, const Mat& sigma, double scale = 1.0) {
    Eigen::LLT<Mat> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericError("ellipsoid: covariance is not positive definite");
    Mat L = llt.matrixL();
    return Ellipsoid(std::move(mu), std::move(L), scale);
  }

  Index dim() const { return mu_.size(); }
  const Vec& mu() const { return mu_; }
  const Mat& L() const { return L_; }
  double r() const { return r_; }
  bool degenerate() const { return r_ == 0.0; }

  /// Sigma = r L L^T.
  Mat shape() const { return r_ * (L_ * L_.transpose()); }

  /// Sigma^{-1} b via two triangular solves.
  Vec solve_shape(const Vec& b) const {
    if (degenerate()) throw NumericError("ellipsoid: shape matrix is singular (r = 0)");
    Vec z = L_.triangularView<Eigen::Lower>().solve(b);
    return L_.transpose().triangularView<Eigen::Upper>().solve(z) / r_;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < dim(); ++i) {
      std::vector<double> row;
      for (Index j = 0; j < dim(); ++j) row.push_back(L_(i, j));
      rows.push_back(row);
    }
    return {{"mu", std::vector<double>(mu_.data(), mu_.data() + mu_.size())}, {"L_rows", rows}, {"r", r_}};
  }

  static Ellipsoid from_json(const nlohmann::json& j) {
    const auto mu = j.at("mu").get<std::vector<double>>();
    const auto rows = j.at("L_rows").get<std::vector<std::vector<double>>>();
    const Index m = static_cast<Index>(mu.size());
    detail::require(static_cast<Index>(rows.size()) == m, "ellipsoid json: L_rows has wrong row count");
    Mat L(m, m);
    for (Index i = 0; i < m; ++i) {
      detail::require(static_cast<Index>(rows[i].size()) == m, "ellipsoid json: ragged L_rows");
      for (Index j2 = 0; j2 < m; ++j2) L(i, j2) = rows[i][j2];
    }
    return Ellipsoid(Eigen::Map<const Vec>(mu.data(), m), L, j.at("r").get<double>());
  }

 private:
  Vec mu_;
  Mat L_;
  double r_ = 1.0;
};

/// Diagonal entries of L are exp(raw), off-diagonals copied, r = exp(r_raw).
inline Ellipsoid build_ellipsoid(const SetPredictorOutput& out) {
  const Index m = out.mu.size();
  detail::require(out.L_raw.size() == tri_size(m), "build_ellipsoid: L_raw must have m(m+1)/2 entries");
  if (!out.mu.allFinite() || !out.L_raw.allFinite() || !std::isfinite(out.r_raw)) {
    throw NumericError("build_ellipsoid: non-finite network output");
  }
  Mat L = Mat::Zero(m, m);
  Index k = 0;
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j <= i; ++j, ++k) L(i, j) = (i == j) ? std::exp(out.L_raw(k)) : out.L_raw(k);
  }
  const double r = std::exp(out.r_raw);
  if (!L.allFinite() || !std::isfinite(r) || r <= 0) throw NumericError("build_ellipsoid: overflow in exp transform");
  return Ellipsoid(out.mu, std::move(L), r);
}

inline double mahalanobis_sq(const Ellipsoid& set, const Vec& xi) {
  detail::require(xi.size() == set.dim(), "mahalanobis_sq: dimension mismatch");
  const Vec e = xi - set.mu();
  if (set.degenerate()) return e.isZero(0.0) ? 0.0 : std::numeric_limits<double>::infinity();
  const Vec z = set.L().triangularView<Eigen::Lower>().solve(e);
  return z.squaredNorm() / set.r();
}

/// Boundary points count as covered.
inline bool contains(const Ellipsoid& set, const Vec& xi) { return mahalanobis_sq(set, xi) <= 1.0 + kMembershipSlack; }

inline double smooth_membership(const Ellipsoid& set, const Vec& xi, double beta) {
  detail::require(beta > 0, "smooth_membership: beta must be positive");
  return sigmoid(beta * (1.0 - mahalanobis_sq(set, xi)));
}

struct SupportValue {
  double value = 0.0;
  Vec maximizer;
};

inline SupportValue support_function(const Ellipsoid& set, const Vec& v) {
  detail::require(v.size() == set.dim(), "support_function: dimension mismatch");
  const Vec Ltv = set.L().transpose() * v;
  const double spread = std::sqrt(set.r()) * Ltv.norm();
  SupportValue out;
  out.value = set.mu().dot(v) + spread;
  if (spread > 0) {
    out.maximizer = set.mu() + set.r() * (set.L() * Ltv) / spread;
  } else {
    out.maximizer = set.mu();
  }
  return out;
}

/// Loss gradient with respect to the center and the shape matrix. `sigma` is
/// symmetric and satisfies dLoss = <sigma, dSigma>_F for symmetric dSigma.
struct SetGradient {
  Vec mu;
  Mat sigma;

  static SetGradient zero(Index m) { return {Vec::Zero(m), Mat::Zero(m, m)}; }

  SetGradient& operator+=(const SetGradient& o) {
    mu += o.mu;
    sigma += o.sigma;
    return *this;
  }
  SetGradient& operator*=(double s) {
    mu *= s;
    sigma *= s;
    return *this;
  }
};

/// Chain rule from (mu, Sigma) to the raw network outputs that produced `set`
/// through build_ellipsoid.
inline SetPredictorOutput raw_gradient(const Ellipsoid& set, const SetGradient& g) {
  const Index m = set.dim();
  const Mat& L = set.L();
  const Mat gsym = 0.5 * (g.sigma + g.sigma.transpose());
  const Mat gL = 2.0 * set.r() * gsym * L;
  SetPredictorOutput out;
  out.mu = g.mu;
  out.L_raw.resize(tri_size(m));
  Index k = 0;
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j <= i; ++j, ++k) out.L_raw(k) = (i == j) ? gL(i, i) * L(i, i) : gL(i, j);
  }
  const double g_r = (gsym.array() * (L * L.transpose()).array()).sum();
  out.r_raw = g_r * set.r();
  return out;
}

/// Value and (mu, Sigma)-gradient of smooth_membership.
inline std::pair<double, SetGradient> smooth_membership_gradient(const Ellipsoid& set, const Vec& xi, double beta) {
  detail::require(beta > 0, "smooth_membership: beta must be positive");
  const Vec e = xi - set.mu();
  const Vec u = set.solve_shape(e);
  const double d2 = e.dot(u);
  const double y = sigmoid(beta * (1.0 - d2));
  const double dy_dd2 = -beta * y * (1.0 - y);
  SetGradient g;
  g.mu = dy_dd2 * (-2.0 * u);
  g.sigma = dy_dd2 * (-(u * u.transpose()));
  return {y, g};
}

}  // namespace crokit
