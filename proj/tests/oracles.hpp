#pragma once

// Independent reference computations for the tests. Nothing here calls the
// code under test except to read plain data out of its types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double rel_err(const Vec& a, const Vec& b, double floor = 1e-8) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

/// Central differences of a scalar function.
inline Vec central_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec a = x, b = x;
    a(i) += h;
    b(i) -= h;
    g(i) = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline Mat random_spd(Eigen::Index m, std::mt19937_64& rng, double min_eig = 0.2) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat A(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) A(i, j) = n(rng);
  }
  return A * A.transpose() / static_cast<double>(m) + min_eig * Mat::Identity(m, m);
}

inline Vec random_vec(Eigen::Index m, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Vec v(m);
  for (Eigen::Index i = 0; i < m; ++i) v(i) = n(rng);
  return v;
}

/// Minimum of f over the 2-simplex {(t, 1 - t)} on a uniform grid.
inline std::pair<double, double> grid_min_simplex2(const std::function<double(double)>& f, double step) {
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  const int n = static_cast<int>(std::lround(1.0 / step));
  for (int k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) / n;
    const double v = f(t);
    if (v < best) {
      best = v;
      arg = t;
    }
  }
  return {best, arg};
}

/// max u^T y over {0 <= u <= cap, sum u = 1} by enumerating vertices: every
/// coordinate at a bound except at most one. Returns the value and the
/// maximizing vertex (first found on ties).
inline std::pair<double, Vec> cvar_lp(const std::vector<double>& y, double alpha) {
  const int M = static_cast<int>(y.size());
  const double cap = 1.0 / ((1.0 - alpha) * M);
  double best = -std::numeric_limits<double>::infinity();
  Vec arg;
  int total = 1;
  for (int i = 0; i < M; ++i) total *= 3;
  for (int code = 0; code < total; ++code) {
    Vec u(M);
    int c = code, free_idx = -1, frees = 0;
    double s = 0.0;
    for (int i = 0; i < M; ++i, c /= 3) {
      const int state = c % 3;
      if (state == 0) u(i) = 0.0;
      if (state == 1) u(i) = cap;
      if (state == 2) {
        free_idx = i;
        ++frees;
        u(i) = 0.0;
      }
      s += u(i);
    }
    if (frees > 1) continue;
    if (frees == 1) {
      const double rest = 1.0 - s;
      if (rest < -1e-12 || rest > cap + 1e-12) continue;
      u(free_idx) = rest;
    } else if (std::abs(s - 1.0) > 1e-12) {
      continue;
    }
    double v = 0.0;
    for (int i = 0; i < M; ++i) v += u(i) * y[static_cast<std::size_t>(i)];
    if (v > best + 1e-14) {
      best = v;
      arg = u;
    }
  }
  return {best, arg};
}

/// Points sqrt(r) L u for u on the unit sphere, shifted by mu: boundary of the
/// ellipsoid {xi : (xi - mu)^T (r L L^T)^{-1} (xi - mu) <= 1}.
inline std::vector<Vec> ellipsoid_boundary(const Vec& mu, const Mat& L, double r, int n, std::mt19937_64& rng) {
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    Vec u = random_vec(mu.size(), rng);
    u.normalize();
    out.push_back(mu + std::sqrt(r) * L * u);
  }
  return out;
}

/// Uniform draws from the solid ellipsoid.
inline std::vector<Vec> ellipsoid_interior(const Vec& mu, const Mat& L, double r, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Vec> out;
  for (int k = 0; k < n; ++k) {
    Vec u = random_vec(mu.size(), rng);
    u.normalize();
    u *= std::pow(unif(rng), 1.0 / static_cast<double>(mu.size()));
    out.push_back(mu + std::sqrt(r) * L * u);
  }
  return out;
}

}  // namespace oracle
