#pragma once

// Ridge-regularized negative log-likelihood of a logistic network
//   g_phi(psi) = sigmoid(z_phi(psi))
// with exact gradient and Hessian. Networks with zero or one hidden layer are
// supported; the Hessian of z is written out for that family.

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "crokit/error.hpp"
#include "crokit/nn.hpp"

namespace crokit {

struct NllEval {
  double value = 0.0;
  Vec grad;
  Mat hess;  // empty unless requested
};

namespace detail {

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline void check_logistic_net(const Mlp& net) {
  require(net.shape().outputs == 1 && net.shape().output_activation == Activation::sigmoid,
          "logistic network must have a single sigmoid output");
  require(net.shape().hidden.size() <= 1, "logistic Hessian supports at most one hidden layer");
  require(net.shape().hidden.empty() || net.shape().hidden_activation == Activation::tanh,
          "logistic Hessian expects tanh hidden units");
}

/// Pre-sigmoid output z, its parameter gradient, and (optionally) its Hessian.
inline double logit_derivatives(const Mlp& net, const ParamVector& phi, const Vec& psi, Vec& dz, Mat* d2z) {
  const Index P = phi.size();
  dz = Vec::Zero(P);
  if (d2z) *d2z = Mat::Zero(P, P);
  const Index d = net.shape().inputs;
  require(psi.size() == d, "logistic: covariate dimension mismatch");
  if (net.shape().hidden.empty()) {
    const Slice& w = phi.slice(net.weight_name(0));
    const Slice& b = phi.slice(net.bias_name(0));
    dz.segment(w.offset, d) = psi;
    dz(b.offset) = 1.0;
    return phi.matrix(net.weight_name(0)).row(0).dot(psi) + phi.values()(b.offset);
  }
  const Index h = net.shape().hidden[0];
  const Slice& W1 = phi.slice(net.weight_name(0));
  const Slice& b1 = phi.slice(net.bias_name(0));
  const Slice& w2 = phi.slice(net.weight_name(1));
  const Slice& b2 = phi.slice(net.bias_name(1));
  const Vec t = (phi.matrix(net.weight_name(0)) * psi + phi.matrix(net.bias_name(0)).col(0)).array().tanh();
  const auto w2v = phi.matrix(net.weight_name(1));
  for (Index k = 0; k < h; ++k) {
    const double tp = 1.0 - t(k) * t(k);
    const double tpp = -2.0 * t(k) * tp;
    const double a = w2v(0, k) * tp;
    for (Index j = 0; j < d; ++j) dz(W1.offset + j * h + k) = a * psi(j);
    dz(b1.offset + k) = a;
    dz(w2.offset + k) = t(k);
    if (d2z) {
      Mat& H = *d2z;
      const double c = w2v(0, k) * tpp;
      // Indices of u_k = (W1(k, :), b1(k)).
      auto u = [&](Index j) { return j < d ? W1.offset + j * h + k : b1.offset + k; };
      for (Index j1 = 0; j1 <= d; ++j1) {
        const double x1 = j1 < d ? psi(j1) : 1.0;
        for (Index j2 = 0; j2 <= d; ++j2) {
          const double x2 = j2 < d ? psi(j2) : 1.0;
          H(u(j1), u(j2)) += c * x1 * x2;
        }
        H(u(j1), w2.offset + k) += tp * x1;
        H(w2.offset + k, u(j1)) += tp * x1;
      }
    }
  }
  dz(b2.offset) = 1.0;
  return w2v.row(0).dot(t) + phi.values()(b2.offset);
}

}  // namespace detail

/// Mean NLL over rows of `psi` with labels y in [0, 1], plus ridge/2 |phi|^2.
inline NllEval logistic_nll(const Mlp& net, const ParamVector& phi, const Mat& psi, const Vec& y, double ridge,
                            bool with_hessian) {
  detail::check_logistic_net(net);
  detail::require(psi.rows() == y.size() && psi.rows() > 0, "logistic_nll: batch is empty or labels mismatch");
  const Index n = psi.rows();
  const Index P = phi.size();
  NllEval out;
  out.grad = Vec::Zero(P);
  if (with_hessian) out.hess = Mat::Zero(P, P);
  Vec dz;
  Mat d2z;
  for (Index i = 0; i < n; ++i) {
    const double z = detail::logit_derivatives(net, phi, psi.row(i).transpose(), dz, with_hessian ? &d2z : nullptr);
    const double p = sigmoid(z);
    out.value += detail::softplus(z) - y(i) * z;
    out.grad += (p - y(i)) * dz;
    if (with_hessian) {
      out.hess.noalias() += p * (1.0 - p) * dz * dz.transpose();
      out.hess += (p - y(i)) * d2z;
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.value = out.value * inv + 0.5 * ridge * phi.values().squaredNorm();
  out.grad = out.grad * inv + ridge * phi.values();
  if (with_hessian) {
    out.hess *= inv;
    out.hess.diagonal().array() += ridge;
  }
  return out;
}

/// Gradient of g_phi(psi) with respect to phi.
inline Vec logistic_param_gradient(const Mlp& net, const ParamVector& phi, const Vec& psi) {
  detail::check_logistic_net(net);
  Vec dz;
  const double p = sigmoid(detail::logit_derivatives(net, phi, psi, dz, nullptr));
  return p * (1.0 - p) * dz;
}

/// Columns d(grad NLL)/dy_j = -(1/n) dz_j, returned without the sign.
inline Mat logistic_label_jacobian(const Mlp& net, const ParamVector& phi, const Mat& psi) {
  detail::check_logistic_net(net);
  const Index n = psi.rows();
  Mat J(phi.size(), n);
  Vec dz;
  for (Index i = 0; i < n; ++i) {
    detail::logit_derivatives(net, phi, psi.row(i).transpose(), dz, nullptr);
    J.col(i) = dz / static_cast<double>(n);
  }
  return J;
}

}  // namespace crokit
