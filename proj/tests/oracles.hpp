// Test-side oracles: closed-form multivariate Gaussian quantities and finite
// differences. Kept independent of the library's integration path on purpose.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>

#include "lsilab/model.hpp"

namespace oracles {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Orthonormal basis of the orthogonal complement of the all-ones direction
/// (columns 2..N of the Householder reflection sending e1 to 1/sqrt(N)).
inline MatrixXd ones_complement_basis(int n) {
  VectorXd u = VectorXd::Constant(n, 1.0 / std::sqrt(double(n)));
  VectorXd v = VectorXd::Zero(n);
  v[0] = 1.0;
  v -= u;
  if (v.norm() < 1e-14) {
    MatrixXd b = MatrixXd::Zero(n, n - 1);
    for (int j = 0; j < n - 1; ++j) b(j + 1, j) = 1.0;
    return b;
  }
  v.normalize();
  MatrixXd h = MatrixXd::Identity(n, n) - 2.0 * v * v.transpose();
  return h.rightCols(n - 1);
}

struct Gaussian {
  MatrixXd precision;  // P = I + M_off
  VectorXd field;      // s

  static Gaussian of(const lsilab::LatticeModel& model) {
    return {model.quadratic_matrix(), model.field()};
  }

  // gce(sigma): density ~ exp(sigma 1.x - 1/2 x'Px - s.x)
  double log_z_gce(double sigma) const {
    const int n = precision.rows();
    const VectorXd b = VectorXd::Constant(n, sigma) - field;
    Eigen::LLT<MatrixXd> llt(precision);
    const VectorXd pib = llt.solve(b);
    double logdet = 0.0;
    for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    return 0.5 * n * std::log(2.0 * M_PI) - 0.5 * logdet + 0.5 * b.dot(pib);
  }

  VectorXd mean_gce(double sigma) const {
    const int n = precision.rows();
    return precision.ldlt().solve(VectorXd::Constant(n, sigma) - field);
  }

  MatrixXd cov_gce() const { return precision.inverse(); }

  double var_sum_gce() const {
    const int n = precision.rows();
    return VectorXd::Ones(n).dot(precision.ldlt().solve(VectorXd::Ones(n)));
  }

  // ce(m): e^{-H} Hausdorff measure on the hyperplane mean = m
  double log_z_ce(double m) const {
    const int n = precision.rows();
    const MatrixXd u = ones_complement_basis(n);
    const MatrixXd q = u.transpose() * precision * u;
    const VectorXd ones = VectorXd::Ones(n);
    const VectorXd b = -u.transpose() * (m * (precision * ones) + field);
    Eigen::LLT<MatrixXd> llt(q);
    double logdet = 0.0;
    for (int i = 0; i < n - 1; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    const double c0 = -0.5 * m * m * ones.dot(precision * ones) - m * field.sum();
    return c0 + 0.5 * (n - 1) * std::log(2.0 * M_PI) - 0.5 * logdet + 0.5 * b.dot(llt.solve(b));
  }

  VectorXd mean_ce(double m) const {
    const int n = precision.rows();
    const MatrixXd u = ones_complement_basis(n);
    const MatrixXd q = u.transpose() * precision * u;
    const VectorXd ones = VectorXd::Ones(n);
    const VectorXd b = -u.transpose() * (m * (precision * ones) + field);
    return m * ones + u * q.ldlt().solve(b);
  }

  MatrixXd cov_ce() const {
    const int n = precision.rows();
    const MatrixXd u = ones_complement_basis(n);
    const MatrixXd q = u.transpose() * precision * u;
    return u * q.inverse() * u.transpose();
  }

  /// d^2/dm^2 of the coarse-grained Hamiltonian -(1/N) ln Z_ce(m).
  double coarse_hessian() const {
    const int n = precision.rows();
    return n / var_sum_gce();
  }

  double g0() const {
    const int n = precision.rows();
    return 1.0 / std::sqrt(2.0 * M_PI * var_sum_gce() / n);
  }
};

inline double fd_first(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double fd_second(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

/// Richardson-extrapolated second difference (h and h/2).
inline double fd_second_rich(const std::function<double(double)>& f, double x, double h) {
  const double a = fd_second(f, x, h);
  const double b = fd_second(f, x, 0.5 * h);
  return (4.0 * b - a) / 3.0;
}

inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, VectorXd x,
                            double h) {
  VectorXd g(x.size());
  for (int i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline MatrixXd fd_hessian(const std::function<double(const VectorXd&)>& f, VectorXd x,
                           double h) {
  const int n = static_cast<int>(x.size());
  MatrixXd hess(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      VectorXd y = x;
      y[i] += h;
      y[j] += h;
      const double fpp = f(y);
      y = x;
      y[i] += h;
      y[j] -= h;
      const double fpm = f(y);
      y = x;
      y[i] -= h;
      y[j] += h;
      const double fmp = f(y);
      y = x;
      y[i] -= h;
      y[j] -= h;
      const double fmm = f(y);
      hess(i, j) = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
      hess(j, i) = hess(i, j);
    }
  return hess;
}

inline VectorXd random_config(int n, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  VectorXd x(n);
  for (int i = 0; i < n; ++i) x[i] = nd(rng);
  return x;
}

}  // namespace oracles
