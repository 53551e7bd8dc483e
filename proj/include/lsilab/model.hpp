#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lsilab/potential.hpp"

namespace lsilab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Spin configuration: one real value per lattice site.
using SpinConfig = Vector;

struct ValidationReport {
  bool ok = true;
  Vector slack;              // per-site dominance slack: 1 - delta - sum_j |M_ij|
  int first_violation = -1;  // site index of the first violation, -1 if none
  std::string message;
};

/// One-dimensional lattice system with Hamiltonian
///   H(x) = sum_i [ psi(x_i) + s_i x_i + 1/2 sum_{1<=|j-i|<=R} M_ij x_i x_j ],
/// M_ii = 1 fixed, x_j = 0 outside the lattice, strict diagonal dominance
/// sum_{1<=|j-i|<=R} |M_ij| + delta <= 1.
///
/// The interaction is stored as a Toeplitz band (one coefficient per offset);
/// a full-matrix constructor exists for tests and goes through the same
/// validator.
class LatticeModel {
 public:
  LatticeModel(int n_sites, std::vector<double> band, double delta,
               Vector field, PotentialSpec potential)
      : n_(n_sites),
        range_(static_cast<int>(band.size())),
        band_(std::move(band)),
        delta_(delta),
        field_(std::move(field)),
        potential_(potential) {
    if (n_ <= 0) throw std::invalid_argument("n_sites must be positive");
    if (field_.size() == 0) field_ = Vector::Zero(n_);
    if (field_.size() != n_)
      throw std::invalid_argument("field length must equal n_sites");
  }

  /// Test constructor from a full symmetric coupling matrix (zero diagonal
  /// stored implicitly; M_ii = 1 is fixed). range is the declared bandwidth.
  static LatticeModel from_matrix(const Matrix& off_diagonal, int range,
                                  double delta, Vector field,
                                  PotentialSpec potential) {
    const int n = static_cast<int>(off_diagonal.rows());
    if (off_diagonal.cols() != n)
      throw std::invalid_argument("coupling matrix must be square");
    LatticeModel m(n, std::vector<double>(range, 0.0), delta, std::move(field),
                   potential);
    m.full_ = off_diagonal;
    for (int i = 0; i < n; ++i) {
      if ((*m.full_)(i, i) != 0.0)
        throw std::invalid_argument("diagonal of the coupling matrix is fixed to 1; pass zeros");
      for (int j = 0; j < n; ++j) {
        if ((*m.full_)(i, j) != (*m.full_)(j, i))
          throw std::invalid_argument("coupling matrix must be symmetric");
        if (std::abs(i - j) > range && (*m.full_)(i, j) != 0.0)
          throw std::invalid_argument("coupling matrix exceeds declared range");
      }
    }
    return m;
  }

  int n_sites() const { return n_; }
  int range() const { return range_; }
  double delta() const { return delta_; }
  const Vector& field() const { return field_; }
  const std::vector<double>& band() const { return band_; }
  const PotentialSpec& potential() const { return potential_; }
  bool is_quadratic() const { return potential_.bump_sup() == 0.0; }

  /// Off-diagonal coupling M_ij (0 when |i-j| > R or i == j).
  double coupling(int i, int j) const {
    if (i == j) return 0.0;
    const int d = std::abs(i - j);
    if (d > range_) return 0.0;
    if (full_) return (*full_)(i, j);
    return band_[d - 1];
  }

  /// Dense quadratic part I + M_off.
  Matrix quadratic_matrix() const {
    Matrix p = Matrix::Identity(n_, n_);
    for (int i = 0; i < n_; ++i)
      for (int j = std::max(0, i - range_); j <= std::min(n_ - 1, i + range_); ++j)
        if (j != i) p(i, j) = coupling(i, j);
    return p;
  }

  ValidationReport validate() const {
    ValidationReport rep;
    rep.slack = Vector::Zero(n_);
    for (int i = 0; i < n_; ++i) {
      double row = 0.0;
      for (int j = std::max(0, i - range_); j <= std::min(n_ - 1, i + range_); ++j)
        if (j != i) row += std::abs(coupling(i, j));
      rep.slack[i] = 1.0 - delta_ - row;
      if (rep.slack[i] < 0.0 && rep.ok) {
        rep.ok = false;
        rep.first_violation = i;
        rep.message = "diagonal dominance violated at site " + std::to_string(i) +
                      " (slack " + std::to_string(rep.slack[i]) + ")";
      }
    }
    if (delta_ <= 0.0) {
      rep.ok = false;
      if (rep.message.empty()) rep.message = "dominance margin delta must be positive";
    }
    return rep;
  }

  double energy(const SpinConfig& x) const {
    check_dim(x);
    double e = 0.0;
    for (int i = 0; i < n_; ++i) {
      e += potential_.psi(x[i]) + field_[i] * x[i];
      double pair = 0.0;
      for (int j = std::max(0, i - range_); j <= std::min(n_ - 1, i + range_); ++j)
        if (j != i) pair += coupling(i, j) * x[j];
      e += 0.5 * x[i] * pair;
    }
    return e;
  }

  /// Gradient entry k: x_k + psi_b'(x_k) + s_k + sum_{1<=|l-k|<=R} M_kl x_l.
  Vector gradient(const SpinConfig& x) const {
    check_dim(x);
    Vector g(n_);
    for (int k = 0; k < n_; ++k) {
      double pair = 0.0;
      for (int l = std::max(0, k - range_); l <= std::min(n_ - 1, k + range_); ++l)
        if (l != k) pair += coupling(k, l) * x[l];
      g[k] = potential_.psi_d1(x[k]) + field_[k] + pair;
    }
    return g;
  }

  /// Hessian = I + diag(psi_b''(x_k)) + M_off; banded, symmetric by construction.
  Matrix hessian(const SpinConfig& x) const {
    check_dim(x);
    Matrix h = quadratic_matrix();
    for (int k = 0; k < n_; ++k) h(k, k) = potential_.psi_d2(x[k]);
    return h;
  }

  /// Gershgorin lower bound on the Hessian over all configurations:
  /// delta - ||psi_b''||_inf (may be nonpositive for strongly nonconvex psi).
  double hessian_lower_bound() const { return delta_ - potential_.bump_d2_sup(); }

 private:
  void check_dim(const SpinConfig& x) const {
    if (x.size() != n_)
      throw std::invalid_argument("configuration length " + std::to_string(x.size()) +
                                  " does not match n_sites " + std::to_string(n_));
  }

  int n_;
  int range_;
  std::vector<double> band_;
  double delta_;
  Vector field_;
  PotentialSpec potential_;
  std::optional<Matrix> full_;  // test-only full coupling matrix
};

}  // namespace lsilab
