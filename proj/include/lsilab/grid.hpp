#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lsilab/model.hpp"

namespace lsilab {

/// Truncated tensor grid controlling every deterministic integral.
///
/// `truncation` is the half-width T per axis around the axis center;
/// `nodes_per_axis` the node count n >= 16. Composite Gauss-Legendre is the
/// default rule for gce integrals; hyperplane-constrained (ce) integrals run
/// on the uniform lattice so that partial sums of node values stay on a
/// lattice (the chain contraction tracks them exactly). `budget` caps the
/// work estimate of a contraction (state count x transitions).
struct QuadratureGrid {
  enum class Rule { trapezoid, gauss_legendre_composite };

  double truncation = 9.0;
  int nodes_per_axis = 64;
  Rule rule = Rule::gauss_legendre_composite;
  double budget = 2e7;
  double tail_tol = 1e-12;

  void check() const {
    if (truncation <= 0.0) throw std::invalid_argument("truncation must be positive");
    if (nodes_per_axis < 16) throw std::invalid_argument("nodes_per_axis must be >= 16");
  }

  QuadratureGrid refined() const {
    QuadratureGrid g = *this;
    g.nodes_per_axis = 2 * nodes_per_axis - 1;  // halves the uniform step exactly
    return g;
  }
};

/// Chart for the hyperplane X_{N,m}: eliminate one axis and integrate over the
/// rest; the constant Jacobian sqrt(N) relates Lebesgue measure on the chart
/// to (N-1)-Hausdorff measure on the plane.
struct HyperplaneChart {
  enum class Axis { first, last };
  Axis eliminated_axis = Axis::last;
  static double jacobian(int n_free) { return std::sqrt(static_cast<double>(n_free)); }
};

/// Default truncation: 8 + ||s||_inf + sqrt(2 ||psi_b||_inf), widened by the
/// mean shift |sigma|/lambda_min(I+M_off) the tilt can produce.
inline double default_truncation(const LatticeModel& model, double sigma_abs_max = 0.0) {
  double t = 8.0 + (model.field().size() ? model.field().cwiseAbs().maxCoeff() : 0.0) +
             std::sqrt(2.0 * model.potential().bump_sup());
  if (sigma_abs_max > 0.0) {
    double band_sum = 0.0;
    for (double c : model.band()) band_sum += 2.0 * std::abs(c);
    const double lam_min = std::max(model.delta(), 1.0 - band_sum);
    t += sigma_abs_max / lam_min;
  }
  return t;
}

namespace detail {

/// Nodes/weights of the p-point Gauss-Legendre rule on [-1, 1].
inline void gauss_legendre_unit(int p, std::vector<double>& x, std::vector<double>& w) {
  x.assign(p, 0.0);
  w.assign(p, 0.0);
  for (int i = 0; i < (p + 1) / 2; ++i) {
    double z = std::cos(M_PI * (i + 0.75) / (p + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < p; ++j) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
      }
      pp = p * (z * p0 - p1) / (z * z - 1.0);
      const double z1 = z;
      z = z1 - p0 / pp;
      if (std::abs(z - z1) < 1e-15) break;
    }
    x[i] = -z;
    x[p - 1 - i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    w[p - 1 - i] = w[i];
  }
}

}  // namespace detail

/// One integration axis: nodes and log-weights on [center-T, center+T].
struct AxisRule {
  std::vector<double> nodes;
  std::vector<double> logw;
  double step = 0.0;  // uniform spacing (trapezoid rule only)

  static AxisRule trapezoid(double center, double T, int n) {
    AxisRule a;
    a.step = 2.0 * T / (n - 1);
    a.nodes.resize(n);
    a.logw.resize(n);
    for (int i = 0; i < n; ++i) {
      a.nodes[i] = center - T + i * a.step;
      a.logw[i] = std::log((i == 0 || i == n - 1) ? 0.5 * a.step : a.step);
    }
    return a;
  }

  static AxisRule gauss_legendre_composite(double center, double T, int n) {
    constexpr int kPanel = 16;
    const int panels = std::max(1, (n + kPanel - 1) / kPanel);
    std::vector<double> ux, uw;
    detail::gauss_legendre_unit(kPanel, ux, uw);
    AxisRule a;
    const double width = 2.0 * T / panels;
    for (int p = 0; p < panels; ++p) {
      const double lo = center - T + p * width;
      for (int q = 0; q < kPanel; ++q) {
        a.nodes.push_back(lo + 0.5 * width * (ux[q] + 1.0));
        a.logw.push_back(std::log(0.5 * width * uw[q]));
      }
    }
    return a;
  }

  static AxisRule frozen(double value) {
    AxisRule a;
    a.nodes = {value};
    a.logw = {0.0};
    return a;
  }

  int size() const { return static_cast<int>(nodes.size()); }
};

}  // namespace lsilab
