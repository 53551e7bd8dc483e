#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <variant>
#include <vector>

#include "lsilab/chain.hpp"
#include "lsilab/grid.hpp"
#include "lsilab/model.hpp"

namespace lsilab {

/// Ensemble selector for expectation queries.
struct Gce {
  double sigma = 0.0;
};
struct Ce {
  double m = 0.0;
};
using Measure = std::variant<Gce, Ce>;

inline ChainMeasure make_chain(const LatticeModel& model, const Measure& which,
                               const QuadratureGrid& grid,
                               HyperplaneChart chart = {}) {
  ChainMeasure::Options opt;
  if (std::holds_alternative<Gce>(which)) {
    opt.sigma = std::get<Gce>(which).sigma;
  } else {
    const double m = std::get<Ce>(which).m;
    opt.constrained = true;
    opt.constraint_sum = m * model.n_sites();
    opt.eliminated = chart.eliminated_axis;
    // center the boxes at the tilt whose quadratic-part mean is m
    const Matrix p = model.quadratic_matrix();
    const Vector pinv_one = p.ldlt().solve(Vector::Ones(model.n_sites()));
    const double s1 = pinv_one.dot(model.field());
    opt.center_sigma = (model.n_sites() * m + s1) / pinv_one.sum();
  }
  return ChainMeasure(model, grid, opt);
}

/// ln of Z(sigma) = Integral exp(sigma Sum x_k - H) dx over R^N.
inline double log_partition_gce(const LatticeModel& model, double sigma,
                                const QuadratureGrid& grid) {
  return make_chain(model, Gce{sigma}, grid).log_partition();
}

/// ln of Integral_{X_{N,m}} e^{-H} dHausdorff^{N-1}
///   = ln sqrt(N) + ln Integral_{R^{N-1}} e^{-H(chart(y))} dy.
inline double log_partition_ce(const LatticeModel& model, double m,
                               const QuadratureGrid& grid, HyperplaneChart chart = {}) {
  if (model.n_sites() < 2) throw std::invalid_argument("ce needs N >= 2");
  return make_chain(model, Ce{m}, grid, chart).log_partition();
}

/// Normalized expectation of an arbitrary observable under gce(sigma) or
/// ce(m). The generic observable forces full tensor enumeration, so this is
/// budget-limited to small N; structured queries (site moments, covariances)
/// should go through ChainMeasure directly.
inline double expect(const LatticeModel& model, const Measure& which,
                     const std::function<double(const Vector&)>& observable,
                     const QuadratureGrid& grid, HyperplaneChart chart = {});

inline double covariance(const LatticeModel& model, const Measure& which,
                         const std::function<double(const Vector&)>& obs_a,
                         const std::function<double(const Vector&)>& obs_b,
                         const QuadratureGrid& grid, HyperplaneChart chart = {}) {
  const double ea = expect(model, which, obs_a, grid, chart);
  const double eb = expect(model, which, obs_b, grid, chart);
  const double eab = expect(
      model, which, [&](const Vector& x) { return obs_a(x) * obs_b(x); }, grid, chart);
  return eab - ea * eb;
}

namespace naive {

/// Direct tensor-product enumeration (the reference route the contraction is
/// checked against); throws when the node count exceeds the grid budget.
struct Enumerator {
  std::vector<AxisRule> axes;
  std::vector<int> idx;

  explicit Enumerator(std::vector<AxisRule> a) : axes(std::move(a)), idx(axes.size(), 0) {}

  double total_nodes() const {
    double t = 1.0;
    for (const auto& a : axes) t *= a.size();
    return t;
  }

  template <typename F>
  void for_each(F&& f) {
    std::fill(idx.begin(), idx.end(), 0);
    Vector x(axes.size());
    double logw;
    while (true) {
      logw = 0.0;
      for (size_t i = 0; i < axes.size(); ++i) {
        x[i] = axes[i].nodes[idx[i]];
        logw += axes[i].logw[idx[i]];
      }
      f(x, logw);
      size_t d = 0;
      while (d < axes.size() && ++idx[d] == axes[d].size()) idx[d++] = 0;
      if (d == axes.size()) break;
    }
  }
};

inline std::vector<AxisRule> gce_axes(const LatticeModel& model, const QuadratureGrid& grid) {
  std::vector<AxisRule> axes;
  for (int i = 0; i < model.n_sites(); ++i)
    axes.push_back(grid.rule == QuadratureGrid::Rule::trapezoid
                       ? AxisRule::trapezoid(0.0, grid.truncation, grid.nodes_per_axis)
                       : AxisRule::gauss_legendre_composite(0.0, grid.truncation,
                                                            grid.nodes_per_axis));
  return axes;
}

inline double log_partition_gce(const LatticeModel& model, double sigma,
                                const QuadratureGrid& grid) {
  auto axes = gce_axes(model, grid);
  Enumerator en(axes);
  if (en.total_nodes() > grid.budget)
    throw std::runtime_error("quadrature budget exceeded (naive enumeration)");
  double peak = -std::numeric_limits<double>::infinity();
  std::vector<double> logs;
  en.for_each([&](const Vector& x, double logw) {
    const double l = sigma * x.sum() - model.energy(x) + logw;
    logs.push_back(l);
    peak = std::max(peak, l);
  });
  if (!std::isfinite(peak)) throw std::runtime_error("zero mass (degenerate truncation)");
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - peak);
  return peak + std::log(acc);
}

/// Chart enumeration for the ce: grid over all axes but the eliminated one,
/// x_e = N m - sum(others), with the sqrt(N) Hausdorff Jacobian.
inline double log_partition_ce(const LatticeModel& model, double m,
                               const QuadratureGrid& grid, HyperplaneChart chart = {}) {
  const int n = model.n_sites();
  if (n < 2) throw std::invalid_argument("ce needs N >= 2");
  const int e = chart.eliminated_axis == HyperplaneChart::Axis::last ? n - 1 : 0;
  std::vector<AxisRule> axes;
  for (int i = 0; i < n - 1; ++i)
    axes.push_back(grid.rule == QuadratureGrid::Rule::trapezoid
                       ? AxisRule::trapezoid(0.0, grid.truncation, grid.nodes_per_axis)
                       : AxisRule::gauss_legendre_composite(0.0, grid.truncation,
                                                            grid.nodes_per_axis));
  Enumerator en(axes);
  if (en.total_nodes() > grid.budget)
    throw std::runtime_error("quadrature budget exceeded (naive enumeration)");
  double peak = -std::numeric_limits<double>::infinity();
  std::vector<double> logs;
  Vector full(n);
  en.for_each([&](const Vector& y, double logw) {
    int k = 0;
    for (int i = 0; i < n; ++i)
      if (i != e) full[i] = y[k++];
    full[e] = n * m - y.sum();
    const double l = -model.energy(full) + logw;
    logs.push_back(l);
    peak = std::max(peak, l);
  });
  if (!std::isfinite(peak)) throw std::runtime_error("zero mass (degenerate truncation)");
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - peak);
  return std::log(HyperplaneChart::jacobian(n)) + peak + std::log(acc);
}

inline double expect(const LatticeModel& model, const Measure& which,
                     const std::function<double(const Vector&)>& observable,
                     const QuadratureGrid& grid, HyperplaneChart chart = {}) {
  const int n = model.n_sites();
  const bool ce = std::holds_alternative<Ce>(which);
  const double sigma = ce ? 0.0 : std::get<Gce>(which).sigma;
  const double m = ce ? std::get<Ce>(which).m : 0.0;
  const int e = !ce ? -1 : (chart.eliminated_axis == HyperplaneChart::Axis::last ? n - 1 : 0);
  std::vector<AxisRule> axes;
  for (int i = 0; i < (ce ? n - 1 : n); ++i)
    axes.push_back(grid.rule == QuadratureGrid::Rule::trapezoid
                       ? AxisRule::trapezoid(0.0, grid.truncation, grid.nodes_per_axis)
                       : AxisRule::gauss_legendre_composite(0.0, grid.truncation,
                                                            grid.nodes_per_axis));
  Enumerator en(axes);
  if (en.total_nodes() > grid.budget)
    throw std::runtime_error("quadrature budget exceeded (naive enumeration)");
  // two passes: peak then accumulate numerator/denominator
  double peak = -std::numeric_limits<double>::infinity();
  Vector full(n);
  auto assemble = [&](const Vector& y) -> const Vector& {
    if (!ce) return y;
    int k = 0;
    for (int i = 0; i < n; ++i)
      if (i != e) full[i] = y[k++];
    full[e] = n * m - y.sum();
    return full;
  };
  en.for_each([&](const Vector& y, double logw) {
    const Vector& x = assemble(y);
    peak = std::max(peak, sigma * (ce ? 0.0 : x.sum()) - model.energy(x) + logw);
  });
  if (!std::isfinite(peak)) throw std::runtime_error("zero mass (degenerate truncation)");
  double num = 0.0, den = 0.0;
  en.for_each([&](const Vector& y, double logw) {
    const Vector& x = assemble(y);
    const double w = std::exp(sigma * (ce ? 0.0 : x.sum()) - model.energy(x) + logw - peak);
    num += w * observable(x);
    den += w;
  });
  if (den <= 0.0) throw std::runtime_error("zero mass (degenerate truncation)");
  return num / den;
}

}  // namespace naive

inline double expect(const LatticeModel& model, const Measure& which,
                     const std::function<double(const Vector&)>& observable,
                     const QuadratureGrid& grid, HyperplaneChart chart) {
  return naive::expect(model, which, observable, grid, chart);
}

}  // namespace lsilab
