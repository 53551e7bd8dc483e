#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lsilab/grid.hpp"
#include "lsilab/model.hpp"

namespace lsilab {

using SiteFn = std::function<double(double)>;

/// Deterministic evaluator for tensor-grid sums against exp(sigma*Sum x - H)
/// on R^N (gce) and on the hyperplane {(1/K) Sum_free x_k = m} (ce, through
/// the elimination chart with its sqrt(K) Jacobian).
///
/// The finite interaction range R makes the integrand a chain of local
/// factors, so the tensor-product sum is contracted axis by axis with the
/// last R axes as state; constrained sums additionally track the running sum
/// of free-axis node values, which stays on a lattice because constrained
/// axes use the uniform rule. The contraction is an exact reordering of the
/// same finite sum the naive enumeration computes.
///
/// Sites may be frozen at fixed values (conditional measures) and may drop
/// their psi_b term (auxiliary Hamiltonians). Accumulation order is fixed, so
/// results are bit-reproducible and thread-count independent. Instances cache
/// sweep messages lazily and are not shareable across threads.
class ChainMeasure {
 public:
  struct Options {
    double sigma = 0.0;                   // tilt on free sites
    std::vector<int> frozen_sites;        // conditioned sites
    std::vector<double> frozen_values;
    std::vector<char> drop_bump;          // per-site psi_b removal; empty = keep all
    bool constrained = false;             // ce mode: (1/K) Sum_free x = m
    double constraint_sum = 0.0;          // S* = K * m
    HyperplaneChart::Axis eliminated = HyperplaneChart::Axis::last;
    double center_sigma = std::numeric_limits<double>::quiet_NaN();  // box centering tilt; default = sigma
    bool center_boxes = true;  // false: axis boxes at 0 (matches the naive enumeration)
  };

  ChainMeasure(const LatticeModel& model, const QuadratureGrid& grid, Options opt)
      : model_(model), grid_(grid), opt_(std::move(opt)) {
    grid_.check();
    build();
  }

  int n_free() const { return n_free_; }
  bool constrained() const { return opt_.constrained; }
  const std::vector<int>& free_sites() const { return free_sites_; }

  /// ln of the partition sum; constrained systems include ln sqrt(K).
  double log_partition() {
    if (!opt_.constrained) {
      ensure_forward();
      const Scaled t = total();
      return t.log();
    }
    return log_partition_at(opt_.constraint_sum);
  }

  /// Constrained log-partition at another constraint value S = K*m, reusing
  /// the forward sweep (only the terminal factor depends on S).
  double log_partition_at(double S) {
    if (!opt_.constrained) throw std::logic_error("log_partition_at needs a constrained measure");
    ensure_forward();
    const Scaled r = contract(fwd_.back(), terminal_message(S, nullptr));
    if (!(r.mant > 0.0)) throw std::runtime_error("zero mass (degenerate truncation)");
    return r.log() + std::log(HyperplaneChart::jacobian(n_free_));
  }

  /// E[g(x_site)]; frozen sites return g(frozen value).
  double expect_site(int site, const SiteFn& g) {
    if (is_frozen_[site]) return g(frozen_value_[site]);
    return single_moment(site, g).ratio(total());
  }

  double mean(int site) { return expect_site(site, identity_fn()); }

  /// Full-length mean vector; frozen entries carry their frozen value.
  Vector means() {
    Vector mu(model_.n_sites());
    for (int i = 0; i < model_.n_sites(); ++i)
      mu[i] = is_frozen_[i] ? frozen_value_[i] : mean(i);
    return mu;
  }

  /// E[t_i t_j] for a list of single-site functions t_k(x_{site_k});
  /// repeated sites are allowed.
  Matrix second_moments(const std::vector<std::pair<int, SiteFn>>& tables) {
    const int L = static_cast<int>(tables.size());
    Matrix em = Matrix::Zero(L, L);
    const Scaled z = total();
    for (int i = 0; i < L; ++i)
      for (int j = i; j < L; ++j) {
        em(i, j) = pair_moment(tables[i].first, tables[i].second, tables[j].first,
                               tables[j].second)
                       .ratio(z);
        em(j, i) = em(i, j);
      }
    return em;
  }

  /// E[g(x_p) h(x_q)].
  double pair_expect(int p, const SiteFn& g, int q, const SiteFn& h) {
    return pair_moment(p, g, q, h).ratio(total());
  }

  double cov_pair(int p, int q) {
    const SiteFn id = identity_fn();
    return pair_expect(p, id, q, id) - mean(p) * mean(q);
  }

  /// Covariance matrix over all sites (frozen rows/cols zero). Cost is about
  /// 2 * n_free forward sweeps.
  Matrix covariance() {
    const int n = model_.n_sites();
    std::vector<std::pair<int, SiteFn>> tabs;
    for (int i : free_sites_) tabs.emplace_back(i, identity_fn());
    const Matrix raw = second_moments_block(tabs);
    Vector mu = means();
    Matrix c = Matrix::Zero(n, n);
    for (size_t a = 0; a < tabs.size(); ++a)
      for (size_t b = 0; b < tabs.size(); ++b) {
        const int p = tabs[a].first, q = tabs[b].first;
        c(p, q) = raw(a, b) - mu[p] * mu[q];
      }
    return c;
  }

  /// cov(sum_p a_p(x_p), sum_q b_q(x_q)) for sparse per-site function lists.
  double cov_of_sums(const std::vector<std::pair<int, SiteFn>>& a,
                     const std::vector<std::pair<int, SiteFn>>& b) {
    std::vector<std::pair<int, SiteFn>> all = a;
    all.insert(all.end(), b.begin(), b.end());
    const Matrix raw = second_moments_block(all);
    const int la = static_cast<int>(a.size());
    std::vector<double> ea(all.size());
    for (size_t i = 0; i < all.size(); ++i) ea[i] = expect_site(all[i].first, all[i].second);
    double cov = 0.0;
    for (int i = 0; i < la; ++i)
      for (size_t j = la; j < all.size(); ++j)
        cov += raw(i, static_cast<int>(j)) - ea[i] * ea[j];
    return cov;
  }

  /// Var(sum of x over free sites).
  double var_free_sum() {
    std::vector<std::pair<int, SiteFn>> s;
    for (int i : free_sites_) s.emplace_back(i, identity_fn());
    const Matrix raw = second_moments_block(s);
    double e1 = 0.0;
    for (int i : free_sites_) e1 += mean(i);
    return raw.sum() - e1 * e1;
  }

  /// E[t_i t_j] for all pairs from a table list, computed with one marked
  /// sweep per distinct left site (frozen and eliminated sites handled).
  Matrix second_moments_block(const std::vector<std::pair<int, SiteFn>>& tables) {
    ensure_backward();
    const int L = static_cast<int>(tables.size());
    Matrix em = Matrix::Zero(L, L);
    const Scaled z = total();
    // order table entries by processing rank
    std::vector<int> idx(L);
    for (int i = 0; i < L; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      return order_key(tables[a].first) < order_key(tables[b].first);
    });
    for (int ii = 0; ii < L; ++ii) {
      const int i = idx[ii];
      const int p = tables[i].first;
      const SiteFn& g = tables[i].second;
      if (is_frozen_[p]) {
        const double gv = g(frozen_value_[p]);
        for (int jj = ii; jj < L; ++jj) {
          const int j = idx[jj];
          em(i, j) = gv * expect_site(tables[j].first, tables[j].second);
          em(j, i) = em(i, j);
        }
        continue;
      }
      if (p == elim_) {
        // all remaining entries are on the eliminated axis too
        for (int jj = ii; jj < L; ++jj) {
          const int j = idx[jj];
          if (is_frozen_[tables[j].first]) {
            em(i, j) = tables[j].second(frozen_value_[tables[j].first]) *
                       expect_site(p, g);
          } else {
            const SiteFn& h = tables[j].second;
            SiteFn gh = [&](double v) { return g(v) * h(v); };
            em(i, j) = terminal_moment(gh).ratio(z);
          }
          em(j, i) = em(i, j);
        }
        continue;
      }
      // marked sweep from p to the right, contracting at every partner
      const int kp = rank_[p];
      Vector tp = table_for(p, g);
      Message cur = step(fwd_[kp], pos_[kp], &tp);
      // same-site partners first
      for (int jj = ii; jj < L; ++jj) {
        const int j = idx[jj];
        if (tables[j].first != p) continue;
        const SiteFn& h = tables[j].second;
        SiteFn gh = [&](double v) { return g(v) * h(v); };
        Vector tgh = table_for(p, gh);
        Message both = step(fwd_[kp], pos_[kp], &tgh);
        em(i, j) = contract(both, bwd_[kp + 1]).ratio(z);
        em(j, i) = em(i, j);
      }
      int walk = kp;  // cur is aligned with bwd_[walk + 1]
      // partners strictly to the right, in rank order
      for (int jj = 0; jj < L; ++jj) {
        const int j = idx[jj];
        const int q = tables[j].first;
        if (is_frozen_[q]) {
          em(i, j) = tables[j].second(frozen_value_[q]) *
                     single_moment(p, g).ratio(z);
          em(j, i) = em(i, j);
          continue;
        }
        if (q != elim_ && rank_[q] <= kp) continue;  // handled when j is the left site
        if (q == elim_) {
          Message t = cur;
          for (size_t k = walk + 1; k < pos_.size(); ++k) t = step(t, pos_[k], nullptr);
          em(i, j) = contract(t, terminal_message(opt_.constraint_sum, &tables[j].second)).ratio(z);
          em(j, i) = em(i, j);
          continue;
        }
        const int kq = rank_[q];
        while (walk + 1 < kq) {
          cur = step(cur, pos_[walk + 1], nullptr);
          ++walk;
        }
        Vector tq = table_for(q, tables[j].second);
        Message side = step(cur, pos_[kq], &tq);
        em(i, j) = contract(side, bwd_[kq + 1]).ratio(z);
        em(j, i) = em(i, j);
      }
    }
    return em;
  }

  static SiteFn identity_fn() {
    return [](double v) { return v; };
  }

 private:
  struct Scaled {
    double mant = 0.0;
    double ls = 0.0;
    double log() const { return std::log(mant) + ls; }
    double ratio(const Scaled& o) const { return mant / o.mant * std::exp(ls - o.ls); }
  };

  struct Message {
    Matrix m;  // rows x states
    double ls = 0.0;
  };

  // --- construction ---------------------------------------------------------

  void build() {
    const int n = model_.n_sites();
    is_frozen_.assign(n, false);
    frozen_value_.assign(n, 0.0);
    if (opt_.frozen_sites.size() != opt_.frozen_values.size())
      throw std::invalid_argument("frozen sites/values length mismatch");
    for (size_t k = 0; k < opt_.frozen_sites.size(); ++k) {
      const int i = opt_.frozen_sites[k];
      if (i < 0 || i >= n) throw std::invalid_argument("frozen site out of range");
      is_frozen_[i] = true;
      frozen_value_[i] = opt_.frozen_values[k];
    }
    drop_bump_.assign(n, false);
    if (!opt_.drop_bump.empty()) {
      if (static_cast<int>(opt_.drop_bump.size()) != n)
        throw std::invalid_argument("drop_bump mask length mismatch");
      for (int i = 0; i < n; ++i) drop_bump_[i] = opt_.drop_bump[i];
    }
    for (int i = 0; i < n; ++i)
      if (!is_frozen_[i]) free_sites_.push_back(i);
    n_free_ = static_cast<int>(free_sites_.size());
    if (n_free_ == 0) throw std::invalid_argument("no free sites");
    if (opt_.constrained && n_free_ < 2)
      throw std::invalid_argument("constrained measure needs at least 2 free sites");

    mirror_ = opt_.constrained && opt_.eliminated == HyperplaneChart::Axis::first;
    elim_ = -1;
    if (opt_.constrained) elim_ = mirror_ ? free_sites_.front() : free_sites_.back();

    build_axes();
    build_order();
    work_estimate_check();
  }

  int mirror_site(int i) const { return model_.n_sites() - 1 - i; }
  int phys(int i) const { return mirror_ ? mirror_site(i) : i; }

  double site_sigma_internal(int i) const { return is_frozen_[phys(i)] ? 0.0 : opt_.sigma; }

  double log_site_potential(int i, double v) const {  // i: internal coordinate
    const int p = phys(i);
    double psi = 0.5 * v * v;
    if (!drop_bump_[p]) psi += model_.potential().bump(v);
    return site_sigma_internal(i) * v - psi - model_.field()[p] * v;
  }

  double coup(int i, int j) const { return model_.coupling(phys(i), phys(j)); }

  void build_axes() {
    const int n = model_.n_sites();
    // Box centers: quadratic-part mean under the centering tilt.
    const double csig = std::isnan(opt_.center_sigma) ? opt_.sigma : opt_.center_sigma;
    Vector centers = Vector::Zero(n);
    if (opt_.center_boxes) {
      const int k = n_free_;
      Matrix pff(k, k);
      Vector rhs(k);
      const Matrix p = model_.quadratic_matrix();
      for (int a = 0; a < k; ++a) {
        rhs[a] = csig - model_.field()[free_sites_[a]];
        for (int j = 0; j < n; ++j)
          if (is_frozen_[j]) rhs[a] -= p(free_sites_[a], j) * frozen_value_[j];
        for (int b = 0; b < k; ++b) pff(a, b) = p(free_sites_[a], free_sites_[b]);
      }
      const Vector c = pff.ldlt().solve(rhs);
      for (int a = 0; a < k; ++a) centers[free_sites_[a]] = c[a];
    }

    const bool uniform = opt_.constrained || grid_.rule == QuadratureGrid::Rule::trapezoid;
    axes_.resize(n);
    for (int i = 0; i < n; ++i) {
      const int p = phys(i);
      if (is_frozen_[p])
        axes_[i] = AxisRule::frozen(frozen_value_[p]);
      else if (uniform)
        axes_[i] = AxisRule::trapezoid(centers[p], grid_.truncation, grid_.nodes_per_axis);
      else
        axes_[i] = AxisRule::gauss_legendre_composite(centers[p], grid_.truncation,
                                                      grid_.nodes_per_axis);
      if (!is_frozen_[p]) step_ = axes_[i].step;
    }
  }

  void build_order() {
    const int n = model_.n_sites();
    elim_internal_ = elim_ >= 0 ? (mirror_ ? mirror_site(elim_) : elim_) : -1;
    order_.clear();
    trail_.clear();
    for (int i = 0; i < n; ++i) {
      if (i == elim_internal_) continue;
      if (elim_internal_ >= 0 && i > elim_internal_) {
        if (!is_frozen_[phys(i)])
          throw std::logic_error("free axis after the eliminated axis");
        trail_.push_back(i);  // frozen tail, folded into the terminal factor
        continue;
      }
      order_.push_back(i);
    }
    window_ = std::max(1, model_.range());

    pos_.clear();
    rank_.assign(n, -1);
    std::vector<int> win;
    int rows = 1;
    int states = 1;
    for (size_t k = 0; k < order_.size(); ++k) {
      PosInfo pi;
      pi.axis = order_[k];
      pi.rows_before = rows;
      pi.states_before = states;
      pi.win_axes = win;
      for (int a : win) pi.win_sizes.push_back(axes_[a].size());
      for (size_t s = 0; s < win.size(); ++s) {
        const double c = coup(win[s], pi.axis);
        if (c != 0.0) pi.couplings.emplace_back(static_cast<int>(s), c);
      }
      pi.summed = opt_.constrained && !is_frozen_[phys(pi.axis)];
      if (pi.summed) rows += axes_[pi.axis].size() - 1;
      pi.drop_oldest = static_cast<int>(win.size()) == window_;
      int new_states = states * axes_[pi.axis].size();
      if (pi.drop_oldest) {
        new_states /= axes_[win.front()].size();
        win.erase(win.begin());
      }
      win.push_back(pi.axis);
      states = new_states;
      pi.out_states = states;
      rank_[phys(pi.axis)] = static_cast<int>(k);
      pos_.push_back(std::move(pi));
    }
    final_win_ = win;
    final_rows_ = rows;
    final_states_ = states;

    sum_base_ = 0.0;
    if (opt_.constrained)
      for (const auto& pi : pos_)
        if (pi.summed) sum_base_ += axes_[pi.axis].nodes.front();
  }

  void work_estimate_check() const {
    double work = 0.0;
    for (const auto& pi : pos_)
      work += static_cast<double>(pi.rows_before) * pi.states_before * axes_[pi.axis].size();
    if (work > grid_.budget)
      throw std::runtime_error("quadrature budget exceeded (work estimate " +
                               std::to_string(work) + " > " + std::to_string(grid_.budget) + ")");
  }

  // sort key placing processed axes by rank and the eliminated axis last
  long order_key(int site) const {
    if (is_frozen_[site]) return -1;  // frozen: handled first, order irrelevant
    if (site == elim_) return 1 << 30;
    return rank_[site];
  }

  struct PosInfo {
    int axis = 0;
    int rows_before = 1;
    int states_before = 1;
    std::vector<int> win_axes;  // internal ids, oldest first (most significant)
    std::vector<int> win_sizes;
    std::vector<std::pair<int, double>> couplings;  // (window slot, M coefficient)
    bool summed = false;
    bool drop_oldest = false;
    int out_states = 1;
  };

  // --- sweeps ---------------------------------------------------------------

  void node_factors(const PosInfo& pi, Vector& eb, double& bshift) const {
    const AxisRule& ax = axes_[pi.axis];
    const int nb = ax.size();
    Vector base(nb);
    for (int b = 0; b < nb; ++b)
      base[b] = log_site_potential(pi.axis, ax.nodes[b]) + ax.logw[b];
    bshift = base.maxCoeff();
    if (bshift == -std::numeric_limits<double>::infinity())
      throw std::runtime_error("zero mass (degenerate truncation)");
    if (!std::isfinite(bshift)) throw std::runtime_error("non-finite exponent in quadrature");
    eb.resize(nb);
    for (int b = 0; b < nb; ++b) eb[b] = std::exp(base[b] - bshift);
  }

  double coupling_sum(const PosInfo& pi, int s, std::vector<int>& decode) const {
    if (pi.couplings.empty()) return 0.0;
    int rem = s;
    for (int d = static_cast<int>(pi.win_sizes.size()) - 1; d >= 0; --d) {
      decode[d] = rem % pi.win_sizes[d];
      rem /= pi.win_sizes[d];
    }
    double cs = 0.0;
    for (const auto& [slot, coeff] : pi.couplings)
      cs -= coeff * axes_[pi.win_axes[slot]].nodes[decode[slot]];
    return cs;
  }

  void state_factors(const PosInfo& pi, double cs, const Vector& eb, Vector& fac) const {
    const AxisRule& ax = axes_[pi.axis];
    const int nb = ax.size();
    if (cs == 0.0) {
      fac = eb;
    } else if (ax.step > 0.0) {
      double w = std::exp(ax.nodes[0] * cs);
      const double r = std::exp(ax.step * cs);
      for (int b = 0; b < nb; ++b, w *= r) fac[b] = eb[b] * w;
    } else {
      for (int b = 0; b < nb; ++b) fac[b] = eb[b] * std::exp(ax.nodes[b] * cs);
    }
  }

  void normalize(Message& msg) const {
    const double peak = msg.m.cwiseAbs().maxCoeff();
    if (!std::isfinite(peak)) throw std::runtime_error("non-finite exponent in quadrature");
    if (peak > 0.0) {
      msg.m /= peak;
      msg.ls += std::log(peak);
    }
  }

  /// One forward contraction step; `mark` multiplies per-node values of the
  /// processed axis into the message.
  Message step(const Message& in, const PosInfo& pi, const Vector* mark) const {
    const AxisRule& ax = axes_[pi.axis];
    const int nb = ax.size();
    Message out;
    out.m = Matrix::Zero(pi.rows_before + (pi.summed ? nb - 1 : 0), pi.out_states);
    out.ls = in.ls;
    double bshift;
    Vector eb;
    node_factors(pi, eb, bshift);
    out.ls += bshift;
    if (mark)
      for (int b = 0; b < nb; ++b) eb[b] *= (*mark)[b];

    const int keep = pi.drop_oldest ? pi.states_before / pi.win_sizes.front() : pi.states_before;
    std::vector<int> decode(pi.win_axes.size());
    Vector fac(nb);
    for (int s = 0; s < pi.states_before; ++s) {
      const double cs = coupling_sum(pi, s, decode);
      state_factors(pi, cs, eb, fac);
      const int s_keep = pi.drop_oldest ? s % keep : s;
      for (int r = 0; r < pi.rows_before; ++r) {
        const double m = in.m(r, s);
        if (m == 0.0) continue;
        if (pi.summed)
          for (int b = 0; b < nb; ++b) out.m(r + b, s_keep * nb + b) += m * fac[b];
        else
          for (int b = 0; b < nb; ++b) out.m(r, s_keep * nb + b) += m * fac[b];
      }
    }
    normalize(out);
    return out;
  }

  /// Backward step: out(r, s) = sum_b fac(b | s) * after(r + db, shift(s, b)).
  Message step_back(const Message& after, const PosInfo& pi) const {
    const AxisRule& ax = axes_[pi.axis];
    const int nb = ax.size();
    Message out;
    out.m = Matrix::Zero(pi.rows_before, pi.states_before);
    out.ls = after.ls;
    double bshift;
    Vector eb;
    node_factors(pi, eb, bshift);
    out.ls += bshift;

    const int keep = pi.drop_oldest ? pi.states_before / pi.win_sizes.front() : pi.states_before;
    std::vector<int> decode(pi.win_axes.size());
    Vector fac(nb);
    for (int s = 0; s < pi.states_before; ++s) {
      const double cs = coupling_sum(pi, s, decode);
      state_factors(pi, cs, eb, fac);
      const int s_keep = pi.drop_oldest ? s % keep : s;
      for (int r = 0; r < pi.rows_before; ++r) {
        double acc = 0.0;
        if (pi.summed)
          for (int b = 0; b < nb; ++b) acc += fac[b] * after.m(r + b, s_keep * nb + b);
        else
          for (int b = 0; b < nb; ++b) acc += fac[b] * after.m(r, s_keep * nb + b);
        out.m(r, s) = acc;
      }
    }
    normalize(out);
    return out;
  }

  void ensure_forward() {
    if (!fwd_.empty()) return;
    Message m;
    m.m = Matrix::Ones(1, 1);
    fwd_.push_back(m);
    for (const auto& pi : pos_) fwd_.push_back(step(fwd_.back(), pi, nullptr));
  }

  void ensure_backward() {
    ensure_forward();
    if (!bwd_.empty()) return;
    bwd_.resize(pos_.size() + 1);
    bwd_[pos_.size()] = terminal_message(opt_.constraint_sum, nullptr);
    for (int k = static_cast<int>(pos_.size()) - 1; k >= 0; --k)
      bwd_[k] = step_back(bwd_[k + 1], pos_[k]);
  }

  /// Terminal factor as a message over (final rows, final window): the
  /// eliminated-axis integrand value at x_e = S - t plus trailing frozen
  /// factors; all-ones in gce mode.
  Message terminal_message(double S, const SiteFn* g_elim) const {
    Message t;
    if (!opt_.constrained) {
      t.m = Matrix::Ones(final_rows_, final_states_);
      return t;
    }
    std::vector<int> sizes;
    for (int a : final_win_) sizes.push_back(axes_[a].size());
    std::vector<int> decode(final_win_.size());
    Matrix lf(final_rows_, final_states_);
    double peak = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < final_states_; ++s) {
      int rem = s;
      for (int d = static_cast<int>(sizes.size()) - 1; d >= 0; --d) {
        decode[d] = rem % sizes[d];
        rem /= sizes[d];
      }
      for (int r = 0; r < final_rows_; ++r) {
        const double xe = S - (sum_base_ + step_ * r);
        double l = log_site_potential(elim_internal_, xe);
        for (size_t d = 0; d < final_win_.size(); ++d) {
          const double c = coup(final_win_[d], elim_internal_);
          if (c != 0.0) l -= c * axes_[final_win_[d]].nodes[decode[d]] * xe;
        }
        for (size_t a = 0; a < trail_.size(); ++a) {
          const int j = trail_[a];
          const double vj = axes_[j].nodes[0];
          double lj = log_site_potential(j, vj);
          const double cej = coup(j, elim_internal_);
          if (cej != 0.0) lj -= cej * vj * xe;
          for (size_t d = 0; d < final_win_.size(); ++d) {
            const double c = coup(final_win_[d], j);
            if (c != 0.0) lj -= c * axes_[final_win_[d]].nodes[decode[d]] * vj;
          }
          for (size_t a2 = a + 1; a2 < trail_.size(); ++a2) {
            const double c = coup(j, trail_[a2]);
            if (c != 0.0) lj -= c * vj * axes_[trail_[a2]].nodes[0];
          }
          l += lj;
        }
        lf(r, s) = l;
        if (std::isfinite(l)) peak = std::max(peak, l);
      }
    }
    if (!std::isfinite(peak)) throw std::runtime_error("zero mass (degenerate truncation)");
    t.m.resize(final_rows_, final_states_);
    for (int s = 0; s < final_states_; ++s)
      for (int r = 0; r < final_rows_; ++r) {
        double v = std::exp(lf(r, s) - peak);
        if (g_elim) v *= (*g_elim)(S - (sum_base_ + step_ * r));
        t.m(r, s) = v;
      }
    t.ls = peak;
    return t;
  }

  Scaled contract(const Message& f, const Message& b) const {
    double acc = 0.0;
    for (int s = 0; s < f.m.cols(); ++s)
      for (int r = 0; r < f.m.rows(); ++r) acc += f.m(r, s) * b.m(r, s);
    return {acc, f.ls + b.ls};
  }

  Scaled total() {
    if (!have_total_) {
      ensure_forward();
      if (!opt_.constrained) {
        double s = 0.0;
        const Message& f = fwd_.back();
        for (int c = 0; c < f.m.cols(); ++c)
          for (int r = 0; r < f.m.rows(); ++r) s += f.m(r, c);
        total_ = {s, f.ls};
      } else {
        total_ = contract(fwd_.back(), terminal_message(opt_.constraint_sum, nullptr));
      }
      if (!(total_.mant > 0.0)) throw std::runtime_error("zero mass (degenerate truncation)");
      have_total_ = true;
    }
    return total_;
  }

  Vector table_for(int site, const SiteFn& g) const {
    const int internal = mirror_ ? mirror_site(site) : site;
    const AxisRule& ax = axes_[internal];
    Vector t(ax.size());
    for (int b = 0; b < ax.size(); ++b) t[b] = g(ax.nodes[b]);
    return t;
  }

  Scaled terminal_moment(const SiteFn& g) {
    ensure_forward();
    return contract(fwd_.back(), terminal_message(opt_.constraint_sum, &g));
  }

  /// Numerator of E[g(x_p)] for a non-frozen site p.
  Scaled single_moment(int p, const SiteFn& g) {
    ensure_backward();
    if (p == elim_) return terminal_moment(g);
    const int kp = rank_[p];
    if (kp < 0) throw std::logic_error("site is not a processed axis");
    Vector tp = table_for(p, g);
    Message cur = step(fwd_[kp], pos_[kp], &tp);
    return contract(cur, bwd_[kp + 1]);
  }

  /// Numerator of E[g(x_p) h(x_q)], any sites.
  Scaled pair_moment(int p, const SiteFn& g, int q, const SiteFn& h) {
    if (is_frozen_[p]) {
      Scaled m = is_frozen_[q] ? total() : single_moment(q, h);
      m.mant *= g(frozen_value_[p]) * (is_frozen_[q] ? h(frozen_value_[q]) : 1.0);
      return m;
    }
    if (is_frozen_[q]) {
      Scaled m = single_moment(p, g);
      m.mant *= h(frozen_value_[q]);
      return m;
    }
    if (p == q) {
      SiteFn gh = [&](double v) { return g(v) * h(v); };
      return single_moment(p, gh);
    }
    // order so that q comes later (eliminated axis goes last)
    const int pa = p, qa = q;
    const bool swap = order_key(pa) > order_key(qa);
    const int sp = swap ? qa : pa;
    const int sq = swap ? pa : qa;
    const SiteFn& sg = swap ? h : g;
    const SiteFn& sh = swap ? g : h;
    ensure_backward();
    const int kp = rank_[sp];
    Vector tp = table_for(sp, sg);
    Message cur = step(fwd_[kp], pos_[kp], &tp);
    if (sq == elim_) {
      for (size_t k = kp + 1; k < pos_.size(); ++k) cur = step(cur, pos_[k], nullptr);
      return contract(cur, terminal_message(opt_.constraint_sum, &sh));
    }
    const int kq = rank_[sq];
    for (int k = kp + 1; k < kq; ++k) cur = step(cur, pos_[k], nullptr);
    Vector tq = table_for(sq, sh);
    cur = step(cur, pos_[kq], &tq);
    return contract(cur, bwd_[kq + 1]);
  }

  // --- data -----------------------------------------------------------------

  const LatticeModel& model_;
  QuadratureGrid grid_;
  Options opt_;

  std::vector<char> is_frozen_;       // by physical site
  std::vector<double> frozen_value_;  // by physical site
  std::vector<char> drop_bump_;       // by physical site
  std::vector<int> free_sites_;       // physical indices, ascending
  int n_free_ = 0;

  bool mirror_ = false;
  int elim_ = -1;           // physical site of the eliminated axis
  int elim_internal_ = -1;  // internal coordinate of the eliminated axis
  std::vector<AxisRule> axes_;  // by internal coordinate
  std::vector<int> order_;      // internal coordinates processed, in order
  std::vector<int> trail_;      // frozen internal coordinates after elim
  std::vector<PosInfo> pos_;
  std::vector<int> rank_;       // physical site -> order position (-1 if not processed)
  std::vector<int> final_win_;
  int final_rows_ = 1;
  int final_states_ = 1;
  int window_ = 1;
  double step_ = 0.0;
  double sum_base_ = 0.0;

  std::vector<Message> fwd_;
  std::vector<Message> bwd_;
  Scaled total_;
  bool have_total_ = false;
};

}  // namespace lsilab
