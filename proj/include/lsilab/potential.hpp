#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace lsilab {

/// Single-site potential psi(z) = z^2/2 + psi_b(z) with a bounded perturbation
/// psi_b from one of three closed families, chosen so that the sup norms of
/// psi_b, psi_b', psi_b'' are exact values rather than estimates.
struct PotentialSpec {
  enum class Kind { quadratic, cosine, gauss_bump };

  Kind kind = Kind::quadratic;
  double beta = 0.0;   // amplitude (cosine) / depth (gauss_bump)
  double omega = 1.0;  // frequency (cosine only)
  double width = 1.0;  // width w (gauss_bump only)

  static PotentialSpec quadratic() { return {}; }

  static PotentialSpec cosine(double beta, double omega) {
    if (beta < 0.0 || omega <= 0.0)
      throw std::invalid_argument("cosine potential needs beta >= 0, omega > 0");
    PotentialSpec p;
    p.kind = Kind::cosine;
    p.beta = beta;
    p.omega = omega;
    return p;
  }

  static PotentialSpec gauss_bump(double depth, double width) {
    if (depth < 0.0 || width <= 0.0)
      throw std::invalid_argument("gauss_bump potential needs depth >= 0, width > 0");
    PotentialSpec p;
    p.kind = Kind::gauss_bump;
    p.beta = depth;
    p.width = width;
    return p;
  }

  // gauss_bump is a ridge of height beta at the origin; with beta > w^2
  // psi(z) = z^2/2 + psi_b(z) becomes a double well (psi''(0) = 1 - beta/w^2).
  double bump(double z) const {
    switch (kind) {
      case Kind::quadratic: return 0.0;
      case Kind::cosine: return beta * std::cos(omega * z);
      case Kind::gauss_bump: return beta * std::exp(-z * z / (2.0 * width * width));
    }
    return 0.0;
  }

  double bump_d1(double z) const {
    switch (kind) {
      case Kind::quadratic: return 0.0;
      case Kind::cosine: return -beta * omega * std::sin(omega * z);
      case Kind::gauss_bump: {
        const double w2 = width * width;
        return -beta * (z / w2) * std::exp(-z * z / (2.0 * w2));
      }
    }
    return 0.0;
  }

  double bump_d2(double z) const {
    switch (kind) {
      case Kind::quadratic: return 0.0;
      case Kind::cosine: return -beta * omega * omega * std::cos(omega * z);
      case Kind::gauss_bump: {
        const double w2 = width * width;
        return beta * (z * z / (w2 * w2) - 1.0 / w2) * std::exp(-z * z / (2.0 * w2));
      }
    }
    return 0.0;
  }

  double psi(double z) const { return 0.5 * z * z + bump(z); }
  double psi_d1(double z) const { return z + bump_d1(z); }
  double psi_d2(double z) const { return 1.0 + bump_d2(z); }

  /// Exact sup norms ||psi_b||, ||psi_b'||, ||psi_b''||.
  double bump_sup() const { return kind == Kind::quadratic ? 0.0 : beta; }

  double bump_d1_sup() const {
    switch (kind) {
      case Kind::quadratic: return 0.0;
      case Kind::cosine: return beta * omega;
      case Kind::gauss_bump: return beta * std::exp(-0.5) / width;
    }
    return 0.0;
  }

  double bump_d2_sup() const {
    switch (kind) {
      case Kind::quadratic: return 0.0;
      case Kind::cosine: return beta * omega * omega;
      case Kind::gauss_bump: return beta / (width * width);
    }
    return 0.0;
  }

  std::string kind_name() const {
    switch (kind) {
      case Kind::quadratic: return "quadratic";
      case Kind::cosine: return "cosine";
      case Kind::gauss_bump: return "gauss_bump";
    }
    return "quadratic";
  }
};

}  // namespace lsilab
