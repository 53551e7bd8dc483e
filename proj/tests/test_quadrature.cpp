#include <catch2/catch_amalgamated.hpp>

#include "lsilab/quadrature.hpp"
#include "oracles.hpp"

using namespace lsilab;
using Catch::Approx;

static QuadratureGrid grid_for(const LatticeModel& m, double sig = 0.0, int nodes = 64) {
  QuadratureGrid g;
  g.truncation = default_truncation(m, sig);
  g.nodes_per_axis = nodes;
  return g;
}

TEST_CASE("gce log-partition: 1D Gaussian closed forms") {
  LatticeModel m(1, {}, 1.0, {}, PotentialSpec::quadratic());
  auto g = grid_for(m, 2.0);
  REQUIRE(log_partition_gce(m, 0.0, g) == Approx(0.5 * std::log(2.0 * M_PI)).epsilon(1e-8));
  REQUIRE(log_partition_gce(m, 2.0, g) ==
          Approx(0.5 * std::log(2.0 * M_PI) + 2.0).epsilon(1e-8));
}

TEST_CASE("gce log-partition: banded Gaussian vs dense oracle") {
  for (double c : {0.3, -0.35}) {
    LatticeModel m(6, {c}, 0.25, oracles::random_config(6, 21, 0.4),
                   PotentialSpec::quadratic());
    auto gauss = oracles::Gaussian::of(m);
    for (double sigma : {0.0, 1.5, -2.0}) {
      auto g = grid_for(m, sigma);
      REQUIRE(log_partition_gce(m, sigma, g) ==
              Approx(gauss.log_z_gce(sigma)).epsilon(1e-9));
    }
  }
}

TEST_CASE("gce chain contraction equals naive enumeration") {
  LatticeModel m(4, {-0.3}, 0.3, oracles::random_config(4, 2, 0.3),
                 PotentialSpec::cosine(0.7, 1.2));
  QuadratureGrid g;
  g.truncation = 8.5;
  g.nodes_per_axis = 24;
  for (auto rule : {QuadratureGrid::Rule::gauss_legendre_composite,
                    QuadratureGrid::Rule::trapezoid}) {
    g.rule = rule;
    const double direct = naive::log_partition_gce(m, 0.7, g);
    // same nodes, same sum, different association order only
    ChainMeasure::Options opt;
    opt.sigma = 0.7;
    opt.center_boxes = false;  // naive axes are centered at 0
    ChainMeasure chain(m, g, opt);
    REQUIRE(chain.log_partition() == Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("ce log-partition: N=2 and N=3 closed forms") {
  LatticeModel m2(2, {}, 1.0, {}, PotentialSpec::quadratic());
  auto g2 = grid_for(m2);
  REQUIRE(log_partition_ce(m2, 0.0, g2) ==
          Approx(std::log(std::sqrt(2.0) * std::sqrt(M_PI))).epsilon(1e-9));

  LatticeModel m3(3, {}, 1.0, {}, PotentialSpec::quadratic());
  auto g3 = grid_for(m3);
  REQUIRE(log_partition_ce(m3, 0.0, g3) == Approx(std::log(2.0 * M_PI)).epsilon(1e-9));
}

TEST_CASE("ce log-partition: mean shift is exactly -N mu^2/2 for free quadratic") {
  LatticeModel m(5, {}, 1.0, {}, PotentialSpec::quadratic());
  auto g = grid_for(m, 1.5);
  const double mu = 1.3;
  REQUIRE(log_partition_ce(m, mu, g) - log_partition_ce(m, 0.0, g) ==
          Approx(-5.0 * mu * mu / 2.0).epsilon(1e-9));
}

TEST_CASE("ce log-partition: banded Gaussian with field vs dense oracle") {
  LatticeModel m(6, {0.25}, 0.3, oracles::random_config(6, 31, 0.5),
                 PotentialSpec::quadratic());
  auto gauss = oracles::Gaussian::of(m);
  auto g = grid_for(m, 2.0);
  for (double mean : {0.0, 0.8, -1.2})
    REQUIRE(log_partition_ce(m, mean, g) == Approx(gauss.log_z_ce(mean)).epsilon(1e-9));
}

TEST_CASE("Hausdorff consistency: eliminated axis first vs last") {
  LatticeModel m(5, {-0.2}, 0.4, oracles::random_config(5, 4, 0.5),
                 PotentialSpec::cosine(0.6, 1.0));
  auto g = grid_for(m, 1.0);
  HyperplaneChart last{HyperplaneChart::Axis::last};
  HyperplaneChart first{HyperplaneChart::Axis::first};
  const double a = log_partition_ce(m, 0.4, g, last);
  const double b = log_partition_ce(m, 0.4, g, first);
  REQUIRE(a == Approx(b).margin(1e-10));
}

TEST_CASE("ce chart contraction equals naive chart enumeration") {
  LatticeModel m(4, {0.2}, 0.4, oracles::random_config(4, 8, 0.3),
                 PotentialSpec::gauss_bump(0.8, 1.0));
  QuadratureGrid g;
  g.truncation = 9.0;
  g.nodes_per_axis = 33;
  g.rule = QuadratureGrid::Rule::trapezoid;
  const double direct = naive::log_partition_ce(m, 0.3, g);
  ChainMeasure::Options opt;
  opt.constrained = true;
  opt.constraint_sum = 4 * 0.3;
  opt.center_boxes = false;  // align boxes with the naive enumeration
  ChainMeasure chain(m, g, opt);
  const double viaChain = chain.log_partition();
  REQUIRE(viaChain == Approx(direct).epsilon(1e-12));
}

TEST_CASE("gce moments: mean and covariance vs Gaussian oracle") {
  LatticeModel m(6, {0.3}, 0.25, oracles::random_config(6, 13, 0.4),
                 PotentialSpec::quadratic());
  auto gauss = oracles::Gaussian::of(m);
  auto chain = make_chain(m, Gce{0.8}, grid_for(m, 0.8));
  const Vector mu = chain.means();
  const Matrix cov = chain.covariance();
  REQUIRE((mu - gauss.mean_gce(0.8)).cwiseAbs().maxCoeff() < 1e-6);
  REQUIRE((cov - gauss.cov_gce()).cwiseAbs().maxCoeff() < 1e-6);
  REQUIRE(chain.var_free_sum() == Approx(gauss.var_sum_gce()).epsilon(1e-7));
}

TEST_CASE("gce symmetry: zero field, zero tilt means vanish") {
  LatticeModel m(5, {-0.2}, 0.5, {}, PotentialSpec::cosine(0.5, 1.0));
  auto chain = make_chain(m, Gce{0.0}, grid_for(m));
  REQUIRE(chain.means().cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("ce moments: projected Gaussian covariance delta_ij - 1/N") {
  LatticeModel m(5, {}, 1.0, {}, PotentialSpec::quadratic());
  auto chain = make_chain(m, Ce{0.7}, grid_for(m, 1.0));
  const Matrix cov = chain.covariance();
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const double expect = (i == j ? 1.0 : 0.0) - 1.0 / 5.0;
      REQUIRE(cov(i, j) == Approx(expect).margin(1e-6));
    }
  REQUIRE(chain.means().cwiseAbs().maxCoeff() - 0.7 < 1e-8);
}

TEST_CASE("ce moments: banded Gaussian vs projected dense oracle") {
  LatticeModel m(6, {-0.3}, 0.35, oracles::random_config(6, 17, 0.4),
                 PotentialSpec::quadratic());
  auto gauss = oracles::Gaussian::of(m);
  auto chain = make_chain(m, Ce{-0.5}, grid_for(m, 1.5));
  REQUIRE((chain.means() - gauss.mean_ce(-0.5)).cwiseAbs().maxCoeff() < 1e-6);
  REQUIRE((chain.covariance() - gauss.cov_ce()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("ce covariance annihilates the constant direction") {
  LatticeModel m(6, {0.2}, 0.4, oracles::random_config(6, 23, 0.3),
                 PotentialSpec::cosine(0.4, 1.1));
  auto chain = make_chain(m, Ce{0.2}, grid_for(m, 1.0));
  const Matrix cov = chain.covariance();
  REQUIRE((cov * Vector::Ones(6)).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((cov - cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grid refinement changes log-partitions below 1e-7") {
  LatticeModel m(4, {-0.25}, 0.4, oracles::random_config(4, 3, 0.4),
                 PotentialSpec::gauss_bump(1.0, 1.0));
  auto g = grid_for(m, 1.0, 48);
  const double z1 = log_partition_gce(m, 1.0, g);
  const double z2 = log_partition_gce(m, 1.0, g.refined());
  REQUIRE(std::abs(z1 - z2) < 1e-7);
  const double c1 = log_partition_ce(m, 0.5, g);
  const double c2 = log_partition_ce(m, 0.5, g.refined());
  REQUIRE(std::abs(c1 - c2) < 1e-7);
}

TEST_CASE("generic expect agrees with structured path on small N") {
  LatticeModel m(3, {0.3}, 0.3, oracles::random_config(3, 9, 0.3),
                 PotentialSpec::cosine(0.5, 1.0));
  QuadratureGrid g;
  g.truncation = default_truncation(m, 1.0);
  g.nodes_per_axis = 48;
  ChainMeasure::Options opt;
  opt.sigma = 1.0;
  opt.center_boxes = false;  // same nodes as the generic enumeration
  ChainMeasure chain(m, g, opt);
  const double direct = expect(
      m, Gce{1.0}, [](const Vector& x) { return x[0] * x[2]; }, g);
  REQUIRE(chain.pair_expect(0, ChainMeasure::identity_fn(), 2, ChainMeasure::identity_fn()) ==
          Approx(direct).epsilon(1e-10));
}

TEST_CASE("budget and degenerate-truncation errors") {
  LatticeModel m(12, {-0.2}, 0.6, {}, PotentialSpec::quadratic());
  QuadratureGrid g;
  g.truncation = 8.0;
  g.nodes_per_axis = 64;
  g.budget = 1e4;
  REQUIRE_THROWS_WITH(log_partition_gce(m, 0.0, g),
                      Catch::Matchers::ContainsSubstring("budget"));

  LatticeModel m2(3, {}, 1.0, {}, PotentialSpec::quadratic());
  QuadratureGrid g2;
  g2.truncation = 2.0;
  g2.nodes_per_axis = 32;
  // a constraint so extreme every node factor underflows to -inf
  REQUIRE_THROWS_WITH(log_partition_ce(m2, 1e160, g2),
                      Catch::Matchers::ContainsSubstring("zero mass"));
}
