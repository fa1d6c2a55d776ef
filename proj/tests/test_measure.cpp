#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfc/errors.hpp"
#include "mfc/measure.hpp"

using namespace mfc;

namespace {
double l1_distance(const BinDensity& a, const BinDensity& b) {
  return (a.w - b.w).cwiseAbs().sum() * a.grid.h();
}
}  // namespace

TEST_CASE("bin grid geometry and index rule") {
  const BinGrid g{0.0, 1.0, 4};
  CHECK(g.h() == 0.25);
  CHECK(g.center(0) == doctest::Approx(0.125));
  CHECK(g.bin_index(0.0) == 0);
  CHECK(g.bin_index(0.25) == 1);   // half-open at the left edge of bin 1
  CHECK(g.bin_index(0.999) == 3);
  CHECK(g.bin_index(1.0) == 3);    // last bin closed
  CHECK(g.bin_index(-5.0) == 0);   // Proj_K clamps
  CHECK(g.bin_index(11.0) == 3);
}

TEST_CASE("bin_weights_from_pdf: constant pdf gives unit weights") {
  const BinGrid g{0.0, 1.0, 4};
  const BinDensity d = bin_weights_from_pdf([](double) { return 3.7; }, g);
  for (int k = 0; k < 4; ++k) CHECK(d.w[k] == doctest::Approx(1.0).epsilon(1e-14));
  validate(d);
}

TEST_CASE("bin_weights_from_pdf: Gaussian weights are symmetric about zero") {
  const BinGrid g{-1.38, 1.62, 100};
  const BinDensity d = bin_weights_from_pdf(
      [](double x) { return std::exp(-0.5 * x * x / 0.04); }, g);
  CHECK(d.w.sum() * g.h() == doctest::Approx(1.0).epsilon(1e-12));
  // centers k=45 and k=46 sit at -0.015 and +0.015
  for (int j = 0; j <= 45; ++j)
    CHECK(d.w[45 - j] == doctest::Approx(d.w[46 + j]).epsilon(1e-13));
}

TEST_CASE("bin_weights_from_pdf: point concentration and degenerate pdf") {
  const BinGrid g{0.0, 1.0, 4};
  const double target = g.center(2);
  const BinDensity d =
      bin_weights_from_pdf([target](double x) { return std::abs(x - target) < 1e-12 ? 1.0 : 0.0; }, g);
  CHECK(d.w[2] == doctest::Approx(1.0 / g.h()).epsilon(1e-14));
  CHECK(d.w[0] == 0.0);
  CHECK(d.w[1] == 0.0);
  CHECK(d.w[3] == 0.0);

  CHECK_THROWS_AS(bin_weights_from_pdf([](double) { return 0.0; }, g), DegenerateDensityError);
}

TEST_CASE("inverse transform: single-bin mass stays in the bin") {
  const BinGrid g{0.0, 1.0, 4};
  BinDensity d{g, Eigen::VectorXd::Zero(4)};
  d.w[1] = 1.0 / g.h();
  RngStream rng(1);
  const VectorXd xs = sample_inverse_transform(d, 500, rng);
  CHECK(xs.minCoeff() >= 0.25);
  CHECK(xs.maxCoeff() <= 0.50);
}

TEST_CASE("inverse transform: uniform density mean obeys the CLT bound") {
  const BinGrid g{-1.0, 2.0, 10};
  BinDensity d{g, Eigen::VectorXd::Constant(10, 1.0 / 3.0)};
  validate(d);
  RngStream rng(2);
  const int n = 100000;
  const VectorXd xs = sample_inverse_transform(d, n, rng);
  const double range = 3.0;
  CHECK(std::abs(xs.mean() - 0.5) <= 3.0 * range / std::sqrt(12.0 * n));
}

TEST_CASE("inverse transform: determinism and empty draw") {
  const BinGrid g{0.0, 1.0, 7};
  BinDensity d{g, Eigen::VectorXd::Constant(7, 1.0)};
  RngStream r1(9), r2(9);
  CHECK(sample_inverse_transform(d, 64, r1) == sample_inverse_transform(d, 64, r2));
  RngStream r3(9);
  CHECK(sample_inverse_transform(d, 0, r3).size() == 0);
}

TEST_CASE("estimate_bin_density: counting, clamping, errors") {
  const BinGrid g{0.0, 1.0, 4};
  VectorXd xs = VectorXd::Constant(12, 0.6);  // all in (1-based) bin 3
  BinDensity d = estimate_bin_density(xs, g);
  CHECK(d.w[0] == 0.0);
  CHECK(d.w[1] == 0.0);
  CHECK(d.w[2] == 4.0);
  CHECK(d.w[3] == 0.0);

  VectorXd far(1);
  far[0] = g.hi + 10.0;
  CHECK(estimate_bin_density(far, g).w[3] > 0.0);

  CHECK_THROWS_AS(estimate_bin_density(VectorXd(), g), EstimationError);
}

TEST_CASE("round trip: sample then estimate has small L1 error") {
  const BinGrid g{-1.38, 1.62, 100};
  const BinDensity p = bin_weights_from_pdf(
      [](double x) { return std::exp(-0.5 * (x - 0.1) * (x - 0.1) / 0.04); }, g);
  RngStream rng(3);
  const VectorXd xs = sample_inverse_transform(p, 100000, rng);
  const BinDensity q = estimate_bin_density(xs, g);
  CHECK(l1_distance(p, q) < 0.05);
}

TEST_CASE("random_training_density: invariants, determinism, coverage") {
  const BinGrid g{-1.38, 1.62, 50};
  RngStream r1(77), r2(77);
  for (int i = 0; i < 50; ++i) {
    const BinDensity d = random_training_density(g, r1);
    validate(d);
  }
  RngStream r3(77);
  const BinDensity a = random_training_density(g, r3);
  const BinDensity b = random_training_density(g, r2);
  CHECK(a.w == b.w);

  Eigen::VectorXd seen = Eigen::VectorXd::Zero(g.k_bins);
  RngStream r4(5);
  for (int i = 0; i < 1000; ++i) seen += (random_training_density(g, r4).w.array() > 0.0).cast<double>().matrix();
  CHECK(seen.minCoeff() > 0.0);
}

TEST_CASE("density_moments: symmetry, point mass, binified Gaussian") {
  const BinGrid sym{-1.0, 1.0, 8};
  BinDensity d{sym, Eigen::VectorXd::Zero(8)};
  d.w << 1, 2, 3, 4, 4, 3, 2, 1;
  d.w /= d.w.sum() * sym.h();
  CHECK(density_moments(d).mean == doctest::Approx(0.0).epsilon(1e-14));

  BinDensity point{sym, Eigen::VectorXd::Zero(8)};
  point.w[5] = 1.0 / sym.h();
  const Moments pm = density_moments(point);
  CHECK(pm.mean == doctest::Approx(sym.center(5)).epsilon(1e-14));
  CHECK(pm.var == 0.0);

  const BinGrid g{-0.85, 0.9, 400};
  const BinDensity gauss = bin_weights_from_pdf(
      [](double x) { return std::exp(-0.5 * (x - 0.1) * (x - 0.1) / 0.04); }, g);
  const Moments m = density_moments(gauss);
  CHECK(std::abs(m.mean - 0.1) < 1e-3);
  CHECK(std::abs(m.var - 0.04) < 1e-3);
}

TEST_CASE("sample moments converge at the Monte Carlo rate") {
  const BinGrid g{-1.38, 1.62, 100};
  const BinDensity p = bin_weights_from_pdf(
      [](double x) { return std::exp(-0.5 * x * x / 0.04); }, g);
  const Moments ref = density_moments(p);
  RngStream rng(11);
  for (int n : {1000, 10000, 100000}) {
    const VectorXd xs = sample_inverse_transform(p, n, rng);
    const double mean = xs.mean();
    const double var = (xs.array() - mean).square().sum() / n;
    CHECK(std::abs(mean - ref.mean) <= 3.0 * std::sqrt(ref.var / n));
    CHECK(std::abs(var - ref.var) <= 3.0 * std::sqrt(2.0) * ref.var / std::sqrt(double(n)) + 1e-12);
  }
}

TEST_CASE("initial distributions: moments, binification, tail clamping") {
  const auto gauss = InitialDistribution::gaussian(0.0, 0.2);
  CHECK(gauss.exact_moments().mean == doctest::Approx(0.0));
  CHECK(gauss.exact_moments().var == doctest::Approx(0.04));

  const double k = std::sqrt(3.0) / 10.0;
  const auto mix = InitialDistribution::mixture({{0.5, -k, 0.1}, {0.5, k, 0.1}});
  CHECK(mix.exact_moments().mean == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(mix.exact_moments().var == doctest::Approx(0.04).epsilon(1e-14));

  const BinGrid g{-1.38, 1.62, 100};
  const BinDensity bd = bin_density_from_initial(mix, g);
  validate(bd);
  const Moments bm = density_moments(bd);
  CHECK(std::abs(bm.mean - 0.0) < 2e-3);
  CHECK(std::abs(bm.var - 0.04) < 2e-3);

  // A component centered near the domain edge: the outside mass must be
  // clamped into the first bin, not renormalized away.
  const BinGrid tight{0.21, 2.72, 100};
  const auto edge = InitialDistribution::mixture({{0.5, 0.25, 0.15}, {0.5, 1.75, 0.15}});
  const BinDensity ed = bin_density_from_initial(edge, tight);
  validate(ed);
  const double below = edge.cdf(tight.lo);
  CHECK(below > 0.15);  // a visible chunk sits below the domain
  CHECK(ed.w[0] * tight.h() >= below - 1e-12);

  CHECK_THROWS_AS(InitialDistribution::gaussian(0.0, -1.0), ParamError);
  CHECK_THROWS_AS(InitialDistribution::mixture({{0.7, 0.0, 0.1}, {0.7, 1.0, 0.1}}), ParamError);
}

TEST_CASE("sample_initial is deterministic and matches exact moments") {
  const auto mix = InitialDistribution::mixture({{0.5, -0.25, 0.1}, {0.5, 0.25, 0.1}});
  RngStream r1(4), r2(4);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = sample_initial(mix, r1);
    CHECK(x == sample_initial(mix, r2));
    sum += x;
    sq += x * x;
  }
  const Moments m = mix.exact_moments();
  const double mean = sum / n;
  CHECK(std::abs(mean - m.mean) <= 3.0 * std::sqrt(m.var / n));
  CHECK(std::abs(sq / n - mean * mean - m.var) <= 4.0 * m.var / std::sqrt(double(n)));
}
