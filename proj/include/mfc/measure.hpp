#pragma once

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <vector>

#include "mfc/rng.hpp"

namespace mfc {

using Eigen::VectorXd;

/// Uniform bin grid on the truncation domain K = [lo, hi].
struct BinGrid {
  double lo = 0.0;
  double hi = 1.0;
  int k_bins = 1;

  double h() const { return (hi - lo) / k_bins; }
  double center(int k) const { return lo + (k + 0.5) * h(); }  // k is 0-based
  double edge(int k) const { return lo + k * h(); }

  /// Half-open bins [edge_k, edge_{k+1}), last bin closed; out-of-domain
  /// points are clamped to the nearest endpoint (Proj_K) first.
  int bin_index(double x) const;

  bool operator==(const BinGrid& o) const {
    return lo == o.lo && hi == o.hi && k_bins == o.k_bins;
  }
};

void validate(const BinGrid& grid);

/// Discrete density on a bin grid: weights p_k >= 0 with sum_k p_k h = 1.
struct BinDensity {
  BinGrid grid;
  VectorXd w;
};

void validate(const BinDensity& density);

struct Moments {
  double mean = 0.0;
  double var = 0.0;
};

/// p_k = pdf(x_k) / (sum_j pdf(x_j) h); throws if the pdf vanishes on every
/// bin center.
BinDensity bin_weights_from_pdf(const std::function<double(double)>& pdf, const BinGrid& grid);

/// Inverse-transform sampling: pick a bin by cumulative weight, then uniform
/// within the bin. n = 0 yields an empty vector.
VectorXd sample_inverse_transform(const BinDensity& density, int n, RngStream& rng);
void sample_inverse_transform(const BinDensity& density, Eigen::Ref<VectorXd> out,
                              RngStream& rng);

/// Histogram estimator p_k = #{Proj_K(x_n) in bin k} / (N h). Throws on an
/// empty sample set.
BinDensity estimate_bin_density(const Eigen::Ref<const VectorXd>& samples, const BinGrid& grid);
void estimate_bin_density(const Eigen::Ref<const VectorXd>& samples, const BinGrid& grid,
                          VectorXd& weights);

/// Random Gaussian mixture (1-3 components, means on the middle 80% of K,
/// stds in [0.05, 0.3]*(hi-lo), random normalized weights), binified through
/// bin_weights_from_pdf. Used to draw training measures.
BinDensity random_training_density(const BinGrid& grid, RngStream& rng);

/// mean = sum_k p_k h x_k, var = sum_k p_k h (x_k - mean)^2.
Moments density_moments(const BinDensity& density);

/// Initial distribution declared by an experiment: a Gaussian mixture (a
/// single component for plain Gaussians) or an explicit bin density.
struct GaussianComponent {
  double weight = 1.0;
  double mean = 0.0;
  double std = 1.0;
};

struct InitialDistribution {
  std::vector<GaussianComponent> components;  // empty iff `bin` holds the law
  std::optional<BinDensity> bin;

  static InitialDistribution gaussian(double mean, double std);
  static InitialDistribution mixture(std::vector<GaussianComponent> comps);
  static InitialDistribution from_bin(BinDensity density);

  double pdf(double x) const;
  double cdf(double x) const;
  Moments exact_moments() const;
};

/// Bin representation of an initial distribution on `grid`. Gaussian mixtures
/// are binned by exact CDF mass per bin, with the mass outside K clamped into
/// the first/last bin (the law of Proj_K(X)). A bin-type distribution is
/// rebinned by interval overlap when grids differ.
BinDensity bin_density_from_initial(const InitialDistribution& dist, const BinGrid& grid);

/// One sample from the exact (un-binned, un-clamped) distribution.
double sample_initial(const InitialDistribution& dist, RngStream& rng);

}  // namespace mfc
