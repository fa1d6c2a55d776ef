#include "mfc/measure.hpp"

#include <algorithm>
#include <cmath>

#include "mfc/errors.hpp"

namespace mfc {

namespace {
constexpr double kNormInv = 0.7071067811865475244;  // 1/sqrt(2)

double gaussian_pdf(double x, double mean, double std) {
  const double z = (x - mean) / std;
  return std::exp(-0.5 * z * z) / (std * 2.5066282746310005024);
}

double gaussian_cdf(double x, double mean, double std) {
  return 0.5 * std::erfc(-(x - mean) / std * kNormInv);
}
}  // namespace

int BinGrid::bin_index(double x) const {
  if (x <= lo) return 0;
  if (x >= hi) return k_bins - 1;
  const int k = static_cast<int>((x - lo) / h());
  return std::min(k, k_bins - 1);
}

void validate(const BinGrid& grid) {
  if (!(grid.lo < grid.hi)) throw ParamError("bin grid needs lo < hi");
  if (grid.k_bins < 1) throw ParamError("bin grid needs at least one bin");
}

void validate(const BinDensity& density) {
  validate(density.grid);
  if (density.w.size() != density.grid.k_bins)
    throw ShapeError("bin density weight count does not match grid");
  if ((density.w.array() < 0.0).any()) throw DegenerateDensityError("negative bin weight");
  const double mass = density.w.sum() * density.grid.h();
  if (std::abs(mass - 1.0) > 1e-10)
    throw DegenerateDensityError("bin weights do not integrate to 1");
}

BinDensity bin_weights_from_pdf(const std::function<double(double)>& pdf, const BinGrid& grid) {
  validate(grid);
  BinDensity d{grid, VectorXd(grid.k_bins)};
  for (int k = 0; k < grid.k_bins; ++k) {
    const double v = pdf(grid.center(k));
    if (v < 0.0) throw DegenerateDensityError("pdf is negative on a bin center");
    d.w[k] = v;
  }
  const double total = d.w.sum() * grid.h();
  if (total <= 0.0) throw DegenerateDensityError("pdf vanishes on all bin centers");
  d.w /= total;
  return d;
}

void sample_inverse_transform(const BinDensity& density, Eigen::Ref<VectorXd> out,
                              RngStream& rng) {
  const BinGrid& g = density.grid;
  const double h = g.h();
  VectorXd cum(g.k_bins);
  double acc = 0.0;
  for (int k = 0; k < g.k_bins; ++k) {
    acc += density.w[k] * h;
    cum[k] = acc;
  }
  cum[g.k_bins - 1] = 1.0;  // absorb rounding in the last bin
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double u = rng.uniform01();
    const int k = static_cast<int>(
        std::lower_bound(cum.data(), cum.data() + g.k_bins, u) - cum.data());
    const double lo_mass = (k == 0) ? 0.0 : cum[k - 1];
    const double bin_mass = cum[k] - lo_mass;
    const double frac = bin_mass > 0.0 ? (u - lo_mass) / bin_mass : 0.5;
    out[i] = g.edge(k) + frac * h;
  }
}

VectorXd sample_inverse_transform(const BinDensity& density, int n, RngStream& rng) {
  VectorXd out(n);
  if (n > 0) sample_inverse_transform(density, out, rng);
  return out;
}

void estimate_bin_density(const Eigen::Ref<const VectorXd>& samples, const BinGrid& grid,
                          VectorXd& weights) {
  if (samples.size() == 0) throw EstimationError("empty sample set");
  weights.setZero(grid.k_bins);
  for (Eigen::Index i = 0; i < samples.size(); ++i) weights[grid.bin_index(samples[i])] += 1.0;
  weights /= static_cast<double>(samples.size()) * grid.h();
}

BinDensity estimate_bin_density(const Eigen::Ref<const VectorXd>& samples, const BinGrid& grid) {
  validate(grid);
  BinDensity d{grid, VectorXd(grid.k_bins)};
  estimate_bin_density(samples, grid, d.w);
  return d;
}

BinDensity random_training_density(const BinGrid& grid, RngStream& rng) {
  const double width = grid.hi - grid.lo;
  const double margin = 0.1 * width;
  const int n_comp = rng.uniform_int(1, 3);
  std::vector<GaussianComponent> comps(n_comp);
  double wsum = 0.0;
  for (auto& c : comps) {
    c.weight = rng.uniform01();
    c.mean = rng.uniform(grid.lo + margin, grid.hi - margin);
    c.std = rng.uniform(0.05, 0.3) * width;
    wsum += c.weight;
  }
  for (auto& c : comps) c.weight /= wsum;
  return bin_weights_from_pdf(
      [&comps](double x) {
        double v = 0.0;
        for (const auto& c : comps) v += c.weight * gaussian_pdf(x, c.mean, c.std);
        return v;
      },
      grid);
}

Moments density_moments(const BinDensity& density) {
  const BinGrid& g = density.grid;
  const double h = g.h();
  Moments m;
  for (int k = 0; k < g.k_bins; ++k) m.mean += density.w[k] * h * g.center(k);
  for (int k = 0; k < g.k_bins; ++k) {
    const double d = g.center(k) - m.mean;
    m.var += density.w[k] * h * d * d;
  }
  return m;
}

InitialDistribution InitialDistribution::gaussian(double mean, double std) {
  if (!(std > 0.0)) throw ParamError("gaussian std must be positive");
  InitialDistribution d;
  d.components = {{1.0, mean, std}};
  return d;
}

InitialDistribution InitialDistribution::mixture(std::vector<GaussianComponent> comps) {
  if (comps.empty()) throw ParamError("mixture needs at least one component");
  double wsum = 0.0;
  for (const auto& c : comps) {
    if (!(c.weight > 0.0)) throw ParamError("mixture weights must be positive");
    if (!(c.std > 0.0)) throw ParamError("mixture stds must be positive");
    wsum += c.weight;
  }
  if (std::abs(wsum - 1.0) > 1e-12) throw ParamError("mixture weights must sum to 1");
  InitialDistribution d;
  d.components = std::move(comps);
  return d;
}

InitialDistribution InitialDistribution::from_bin(BinDensity density) {
  validate(density);
  InitialDistribution d;
  d.bin = std::move(density);
  return d;
}

double InitialDistribution::pdf(double x) const {
  if (bin) {
    const BinGrid& g = bin->grid;
    if (x < g.lo || x > g.hi) return 0.0;
    return bin->w[g.bin_index(x)];
  }
  double v = 0.0;
  for (const auto& c : components) v += c.weight * gaussian_pdf(x, c.mean, c.std);
  return v;
}

double InitialDistribution::cdf(double x) const {
  if (bin) {
    const BinGrid& g = bin->grid;
    if (x <= g.lo) return 0.0;
    if (x >= g.hi) return 1.0;
    const int k = g.bin_index(x);
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += bin->w[j] * g.h();
    return acc + bin->w[k] * (x - g.edge(k));
  }
  double v = 0.0;
  for (const auto& c : components) v += c.weight * gaussian_cdf(x, c.mean, c.std);
  return v;
}

Moments InitialDistribution::exact_moments() const {
  if (bin) return density_moments(*bin);
  Moments m;
  double second = 0.0;
  for (const auto& c : components) {
    m.mean += c.weight * c.mean;
    second += c.weight * (c.mean * c.mean + c.std * c.std);
  }
  m.var = second - m.mean * m.mean;
  return m;
}

BinDensity bin_density_from_initial(const InitialDistribution& dist, const BinGrid& grid) {
  validate(grid);
  if (dist.bin && dist.bin->grid == grid) return *dist.bin;
  BinDensity d{grid, VectorXd(grid.k_bins)};
  double prev = 0.0;  // cdf at the previous edge; lower tail lands in bin 0
  for (int k = 0; k < grid.k_bins; ++k) {
    const double next = (k == grid.k_bins - 1) ? 1.0 : dist.cdf(grid.edge(k + 1));
    d.w[k] = (next - prev) / grid.h();
    prev = next;
  }
  d.w = d.w.cwiseMax(0.0);
  d.w /= d.w.sum() * grid.h();
  return d;
}

double sample_initial(const InitialDistribution& dist, RngStream& rng) {
  if (dist.bin) {
    VectorXd one(1);
    sample_inverse_transform(*dist.bin, one, rng);
    return one[0];
  }
  double u = rng.uniform01();
  const GaussianComponent* pick = &dist.components.back();
  for (const auto& c : dist.components) {
    if (u < c.weight) {
      pick = &c;
      break;
    }
    u -= c.weight;
  }
  return pick->mean + pick->std * rng.normal();
}

}  // namespace mfc
