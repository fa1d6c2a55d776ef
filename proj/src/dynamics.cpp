#include "mfc/dynamics.hpp"

#include <cmath>
#include <string>

#include "mfc/errors.hpp"

namespace mfc {

void validate(const TimeGrid& grid) {
  if (grid.n_steps < 1) throw ParamError("time grid needs at least one step");
  if (!(grid.horizon > 0.0)) throw ParamError("time grid needs a positive horizon");
}

double euler_step(double x, double mu_bar, double a, double dw, const ProblemSpec& spec,
                  double dt) {
  const double next = x + spec.drift(x, mu_bar, a) * dt + spec.vol(x, mu_bar, a) * dw;
  if (!std::isfinite(next)) throw SimulationDiverged("euler_step produced a non-finite state");
  return next;
}

namespace {

void size_path(TrajectoryBatch::Path& path, const BinGrid& grid, int n_steps, int n, bool with_a,
               bool with_y) {
  path.x.resize(n_steps + 1);
  path.dw.resize(n_steps);
  path.a.resize(with_a ? n_steps : 0);
  path.y.resize(with_y ? n_steps + 1 : 0);
  path.mu_hat.resize(n_steps + 1);
  path.mu_mom.resize(n_steps + 1);
  for (int i = 0; i <= n_steps; ++i) {
    path.x[i].resize(1, n);
    if (with_y) path.y[i].resize(2, n);
    path.mu_hat[i].grid = grid;
    path.mu_hat[i].w.resize(grid.k_bins);
  }
  for (int i = 0; i < n_steps; ++i) {
    path.dw[i].resize(1, n);
    if (with_a) path.a[i].resize(1, n);
  }
  path.boundary_clamped = false;
}

void estimate_step_density(TrajectoryBatch::Path& path, int i) {
  BinDensity& d = path.mu_hat[i];
  const Eigen::Map<const Eigen::VectorXd> row(path.x[i].data(), path.x[i].cols());
  estimate_bin_density(row, d.grid, d.w);
  path.mu_mom[i] = density_moments(d);
  if (row.minCoeff() < d.grid.lo || row.maxCoeff() > d.grid.hi) path.boundary_clamped = true;
}

void fill_increments(Eigen::MatrixXd& dw, double sqrt_dt, RngStream& rng) {
  for (Eigen::Index j = 0; j < dw.cols(); ++j) dw(0, j) = sqrt_dt * rng.normal();
}

void check_finite(const Eigen::MatrixXd& x, int step) {
  if (!x.allFinite())
    throw SimulationDiverged("non-finite particle at step " + std::to_string(step));
}

}  // namespace

void rollout_controlled(const MeanFieldNet& control, const std::vector<BinDensity>& mu0,
                        int n_particles, const TimeGrid& grid, const ProblemSpec& spec,
                        std::uint64_t seed, std::uint64_t epoch_key, TrajectoryBatch& out,
                        std::vector<std::vector<MfContext>>* contexts) {
  validate(grid);
  const int m_batch = static_cast<int>(mu0.size());
  const int nt = grid.n_steps;
  const double dt = grid.dt();
  const double sqrt_dt = std::sqrt(dt);

  out.grid = grid;
  out.n_particles = n_particles;
  out.paths.resize(m_batch);
  if (contexts) contexts->resize(m_batch);

  for (int m = 0; m < m_batch; ++m) {
    TrajectoryBatch::Path& path = out.paths[m];
    size_path(path, mu0[m].grid, nt, n_particles, /*with_a=*/true, /*with_y=*/false);
    if (contexts) (*contexts)[m].resize(nt);

    RngStream rng = RngStream::substream(seed, {epoch_key, static_cast<std::uint64_t>(m)});
    Eigen::Map<Eigen::VectorXd> x0(path.x[0].data(), n_particles);
    sample_inverse_transform(mu0[m], x0, rng);
    path.mu_hat[0] = mu0[m];
    path.mu_mom[0] = density_moments(mu0[m]);

    MfContext local_ctx;
    for (int i = 0; i < nt; ++i) {
      MfContext& ctx = contexts ? (*contexts)[m][i] : local_ctx;
      const double t = grid.time(i);
      if (control.variant == MfVariant::Bin)
        mf_context_from_density(control, t, path.mu_hat[i], ctx);
      else
        mf_context_from_samples(
            control, t, Eigen::Map<const Eigen::VectorXd>(path.x[i].data(), n_particles), ctx);
      mf_eval_batch(control, path.x[i], ctx);
      path.a[i] = mf_output(ctx);

      fill_increments(path.dw[i], sqrt_dt, rng);
      const double mu_bar = path.mu_mom[i].mean;
      for (int n = 0; n < n_particles; ++n) {
        const double x = path.x[i](0, n);
        const double a = path.a[i](0, n);
        path.x[i + 1](0, n) =
            x + spec.drift(x, mu_bar, a) * dt + spec.vol(x, mu_bar, a) * path.dw[i](0, n);
      }
      check_finite(path.x[i + 1], i + 1);
      estimate_step_density(path, i + 1);
    }
  }
}

double cost_estimate(const TrajectoryBatch& batch, const ProblemSpec& spec) {
  const double dt = batch.grid.dt();
  double total = 0.0;
  for (const auto& path : batch.paths) {
    for (int i = 0; i < batch.grid.n_steps; ++i) {
      const double mu_bar = path.mu_mom[i].mean;
      for (int n = 0; n < batch.n_particles; ++n)
        total += spec.run_cost(path.x[i](0, n), mu_bar, path.a[i](0, n)) * dt;
    }
    const double mu_T = path.mu_mom[batch.grid.n_steps].mean;
    for (int n = 0; n < batch.n_particles; ++n)
      total += spec.term_cost(path.x[batch.grid.n_steps](0, n), mu_T);
  }
  return total / (static_cast<double>(batch.paths.size()) * batch.n_particles);
}

void rollout_bsde_forward(const BsdeStack& stack, const std::vector<BinDensity>& mu0,
                          int n_particles, const TimeGrid& grid, const BsdeSpec& bspec,
                          std::uint64_t seed, std::uint64_t epoch_key, TrajectoryBatch& out) {
  validate(grid);
  const int m_batch = static_cast<int>(mu0.size());
  const int nt = grid.n_steps;
  const double dt = grid.dt();
  const double sqrt_dt = std::sqrt(dt);

  out.grid = grid;
  out.n_particles = n_particles;
  out.paths.resize(m_batch);

  Eigen::MatrixXd z_val(2, n_particles);
  for (int m = 0; m < m_batch; ++m) {
    TrajectoryBatch::Path& path = out.paths[m];
    size_path(path, mu0[m].grid, nt, n_particles, /*with_a=*/false, /*with_y=*/true);

    RngStream rng = RngStream::substream(seed, {epoch_key, static_cast<std::uint64_t>(m)});
    Eigen::Map<Eigen::VectorXd> x0(path.x[0].data(), n_particles);
    sample_inverse_transform(mu0[m], x0, rng);
    path.mu_hat[0] = mu0[m];
    path.mu_mom[0] = density_moments(mu0[m]);

    stack.y_at(0, 0.0, path.x[0], path.mu_hat[0], path.y[0]);
    for (int i = 0; i < nt; ++i) {
      const double t = grid.time(i);
      if (!stack.carry_y && i > 0) stack.y_at(i, t, path.x[i], path.mu_hat[i], path.y[i]);

      fill_increments(path.dw[i], sqrt_dt, rng);
      const CloudMoments mom = cloud_moments(
          Eigen::Map<const Eigen::VectorXd>(path.x[i].data(), n_particles),
          path.y[i].row(1).transpose());
      for (int n = 0; n < n_particles; ++n) {
        const double x = path.x[i](0, n);
        path.x[i + 1](0, n) = x + bspec.forward_drift(x, mom.mu_bar, path.y[i].col(n)) * dt +
                              bspec.vol(x, mom.mu_bar) * path.dw[i](0, n);
      }
      check_finite(path.x[i + 1], i + 1);
      estimate_step_density(path, i + 1);

      if (stack.carry_y) {
        stack.z_at(i, t, path.x[i], path.mu_hat[i], z_val);
        for (int n = 0; n < n_particles; ++n) {
          const Vec2 drift = bspec.driver(path.x[i](0, n), path.y[i].col(n), z_val.col(n),
                                          mom.mu_bar, mom.p_bar);
          path.y[i + 1].col(n) =
              path.y[i].col(n) + drift * dt + z_val.col(n) * path.dw[i](0, n);
        }
        check_finite(path.y[i + 1], i + 1);
      }
    }
    if (!stack.carry_y)
      stack.y_at(nt, grid.horizon, path.x[nt], path.mu_hat[nt], path.y[nt]);
  }
}

}  // namespace mfc
