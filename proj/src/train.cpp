#include "mfc/train.hpp"

#include <cmath>
#include <thread>

#include "mfc/errors.hpp"

namespace mfc {

void validate(const TrainConfig& cfg) {
  if (cfg.m_batch < 1) throw ConfigError("m_batch must be >= 1");
  if (cfg.n_particles < 1) throw ConfigError("n_particles must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg.k_bins < 1) throw ConfigError("k_bins must be >= 1");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  validate(cfg.grid);
}

double scheduled_lr(const TrainConfig& cfg, double base_lr, int epoch) {
  if (cfg.lr_decay_every <= 0 || cfg.lr_decay == 1.0) return base_lr;
  return base_lr * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_every);
}

BinGrid training_grid(const ProblemSpec& spec, const TrainConfig& cfg) {
  return BinGrid{spec.domain_lo, spec.domain_hi, cfg.k_bins};
}

MeanFieldNet make_net(const TrainConfig& cfg, int output_dim, bool time_input,
                      std::uint64_t seed) {
  if (cfg.net.variant == MfVariant::Bin)
    return make_bin_net(cfg.k_bins, cfg.net.hidden, output_dim, time_input, seed);
  return make_cylindrical_net(cfg.net.latent_dim, cfg.net.hidden, output_dim, time_input, seed);
}

PolicyView policy_of(const MeanFieldNet& net) {
  return [&net](int) -> const MeanFieldNet& { return net; };
}

PolicyView policy_of(const std::vector<MeanFieldNet>& nets) {
  return [&nets](int step) -> const MeanFieldNet& { return nets[step]; };
}

void rollout_policy(const PolicyView& policy, const std::vector<BinDensity>& mu0, int n_particles,
                    const TimeGrid& grid, const ProblemSpec& spec, std::uint64_t seed,
                    std::uint64_t epoch_key, TrajectoryBatch& out,
                    std::vector<std::vector<MfContext>>* contexts) {
  // Same loop as rollout_controlled with a per-step network choice.
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
    path.x.resize(nt + 1);
    path.a.resize(nt);
    path.dw.resize(nt);
    path.mu_hat.resize(nt + 1);
    path.mu_mom.resize(nt + 1);
    path.boundary_clamped = false;
    for (int i = 0; i <= nt; ++i) path.x[i].resize(1, n_particles);
    for (int i = 0; i < nt; ++i) {
      path.a[i].resize(1, n_particles);
      path.dw[i].resize(1, n_particles);
    }
    if (contexts) (*contexts)[m].resize(nt);

    RngStream rng = RngStream::substream(seed, {epoch_key, static_cast<std::uint64_t>(m)});
    Eigen::Map<Eigen::VectorXd> x0(path.x[0].data(), n_particles);
    sample_inverse_transform(mu0[m], x0, rng);
    path.mu_hat[0] = mu0[m];
    path.mu_mom[0] = density_moments(mu0[m]);

    MfContext local_ctx;
    for (int i = 0; i < nt; ++i) {
      const MeanFieldNet& control = policy(i);
      MfContext& ctx = contexts ? (*contexts)[m][i] : local_ctx;
      const double t = grid.time(i);
      if (control.variant == MfVariant::Bin)
        mf_context_from_density(control, t, path.mu_hat[i], ctx);
      else
        mf_context_from_samples(
            control, t, Eigen::Map<const Eigen::VectorXd>(path.x[i].data(), n_particles), ctx);
      mf_eval_batch(control, path.x[i], ctx);
      path.a[i] = mf_output(ctx);

      for (int n = 0; n < n_particles; ++n) path.dw[i](0, n) = sqrt_dt * rng.normal();
      const double mu_bar = path.mu_mom[i].mean;
      for (int n = 0; n < n_particles; ++n) {
        const double x = path.x[i](0, n);
        const double a = path.a[i](0, n);
        path.x[i + 1](0, n) =
            x + spec.drift(x, mu_bar, a) * dt + spec.vol(x, mu_bar, a) * path.dw[i](0, n);
      }
      if (!path.x[i + 1].allFinite())
        throw SimulationDiverged("non-finite particle at step " + std::to_string(i + 1));
      BinDensity& d = path.mu_hat[i + 1];
      d.grid = mu0[m].grid;
      estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(path.x[i + 1].data(), n_particles),
                           d.grid, d.w);
      path.mu_mom[i + 1] = density_moments(d);
      const auto row = Eigen::Map<const Eigen::VectorXd>(path.x[i + 1].data(), n_particles);
      if (row.minCoeff() < d.grid.lo || row.maxCoeff() > d.grid.hi) path.boundary_clamped = true;
    }
  }
}

double evaluate_policy_cost(const PolicyView& policy, const ProblemSpec& spec,
                            const TrainConfig& cfg, const InitialDistribution& mu0,
                            const EvalConfig& eval) {
  const BinDensity d = bin_density_from_initial(mu0, training_grid(spec, cfg));
  TrajectoryBatch batch;
  rollout_policy(policy, {d}, eval.n_particles, cfg.grid, spec, eval.seed, 0xe7a1u, batch);
  return cost_estimate(batch, spec);
}

double evaluate_net_expectation(const MeanFieldNet& net, double t, const ProblemSpec& spec,
                                const TrainConfig& cfg, const InitialDistribution& mu0,
                                const EvalConfig& eval, int row) {
  const BinDensity d = bin_density_from_initial(mu0, training_grid(spec, cfg));
  RngStream rng = RngStream::substream(eval.seed, {0xe7a2u});
  Eigen::MatrixXd x(1, eval.n_particles);
  Eigen::Map<Eigen::VectorXd> xv(x.data(), eval.n_particles);
  sample_inverse_transform(d, xv, rng);

  MfContext ctx;
  if (net.variant == MfVariant::Bin)
    mf_context_from_density(net, t, d, ctx);
  else
    mf_context_from_samples(net, t, xv, ctx);
  mf_eval_batch(net, x, ctx);
  return mf_output(ctx).row(row).mean();
}

void parallel_for_m(int m_count, int threads, const std::function<void(int m, int slot)>& fn) {
  if (threads <= 1 || m_count <= 1) {
    for (int m = 0; m < m_count; ++m) fn(m, 0);
    return;
  }
  const int n_workers = std::min(threads, m_count);
  std::vector<std::thread> pool;
  pool.reserve(n_workers);
  for (int w = 0; w < n_workers; ++w)
    pool.emplace_back([&, w]() {
      for (int m = w; m < m_count; m += n_workers) fn(m, w);
    });
  for (auto& th : pool) th.join();
}

}  // namespace mfc
