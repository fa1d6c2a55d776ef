#include "mfc/bsde_solvers.hpp"

#include <cmath>

#include "mfc/errors.hpp"

namespace mfc {

namespace {

constexpr std::uint64_t kTagLocal = 0xb4u;
constexpr std::uint64_t kTagMulti = 0xb5u;
constexpr std::uint64_t kTagGlobal = 0xb6u;
constexpr std::uint64_t kTagGlobalLocal = 0xb7u;
constexpr std::uint64_t kTagGlobalMulti = 0xb8u;
constexpr std::uint64_t kTagRegress = 0xb9u;
constexpr std::uint64_t kTagInit = 0x2727u;
constexpr std::uint64_t kTagLoss = 0x3737u;

using Eigen::MatrixXd;

void eval_net_at(const MeanFieldNet& net, double t, const MatrixXd& x, const BinDensity& mu_hat,
                 MfContext& ctx, MatrixXd& out) {
  if (net.variant == MfVariant::Bin)
    mf_context_from_density(net, t, mu_hat, ctx);
  else
    mf_context_from_samples(net, t, Eigen::Map<const Eigen::VectorXd>(x.data(), x.cols()), ctx);
  mf_eval_batch(net, x, ctx);
  out = mf_output(ctx);
}

void fill_terminal(const BsdeSpec& bspec, const MatrixXd& x, MatrixXd& out) {
  const int n = static_cast<int>(x.cols());
  const double mu = x.row(0).mean();
  out.resize(2, n);
  for (int k = 0; k < n; ++k) out.col(k) = bspec.terminal(x(0, k), mu);
}

/// Per-worker scratch shared by all BSDE objectives.
struct BsdeScratch {
  std::vector<MatrixXd> x, dw, yv, zv;
  std::vector<MfContext> ctx_y, ctx_z;
  std::vector<BinDensity> mu_hat;
  std::vector<double> mu_bar, p_bar;
  std::vector<MatrixXd> resid;
  MatrixXd lambda, lambda_new, yup, zup, gx, gcloud, xt, yvt;
  MfContext ctx_next, ctx_yt;

  void resize_path(const BinGrid& grid, int steps, int n) {
    x.resize(steps + 1);
    dw.resize(steps);
    yv.resize(steps + 1);
    zv.resize(steps);
    ctx_y.resize(steps + 1);
    ctx_z.resize(steps);
    mu_hat.resize(steps + 1);
    mu_bar.assign(steps + 1, 0.0);
    p_bar.assign(steps + 1, 0.0);
    resid.resize(steps);
    for (int j = 0; j <= steps; ++j) {
      x[j].resize(1, n);
      mu_hat[j].grid = grid;
      mu_hat[j].w.resize(grid.k_bins);
    }
    for (int j = 0; j < steps; ++j) dw[j].resize(1, n);
    lambda.resize(1, n);
    lambda_new.resize(1, n);
    gx.resize(1, n);
    gcloud.resize(1, n);
  }
};

/// Chain of the driver arguments: `cw` is dL/d(driver value) per particle
/// (2 x N, the -dt * upstream weights folded in by the caller). Adds the
/// y-argument and P-bar chains into dYup and the explicit-x and mu-bar chains
/// into lambda.
void driver_chain(const BsdeSpec& b, const MatrixXd& x, const MatrixXd& yv, double mu_bar,
                  const MatrixXd& cw, MatrixXd& dYup, MatrixXd& lambda) {
  const int n = static_cast<int>(x.cols());
  double mu_acc = 0.0, pbar_acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const Vec2 c = cw.col(k);
    const Vec2 y = yv.col(k);
    const double xk = x(0, k);
    dYup.col(k).noalias() += b.driver_dy(xk, y, mu_bar).transpose() * c;
    lambda(0, k) += c.dot(b.driver_dx(xk, y, mu_bar));
    mu_acc += c.dot(b.driver_dmu(xk, y, mu_bar));
    pbar_acc += c.dot(b.driver_dpbar);
  }
  lambda.array() += mu_acc / n;
  dYup.row(1).array() += pbar_acc / n;
}

/// Adjoint transition through X_{j+1} = X_j + B dt + sigma dW (sigma constant
/// in x for every carried BSDE form): lambda_j from lambda_{j+1}, plus the
/// Y-argument chain of the drift into dYup_j.
void dynamics_chain(const BsdeSpec& b, double dt, const MatrixXd& lambda_next, MatrixXd& lambda_j,
                    MatrixXd& dYup_j) {
  const int n = static_cast<int>(lambda_next.cols());
  lambda_j = lambda_next * (1.0 + b.fdrift_dx * dt);
  lambda_j.array() += lambda_next.sum() * b.fdrift_dmu * dt / n;
  dYup_j.row(0).noalias() += lambda_next * (b.fdrift_dy[0] * dt);
  dYup_j.row(1).noalias() += lambda_next * (b.fdrift_dy[1] * dt);
}

/// dL/dX at the terminal time through G: uw = dL/dG per particle (2 x N).
void terminal_chain(const BsdeSpec& b, const MatrixXd& x, const MatrixXd& uw, MatrixXd& lambda) {
  const int n = static_cast<int>(x.cols());
  const double mu = x.row(0).mean();
  lambda.resize(1, n);
  double mu_acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const Vec2 u = uw.col(k);
    lambda(0, k) = u.dot(b.terminal_dx(x(0, k), mu));
    mu_acc += u.dot(b.terminal_dmu(x(0, k), mu));
  }
  lambda.array() += mu_acc / n;
}

/// Reverse pass through one network evaluation: param grads into `params`
/// (when trainable) and x/latent grads added to `lambda` (when the inputs are
/// path-dependent).
void net_backward(const MeanFieldNet& net, const MatrixXd& x, const MfContext& ctx,
                  const MatrixXd& upstream, double* params, MatrixXd* lambda, BsdeScratch& ws) {
  if (!params && !lambda) return;
  MfGradSink sink;
  sink.params = params;
  sink.x = lambda ? &ws.gx : nullptr;
  sink.cloud_x = (lambda && net.variant == MfVariant::Cylindrical) ? &ws.gcloud : nullptr;
  mf_grad_batch(net, x, ctx, upstream, sink);
  if (lambda) {
    *lambda += ws.gx;
    if (net.variant == MfVariant::Cylindrical) *lambda += ws.gcloud;
  }
}

double squared_norm_cols(const MatrixXd& r) { return r.squaredNorm(); }

// ---------------------------------------------------------------------------
// Deep backward algorithm: one-step local objective at a stage
// ---------------------------------------------------------------------------

struct StageParams {
  double* grad_y = nullptr;
  double* grad_z = nullptr;
};

double local_stage_batch(const std::vector<BsdeStageNets>& nets, int stage,
                         const ProblemSpec& spec, const BsdeSpec& bspec, const TrainConfig& cfg,
                         std::uint64_t epoch, int m, BsdeScratch& ws, const StageParams& out) {
  const int n = cfg.n_particles;
  const double dt = cfg.grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const int nt = cfg.grid.n_steps;
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const BinGrid grid = training_grid(spec, cfg);

  RngStream rng = RngStream::substream(
      cfg.seed, {mix64(kTagLocal + static_cast<std::uint64_t>(stage)), epoch,
                 static_cast<std::uint64_t>(m)});
  ws.resize_path(grid, 1, n);
  const BinDensity mu = random_training_density(grid, rng);
  Eigen::Map<Eigen::VectorXd> x0(ws.x[0].data(), n);
  sample_inverse_transform(mu, x0, rng);
  ws.mu_hat[0] = mu;

  const double t = cfg.grid.time(stage);
  const MeanFieldNet& ynet = nets[stage].y;
  const MeanFieldNet& znet = nets[stage].z;
  eval_net_at(ynet, t, ws.x[0], mu, ws.ctx_y[0], ws.yv[0]);
  eval_net_at(znet, t, ws.x[0], mu, ws.ctx_z[0], ws.zv[0]);

  // tilde cloud: the same particles by default, a disjoint draw on request
  double mu_bar, p_bar;
  const bool disjoint = cfg.disjoint_tilde;
  if (disjoint) {
    ws.xt.resize(1, n);
    Eigen::Map<Eigen::VectorXd> xt(ws.xt.data(), n);
    sample_inverse_transform(mu, xt, rng);
    eval_net_at(ynet, t, ws.xt, mu, ws.ctx_yt, ws.yvt);
    mu_bar = ws.xt.row(0).mean();
    p_bar = ws.yvt.row(1).mean();
  } else {
    mu_bar = ws.x[0].row(0).mean();
    p_bar = ws.yv[0].row(1).mean();
  }

  for (int k = 0; k < n; ++k) ws.dw[0](0, k) = sqrt_dt * rng.normal();
  for (int k = 0; k < n; ++k) {
    const double xk = ws.x[0](0, k);
    ws.x[1](0, k) = xk + bspec.forward_drift(xk, mu_bar, ws.yv[0].col(k)) * dt +
                    bspec.vol(xk, mu_bar) * ws.dw[0](0, k);
  }
  if (!ws.x[1].allFinite()) throw SimulationDiverged("bsde local stage particle diverged");
  estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(ws.x[1].data(), n), grid,
                       ws.mu_hat[1].w);

  // frozen next target
  const bool terminal = (stage + 1 == nt);
  if (terminal)
    fill_terminal(bspec, ws.x[1], ws.yv[1]);
  else
    eval_net_at(nets[stage + 1].y, cfg.grid.time(stage + 1), ws.x[1], ws.mu_hat[1], ws.ctx_next,
                ws.yv[1]);

  MatrixXd& r = ws.resid[0];
  r.resize(2, n);
  for (int k = 0; k < n; ++k) {
    const Vec2 drv = bspec.driver(ws.x[0](0, k), ws.yv[0].col(k), ws.zv[0].col(k), mu_bar, p_bar);
    r.col(k) = ws.yv[1].col(k) - ws.yv[0].col(k) - ws.zv[0].col(k) * ws.dw[0](0, k) - drv * dt;
  }
  const double loss = w * squared_norm_cols(r);
  if (!out.grad_y) return loss;

  const MatrixXd u = 2.0 * w * r;

  // dL/dX_{i+1} through the frozen target
  if (terminal) {
    terminal_chain(bspec, ws.x[1], u, ws.lambda);
  } else {
    ws.lambda.setZero(1, n);
    net_backward(nets[stage + 1].y, ws.x[1], ws.ctx_next, u, nullptr, &ws.lambda, ws);
  }

  // upstream into the stage Y evaluation at X_i
  ws.yup = -u;
  ws.yup.row(0).noalias() += ws.lambda * (bspec.fdrift_dy[0] * dt);
  ws.yup.row(1).noalias() += ws.lambda * (bspec.fdrift_dy[1] * dt);
  ws.lambda_new.setZero(1, n);  // X_i is sampled: its adjoint is unused
  if (disjoint) {
    // P-bar flows into the tilde evaluations; mu-bar is a constant draw
    MatrixXd yup_t = MatrixXd::Zero(2, n);
    double pbar_acc = 0.0;
    for (int k = 0; k < n; ++k) {
      const Vec2 c = -dt * u.col(k);
      ws.yup.col(k).noalias() +=
          bspec.driver_dy(ws.x[0](0, k), ws.yv[0].col(k), mu_bar).transpose() * c;
      pbar_acc += c.dot(bspec.driver_dpbar);
    }
    yup_t.row(1).array() += pbar_acc / n;
    net_backward(ynet, ws.xt, ws.ctx_yt, yup_t, out.grad_y, nullptr, ws);
  } else {
    driver_chain(bspec, ws.x[0], ws.yv[0], mu_bar, (-dt) * u, ws.yup, ws.lambda_new);
  }

  ws.zup = u;
  ws.zup.row(0).array() *= -ws.dw[0].row(0).array();
  ws.zup.row(1).array() *= -ws.dw[0].row(0).array();

  net_backward(ynet, ws.x[0], ws.ctx_y[0], ws.yup, out.grad_y, nullptr, ws);
  net_backward(znet, ws.x[0], ws.ctx_z[0], ws.zup, out.grad_z, nullptr, ws);
  return loss;
}

// ---------------------------------------------------------------------------
// Shared forward path for the multi-step and global objectives
// ---------------------------------------------------------------------------

/// Rolls the cloud from `start` to N_T with the Y value at step j supplied by
/// `y_net(j)` and Z by `z_net(j)` (a null y_net(j) is invalid; z values are
/// evaluated but unused by the drift). Fills x, dw, yv, zv, mu_hat, moments;
/// yv[nt] holds G.
template <typename YNetAt, typename ZNetAt>
void forward_path(const YNetAt& y_net, const ZNetAt& z_net, int start, const BinDensity& mu_start,
                  const ProblemSpec& spec, const BsdeSpec& bspec, const TrainConfig& cfg,
                  RngStream& rng, BsdeScratch& ws) {
  const int n = cfg.n_particles;
  const int nt = cfg.grid.n_steps;
  const double dt = cfg.grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const BinGrid grid = training_grid(spec, cfg);
  const int steps = nt - start;
  ws.resize_path(grid, steps, n);

  Eigen::Map<Eigen::VectorXd> x0(ws.x[0].data(), n);
  sample_inverse_transform(mu_start, x0, rng);
  ws.mu_hat[0] = mu_start;

  for (int j = 0; j < steps; ++j) {
    const int i = start + j;
    const double t = cfg.grid.time(i);
    eval_net_at(*y_net(i), t, ws.x[j], ws.mu_hat[j], ws.ctx_y[j], ws.yv[j]);
    eval_net_at(*z_net(i), t, ws.x[j], ws.mu_hat[j], ws.ctx_z[j], ws.zv[j]);
    ws.mu_bar[j] = ws.x[j].row(0).mean();
    ws.p_bar[j] = ws.yv[j].row(1).mean();

    for (int k = 0; k < n; ++k) ws.dw[j](0, k) = sqrt_dt * rng.normal();
    for (int k = 0; k < n; ++k) {
      const double xk = ws.x[j](0, k);
      ws.x[j + 1](0, k) = xk + bspec.forward_drift(xk, ws.mu_bar[j], ws.yv[j].col(k)) * dt +
                          bspec.vol(xk, ws.mu_bar[j]) * ws.dw[j](0, k);
    }
    if (!ws.x[j + 1].allFinite()) throw SimulationDiverged("bsde path particle diverged");
    estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(ws.x[j + 1].data(), n), grid,
                         ws.mu_hat[j + 1].w);
  }
  fill_terminal(bspec, ws.x[steps], ws.yv[steps]);
  ws.mu_bar[steps] = ws.x[steps].row(0).mean();
}

Vec2 driver_at(const BsdeSpec& bspec, const BsdeScratch& ws, int j, int k) {
  return bspec.driver(ws.x[j](0, k), ws.yv[j].col(k), ws.zv[j].col(k), ws.mu_bar[j],
                      ws.p_bar[j]);
}

// ---------------------------------------------------------------------------
// Multi-step backward stage objective
// ---------------------------------------------------------------------------

double multistep_stage_batch(const std::vector<BsdeStageNets>& nets, int stage,
                             const ProblemSpec& spec, const BsdeSpec& bspec,
                             const TrainConfig& cfg, std::uint64_t epoch, int m, BsdeScratch& ws,
                             const StageParams& out) {
  const int n = cfg.n_particles;
  const int nt = cfg.grid.n_steps;
  const double dt = cfg.grid.dt();
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const BinGrid grid = training_grid(spec, cfg);

  RngStream rng = RngStream::substream(
      cfg.seed, {mix64(kTagMulti + static_cast<std::uint64_t>(stage)), epoch,
                 static_cast<std::uint64_t>(m)});
  const BinDensity mu = random_training_density(grid, rng);
  auto y_at = [&](int i) { return &nets[i].y; };
  auto z_at = [&](int i) { return &nets[i].z; };
  forward_path(y_at, z_at, stage, mu, spec, bspec, cfg, rng, ws);
  const int steps = nt - stage;

  // single telescoped residual
  MatrixXd& r = ws.resid[0];
  r = ws.yv[steps];  // G
  for (int j = 0; j < steps; ++j)
    for (int k = 0; k < n; ++k)
      r.col(k) -= ws.zv[j].col(k) * ws.dw[j](0, k) + driver_at(bspec, ws, j, k) * dt;
  r -= ws.yv[0];
  const double loss = w * squared_norm_cols(r);
  if (!out.grad_y) return loss;

  const MatrixXd u = 2.0 * w * r;
  terminal_chain(bspec, ws.x[steps], u, ws.lambda);

  for (int j = steps - 1; j >= 0; --j) {
    const int i = stage + j;
    const bool train_here = (j == 0);
    ws.yup.setZero(2, n);
    dynamics_chain(bspec, dt, ws.lambda, ws.lambda_new, ws.yup);
    driver_chain(bspec, ws.x[j], ws.yv[j], ws.mu_bar[j], (-dt) * u, ws.yup, ws.lambda_new);
    if (train_here) ws.yup -= u;

    ws.zup = u;
    ws.zup.row(0).array() *= -ws.dw[j].row(0).array();
    ws.zup.row(1).array() *= -ws.dw[j].row(0).array();

    MatrixXd* lam = train_here ? nullptr : &ws.lambda_new;
    net_backward(nets[i].y, ws.x[j], ws.ctx_y[j], ws.yup, train_here ? out.grad_y : nullptr, lam,
                 ws);
    net_backward(nets[i].z, ws.x[j], ws.ctx_z[j], ws.zup, train_here ? out.grad_z : nullptr, lam,
                 ws);
    ws.lambda.swap(ws.lambda_new);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Global objectives
// ---------------------------------------------------------------------------

double deep_mkv_global_batch(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                             const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t epoch,
                             int m, BsdeScratch& ws, const StageParams& out) {
  const int n = cfg.n_particles;
  const int nt = cfg.grid.n_steps;
  const double dt = cfg.grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const BinGrid grid = training_grid(spec, cfg);

  RngStream rng =
      RngStream::substream(cfg.seed, {kTagGlobal, epoch, static_cast<std::uint64_t>(m)});
  const BinDensity mu = random_training_density(grid, rng);
  ws.resize_path(grid, nt, n);
  Eigen::Map<Eigen::VectorXd> x0(ws.x[0].data(), n);
  sample_inverse_transform(mu, x0, rng);
  ws.mu_hat[0] = mu;

  // carried Y from the initial-value net; Z evaluated per step
  eval_net_at(nets.y, 0.0, ws.x[0], mu, ws.ctx_y[0], ws.yv[0]);
  for (int j = 0; j < nt; ++j) {
    const double t = cfg.grid.time(j);
    eval_net_at(nets.z, t, ws.x[j], ws.mu_hat[j], ws.ctx_z[j], ws.zv[j]);
    ws.mu_bar[j] = ws.x[j].row(0).mean();
    ws.p_bar[j] = ws.yv[j].row(1).mean();
    for (int k = 0; k < n; ++k) ws.dw[j](0, k) = sqrt_dt * rng.normal();
    ws.yv[j + 1].resize(2, n);
    for (int k = 0; k < n; ++k) {
      const double xk = ws.x[j](0, k);
      ws.x[j + 1](0, k) = xk + bspec.forward_drift(xk, ws.mu_bar[j], ws.yv[j].col(k)) * dt +
                          bspec.vol(xk, ws.mu_bar[j]) * ws.dw[j](0, k);
      ws.yv[j + 1].col(k) = ws.yv[j].col(k) + driver_at(bspec, ws, j, k) * dt +
                            ws.zv[j].col(k) * ws.dw[j](0, k);
    }
    if (!ws.x[j + 1].allFinite() || !ws.yv[j + 1].allFinite())
      throw SimulationDiverged("deep MKV BSDE forward diverged");
    estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(ws.x[j + 1].data(), n), grid,
                         ws.mu_hat[j + 1].w);
  }
  MatrixXd& g = ws.resid[nt - 1];
  fill_terminal(bspec, ws.x[nt], g);
  MatrixXd r = ws.yv[nt] - g;
  const double loss = w * squared_norm_cols(r);
  if (!out.grad_y) return loss;

  const MatrixXd u = 2.0 * w * r;
  // kappa: adjoint of the carried Y; lambda: adjoint of X
  MatrixXd kappa = u;
  terminal_chain(bspec, ws.x[nt], u, ws.lambda);
  ws.lambda = -ws.lambda;  // loss holds Y_NT minus G

  for (int j = nt - 1; j >= 0; --j) {
    // dY_{j+1}/dY_j: identity + dt * driver_dy + pbar spread; drift chain
    ws.yup.setZero(2, n);
    dynamics_chain(bspec, dt, ws.lambda, ws.lambda_new, ws.yup);
    driver_chain(bspec, ws.x[j], ws.yv[j], ws.mu_bar[j], dt * kappa, ws.yup, ws.lambda_new);

    ws.zup.resize(2, n);
    ws.zup.row(0) = kappa.row(0).cwiseProduct(ws.dw[j].row(0));
    ws.zup.row(1) = kappa.row(1).cwiseProduct(ws.dw[j].row(0));
    net_backward(nets.z, ws.x[j], ws.ctx_z[j], ws.zup, out.grad_z,
                 j > 0 ? &ws.lambda_new : nullptr, ws);

    kappa += ws.yup;  // new kappa_j = kappa_{j+1} + chains
    ws.lambda.swap(ws.lambda_new);
  }
  net_backward(nets.y, ws.x[0], ws.ctx_y[0], kappa, out.grad_y, nullptr, ws);
  return loss;
}

template <bool Multistep>
double global_path_batch(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                         const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t epoch,
                         int m, BsdeScratch& ws, const StageParams& out) {
  const int n = cfg.n_particles;
  const int nt = cfg.grid.n_steps;
  const double dt = cfg.grid.dt();
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const BinGrid grid = training_grid(spec, cfg);

  RngStream rng = RngStream::substream(
      cfg.seed, {Multistep ? kTagGlobalMulti : kTagGlobalLocal, epoch,
                 static_cast<std::uint64_t>(m)});
  const BinDensity mu = random_training_density(grid, rng);
  auto y_at = [&](int) { return &nets.y; };
  auto z_at = [&](int) { return &nets.z; };
  forward_path(y_at, z_at, 0, mu, spec, bspec, cfg, rng, ws);

  double loss = 0.0;
  if constexpr (!Multistep) {
    // sum of one-step residuals; yv[nt] is G
    for (int j = 0; j < nt; ++j) {
      MatrixXd& r = ws.resid[j];
      r.resize(2, n);
      for (int k = 0; k < n; ++k)
        r.col(k) = ws.yv[j + 1].col(k) - ws.yv[j].col(k) -
                   ws.zv[j].col(k) * ws.dw[j](0, k) - driver_at(bspec, ws, j, k) * dt;
      loss += w * squared_norm_cols(r);
    }
  } else {
    // telescoped residuals: R_i = G - sum_{j >= i}(Z dW + drv dt) - Y_i,
    // built backward from the terminal
    MatrixXd acc = ws.yv[nt];
    for (int i = nt - 1; i >= 0; --i) {
      for (int k = 0; k < n; ++k)
        acc.col(k) -= ws.zv[i].col(k) * ws.dw[i](0, k) + driver_at(bspec, ws, i, k) * dt;
      ws.resid[i] = acc - ws.yv[i];
      loss += w * squared_norm_cols(ws.resid[i]);
    }
  }
  if (!out.grad_y) return loss;

  // u_j = 2w r_j; multistep uses prefix sums ubar_j = sum_{i<=j} u_i for the
  // step-j terms and the total sum on G
  for (int j = 0; j < nt; ++j) ws.resid[j] *= 2.0 * w;
  MatrixXd ubar = ws.resid[0];
  if constexpr (Multistep) {
    for (int j = 1; j < nt; ++j) ubar += ws.resid[j];
    terminal_chain(bspec, ws.x[nt], ubar, ws.lambda);
  } else {
    terminal_chain(bspec, ws.x[nt], ws.resid[nt - 1], ws.lambda);
  }

  // walking j downward, maintain ubar_j = sum_{i<=j} u_i
  for (int j = nt - 1; j >= 0; --j) {
    const MatrixXd& uj = ws.resid[j];
    const MatrixXd& wj = Multistep ? ubar : uj;

    ws.yup.setZero(2, n);
    dynamics_chain(bspec, dt, ws.lambda, ws.lambda_new, ws.yup);
    driver_chain(bspec, ws.x[j], ws.yv[j], ws.mu_bar[j], (-dt) * wj, ws.yup, ws.lambda_new);
    ws.yup -= uj;  // the -Y_j term lives in residual j only
    if constexpr (!Multistep) {
      if (j >= 1) ws.yup += ws.resid[j - 1];  // target term of residual j-1
    }

    ws.zup.resize(2, n);
    ws.zup.row(0) = -wj.row(0).cwiseProduct(ws.dw[j].row(0));
    ws.zup.row(1) = -wj.row(1).cwiseProduct(ws.dw[j].row(0));

    MatrixXd* lam = j > 0 ? &ws.lambda_new : nullptr;
    net_backward(nets.y, ws.x[j], ws.ctx_y[j], ws.yup, out.grad_y, lam, ws);
    net_backward(nets.z, ws.x[j], ws.ctx_z[j], ws.zup, out.grad_z, lam, ws);

    if constexpr (Multistep) ubar -= ws.resid[j];
    ws.lambda.swap(ws.lambda_new);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Objective drivers (batch reduction) and trainers
// ---------------------------------------------------------------------------

using BatchFn = std::function<double(std::uint64_t epoch, int m, BsdeScratch& ws,
                                     const StageParams& out)>;

double reduce_objective(const TrainConfig& cfg, std::uint64_t epoch, int ny, int nz,
                        std::vector<BsdeScratch>& slots, std::vector<VectorXd>& grad_m,
                        VectorXd* grad, const BatchFn& batch) {
  std::vector<double> loss_m(cfg.m_batch, 0.0);
  std::exception_ptr error;
  parallel_for_m(cfg.m_batch, cfg.threads, [&](int m, int slot) {
    try {
      StageParams out;
      if (grad) {
        grad_m[m].setZero(ny + nz);
        out.grad_y = grad_m[m].data();
        out.grad_z = grad_m[m].data() + ny;
      }
      loss_m[m] = batch(epoch, m, slots[slot], out);
    } catch (...) {
      error = std::current_exception();
    }
  });
  if (error) std::rethrow_exception(error);
  double loss = 0.0;
  for (int m = 0; m < cfg.m_batch; ++m) {
    loss += loss_m[m];
    if (grad) *grad += grad_m[m];
  }
  return loss;
}

int slot_count(const TrainConfig& cfg) { return std::min(cfg.threads, cfg.m_batch); }

void check_bsde_config(const ProblemSpec& spec, const TrainConfig& cfg, bool allow_disjoint) {
  validate(cfg);
  if (spec.vol_controlled)
    throw ConfigError("BSDE algorithms need an uncontrolled diffusion coefficient");
  if (cfg.disjoint_tilde && !allow_disjoint)
    throw ConfigError("disjoint tilde clouds are only supported by the deep backward algorithm");
}

/// Two networks trained as one parameter block: Adam over [y | z].
struct PairTrainer {
  MeanFieldNet* y;
  MeanFieldNet* z;
  AdamState adam;
  VectorXd params, grad;

  PairTrainer(MeanFieldNet* y_, MeanFieldNet* z_, double lr) : y(y_), z(z_) {
    const int ny = y->total_param_count(), nz = z->total_param_count();
    params.resize(ny + nz);
    grad.resize(ny + nz);
    params << y->params, z->params;
    adam = make_adam(ny + nz, lr);
  }
  void step() {
    adam_step(adam, params, grad);
    y->params = params.head(y->total_param_count());
    z->params = params.tail(z->total_param_count());
  }
};

std::vector<BsdeStageNets> train_stagewise(bool multistep, const ProblemSpec& spec,
                                           const BsdeSpec& bspec, const TrainConfig& cfg,
                                           TrainDiagnostics* diag) {
  check_bsde_config(spec, cfg, /*allow_disjoint=*/!multistep);
  const int nt = cfg.grid.n_steps;
  std::vector<BsdeStageNets> nets(nt);
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);

  for (int stage = nt - 1; stage >= 0; --stage) {
    if (stage == nt - 1) {
      nets[stage].y = make_net(cfg, 2, false, mix_key(cfg.seed, {kTagInit, 11}));
      nets[stage].z = make_net(cfg, 2, false, mix_key(cfg.seed, {kTagInit, 12}));
    } else {
      nets[stage] = nets[stage + 1];  // transfer warm start
    }
    const int ny = nets[stage].y.total_param_count();
    const int nz = nets[stage].z.total_param_count();
    PairTrainer trainer(&nets[stage].y, &nets[stage].z, cfg.lr);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      trainer.adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
      trainer.grad.setZero();
      const double loss = reduce_objective(
          cfg, static_cast<std::uint64_t>(epoch), ny, nz, slots, grad_m, &trainer.grad,
          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
            return multistep
                       ? multistep_stage_batch(nets, stage, spec, bspec, cfg, e, m, ws, out)
                       : local_stage_batch(nets, stage, spec, bspec, cfg, e, m, ws, out);
          });
      if (diag) diag->loss.push_back(loss);
      if (!std::isfinite(loss))
        throw TrainingDiverged("bsde stage loss is not finite at stage " +
                               std::to_string(stage));
      trainer.step();
    }
  }
  return nets;
}

BsdeGlobalNets train_global(int which, const ProblemSpec& spec, const BsdeSpec& bspec,
                            const TrainConfig& cfg, TrainDiagnostics* diag) {
  check_bsde_config(spec, cfg, /*allow_disjoint=*/false);
  BsdeGlobalNets nets;
  const bool u_style = (which == 0);  // deep MKV BSDE: Y net is U(mu)(x)
  nets.y = make_net(cfg, 2, /*time_input=*/!u_style, mix_key(cfg.seed, {kTagInit, 13}));
  nets.z = make_net(cfg, 2, /*time_input=*/true, mix_key(cfg.seed, {kTagInit, 14}));
  const int ny = nets.y.total_param_count();
  const int nz = nets.z.total_param_count();
  PairTrainer trainer(&nets.y, &nets.z, cfg.lr);
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    trainer.adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
    trainer.grad.setZero();
    const double loss = reduce_objective(
        cfg, static_cast<std::uint64_t>(epoch), ny, nz, slots, grad_m, &trainer.grad,
        [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
          if (which == 0) return deep_mkv_global_batch(nets, spec, bspec, cfg, e, m, ws, out);
          if (which == 1) return global_path_batch<false>(nets, spec, bspec, cfg, e, m, ws, out);
          return global_path_batch<true>(nets, spec, bspec, cfg, e, m, ws, out);
        });
    if (diag) diag->loss.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged("bsde global loss is not finite");
    trainer.step();
  }
  return nets;
}

}  // namespace

// --- public objective wrappers ---------------------------------------------

double deep_backward_stage_objective(const std::vector<BsdeStageNets>& nets, int stage,
                                     const ProblemSpec& spec, const BsdeSpec& bspec,
                                     const TrainConfig& cfg, std::uint64_t epoch,
                                     VectorXd* grad) {
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);
  const int ny = nets[stage].y.total_param_count();
  const int nz = nets[stage].z.total_param_count();
  if (grad) grad->setZero(ny + nz);
  return reduce_objective(cfg, epoch, ny, nz, slots, grad_m, grad,
                          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
                            return local_stage_batch(nets, stage, spec, bspec, cfg, e, m, ws,
                                                     out);
                          });
}

double multistep_stage_objective(const std::vector<BsdeStageNets>& nets, int stage,
                                 const ProblemSpec& spec, const BsdeSpec& bspec,
                                 const TrainConfig& cfg, std::uint64_t epoch, VectorXd* grad) {
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);
  const int ny = nets[stage].y.total_param_count();
  const int nz = nets[stage].z.total_param_count();
  if (grad) grad->setZero(ny + nz);
  return reduce_objective(cfg, epoch, ny, nz, slots, grad_m, grad,
                          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
                            return multistep_stage_batch(nets, stage, spec, bspec, cfg, e, m, ws,
                                                         out);
                          });
}

double deep_mkv_global_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t epoch, VectorXd* grad) {
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);
  const int ny = nets.y.total_param_count(), nz = nets.z.total_param_count();
  if (grad) grad->setZero(ny + nz);
  return reduce_objective(cfg, epoch, ny, nz, slots, grad_m, grad,
                          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
                            return deep_mkv_global_batch(nets, spec, bspec, cfg, e, m, ws, out);
                          });
}

double global_local_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                              const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t epoch,
                              VectorXd* grad) {
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);
  const int ny = nets.y.total_param_count(), nz = nets.z.total_param_count();
  if (grad) grad->setZero(ny + nz);
  return reduce_objective(cfg, epoch, ny, nz, slots, grad_m, grad,
                          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
                            return global_path_batch<false>(nets, spec, bspec, cfg, e, m, ws,
                                                            out);
                          });
}

double global_multistep_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                                  const BsdeSpec& bspec, const TrainConfig& cfg,
                                  std::uint64_t epoch, VectorXd* grad) {
  std::vector<BsdeScratch> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch);
  const int ny = nets.y.total_param_count(), nz = nets.z.total_param_count();
  if (grad) grad->setZero(ny + nz);
  return reduce_objective(cfg, epoch, ny, nz, slots, grad_m, grad,
                          [&](std::uint64_t e, int m, BsdeScratch& ws, const StageParams& out) {
                            return global_path_batch<true>(nets, spec, bspec, cfg, e, m, ws,
                                                           out);
                          });
}

// --- trainers ---------------------------------------------------------------

std::vector<BsdeStageNets> train_deep_backward(const ProblemSpec& spec, const BsdeSpec& bspec,
                                               const TrainConfig& cfg, TrainDiagnostics* diag) {
  return train_stagewise(false, spec, bspec, cfg, diag);
}

std::vector<BsdeStageNets> train_multistep_backward(const ProblemSpec& spec,
                                                    const BsdeSpec& bspec, const TrainConfig& cfg,
                                                    TrainDiagnostics* diag) {
  return train_stagewise(true, spec, bspec, cfg, diag);
}

BsdeGlobalNets train_deep_mkv_global(const ProblemSpec& spec, const BsdeSpec& bspec,
                                     const TrainConfig& cfg, TrainDiagnostics* diag) {
  return train_global(0, spec, bspec, cfg, diag);
}

BsdeGlobalNets train_global_local(const ProblemSpec& spec, const BsdeSpec& bspec,
                                  const TrainConfig& cfg, TrainDiagnostics* diag) {
  return train_global(1, spec, bspec, cfg, diag);
}

BsdeGlobalNets train_global_multistep(const ProblemSpec& spec, const BsdeSpec& bspec,
                                      const TrainConfig& cfg, TrainDiagnostics* diag) {
  return train_global(2, spec, bspec, cfg, diag);
}

// --- views and gradient-free losses -----------------------------------------

BsdeEvalView view_of(const std::vector<BsdeStageNets>& nets, const BsdeSpec& bspec,
                     const TimeGrid& grid) {
  BsdeEvalView view;
  const int nt = grid.n_steps;
  view.y = [&nets, &bspec, nt](int step, double t, const MatrixXd& x, const BinDensity& mu_hat,
                               MatrixXd& out) {
    if (step == nt) {
      fill_terminal(bspec, x, out);
      return;
    }
    MfContext ctx;
    eval_net_at(nets[step].y, t, x, mu_hat, ctx, out);
  };
  view.z = [&nets](int step, double t, const MatrixXd& x, const BinDensity& mu_hat,
                   MatrixXd& out) {
    MfContext ctx;
    eval_net_at(nets[step].z, t, x, mu_hat, ctx, out);
  };
  return view;
}

BsdeEvalView view_of(const BsdeGlobalNets& nets, const BsdeSpec& bspec, const TimeGrid& grid) {
  BsdeEvalView view;
  const int nt = grid.n_steps;
  view.y = [&nets, &bspec, nt](int step, double t, const MatrixXd& x, const BinDensity& mu_hat,
                               MatrixXd& out) {
    if (step == nt) {
      fill_terminal(bspec, x, out);
      return;
    }
    if (!nets.y.time_input && step != 0)
      throw ShapeError("the deep MKV BSDE Y net is defined at the initial time only");
    MfContext ctx;
    eval_net_at(nets.y, t, x, mu_hat, ctx, out);
  };
  view.z = [&nets](int step, double t, const MatrixXd& x, const BinDensity& mu_hat,
                   MatrixXd& out) {
    MfContext ctx;
    eval_net_at(nets.z, t, x, mu_hat, ctx, out);
  };
  return view;
}

BsdeEvalView systemic_exact_view(const SystemicParams& p) {
  BsdeEvalView view;
  view.y = [p](int, double t, const MatrixXd& x, const BinDensity&, MatrixXd& out) {
    const double mu = x.row(0).mean();
    out.resize(2, x.cols());
    for (int k = 0; k < x.cols(); ++k) out.col(k) = systemic_exact_y(t, x(0, k), mu, p);
  };
  view.z = [p](int, double t, const MatrixXd& x, const BinDensity&, MatrixXd& out) {
    const double mu = x.row(0).mean();
    out.resize(2, x.cols());
    for (int k = 0; k < x.cols(); ++k) out.col(k) = systemic_exact_z(t, x(0, k), mu, p);
  };
  return view;
}

namespace {

/// Gradient-free loss machinery for an arbitrary view: rolls the cloud under
/// view.y and evaluates the residual family `which` (0 local @ stage, 1
/// multistep @ stage, 2 global terminal, 3 global/local, 4 global multistep).
double view_loss(const BsdeEvalView& view, int which, int stage, const ProblemSpec& spec,
                 const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t seed) {
  const int n = cfg.n_particles;
  const int nt = cfg.grid.n_steps;
  const double dt = cfg.grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const BinGrid grid = training_grid(spec, cfg);
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const int start = (which <= 1) ? stage : 0;
  const int steps = nt - start;

  double loss = 0.0;
  std::vector<MatrixXd> x(steps + 1), dw(steps), yv(steps + 1), zv(steps);
  std::vector<BinDensity> mu_hat(steps + 1);
  std::vector<double> mu_bar(steps), p_bar(steps);
  for (int m = 0; m < cfg.m_batch; ++m) {
    RngStream rng = RngStream::substream(
        seed, {kTagLoss, static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(m)});
    mu_hat[0] = random_training_density(grid, rng);
    x[0].resize(1, n);
    Eigen::Map<Eigen::VectorXd> x0(x[0].data(), n);
    sample_inverse_transform(mu_hat[0], x0, rng);

    const bool carried = (which == 2);
    const int local_steps = (which == 0) ? 1 : steps;
    for (int j = 0; j < local_steps; ++j) {
      const int i = start + j;
      const double t = cfg.grid.time(i);
      if (j == 0 || !carried) view.y(i, t, x[j], mu_hat[j], yv[j]);
      view.z(i, t, x[j], mu_hat[j], zv[j]);
      mu_bar[j] = x[j].row(0).mean();
      p_bar[j] = yv[j].row(1).mean();
      dw[j].resize(1, n);
      for (int k = 0; k < n; ++k) dw[j](0, k) = sqrt_dt * rng.normal();
      x[j + 1].resize(1, n);
      for (int k = 0; k < n; ++k) {
        const double xk = x[j](0, k);
        x[j + 1](0, k) = xk + bspec.forward_drift(xk, mu_bar[j], yv[j].col(k)) * dt +
                         bspec.vol(xk, mu_bar[j]) * dw[j](0, k);
      }
      mu_hat[j + 1].grid = grid;
      mu_hat[j + 1].w.resize(grid.k_bins);
      estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(x[j + 1].data(), n), grid,
                           mu_hat[j + 1].w);
      if (carried) {
        yv[j + 1].resize(2, n);
        for (int k = 0; k < n; ++k)
          yv[j + 1].col(k) = yv[j].col(k) +
                             bspec.driver(x[j](0, k), yv[j].col(k), zv[j].col(k), mu_bar[j],
                                          p_bar[j]) *
                                 dt +
                             zv[j].col(k) * dw[j](0, k);
      } else {
        view.y(i + 1, cfg.grid.time(i + 1), x[j + 1], mu_hat[j + 1], yv[j + 1]);
      }
    }

    auto drv = [&](int j, int k) {
      return bspec.driver(x[j](0, k), yv[j].col(k), zv[j].col(k), mu_bar[j], p_bar[j]);
    };
    if (which == 0) {
      for (int k = 0; k < n; ++k) {
        const Vec2 r =
            yv[1].col(k) - yv[0].col(k) - zv[0].col(k) * dw[0](0, k) - drv(0, k) * dt;
        loss += w * r.squaredNorm();
      }
    } else if (which == 1) {
      // telescoped-to-terminal single residual at the stage
      MatrixXd g;
      fill_terminal(bspec, x[steps], g);
      for (int k = 0; k < n; ++k) {
        Vec2 acc = g.col(k);
        for (int j = 0; j < steps; ++j)
          acc -= zv[j].col(k) * dw[j](0, k) + drv(j, k) * dt;
        const Vec2 r = acc - yv[0].col(k);
        loss += w * r.squaredNorm();
      }
    } else if (which == 2) {
      // carried-Y terminal mismatch
      MatrixXd g;
      fill_terminal(bspec, x[steps], g);
      loss += w * (yv[steps] - g).squaredNorm();
    } else if (which == 3) {
      MatrixXd g;
      fill_terminal(bspec, x[steps], g);
      yv[steps] = g;
      for (int j = 0; j < steps; ++j)
        for (int k = 0; k < n; ++k) {
          const Vec2 r =
              yv[j + 1].col(k) - yv[j].col(k) - zv[j].col(k) * dw[j](0, k) - drv(j, k) * dt;
          loss += w * r.squaredNorm();
        }
    } else {
      MatrixXd g;
      fill_terminal(bspec, x[steps], g);
      std::vector<Vec2> acc(n);
      for (int k = 0; k < n; ++k) acc[k] = g.col(k);
      for (int i = steps - 1; i >= 0; --i) {
        for (int k = 0; k < n; ++k) {
          acc[k] -= zv[i].col(k) * dw[i](0, k) + drv(i, k) * dt;
          const Vec2 r = acc[k] - yv[i].col(k);
          loss += w * r.squaredNorm();
        }
      }
    }
  }
  return loss;
}

}  // namespace

double bsde_loss_local_stage(const BsdeEvalView& view, int stage, const ProblemSpec& spec,
                             const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t seed) {
  return view_loss(view, 0, stage, spec, bspec, cfg, seed);
}
double bsde_loss_multistep_stage(const BsdeEvalView& view, int stage, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t seed) {
  return view_loss(view, 1, stage, spec, bspec, cfg, seed);
}
double bsde_loss_global_terminal(const BsdeEvalView& view, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t seed) {
  return view_loss(view, 2, 0, spec, bspec, cfg, seed);
}
double bsde_loss_global_local(const BsdeEvalView& view, const ProblemSpec& spec,
                              const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t seed) {
  return view_loss(view, 3, 0, spec, bspec, cfg, seed);
}
double bsde_loss_global_multistep(const BsdeEvalView& view, const ProblemSpec& spec,
                                  const BsdeSpec& bspec, const TrainConfig& cfg,
                                  std::uint64_t seed) {
  return view_loss(view, 4, 0, spec, bspec, cfg, seed);
}

BsdeStack carry_stack(const BsdeGlobalNets& nets, const TimeGrid& grid) {
  (void)grid;
  BsdeStack stack;
  stack.carry_y = true;
  stack.y_at = [&nets](int, double t, const MatrixXd& x, const BinDensity& mu, MatrixXd& out) {
    MfContext ctx;
    eval_net_at(nets.y, t, x, mu, ctx, out);
  };
  stack.z_at = [&nets](int, double t, const MatrixXd& x, const BinDensity& mu, MatrixXd& out) {
    MfContext ctx;
    eval_net_at(nets.z, t, x, mu, ctx, out);
  };
  return stack;
}

MeanFieldNet regress_value_from_bsde(const BsdeStack& stack, const ProblemSpec& spec,
                                     const BsdeSpec& bspec, const TrainConfig& cfg, int at_step,
                                     TrainDiagnostics* diag) {
  validate(cfg);
  if (at_step < 0 || at_step > cfg.grid.n_steps)
    throw ConfigError("regress_value_from_bsde step outside the grid");
  const BinGrid grid = training_grid(spec, cfg);
  const int n = cfg.n_particles;
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);

  MeanFieldNet value = make_net(cfg, 1, false, mix_key(cfg.seed, {kTagInit, 15}));
  AdamState adam = make_adam(value.total_param_count(), cfg.lr);
  VectorXd grad(value.total_param_count());
  TimeGrid carry_grid{cfg.grid.horizon, std::max(at_step, 1)};
  carry_grid.horizon = cfg.grid.dt() * std::max(at_step, 1);

  TrajectoryBatch batch;
  MfContext ctx;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
    grad.setZero();
    double loss = 0.0;
    for (int m = 0; m < cfg.m_batch; ++m) {
      RngStream rng = RngStream::substream(cfg.seed, {kTagRegress,
                                                      static_cast<std::uint64_t>(epoch),
                                                      static_cast<std::uint64_t>(m)});
      const BinDensity mu0 = random_training_density(grid, rng);
      const std::uint64_t roll_seed =
          mix_key(cfg.seed, {kTagRegress, static_cast<std::uint64_t>(epoch),
                             static_cast<std::uint64_t>(m), 7u});
      if (at_step == 0) {
        // degenerate: fit at the initial slice directly
        TimeGrid one{cfg.grid.dt(), 1};
        rollout_bsde_forward(stack, {mu0}, n, one, bspec, roll_seed, 0, batch);
      } else {
        rollout_bsde_forward(stack, {mu0}, n, carry_grid, bspec, roll_seed, 0, batch);
      }
      const int slice = at_step == 0 ? 0 : at_step;
      const MatrixXd& xs = batch.paths[0].x[slice];
      const BinDensity& mu_k = batch.paths[0].mu_hat[slice];
      const double t = cfg.grid.time(at_step);
      if (value.variant == MfVariant::Bin)
        mf_context_from_density(value, t, mu_k, ctx);
      else
        mf_context_from_samples(value, t, Eigen::Map<const Eigen::VectorXd>(xs.data(), n), ctx);
      mf_eval_batch(value, xs, ctx);
      MatrixXd resid = batch.paths[0].y[slice].row(0) - mf_output(ctx).row(0);
      loss += w * resid.squaredNorm();
      resid *= -2.0 * w;
      MfGradSink sink;
      sink.params = grad.data();
      mf_grad_batch(value, xs, ctx, resid, sink);
    }
    if (diag) diag->loss.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged("bsde value regression loss is not finite");
    adam_step(adam, value.params, grad);
  }
  return value;
}

}  // namespace mfc
