#include "mfc/dp_solvers.hpp"

#include <cmath>
#include <memory>

#include "mfc/errors.hpp"

namespace mfc {

namespace {

constexpr std::uint64_t kTagGlobal = 0xa1u;
constexpr std::uint64_t kTagPolicy = 0xa2u;
constexpr std::uint64_t kTagActor = 0xa3u;
constexpr std::uint64_t kTagCritic = 0xa4u;
constexpr std::uint64_t kTagRegress = 0xa5u;
constexpr std::uint64_t kTagInit = 0x1717u;

using Eigen::MatrixXd;

/// Scratch for one rollout segment with retained network contexts.
struct SegmentWorkspace {
  std::vector<MatrixXd> x, a, dw;   // per step
  std::vector<BinDensity> mu_hat;
  std::vector<Moments> mu_mom;
  std::vector<MfContext> ctx;
  MatrixXd lambda, dJda, gx, gcloud;

  void resize(const BinGrid& grid, int n_steps, int n) {
    x.resize(n_steps + 1);
    a.resize(n_steps);
    dw.resize(n_steps);
    ctx.resize(n_steps);
    mu_hat.resize(n_steps + 1);
    mu_mom.resize(n_steps + 1);
    for (int j = 0; j <= n_steps; ++j) {
      x[j].resize(1, n);
      mu_hat[j].grid = grid;
      mu_hat[j].w.resize(grid.k_bins);
    }
    for (int j = 0; j < n_steps; ++j) {
      a[j].resize(1, n);
      dw[j].resize(1, n);
    }
    lambda.resize(1, n);
    dJda.resize(1, n);
    gx.resize(1, n);
    gcloud.resize(1, n);
  }
};

/// Forward pass of the cost-to-go segment [start, N_T]: samples X_start from
/// `mu_start`, rolls out under the policy, retains contexts, and returns the
/// weighted cost contribution w * sum_n [sum_j f dt + g].
double segment_forward(const PolicyView& policy, const ProblemSpec& spec, const TimeGrid& grid,
                       int start, const BinDensity& mu_start, int n, double weight,
                       RngStream& rng, SegmentWorkspace& ws) {
  const int n_seg = grid.n_steps - start;
  const double dt = grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  ws.resize(mu_start.grid, n_seg, n);

  Eigen::Map<Eigen::VectorXd> x0(ws.x[0].data(), n);
  sample_inverse_transform(mu_start, x0, rng);
  ws.mu_hat[0] = mu_start;
  ws.mu_mom[0] = density_moments(mu_start);

  double cost = 0.0;
  for (int j = 0; j < n_seg; ++j) {
    const int i = start + j;
    const MeanFieldNet& net = policy(i);
    const double t = grid.time(i);
    if (net.variant == MfVariant::Bin)
      mf_context_from_density(net, t, ws.mu_hat[j], ws.ctx[j]);
    else
      mf_context_from_samples(net, t, Eigen::Map<const Eigen::VectorXd>(ws.x[j].data(), n),
                              ws.ctx[j]);
    mf_eval_batch(net, ws.x[j], ws.ctx[j]);
    ws.a[j] = mf_output(ws.ctx[j]);

    for (int k = 0; k < n; ++k) ws.dw[j](0, k) = sqrt_dt * rng.normal();
    const double mu_bar = ws.mu_mom[j].mean;
    for (int k = 0; k < n; ++k) {
      const double x = ws.x[j](0, k);
      const double a = ws.a[j](0, k);
      cost += weight * spec.run_cost(x, mu_bar, a) * dt;
      ws.x[j + 1](0, k) =
          x + spec.drift(x, mu_bar, a) * dt + spec.vol(x, mu_bar, a) * ws.dw[j](0, k);
    }
    if (!ws.x[j + 1].allFinite())
      throw SimulationDiverged("non-finite particle at step " + std::to_string(i + 1));
    estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(ws.x[j + 1].data(), n),
                         ws.mu_hat[j + 1].grid, ws.mu_hat[j + 1].w);
    ws.mu_mom[j + 1] = density_moments(ws.mu_hat[j + 1]);
  }
  const double mu_t = ws.mu_mom[n_seg].mean;
  for (int k = 0; k < n; ++k) cost += weight * spec.term_cost(ws.x[n_seg](0, k), mu_t);
  return cost;
}

/// Reverse pass of segment_forward. Parameter gradients are accumulated for
/// the net at step `trainable_step` (absolute index), or for every step when
/// trainable_step < 0 (a single shared time-dependent net). Estimated
/// densities and their moments are counting statistics, hence treated as
/// constants; the cylindrical latent path is differentiated exactly.
void segment_backward(const PolicyView& policy, const ProblemSpec& spec, const TimeGrid& grid,
                      int start, int trainable_step, int n, double weight, SegmentWorkspace& ws,
                      VectorXd& grad) {
  const int n_seg = grid.n_steps - start;
  const double dt = grid.dt();

  const double mu_t = ws.mu_mom[n_seg].mean;
  for (int k = 0; k < n; ++k)
    ws.lambda(0, k) = weight * spec.term_dx(ws.x[n_seg](0, k), mu_t);

  for (int j = n_seg - 1; j >= 0; --j) {
    const int i = start + j;
    const MeanFieldNet& net = policy(i);
    const double mu_bar = ws.mu_mom[j].mean;
    const bool train_here = trainable_step < 0 || trainable_step == i;

    for (int k = 0; k < n; ++k) {
      const double x = ws.x[j](0, k);
      const double a = ws.a[j](0, k);
      const double dw = ws.dw[j](0, k);
      const double lam = ws.lambda(0, k);
      ws.dJda(0, k) = weight * spec.run_da(x, mu_bar, a) * dt +
                      lam * (spec.drift_da(x, mu_bar, a) * dt + spec.vol_da(x, mu_bar, a) * dw);
      ws.lambda(0, k) =
          lam * (1.0 + spec.drift_dx(x, mu_bar, a) * dt + spec.vol_dx(x, mu_bar, a) * dw) +
          weight * spec.run_dx(x, mu_bar, a) * dt;
    }

    MfGradSink sink;
    sink.params = train_here ? grad.data() : nullptr;
    sink.x = &ws.gx;
    sink.cloud_x = net.variant == MfVariant::Cylindrical ? &ws.gcloud : nullptr;
    mf_grad_batch(net, ws.x[j], ws.ctx[j], ws.dJda, sink);
    ws.lambda += ws.gx;
    if (net.variant == MfVariant::Cylindrical) ws.lambda += ws.gcloud;
  }
}

struct EpochResult {
  double loss = 0.0;
};

/// One epoch of the shared segment objective: fresh measure draws, forward
/// and reverse per distribution, gradients reduced in batch order.
double segment_epoch(const PolicyView& policy, const ProblemSpec& spec, const TrainConfig& cfg,
                     int start, int trainable_step, std::uint64_t tag, std::uint64_t epoch,
                     std::vector<SegmentWorkspace>& slots, std::vector<VectorXd>& grad_m,
                     VectorXd* grad) {
  const BinGrid grid = training_grid(spec, cfg);
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * cfg.n_particles);
  std::vector<double> loss_m(cfg.m_batch, 0.0);
  std::exception_ptr error;

  parallel_for_m(cfg.m_batch, cfg.threads, [&](int m, int slot) {
    try {
      RngStream rng = RngStream::substream(cfg.seed, {tag, epoch, static_cast<std::uint64_t>(m)});
      const BinDensity mu = random_training_density(grid, rng);
      SegmentWorkspace& ws = slots[slot];
      loss_m[m] =
          segment_forward(policy, spec, cfg.grid, start, mu, cfg.n_particles, w, rng, ws);
      if (grad) {
        grad_m[m].setZero();
        segment_backward(policy, spec, cfg.grid, start, trainable_step, cfg.n_particles, w, ws,
                         grad_m[m]);
      }
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

}  // namespace

double global_control_objective(const MeanFieldNet& net, const ProblemSpec& spec,
                                const TrainConfig& cfg, std::uint64_t epoch, VectorXd* grad) {
  validate(cfg);
  std::vector<SegmentWorkspace> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch, VectorXd(grad ? net.total_param_count() : 0));
  if (grad) grad->setZero(net.total_param_count());
  return segment_epoch(policy_of(net), spec, cfg, 0, -1, kTagGlobal, epoch, slots, grad_m, grad);
}

MeanFieldNet train_global_control(const ProblemSpec& spec, const TrainConfig& cfg,
                                  TrainDiagnostics* diag) {
  validate(cfg);
  MeanFieldNet net = make_net(cfg, 1, /*time_input=*/true, mix_key(cfg.seed, {kTagInit, 1}));
  AdamState adam = make_adam(net.total_param_count(), cfg.lr);
  VectorXd grad(net.total_param_count());
  std::vector<SegmentWorkspace> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch, VectorXd(net.total_param_count()));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
    grad.setZero();
    const double loss = segment_epoch(policy_of(net), spec, cfg, 0, -1, kTagGlobal,
                                      static_cast<std::uint64_t>(epoch), slots, grad_m, &grad);
    if (diag) diag->loss.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged("global control loss is not finite");
    adam_step(adam, net.params, grad);
  }
  return net;
}

double policy_stage_objective(const std::vector<MeanFieldNet>& nets, int stage,
                              const ProblemSpec& spec, const TrainConfig& cfg,
                              std::uint64_t epoch, VectorXd* grad) {
  validate(cfg);
  std::vector<SegmentWorkspace> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch,
                               VectorXd(grad ? nets[stage].total_param_count() : 0));
  if (grad) grad->setZero(nets[stage].total_param_count());
  return segment_epoch(policy_of(nets), spec, cfg, stage, stage,
                       mix64(kTagPolicy + static_cast<std::uint64_t>(stage)), epoch, slots,
                       grad_m, grad);
}

std::vector<MeanFieldNet> train_policy_iteration(const ProblemSpec& spec, const TrainConfig& cfg,
                                                 TrainDiagnostics* diag) {
  validate(cfg);
  const int nt = cfg.grid.n_steps;
  std::vector<MeanFieldNet> nets(nt);
  std::vector<SegmentWorkspace> slots(slot_count(cfg));

  for (int stage = nt - 1; stage >= 0; --stage) {
    nets[stage] = (stage == nt - 1) ? make_net(cfg, 1, false, mix_key(cfg.seed, {kTagInit, 2}))
                                    : nets[stage + 1];  // transfer warm start
    AdamState adam = make_adam(nets[stage].total_param_count(), cfg.lr);
    VectorXd grad(nets[stage].total_param_count());
    std::vector<VectorXd> grad_m(cfg.m_batch, VectorXd(nets[stage].total_param_count()));
    const std::uint64_t tag = mix64(kTagPolicy + static_cast<std::uint64_t>(stage));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
      grad.setZero();
      const double loss = segment_epoch(policy_of(nets), spec, cfg, stage, stage, tag,
                                        static_cast<std::uint64_t>(epoch), slots, grad_m, &grad);
      if (diag) diag->loss.push_back(loss);
      if (!std::isfinite(loss))
        throw TrainingDiverged("policy iteration loss is not finite at stage " +
                               std::to_string(stage));
      adam_step(adam, nets[stage].params, grad);
    }
  }
  return nets;
}

namespace {

/// Value of the stage-(i+1) target: the frozen critic, or the closed-form g
/// at the terminal slot. Fills `value` (1 x N) and d(value)/dx into `dvdx`;
/// for a cylindrical critic the latent-cloud path is folded into `dvdx`.
void next_value_and_slope(const MeanFieldNet* critic, const ProblemSpec& spec,
                          const TimeGrid& grid, int next_step, const MatrixXd& x_next,
                          const BinDensity& mu_next, const Moments& mom_next, MatrixXd& value,
                          MatrixXd& dvdx, MfContext& ctx, MatrixXd& gcloud) {
  const int n = static_cast<int>(x_next.cols());
  if (critic == nullptr) {  // terminal: exact g
    value.resize(1, n);
    dvdx.resize(1, n);
    for (int k = 0; k < n; ++k) {
      value(0, k) = spec.term_cost(x_next(0, k), mom_next.mean);
      dvdx(0, k) = spec.term_dx(x_next(0, k), mom_next.mean);
    }
    return;
  }
  const double t = grid.time(next_step);
  if (critic->variant == MfVariant::Bin)
    mf_context_from_density(*critic, t, mu_next, ctx);
  else
    mf_context_from_samples(
        *critic, t, Eigen::Map<const Eigen::VectorXd>(x_next.data(), x_next.cols()), ctx);
  mf_eval_batch(*critic, x_next, ctx);
  value = mf_output(ctx);
  dvdx.resize(1, n);
  MfGradSink sink;
  sink.x = &dvdx;
  sink.cloud_x = critic->variant == MfVariant::Cylindrical ? &gcloud : nullptr;
  mf_grad_batch(*critic, x_next, ctx, MatrixXd::Ones(1, n), sink);
  if (critic->variant == MfVariant::Cylindrical) dvdx += gcloud;
}

}  // namespace

ValueIterationNets train_value_iteration(const ProblemSpec& spec, const TrainConfig& cfg,
                                         TrainDiagnostics* diag) {
  validate(cfg);
  const int nt = cfg.grid.n_steps;
  const BinGrid grid = training_grid(spec, cfg);
  const double dt = cfg.grid.dt();
  const double sqrt_dt = std::sqrt(dt);
  const int n = cfg.n_particles;
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);

  ValueIterationNets out;
  out.controls.resize(nt);
  out.values.resize(nt);

  struct Slot {
    MatrixXd x, a, dw, x_next, value, dvdx, dJda, resid, gx, gcloud, vout, gv;
    BinDensity mu_next;
    MfContext actor_ctx, critic_ctx, next_ctx;
  };
  std::vector<Slot> slots(slot_count(cfg));
  for (auto& s : slots) {
    s.x.resize(1, n);
    s.a.resize(1, n);
    s.dw.resize(1, n);
    s.x_next.resize(1, n);
    s.mu_next.grid = grid;
    s.mu_next.w.resize(grid.k_bins);
    s.gx.resize(1, n);
    s.gcloud.resize(1, n);
  }

  std::vector<double> loss_m(cfg.m_batch, 0.0);
  std::vector<VectorXd> grad_m(cfg.m_batch);

  for (int stage = nt - 1; stage >= 0; --stage) {
    const MeanFieldNet* next_critic = (stage == nt - 1) ? nullptr : &out.values[stage + 1];

    // one (m, epoch) work unit shared by both phases; `phase` 0 = actor,
    // 1 = critic (critic draws fresh batches with its own stream)
    auto run_batch = [&](int phase, const MeanFieldNet& actor, MeanFieldNet* critic,
                         std::uint64_t epoch, int m, int slot) {
      Slot& s = slots[slot];
      const std::uint64_t tag = phase == 0 ? kTagActor : kTagCritic;
      RngStream rng = RngStream::substream(
          cfg.seed, {mix64(tag + static_cast<std::uint64_t>(stage)), epoch,
                     static_cast<std::uint64_t>(m)});
      const BinDensity mu = random_training_density(grid, rng);
      Eigen::Map<Eigen::VectorXd> x0(s.x.data(), n);
      sample_inverse_transform(mu, x0, rng);
      const Moments mom = density_moments(mu);

      const double t = cfg.grid.time(stage);
      if (actor.variant == MfVariant::Bin)
        mf_context_from_density(actor, t, mu, s.actor_ctx);
      else
        mf_context_from_samples(actor, t, x0, s.actor_ctx);
      mf_eval_batch(actor, s.x, s.actor_ctx);
      s.a = mf_output(s.actor_ctx);

      for (int k = 0; k < n; ++k) s.dw(0, k) = sqrt_dt * rng.normal();
      for (int k = 0; k < n; ++k) {
        const double x = s.x(0, k);
        const double a = s.a(0, k);
        s.x_next(0, k) =
            x + spec.drift(x, mom.mean, a) * dt + spec.vol(x, mom.mean, a) * s.dw(0, k);
      }
      if (!s.x_next.allFinite()) throw SimulationDiverged("value iteration particle diverged");
      estimate_bin_density(Eigen::Map<const Eigen::VectorXd>(s.x_next.data(), n), grid,
                           s.mu_next.w);
      const Moments mom_next = density_moments(s.mu_next);
      next_value_and_slope(next_critic, spec, cfg.grid, stage + 1, s.x_next, s.mu_next, mom_next,
                           s.value, s.dvdx, s.next_ctx, s.gcloud);

      if (phase == 0) {
        // actor objective: w sum_k [f dt + V_{i+1}(X_{i+1})]
        double loss = 0.0;
        s.dJda.resize(1, n);
        for (int k = 0; k < n; ++k) {
          const double x = s.x(0, k);
          const double a = s.a(0, k);
          loss += w * (spec.run_cost(x, mom.mean, a) * dt + s.value(0, k));
          s.dJda(0, k) =
              w * (spec.run_da(x, mom.mean, a) * dt +
                   s.dvdx(0, k) * (spec.drift_da(x, mom.mean, a) * dt +
                                   spec.vol_da(x, mom.mean, a) * s.dw(0, k)));
        }
        MfGradSink sink;
        sink.params = grad_m[m].data();
        mf_grad_batch(actor, s.x, s.actor_ctx, s.dJda, sink);
        loss_m[m] = loss;
      } else {
        // critic quadratic loss on the frozen actor's one-step target
        const double tc = cfg.grid.time(stage);
        if (critic->variant == MfVariant::Bin)
          mf_context_from_density(*critic, tc, mu, s.critic_ctx);
        else
          mf_context_from_samples(*critic, tc, x0, s.critic_ctx);
        mf_eval_batch(*critic, s.x, s.critic_ctx);
        s.vout = mf_output(s.critic_ctx);
        s.resid.resize(1, n);
        double loss = 0.0;
        for (int k = 0; k < n; ++k) {
          const double target =
              spec.run_cost(s.x(0, k), mom.mean, s.a(0, k)) * dt + s.value(0, k);
          s.resid(0, k) = target - s.vout(0, k);
          loss += w * s.resid(0, k) * s.resid(0, k);
        }
        MfGradSink sink;
        sink.params = grad_m[m].data();
        s.resid *= -2.0 * w;
        mf_grad_batch(*critic, s.x, s.critic_ctx, s.resid, sink);
        loss_m[m] = loss;
      }
    };

    // --- actor phase ---
    out.controls[stage] = (stage == nt - 1)
                              ? make_net(cfg, 1, false, mix_key(cfg.seed, {kTagInit, 3}))
                              : out.controls[stage + 1];
    {
      MeanFieldNet& actor = out.controls[stage];
      AdamState adam = make_adam(actor.total_param_count(), cfg.actor_lr());
      for (auto& g : grad_m) g.setZero(actor.total_param_count());
      VectorXd grad(actor.total_param_count());
      for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        adam.lr = scheduled_lr(cfg, cfg.actor_lr(), epoch);
        std::exception_ptr error;
        parallel_for_m(cfg.m_batch, cfg.threads, [&](int m, int slot) {
          try {
            grad_m[m].setZero();
            run_batch(0, actor, nullptr, static_cast<std::uint64_t>(epoch), m, slot);
          } catch (...) {
            error = std::current_exception();
          }
        });
        if (error) std::rethrow_exception(error);
        grad.setZero();
        double loss = 0.0;
        for (int m = 0; m < cfg.m_batch; ++m) {
          grad += grad_m[m];
          loss += loss_m[m];
        }
        if (diag) diag->loss.push_back(loss);
        if (!std::isfinite(loss))
          throw TrainingDiverged("value iteration actor loss is not finite at stage " +
                                 std::to_string(stage));
        adam_step(adam, actor.params, grad);
      }
    }

    // --- critic phase ---
    out.values[stage] = (stage == nt - 1)
                            ? make_net(cfg, 1, false, mix_key(cfg.seed, {kTagInit, 4}))
                            : out.values[stage + 1];
    {
      MeanFieldNet& critic = out.values[stage];
      AdamState adam = make_adam(critic.total_param_count(), cfg.critic_lr());
      for (auto& g : grad_m) g.setZero(critic.total_param_count());
      VectorXd grad(critic.total_param_count());
      for (int epoch = 0; epoch < cfg.critic_epoch_count(); ++epoch) {
        adam.lr = scheduled_lr(cfg, cfg.critic_lr(), epoch);
        std::exception_ptr error;
        parallel_for_m(cfg.m_batch, cfg.threads, [&](int m, int slot) {
          try {
            grad_m[m].setZero();
            run_batch(1, out.controls[stage], &critic, static_cast<std::uint64_t>(epoch), m,
                      slot);
          } catch (...) {
            error = std::current_exception();
          }
        });
        if (error) std::rethrow_exception(error);
        grad.setZero();
        double loss = 0.0;
        for (int m = 0; m < cfg.m_batch; ++m) {
          grad += grad_m[m];
          loss += loss_m[m];
        }
        if (diag) diag->loss.push_back(loss);
        if (!std::isfinite(loss))
          throw TrainingDiverged("value iteration critic loss is not finite at stage " +
                                 std::to_string(stage));
        adam_step(adam, critic.params, grad);
      }
    }
  }
  return out;
}

MeanFieldNet regress_value(const PolicyView& policy, const ProblemSpec& spec,
                           const TrainConfig& cfg, int at_step, TrainDiagnostics* diag) {
  validate(cfg);
  if (at_step < 0 || at_step > cfg.grid.n_steps)
    throw ConfigError("regress_value step outside the grid");
  const BinGrid grid = training_grid(spec, cfg);
  const int n = cfg.n_particles;
  const double w = 1.0 / (static_cast<double>(cfg.m_batch) * n);
  const double dt = cfg.grid.dt();

  MeanFieldNet value = make_net(cfg, 1, false, mix_key(cfg.seed, {kTagInit, 5}));
  AdamState adam = make_adam(value.total_param_count(), cfg.lr);
  std::vector<SegmentWorkspace> slots(slot_count(cfg));
  std::vector<VectorXd> grad_m(cfg.m_batch, VectorXd(value.total_param_count()));
  std::vector<double> loss_m(cfg.m_batch, 0.0);
  std::vector<MatrixXd> cost_m(slot_count(cfg));
  std::vector<MfContext> vctx(slot_count(cfg));
  VectorXd grad(value.total_param_count());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = scheduled_lr(cfg, cfg.lr, epoch);
    std::exception_ptr error;
    parallel_for_m(cfg.m_batch, cfg.threads, [&](int m, int slot) {
      try {
        RngStream rng = RngStream::substream(
            cfg.seed, {mix64(kTagRegress + static_cast<std::uint64_t>(at_step)),
                       static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(m)});
        const BinDensity mu = random_training_density(grid, rng);
        SegmentWorkspace& ws = slots[slot];
        segment_forward(policy, spec, cfg.grid, at_step, mu, n, 1.0, rng, ws);

        // realized cost-to-go per particle
        MatrixXd& ctg = cost_m[slot];
        ctg.setZero(1, n);
        const int n_seg = cfg.grid.n_steps - at_step;
        for (int j = 0; j < n_seg; ++j)
          for (int k = 0; k < n; ++k)
            ctg(0, k) += spec.run_cost(ws.x[j](0, k), ws.mu_mom[j].mean, ws.a[j](0, k)) * dt;
        for (int k = 0; k < n; ++k)
          ctg(0, k) += spec.term_cost(ws.x[n_seg](0, k), ws.mu_mom[n_seg].mean);

        const double t = cfg.grid.time(at_step);
        MfContext& ctx = vctx[slot];
        if (value.variant == MfVariant::Bin)
          mf_context_from_density(value, t, mu, ctx);
        else
          mf_context_from_samples(value, t,
                                  Eigen::Map<const Eigen::VectorXd>(ws.x[0].data(), n), ctx);
        mf_eval_batch(value, ws.x[0], ctx);

        double loss = 0.0;
        MatrixXd resid = ctg - mf_output(ctx);
        for (int k = 0; k < n; ++k) loss += w * resid(0, k) * resid(0, k);
        loss_m[m] = loss;
        grad_m[m].setZero();
        resid *= -2.0 * w;
        MfGradSink sink;
        sink.params = grad_m[m].data();
        mf_grad_batch(value, ws.x[0], ctx, resid, sink);
      } catch (...) {
        error = std::current_exception();
      }
    });
    if (error) std::rethrow_exception(error);
    grad.setZero();
    double loss = 0.0;
    for (int m = 0; m < cfg.m_batch; ++m) {
      grad += grad_m[m];
      loss += loss_m[m];
    }
    if (diag) diag->loss.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged("value regression loss is not finite");
    adam_step(adam, value.params, grad);
  }
  return value;
}

}  // namespace mfc
