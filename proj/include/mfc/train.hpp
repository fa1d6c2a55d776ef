#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfc/dynamics.hpp"
#include "mfc/mfnn.hpp"
#include "mfc/problems.hpp"

namespace mfc {

struct NetConfig {
  MfVariant variant = MfVariant::Bin;
  std::vector<int> hidden = {20, 20};
  int latent_dim = 20;
};

struct TrainConfig {
  int m_batch = 5;
  int n_particles = 10000;
  int epochs = 3000;
  double lr = 1e-3;
  double lr_actor = 0.0;   // 0 = use lr (value iteration gamma_C)
  double lr_critic = 0.0;  // 0 = use lr (value iteration gamma_V)
  int critic_epochs = 0;   // 0 = use epochs
  double lr_decay = 1.0;   // multiplicative factor applied every lr_decay_every epochs
  int lr_decay_every = 0;  // 0 disables the schedule
  std::uint64_t seed = 1;
  TimeGrid grid{0.2, 10};
  NetConfig net;
  int k_bins = 50;
  bool disjoint_tilde = false;  // BSDE tilde clouds drawn separately
  int threads = 1;

  double actor_lr() const { return lr_actor > 0.0 ? lr_actor : lr; }
  double critic_lr() const { return lr_critic > 0.0 ? lr_critic : lr; }
  int critic_epoch_count() const { return critic_epochs > 0 ? critic_epochs : epochs; }
};

void validate(const TrainConfig& cfg);

/// Per-epoch training loss trace (one entry per gradient step).
struct TrainDiagnostics {
  std::vector<double> loss;
};

/// Learning rate after `epoch` steps of the configured decay schedule.
double scheduled_lr(const TrainConfig& cfg, double base_lr, int epoch);

/// Measure-estimation grid on the problem's truncation domain.
BinGrid training_grid(const ProblemSpec& spec, const TrainConfig& cfg);

/// Fresh network sized for the config (output_dim actions or values).
MeanFieldNet make_net(const TrainConfig& cfg, int output_dim, bool time_input,
                      std::uint64_t seed);

/// Step-indexed view over either a single time-dependent control or per-step
/// controls.
using PolicyView = std::function<const MeanFieldNet&(int step)>;

PolicyView policy_of(const MeanFieldNet& net);
PolicyView policy_of(const std::vector<MeanFieldNet>& nets);

/// Rollout under a step-indexed policy (no gradient caches).
void rollout_policy(const PolicyView& policy, const std::vector<BinDensity>& mu0, int n_particles,
                    const TimeGrid& grid, const ProblemSpec& spec, std::uint64_t seed,
                    std::uint64_t epoch_key, TrajectoryBatch& out,
                    std::vector<std::vector<MfContext>>* contexts = nullptr);

struct EvalConfig {
  int n_particles = 100000;
  std::uint64_t seed = 9001;
};

/// Monte Carlo cost of a trained policy on one initial distribution: binify,
/// roll out, average the discretized cost. Deterministic in the eval seed.
double evaluate_policy_cost(const PolicyView& policy, const ProblemSpec& spec,
                            const TrainConfig& cfg, const InitialDistribution& mu0,
                            const EvalConfig& eval);

/// E_{mu0}[net(mu0)(X_0)] of a scalar-output value net (component `row` for
/// multi-output nets).
double evaluate_net_expectation(const MeanFieldNet& net, double t, const ProblemSpec& spec,
                                const TrainConfig& cfg, const InitialDistribution& mu0,
                                const EvalConfig& eval, int row = 0);

/// Run fn(m, slot) for m = 0..m_count-1 over min(threads, m_count) workers.
/// `slot` indexes worker-local scratch (0 <= slot < worker count); a work
/// unit only touches slot-local state plus its own per-m output cells, so
/// results are independent of the thread count.
void parallel_for_m(int m_count, int threads, const std::function<void(int m, int slot)>& fn);

}  // namespace mfc
