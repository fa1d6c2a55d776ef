#pragma once

#include "mfc/train.hpp"

namespace mfc {

/// Per-step pair of mean-field networks approximating the Y = (Y, P) and
/// Z = (Z, M) components. The terminal slot is always the closed-form G.
struct BsdeStageNets {
  MeanFieldNet y;
  MeanFieldNet z;
};

/// Y/Z time-dependent pair for the global algorithms. For the Deep MKV BSDE
/// variant `y` is the initial-value network U(mu)(x) (no time input); for the
/// global/local and global multi-step variants both nets take time.
struct BsdeGlobalNets {
  MeanFieldNet y;
  MeanFieldNet z;
};

/// Evaluation-only view of a Y/Z stack: fills a 2 x N block at (step, t). A
/// view may wrap trained networks or a closed-form solution, which is how the
/// analytic plug-in regression drives every loss below.
using BsdeEvalFn = std::function<void(int step, double t, const Eigen::MatrixXd& x,
                                      const BinDensity& mu_hat, Eigen::MatrixXd& out)>;
struct BsdeEvalView {
  BsdeEvalFn y;
  BsdeEvalFn z;
};

BsdeEvalView view_of(const std::vector<BsdeStageNets>& nets, const BsdeSpec& bspec,
                     const TimeGrid& grid);
BsdeEvalView view_of(const BsdeGlobalNets& nets, const BsdeSpec& bspec, const TimeGrid& grid);

/// Closed-form systemic solution as a view (Y = V, P = 2 Q_t (x - mu_bar),
/// Z = sigma dx of those); mu_bar is the cloud mean.
BsdeEvalView systemic_exact_view(const SystemicParams& p);

// --- trainers -------------------------------------------------------------

/// Deep backward algorithm: backward induction on per-step (Y, Z) pairs, each
/// stage minimizing the one-step residual against the frozen next stage.
std::vector<BsdeStageNets> train_deep_backward(const ProblemSpec& spec, const BsdeSpec& bspec,
                                               const TrainConfig& cfg,
                                               TrainDiagnostics* diag = nullptr);

/// Deep backward multi-step: the stage loss telescopes to the terminal
/// condition through the frozen downstream stages (O(N_T^2) rollout work).
std::vector<BsdeStageNets> train_multistep_backward(const ProblemSpec& spec,
                                                    const BsdeSpec& bspec, const TrainConfig& cfg,
                                                    TrainDiagnostics* diag = nullptr);

/// Deep MKV BSDE: forward induction carrying Y from U(mu0), single global
/// loss on the terminal mismatch.
BsdeGlobalNets train_deep_mkv_global(const ProblemSpec& spec, const BsdeSpec& bspec,
                                     const TrainConfig& cfg, TrainDiagnostics* diag = nullptr);

/// Deep MKV BSDE global/local: one parameter set, loss summing the local
/// residuals along forward trajectories, terminal hard-wired to G.
BsdeGlobalNets train_global_local(const ProblemSpec& spec, const BsdeSpec& bspec,
                                  const TrainConfig& cfg, TrainDiagnostics* diag = nullptr);

/// Deep multi-step MKV BSDE: sum over stages of the telescoped-to-terminal
/// residuals along common forward paths.
BsdeGlobalNets train_global_multistep(const ProblemSpec& spec, const BsdeSpec& bspec,
                                      const TrainConfig& cfg, TrainDiagnostics* diag = nullptr);

// --- per-epoch objectives (exact gradients; exposed for diagnostics) -------

double deep_backward_stage_objective(const std::vector<BsdeStageNets>& nets, int stage,
                                     const ProblemSpec& spec, const BsdeSpec& bspec,
                                     const TrainConfig& cfg, std::uint64_t epoch,
                                     VectorXd* grad);
double multistep_stage_objective(const std::vector<BsdeStageNets>& nets, int stage,
                                 const ProblemSpec& spec, const BsdeSpec& bspec,
                                 const TrainConfig& cfg, std::uint64_t epoch, VectorXd* grad);
double deep_mkv_global_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t epoch, VectorXd* grad);
double global_local_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                              const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t epoch,
                              VectorXd* grad);
double global_multistep_objective(const BsdeGlobalNets& nets, const ProblemSpec& spec,
                                  const BsdeSpec& bspec, const TrainConfig& cfg,
                                  std::uint64_t epoch, VectorXd* grad);

// --- gradient-free Monte Carlo losses for arbitrary views ------------------

/// Loss of the deep backward stage objective under `view`.
double bsde_loss_local_stage(const BsdeEvalView& view, int stage, const ProblemSpec& spec,
                             const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t seed);
double bsde_loss_multistep_stage(const BsdeEvalView& view, int stage, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t seed);
double bsde_loss_global_terminal(const BsdeEvalView& view, const ProblemSpec& spec,
                                 const BsdeSpec& bspec, const TrainConfig& cfg,
                                 std::uint64_t seed);
double bsde_loss_global_local(const BsdeEvalView& view, const ProblemSpec& spec,
                              const BsdeSpec& bspec, const TrainConfig& cfg, std::uint64_t seed);
double bsde_loss_global_multistep(const BsdeEvalView& view, const ProblemSpec& spec,
                                  const BsdeSpec& bspec, const TrainConfig& cfg,
                                  std::uint64_t seed);

/// Value regression along carried forward paths: fits a scalar mean-field net
/// to the Y component transported to step k under `stack`.
MeanFieldNet regress_value_from_bsde(const BsdeStack& stack, const ProblemSpec& spec,
                                     const BsdeSpec& bspec, const TrainConfig& cfg, int at_step,
                                     TrainDiagnostics* diag = nullptr);

/// Carry stack for trained global nets (used by regress_value_from_bsde and
/// trajectory dumps).
BsdeStack carry_stack(const BsdeGlobalNets& nets, const TimeGrid& grid);

}  // namespace mfc
