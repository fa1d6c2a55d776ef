#pragma once

#include "mfc/train.hpp"

namespace mfc {

/// Global learning on the control: one time-dependent mean-field network
/// trained on the full discretized cost over fresh random measure batches.
MeanFieldNet train_global_control(const ProblemSpec& spec, const TrainConfig& cfg,
                                  TrainDiagnostics* diag = nullptr);

/// One-epoch objective J_{M,N} and its exact parameter gradient at fixed
/// draws. Exposed for gradient diagnostics; the trainer steps on this.
double global_control_objective(const MeanFieldNet& net, const ProblemSpec& spec,
                                const TrainConfig& cfg, std::uint64_t epoch, VectorXd* grad);

/// Policy iteration: backward loop over per-step networks, each stage
/// minimizing the cost-to-go with downstream controls frozen; stage i is
/// warm-started from stage i+1.
std::vector<MeanFieldNet> train_policy_iteration(const ProblemSpec& spec, const TrainConfig& cfg,
                                                 TrainDiagnostics* diag = nullptr);

/// Stage-i objective of policy iteration (net at `stage` trainable,
/// downstream nets frozen).
double policy_stage_objective(const std::vector<MeanFieldNet>& nets, int stage,
                              const ProblemSpec& spec, const TrainConfig& cfg,
                              std::uint64_t epoch, VectorXd* grad);

/// Actor/critic value iteration. values[i] approximates V at t_i for
/// i = 0..N_T-1; the terminal value is the closed-form g, never a network.
struct ValueIterationNets {
  std::vector<MeanFieldNet> controls;
  std::vector<MeanFieldNet> values;
};

ValueIterationNets train_value_iteration(const ProblemSpec& spec, const TrainConfig& cfg,
                                         TrainDiagnostics* diag = nullptr);

/// Value-function regression at step i under a frozen policy: fits a
/// mean-field net to the realized cost-to-go from fresh measure draws.
MeanFieldNet regress_value(const PolicyView& policy, const ProblemSpec& spec,
                           const TrainConfig& cfg, int at_step,
                           TrainDiagnostics* diag = nullptr);

}  // namespace mfc
