#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <vector>

#include "mfc/measure.hpp"
#include "mfc/mfnn.hpp"
#include "mfc/problems.hpp"

namespace mfc {

struct TimeGrid {
  double horizon = 0.0;
  int n_steps = 1;

  double dt() const { return horizon / n_steps; }
  double time(int i) const { return i * dt(); }
};

void validate(const TimeGrid& grid);

/// One Euler-Maruyama step x + b dt + sigma dw. Throws SimulationDiverged on a
/// non-finite result.
double euler_step(double x, double mu_bar, double a, double dw, const ProblemSpec& spec,
                  double dt);

/// Particle clouds per (distribution, step) with the per-step estimated bin
/// densities. Buffers are preallocated on first use and reused across epochs.
struct TrajectoryBatch {
  TimeGrid grid;
  int n_particles = 0;

  struct Path {
    std::vector<Eigen::MatrixXd> x;   // N_T+1 rows of 1 x N
    std::vector<Eigen::MatrixXd> a;   // N_T rows of 1 x N (controlled rollouts)
    std::vector<Eigen::MatrixXd> dw;  // N_T rows of 1 x N
    std::vector<Eigen::MatrixXd> y;   // N_T+1 blocks of 2 x N (BSDE rollouts)
    std::vector<BinDensity> mu_hat;   // N_T+1 estimated densities
    std::vector<Moments> mu_mom;      // histogram moments of mu_hat
    bool boundary_clamped = false;    // an estimate clamped particles at the edge
  };
  std::vector<Path> paths;
};

/// Controlled rollout: X_0 ~ mu0 by inverse transform, control evaluated at
/// (t_i, X_i, mu_hat_i), densities re-estimated after every step. Brownian
/// increments are drawn from substreams keyed by (seed, epoch_key, m), so the
/// batch is reproducible for any thread count. When `contexts` is non-null the
/// per-step network contexts are retained for a reverse pass.
void rollout_controlled(const MeanFieldNet& control, const std::vector<BinDensity>& mu0,
                        int n_particles, const TimeGrid& grid, const ProblemSpec& spec,
                        std::uint64_t seed, std::uint64_t epoch_key, TrajectoryBatch& out,
                        std::vector<std::vector<MfContext>>* contexts = nullptr);

/// J_{M,N} = (1/MN) sum_{m,n} [ sum_i f(X_i, mu_hat_i, a_i) dt + g(X_T, mu_hat_T) ].
double cost_estimate(const TrajectoryBatch& batch, const ProblemSpec& spec);

/// Network stack driving a BSDE forward rollout. `y_at`/`z_at` fill a 2 x N
/// block for step i; they may close over per-step nets, a time-dependent net,
/// or a closed-form solution. With `carry_y` set the Y component is advanced
/// by the driver estimate plus Z dW (the global algorithms' forward
/// induction) and the drift consumes the carried values; otherwise the drift
/// consumes y_at(i) evaluated on the fly.
struct BsdeStack {
  std::function<void(int i, double t, const Eigen::MatrixXd& x, const BinDensity& mu_hat,
                     Eigen::MatrixXd& out)>
      y_at;
  std::function<void(int i, double t, const Eigen::MatrixXd& x, const BinDensity& mu_hat,
                     Eigen::MatrixXd& out)>
      z_at;
  bool carry_y = false;
};

/// Forward rollout of the generic MKV FBSDE. Law moments inside the drift and
/// driver are empirical cloud means; histograms are estimated for network
/// inputs. Fills path.y with the carried (or per-step evaluated) values.
void rollout_bsde_forward(const BsdeStack& stack, const std::vector<BinDensity>& mu0,
                          int n_particles, const TimeGrid& grid, const BsdeSpec& bspec,
                          std::uint64_t seed, std::uint64_t epoch_key, TrajectoryBatch& out);

}  // namespace mfc
