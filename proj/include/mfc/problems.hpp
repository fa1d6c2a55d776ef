#pragma once

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfc/measure.hpp"

namespace mfc {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Coefficients of a controlled McKean-Vlasov problem in one state dimension.
/// All law dependence is through the first moment mu_bar of the measure, so
/// coefficient maps take (x, mu_bar, a). Partial derivatives back the
/// reverse-mode passes of the trainers.
struct ProblemSpec {
  std::string name;
  double horizon = 0.0;
  double domain_lo = 0.0;  // default truncation domain K
  double domain_hi = 1.0;
  int action_dim = 1;
  bool has_bsde_form = false;
  bool vol_controlled = false;

  using Coeff = std::function<double(double x, double mu, double a)>;
  using TermCoeff = std::function<double(double x, double mu)>;

  Coeff drift, drift_dx, drift_da;
  Coeff vol, vol_dx, vol_da;
  Coeff run_cost, run_dx, run_da;
  TermCoeff term_cost, term_dx;

  /// Closed-form Hamiltonian minimizer a_hat(x, mu_bar, p, M). Problems with
  /// uncontrolled volatility ignore the second-order argument M; the
  /// mean-variance minimizer requires M > 0.
  std::function<double(double x, double mu, double p, double m2)> argmin_hamiltonian;
};

/// Generic MKV forward-backward system with Y = (Y, P) and Z = (Z, M).
/// The driver gives the dY drift once the tilde-expectation has been reduced
/// to the cloud moments (mu_bar, p_bar); it is affine in those moments for
/// every benchmark carrying a BSDE form.
struct BsdeSpec {
  std::string name;
  double horizon = 0.0;
  int y_dim = 2;
  int z_dim = 2;

  std::function<double(double x, double mu, const Vec2& y)> forward_drift;
  std::function<double(double x, double mu)> vol;
  std::function<Vec2(double x, const Vec2& y, const Vec2& z, double mu, double pbar)> driver;
  std::function<Vec2(double x, double mu)> terminal;

  // Partials for reverse mode.
  double fdrift_dx = 0.0, fdrift_dmu = 0.0;
  Vec2 fdrift_dy = Vec2::Zero();
  std::function<Vec2(double x, const Vec2& y, double mu)> driver_dx;
  std::function<Mat2(double x, const Vec2& y, double mu)> driver_dy;  // (i,j) = dH_i/dy_j
  std::function<Vec2(double x, const Vec2& y, double mu)> driver_dmu;
  Vec2 driver_dpbar = Vec2::Zero();
  std::function<Vec2(double x, double mu)> terminal_dx;
  std::function<Vec2(double x, double mu)> terminal_dmu;
};

// ---------------------------------------------------------------------------
// Systemic risk (mean-reverting interbank model, LQ with Riccati closed form)
// ---------------------------------------------------------------------------

struct SystemicParams {
  double kappa = 0.6;
  double q = 0.8;
  double eta = 2.0;
  double c = 2.0;
  double sigma = 1.0;
  double horizon = 0.2;
};

void validate(const SystemicParams& p);

ProblemSpec systemic_problem(const SystemicParams& p);
BsdeSpec systemic_bsde(const SystemicParams& p);

/// Riccati closed forms: Q_t and the exact integral int_t^T Q_s ds.
struct SystemicQ {
  double q_t = 0.0;
  double int_q = 0.0;
};
SystemicQ systemic_Q(double t, const SystemicParams& p);

/// v(0, mu0) = Q_0 Var(mu0) + sigma^2 int_0^T Q_s ds.
double systemic_value(const Moments& mu0, const SystemicParams& p);
double systemic_value(const BinDensity& mu0, const SystemicParams& p);
double systemic_value(const InitialDistribution& mu0, const SystemicParams& p);

/// Optimal feedback a*(t, x, mu) = (q + 2 Q_t)(mu_bar - x).
double systemic_feedback(double t, double x, double mu, const SystemicParams& p);

/// Exact solution handles used by the BSDE plug-in regression tests:
/// Y = Q_t (x - mu)^2 + sigma^2 int_t^T Q, P = 2 Q_t (x - mu),
/// Z = 2 sigma Q_t (x - mu), M = 2 sigma Q_t.
Vec2 systemic_exact_y(double t, double x, double mu, const SystemicParams& p);
Vec2 systemic_exact_z(double t, double x, double mu, const SystemicParams& p);

// ---------------------------------------------------------------------------
// Min/max linear-quadratic model (two terminal targets)
// ---------------------------------------------------------------------------

struct MinMaxParams {
  double a_lin = 1.0;
  double a_bar = 0.5;
  double b_ctrl = 1.0;
  double q_cost = 1.0;
  double qbar_cost = 1.0;
  double s_track = 1.0;
  double r_cost = 1.0;
  double sigma = 0.5;
  double zeta1 = 0.25;
  double zeta2 = 1.75;
  double horizon = 0.2;
};

void validate(const MinMaxParams& p);

ProblemSpec minmax_problem(const MinMaxParams& p);
BsdeSpec minmax_bsde(const MinMaxParams& p);

// ---------------------------------------------------------------------------
// Mean-variance (Markowitz) problem: controlled volatility, no BSDE form
// ---------------------------------------------------------------------------

struct MeanVarParams {
  double beta = 0.1;
  double nu = 0.4;
  double lambda = 0.5;
  double horizon = 0.2;

  double rate() const { return beta * beta / (nu * nu); }
};

void validate(const MeanVarParams& p);

ProblemSpec meanvar_problem(const MeanVarParams& p);

/// v(mu0) = lambda e^{-RT} Var(mu0) - mean(mu0) - (e^{RT} - 1)/(4 lambda).
double meanvar_value(const Moments& mu0, const MeanVarParams& p);
double meanvar_value(const BinDensity& mu0, const MeanVarParams& p);
double meanvar_value(const InitialDistribution& mu0, const MeanVarParams& p);

/// Optimal feedback a*(t, x, mu) = -(beta/nu^2)(x - mu_bar - e^{R(T-t)}/(2 lambda)).
double meanvar_feedback(double t, double x, double mu, const MeanVarParams& p);

// ---------------------------------------------------------------------------
// Monte Carlo driver estimate over a particle cloud
// ---------------------------------------------------------------------------

/// Empirical first moments of a BSDE particle cloud: mu_bar over positions
/// and p_bar over the P components of the carried values.
struct CloudMoments {
  double mu_bar = 0.0;
  double p_bar = 0.0;
};

CloudMoments cloud_moments(const Eigen::Ref<const Eigen::VectorXd>& x,
                           const Eigen::Ref<const Eigen::VectorXd>& p);

/// dY drift for particle n: the tilde-expectation collapses onto the cloud
/// moments because every benchmark driver is affine in the tilde averages.
Vec2 bsde_driver_estimate(const BsdeSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x,
                          const Eigen::Ref<const Eigen::MatrixXd>& y,
                          const Eigen::Ref<const Eigen::MatrixXd>& z, const CloudMoments& moments,
                          int n);

// ---------------------------------------------------------------------------
// Benchmark case registry (the paper's test distributions, by problem)
// ---------------------------------------------------------------------------

struct BenchmarkCase {
  std::string name;  // "case1".."case6"
  InitialDistribution mu0;
  std::optional<double> reference;  // analytic value or stored external reference
};

std::vector<BenchmarkCase> systemic_cases(const SystemicParams& p);
std::vector<BenchmarkCase> meanvar_cases(const MeanVarParams& p);
/// Min/max references exist only for horizons 0.2 and 0.5 (stored constants
/// from an external solver); other horizons yield cases without references.
std::vector<BenchmarkCase> minmax_cases(const MinMaxParams& p);

}  // namespace mfc
