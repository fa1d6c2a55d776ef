#include "mfc/problems.hpp"

#include <cmath>

#include "mfc/errors.hpp"

namespace mfc {

namespace {
constexpr double kRoot3Over10 = 0.17320508075688772935;  // sqrt(3)/10

void assign_domain(ProblemSpec& spec, double lo, double hi) {
  spec.domain_lo = lo;
  spec.domain_hi = hi;
}
}  // namespace

// ---------------------------------------------------------------------------
// Systemic risk
// ---------------------------------------------------------------------------

void validate(const SystemicParams& p) {
  if (!(p.sigma > 0.0)) throw ParamError("systemic: sigma must be positive");
  if (!(p.horizon > 0.0)) throw ParamError("systemic: horizon must be positive");
  if (!(p.q * p.q <= p.eta)) throw ParamError("systemic: needs q^2 <= eta");
  if (p.kappa < 0.0 || p.q < 0.0 || p.c < 0.0) throw ParamError("systemic: negative coefficient");
}

ProblemSpec systemic_problem(const SystemicParams& p) {
  validate(p);
  ProblemSpec spec;
  spec.name = "systemic";
  spec.horizon = p.horizon;
  assign_domain(spec, -1.38, 1.62);
  spec.has_bsde_form = true;
  spec.vol_controlled = false;

  const double kappa = p.kappa, q = p.q, eta = p.eta, c = p.c, sigma = p.sigma;
  spec.drift = [kappa](double x, double mu, double a) { return kappa * (mu - x) + a; };
  spec.drift_dx = [kappa](double, double, double) { return -kappa; };
  spec.drift_da = [](double, double, double) { return 1.0; };
  spec.vol = [sigma](double, double, double) { return sigma; };
  spec.vol_dx = [](double, double, double) { return 0.0; };
  spec.vol_da = [](double, double, double) { return 0.0; };
  spec.run_cost = [q, eta](double x, double mu, double a) {
    const double d = mu - x;
    return 0.5 * a * a - q * a * d + 0.5 * eta * d * d;
  };
  spec.run_dx = [q, eta](double x, double mu, double a) { return q * a - eta * (mu - x); };
  spec.run_da = [q](double x, double mu, double a) { return a - q * (mu - x); };
  spec.term_cost = [c](double x, double mu) {
    const double d = x - mu;
    return 0.5 * c * d * d;
  };
  spec.term_dx = [c](double x, double mu) { return c * (x - mu); };
  spec.argmin_hamiltonian = [q](double x, double mu, double p_, double) {
    return q * (mu - x) - p_;
  };
  return spec;
}

SystemicQ systemic_Q(double t, const SystemicParams& p) {
  validate(p);
  if (t < 0.0 || t > p.horizon) throw ParamError("systemic_Q: t outside [0, T]");
  const double rho = p.kappa + p.q;
  const double root = std::sqrt(rho * rho + p.eta - p.q * p.q);
  const double s = p.horizon - t;
  const double ch = std::cosh(root * s);
  const double sh = std::sinh(root * s);
  const double rc = rho + p.c;
  SystemicQ out;
  out.q_t = -0.5 * (rho - root * (root * sh + rc * ch) / (root * ch + rc * sh));
  out.int_q = 0.5 * std::log(ch + rc / root * sh) - 0.5 * rho * s;
  return out;
}

double systemic_value(const Moments& mu0, const SystemicParams& p) {
  const SystemicQ q0 = systemic_Q(0.0, p);
  return q0.q_t * mu0.var + p.sigma * p.sigma * q0.int_q;
}

double systemic_value(const BinDensity& mu0, const SystemicParams& p) {
  return systemic_value(density_moments(mu0), p);
}

double systemic_value(const InitialDistribution& mu0, const SystemicParams& p) {
  return systemic_value(mu0.exact_moments(), p);
}

double systemic_feedback(double t, double x, double mu, const SystemicParams& p) {
  return (p.q + 2.0 * systemic_Q(t, p).q_t) * (mu - x);
}

Vec2 systemic_exact_y(double t, double x, double mu, const SystemicParams& p) {
  const SystemicQ q = systemic_Q(t, p);
  const double d = x - mu;
  return Vec2(q.q_t * d * d + p.sigma * p.sigma * q.int_q, 2.0 * q.q_t * d);
}

Vec2 systemic_exact_z(double t, double x, double mu, const SystemicParams& p) {
  const double qt = systemic_Q(t, p).q_t;
  return Vec2(2.0 * p.sigma * qt * (x - mu), 2.0 * p.sigma * qt);
}

BsdeSpec systemic_bsde(const SystemicParams& p) {
  validate(p);
  BsdeSpec spec;
  spec.name = "systemic";
  spec.horizon = p.horizon;
  const double rho = p.kappa + p.q;
  const double eq = p.eta - p.q * p.q;
  const double c = p.c, sigma = p.sigma;

  spec.forward_drift = [rho](double x, double mu, const Vec2& y) {
    return rho * (mu - x) - y[1];
  };
  spec.fdrift_dx = -rho;
  spec.fdrift_dmu = rho;
  spec.fdrift_dy = Vec2(0.0, -1.0);
  spec.vol = [sigma](double, double) { return sigma; };

  spec.driver = [rho, eq](double x, const Vec2& y, const Vec2&, double mu, double pbar) {
    const double d = mu - x;
    return Vec2(-(0.5 * eq * d * d + 0.5 * y[1] * y[1]), -rho * (pbar - y[1]) + eq * d);
  };
  spec.driver_dx = [eq](double x, const Vec2&, double mu) {
    return Vec2(eq * (mu - x), -eq);
  };
  spec.driver_dy = [rho](double, const Vec2& y, double) {
    Mat2 g = Mat2::Zero();
    g(0, 1) = -y[1];
    g(1, 1) = rho;
    return g;
  };
  spec.driver_dmu = [eq](double x, const Vec2&, double mu) {
    return Vec2(-eq * (mu - x), eq);
  };
  spec.driver_dpbar = Vec2(0.0, -rho);

  spec.terminal = [c](double x, double mu) {
    const double d = x - mu;
    return Vec2(0.5 * c * d * d, c * d);
  };
  spec.terminal_dx = [c](double x, double mu) { return Vec2(c * (x - mu), c); };
  spec.terminal_dmu = [c](double x, double mu) { return Vec2(-c * (x - mu), -c); };
  return spec;
}

std::vector<BenchmarkCase> systemic_cases(const SystemicParams& p) {
  const double k4 = kRoot3Over10, k5 = 0.25, k6 = 0.3;
  std::vector<BenchmarkCase> cases;
  cases.push_back({"case1", InitialDistribution::gaussian(0.0, 0.2), {}});
  cases.push_back({"case2", InitialDistribution::gaussian(0.3, 0.05), {}});
  cases.push_back({"case3", InitialDistribution::gaussian(0.0, 0.05), {}});
  cases.push_back({"case4", InitialDistribution::mixture({{0.5, -k4, 0.1}, {0.5, k4, 0.1}}), {}});
  cases.push_back({"case5", InitialDistribution::mixture({{0.5, -k5, 0.1}, {0.5, k5, 0.1}}), {}});
  cases.push_back(
      {"case6",
       InitialDistribution::mixture({{1.0 / 3, -k6, 0.07}, {1.0 / 3, k6, 0.07}, {1.0 / 3, 0.0, 0.07}}),
       {}});
  for (auto& c : cases) c.reference = systemic_value(c.mu0, p);
  return cases;
}

// ---------------------------------------------------------------------------
// Min/max LQ model
// ---------------------------------------------------------------------------

void validate(const MinMaxParams& p) {
  if (!(p.r_cost > 0.0)) throw ParamError("minmax: R must be positive");
  if (p.q_cost < 0.0 || p.qbar_cost < 0.0 || p.s_track < 0.0)
    throw ParamError("minmax: Q, Qbar, S must be non-negative");
  if (!(p.sigma > 0.0)) throw ParamError("minmax: sigma must be positive");
  if (!(p.horizon > 0.0)) throw ParamError("minmax: horizon must be positive");
}

namespace {
double minmax_zeta_near(const MinMaxParams& p, double x) {
  const double mid = 0.5 * (p.zeta1 + p.zeta2);
  return x <= mid ? std::min(p.zeta1, p.zeta2) : std::max(p.zeta1, p.zeta2);
}
}  // namespace

ProblemSpec minmax_problem(const MinMaxParams& p) {
  validate(p);
  ProblemSpec spec;
  spec.name = "minmax";
  spec.horizon = p.horizon;
  // Paper domains for the two studied horizons; reuse the wider one otherwise.
  if (p.horizon <= 0.35)
    assign_domain(spec, 0.21, 2.72);
  else
    assign_domain(spec, -0.40, 3.21);
  spec.has_bsde_form = true;
  spec.vol_controlled = false;

  const double A = p.a_lin, Ab = p.a_bar, B = p.b_ctrl, Q = p.q_cost, Qb = p.qbar_cost;
  const double S = p.s_track, R = p.r_cost, sigma = p.sigma;
  const MinMaxParams pc = p;

  spec.drift = [A, Ab, B](double x, double mu, double a) { return A * x + Ab * mu + B * a; };
  spec.drift_dx = [A](double, double, double) { return A; };
  spec.drift_da = [B](double, double, double) { return B; };
  spec.vol = [sigma](double, double, double) { return sigma; };
  spec.vol_dx = [](double, double, double) { return 0.0; };
  spec.vol_da = [](double, double, double) { return 0.0; };
  spec.run_cost = [Q, Qb, S, R](double x, double mu, double a) {
    const double d = x - S * mu;
    return 0.5 * (Q * x * x + Qb * d * d + R * a * a);
  };
  spec.run_dx = [Q, Qb, S](double x, double mu, double) { return Q * x + Qb * (x - S * mu); };
  spec.run_da = [R](double, double, double a) { return R * a; };
  spec.term_cost = [pc](double x, double) {
    const double d1 = x - pc.zeta1, d2 = x - pc.zeta2;
    return std::min(d1 * d1, d2 * d2);
  };
  spec.term_dx = [pc](double x, double) { return 2.0 * (x - minmax_zeta_near(pc, x)); };
  spec.argmin_hamiltonian = [B, R](double, double, double p_, double) { return -B / R * p_; };
  return spec;
}

BsdeSpec minmax_bsde(const MinMaxParams& p) {
  validate(p);
  BsdeSpec spec;
  spec.name = "minmax";
  spec.horizon = p.horizon;
  const double A = p.a_lin, Ab = p.a_bar, Q = p.q_cost, Qb = p.qbar_cost;
  const double S = p.s_track, sigma = p.sigma;
  const double b2r = p.b_ctrl * p.b_ctrl / p.r_cost;
  const MinMaxParams pc = p;

  spec.forward_drift = [A, Ab, b2r](double x, double mu, const Vec2& y) {
    return A * x + Ab * mu - b2r * y[1];
  };
  spec.fdrift_dx = A;
  spec.fdrift_dmu = Ab;
  spec.fdrift_dy = Vec2(0.0, -b2r);
  spec.vol = [sigma](double, double) { return sigma; };

  spec.driver = [A, Ab, Q, Qb, S, b2r](double x, const Vec2& y, const Vec2&, double mu,
                                       double pbar) {
    const double ds = x - S * mu;
    return Vec2(-0.5 * (Q * x * x + Qb * ds * ds + b2r * y[1] * y[1]),
                -(A * y[1] + Ab * pbar + Q * x + Qb * (x - mu) + Qb * (S - 1.0) * (S - 1.0) * mu));
  };
  spec.driver_dx = [Q, Qb, S](double x, const Vec2&, double mu) {
    return Vec2(-(Q * x + Qb * (x - S * mu)), -(Q + Qb));
  };
  spec.driver_dy = [A, b2r](double, const Vec2& y, double) {
    Mat2 g = Mat2::Zero();
    g(0, 1) = -b2r * y[1];
    g(1, 1) = -A;
    return g;
  };
  spec.driver_dmu = [Qb, S](double x, const Vec2&, double mu) {
    return Vec2(Qb * S * (x - S * mu), Qb - Qb * (S - 1.0) * (S - 1.0));
  };
  spec.driver_dpbar = Vec2(0.0, -Ab);

  spec.terminal = [pc](double x, double) {
    const double d1 = x - pc.zeta1, d2 = x - pc.zeta2;
    return Vec2(std::min(d1 * d1, d2 * d2), 2.0 * (x - minmax_zeta_near(pc, x)));
  };
  spec.terminal_dx = [pc](double x, double) {
    return Vec2(2.0 * (x - minmax_zeta_near(pc, x)), 2.0);
  };
  spec.terminal_dmu = [](double, double) { return Vec2::Zero(); };
  return spec;
}

std::vector<BenchmarkCase> minmax_cases(const MinMaxParams& p) {
  std::vector<BenchmarkCase> cases;
  cases.push_back({"case1", InitialDistribution::gaussian(1.0, 0.2), {}});
  cases.push_back(
      {"case2", InitialDistribution::mixture({{0.5, p.zeta1, 0.15}, {0.5, p.zeta2, 0.15}}), {}});
  cases.push_back({"case3",
                   InitialDistribution::mixture({{0.4, p.zeta1, 0.05},
                                                 {0.2, p.zeta2, 0.05},
                                                 {0.4, p.zeta1 + p.zeta2, 0.05}}),
                   {}});
  // External reference values (Carmona-Lauriere style solver), stored for the
  // two horizons reported in the source tables.
  if (std::abs(p.horizon - 0.2) < 1e-12) {
    cases[0].reference = 0.484;
    cases[1].reference = 0.494;
    cases[2].reference = 0.491;
  } else if (std::abs(p.horizon - 0.5) < 1e-12) {
    cases[0].reference = 0.818;
    cases[1].reference = 1.082;
    cases[2].reference = 0.836;
  }
  return cases;
}

// ---------------------------------------------------------------------------
// Mean-variance
// ---------------------------------------------------------------------------

void validate(const MeanVarParams& p) {
  if (!(p.nu > 0.0)) throw ParamError("meanvar: nu must be positive");
  if (!(p.lambda > 0.0)) throw ParamError("meanvar: lambda must be positive");
  if (!(p.horizon > 0.0)) throw ParamError("meanvar: horizon must be positive");
}

ProblemSpec meanvar_problem(const MeanVarParams& p) {
  validate(p);
  ProblemSpec spec;
  spec.name = "meanvar";
  spec.horizon = p.horizon;
  assign_domain(spec, -0.85, 0.9);
  spec.has_bsde_form = false;
  spec.vol_controlled = true;

  const double beta = p.beta, nu = p.nu, lambda = p.lambda;
  spec.drift = [beta](double, double, double a) { return a * beta; };
  spec.drift_dx = [](double, double, double) { return 0.0; };
  spec.drift_da = [beta](double, double, double) { return beta; };
  spec.vol = [nu](double, double, double a) { return a * nu; };
  spec.vol_dx = [](double, double, double) { return 0.0; };
  spec.vol_da = [nu](double, double, double) { return nu; };
  spec.run_cost = [](double, double, double) { return 0.0; };
  spec.run_dx = [](double, double, double) { return 0.0; };
  spec.run_da = [](double, double, double) { return 0.0; };
  spec.term_cost = [lambda](double x, double mu) {
    const double d = x - mu;
    return lambda * d * d - x;
  };
  spec.term_dx = [lambda](double x, double mu) { return 2.0 * lambda * (x - mu) - 1.0; };
  spec.argmin_hamiltonian = [beta, nu](double, double, double p_, double m2) {
    if (!(m2 > 0.0)) throw ParamError("meanvar Hamiltonian minimizer needs M > 0");
    return -beta * p_ / (nu * nu * m2);
  };
  return spec;
}

double meanvar_value(const Moments& mu0, const MeanVarParams& p) {
  validate(p);
  const double rt = p.rate() * p.horizon;
  return p.lambda * std::exp(-rt) * mu0.var - mu0.mean - (std::exp(rt) - 1.0) / (4.0 * p.lambda);
}

double meanvar_value(const BinDensity& mu0, const MeanVarParams& p) {
  return meanvar_value(density_moments(mu0), p);
}

double meanvar_value(const InitialDistribution& mu0, const MeanVarParams& p) {
  return meanvar_value(mu0.exact_moments(), p);
}

double meanvar_feedback(double t, double x, double mu, const MeanVarParams& p) {
  const double ert = std::exp(p.rate() * (p.horizon - t));
  return -p.beta / (p.nu * p.nu) * (x - mu - ert / (2.0 * p.lambda));
}

std::vector<BenchmarkCase> meanvar_cases(const MeanVarParams& p) {
  const double k4 = kRoot3Over10;
  std::vector<BenchmarkCase> cases;
  cases.push_back({"case1", InitialDistribution::gaussian(0.1, 0.2), {}});
  cases.push_back({"case2", InitialDistribution::gaussian(0.1, 0.025), {}});
  cases.push_back({"case3", InitialDistribution::gaussian(0.3, 0.05), {}});
  cases.push_back(
      {"case4", InitialDistribution::mixture({{0.5, 0.1 - k4, 0.1}, {0.5, 0.1 + k4, 0.1}}), {}});
  cases.push_back(
      {"case5", InitialDistribution::mixture({{0.5, -0.05, 0.1}, {0.5, 0.15, 0.1}}), {}});
  cases.push_back({"case6",
                   InitialDistribution::mixture(
                       {{0.4, -0.1, 0.07}, {0.4, 0.5, 0.07}, {0.2, 0.2, 0.07}}),
                   {}});
  for (auto& c : cases) c.reference = meanvar_value(c.mu0, p);
  return cases;
}

// ---------------------------------------------------------------------------
// Cloud moments and the Monte Carlo driver estimate
// ---------------------------------------------------------------------------

CloudMoments cloud_moments(const Eigen::Ref<const Eigen::VectorXd>& x,
                           const Eigen::Ref<const Eigen::VectorXd>& p) {
  if (x.size() == 0) throw EstimationError("empty cloud");
  CloudMoments m;
  m.mu_bar = x.mean();
  m.p_bar = p.size() > 0 ? p.mean() : 0.0;
  return m;
}

Vec2 bsde_driver_estimate(const BsdeSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& x,
                          const Eigen::Ref<const Eigen::MatrixXd>& y,
                          const Eigen::Ref<const Eigen::MatrixXd>& z, const CloudMoments& moments,
                          int n) {
  if (x.size() == 0) throw EstimationError("empty cloud");
  return spec.driver(x[n], y.col(n), z.col(n), moments.mu_bar, moments.p_bar);
}

}  // namespace mfc
