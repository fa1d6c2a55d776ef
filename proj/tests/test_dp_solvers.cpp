#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfc/dp_solvers.hpp"
#include "mfc/errors.hpp"

using namespace mfc;

namespace {

TrainConfig tiny_config(MfVariant variant, int n_steps = 3) {
  TrainConfig cfg;
  cfg.m_batch = 2;
  cfg.n_particles = 12;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  cfg.grid = TimeGrid{0.2, n_steps};
  cfg.k_bins = 8;
  cfg.net.variant = variant;
  cfg.net.hidden = {6};
  cfg.net.latent_dim = 3;
  return cfg;
}

// Central finite differences over every parameter of the objective.
template <typename Loss>
void check_objective_grad(const VectorXd& analytic, VectorXd& params, const Loss& loss_at,
                          double tol) {
  const double step = 1e-5;
  int worst_idx = -1;
  double worst = 0.0;
  for (int i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + step;
    const double up = loss_at();
    params[i] = keep - step;
    const double dn = loss_at();
    params[i] = keep;
    const double fd = (up - dn) / (2.0 * step);
    const double err = std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
    if (err > worst) {
      worst = err;
      worst_idx = i;
    }
  }
  INFO("worst relative gradient error ", worst, " at parameter ", worst_idx);
  CHECK(worst < tol);
}

const SystemicParams kSys{};
const MeanVarParams kMeanVar{};

}  // namespace

TEST_CASE("global control objective gradient matches finite differences") {
  for (MfVariant variant : {MfVariant::Bin, MfVariant::Cylindrical}) {
    for (int which = 0; which < 2; ++which) {
      const ProblemSpec spec =
          which == 0 ? systemic_problem(kSys) : meanvar_problem(kMeanVar);
      TrainConfig cfg = tiny_config(variant);
      MeanFieldNet net = make_net(cfg, 1, true, 42 + which);
      VectorXd grad;
      global_control_objective(net, spec, cfg, 3, &grad);
      check_objective_grad(grad, net.params,
                           [&]() { return global_control_objective(net, spec, cfg, 3, nullptr); },
                           2e-5);
    }
  }
}

TEST_CASE("policy stage objective gradient matches finite differences") {
  const ProblemSpec spec = systemic_problem(kSys);
  for (MfVariant variant : {MfVariant::Bin, MfVariant::Cylindrical}) {
    TrainConfig cfg = tiny_config(variant);
    std::vector<MeanFieldNet> nets;
    for (int i = 0; i < cfg.grid.n_steps; ++i)
      nets.push_back(make_net(cfg, 1, false, 100 + i));
    const int stage = 1;
    VectorXd grad;
    policy_stage_objective(nets, stage, spec, cfg, 2, &grad);
    check_objective_grad(
        grad, nets[stage].params,
        [&]() { return policy_stage_objective(nets, stage, spec, cfg, 2, nullptr); }, 2e-5);
  }
}

TEST_CASE("zero-epoch training returns the initial parameters") {
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin);
  cfg.epochs = 0;
  const MeanFieldNet trained = train_global_control(spec, cfg);
  TrainConfig cfg2 = cfg;
  cfg2.epochs = 0;
  const MeanFieldNet again = train_global_control(spec, cfg2);
  CHECK(trained.params == again.params);
}

TEST_CASE("global control training: loss decreases and is deterministic") {
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin, 4);
  cfg.n_particles = 400;
  cfg.m_batch = 3;
  cfg.epochs = 120;
  cfg.lr = 3e-3;
  TrainDiagnostics diag;
  const MeanFieldNet net = train_global_control(spec, cfg, &diag);
  REQUIRE(static_cast<int>(diag.loss.size()) == cfg.epochs);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += diag.loss[i] / 20.0;
    tail += diag.loss[cfg.epochs - 20 + i] / 20.0;
  }
  CHECK(tail < head);

  const MeanFieldNet again = train_global_control(spec, cfg);
  CHECK(net.params == again.params);

  TrainConfig threaded = cfg;
  threaded.threads = 3;
  const MeanFieldNet par = train_global_control(spec, threaded);
  CHECK(par.params == net.params);
}

TEST_CASE("policy iteration at a single step matches value iteration's actor") {
  // With N_T = 1 both algorithms minimize E[f dt + g one step ahead].
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin, 1);
  cfg.n_particles = 2000;
  cfg.m_batch = 3;
  cfg.epochs = 250;
  cfg.lr = 5e-3;
  const std::vector<MeanFieldNet> pol = train_policy_iteration(spec, cfg);
  const ValueIterationNets vi = train_value_iteration(spec, cfg);

  const EvalConfig eval{20000, 77};
  const InitialDistribution mu0 = InitialDistribution::gaussian(0.0, 0.2);
  const double cost_pol = evaluate_policy_cost(policy_of(pol), spec, cfg, mu0, eval);
  const double cost_vi = evaluate_policy_cost(policy_of(vi.controls), spec, cfg, mu0, eval);
  // both costs target the same one-step optimum; tolerance covers the
  // training noise of two independent optimizations
  CHECK(std::abs(cost_pol - cost_vi) < 0.01);

  // the critic at step 0 regresses the same cost
  const double v0 = evaluate_net_expectation(vi.values[0], 0.0, spec, cfg, mu0, eval);
  CHECK(std::abs(v0 - cost_vi) < 0.02);
}

TEST_CASE("value regression: constant terminal cost is fit exactly") {
  ProblemSpec spec = systemic_problem(kSys);
  spec.run_cost = [](double, double, double) { return 0.0; };
  spec.run_dx = spec.run_da = spec.run_cost;
  spec.term_cost = [](double, double) { return 0.7; };
  spec.term_dx = [](double, double) { return 0.0; };

  TrainConfig cfg = tiny_config(MfVariant::Bin, 2);
  cfg.n_particles = 200;
  cfg.epochs = 1500;
  cfg.lr = 2e-2;
  MeanFieldNet control = make_net(cfg, 1, false, 9);
  control.params.setZero();
  std::vector<MeanFieldNet> controls(cfg.grid.n_steps, control);

  TrainDiagnostics diag;
  const MeanFieldNet value =
      regress_value(policy_of(controls), spec, cfg, cfg.grid.n_steps - 1, &diag);
  CHECK(diag.loss.back() < 1e-4);
  const double v = evaluate_net_expectation(value, cfg.grid.time(cfg.grid.n_steps - 1), spec,
                                            cfg, InitialDistribution::gaussian(0.0, 0.2),
                                            EvalConfig{4000, 3});
  CHECK(v == doctest::Approx(0.7).epsilon(0.02));
}

TEST_CASE("value regression agrees with the Monte Carlo cost (tower property)") {
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin, 2);
  cfg.n_particles = 2000;
  cfg.m_batch = 3;
  cfg.epochs = 800;
  cfg.lr = 1e-2;
  cfg.lr_decay = 0.5;
  cfg.lr_decay_every = 300;
  MeanFieldNet control = make_net(cfg, 1, false, 31);
  control.params.setZero();
  std::vector<MeanFieldNet> controls(cfg.grid.n_steps, control);

  const MeanFieldNet value = regress_value(policy_of(controls), spec, cfg, 0);
  // compare on measures drawn from the training family (the small test net
  // is not expected to extrapolate far outside it)
  const BinGrid grid = training_grid(spec, cfg);
  const EvalConfig eval{30000, 11};
  for (int trial = 0; trial < 4; ++trial) {
    RngStream rng(1000 + trial);
    const auto dist = InitialDistribution::from_bin(random_training_density(grid, rng));
    const double regressed = evaluate_net_expectation(value, 0.0, spec, cfg, dist, eval);
    const double simulated = evaluate_policy_cost(policy_of(controls), spec, cfg, dist, eval);
    CHECK(std::abs(regressed - simulated) < 0.06);
  }
}

TEST_CASE("training rejects invalid configurations") {
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin);
  cfg.m_batch = 0;
  CHECK_THROWS_AS(train_global_control(spec, cfg), ConfigError);
  cfg = tiny_config(MfVariant::Bin);
  cfg.lr = -1.0;
  CHECK_THROWS_AS(train_global_control(spec, cfg), ConfigError);
}

TEST_CASE("smoothed training loss is non-increasing on every benchmark") {
  // 100-epoch window means of the global-control loss, checked at a reduced
  // scale for each benchmark problem
  const ProblemSpec problems[3] = {systemic_problem(kSys), minmax_problem(MinMaxParams{}),
                                   meanvar_problem(kMeanVar)};
  for (const auto& spec : problems) {
    TrainConfig cfg = tiny_config(spec.vol_controlled ? MfVariant::Cylindrical : MfVariant::Bin, 5);
    cfg.n_particles = 1000;
    cfg.m_batch = 3;
    cfg.epochs = 600;
    cfg.lr = 2e-3;
    cfg.lr_decay = 0.5;
    cfg.lr_decay_every = 150;
    cfg.k_bins = spec.name == "meanvar" ? 60 : 30;
    TrainDiagnostics diag;
    train_global_control(spec, cfg, &diag);
    std::vector<double> window;
    for (int w = 0; w + 100 <= cfg.epochs; w += 100) {
      double mean = 0.0;
      for (int i = 0; i < 100; ++i) mean += diag.loss[w + i] / 100.0;
      window.push_back(mean);
    }
    for (std::size_t i = 1; i < window.size(); ++i) {
      INFO(spec.name, " window ", i, ": ", window[i - 1], " -> ", window[i]);
      // block means carry Monte Carlo noise from the fresh measure draws
      const double slack = 0.03 * (std::abs(window[i - 1]) + 0.01);
      CHECK(window[i] <= window[i - 1] + slack);
    }
    CHECK(window.back() < window.front());
  }
}

TEST_CASE("policy iteration: trained cost stays above the analytic value") {
  // any admissible control costs at least v(mu0) up to discretization and
  // Monte Carlo error
  const ProblemSpec spec = systemic_problem(kSys);
  TrainConfig cfg = tiny_config(MfVariant::Bin, 3);
  cfg.n_particles = 1500;
  cfg.m_batch = 3;
  cfg.epochs = 250;
  cfg.lr = 4e-3;
  cfg.lr_decay = 0.5;
  cfg.lr_decay_every = 100;
  TrainDiagnostics diag;
  const auto nets = train_policy_iteration(spec, cfg, &diag);

  // per-stage smoothed improvement: the last 50-epoch window of each stage
  // does not exceed its first 50-epoch window
  for (int stage = 0; stage < cfg.grid.n_steps; ++stage) {
    const int base = stage * cfg.epochs;
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) {
      head += diag.loss[base + i] / 50.0;
      tail += diag.loss[base + cfg.epochs - 50 + i] / 50.0;
    }
    CHECK(tail <= head + 0.05 * (std::abs(head) + 0.01));
  }

  const auto cases = systemic_cases(kSys);
  const EvalConfig eval{30000, 5};
  for (int ci : {0, 4}) {
    const double cost = evaluate_policy_cost(policy_of(nets), spec, cfg, cases[ci].mu0, eval);
    CHECK(cost >= *cases[ci].reference - 0.01);
  }
}
