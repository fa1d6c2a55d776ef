#include "mfc/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mfc/bsde_solvers.hpp"
#include "mfc/checkpoint.hpp"
#include "mfc/dp_solvers.hpp"
#include "mfc/errors.hpp"

namespace mfc {

using nlohmann::json;

namespace {

template <typename T>
void read_into(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

ProblemId problem_from_string(const std::string& s) {
  if (s == "systemic") return ProblemId::Systemic;
  if (s == "minmax") return ProblemId::MinMax;
  if (s == "meanvar") return ProblemId::MeanVar;
  throw ConfigError("unknown problem id: " + s);
}

}  // namespace

std::string problem_name(ProblemId id) {
  switch (id) {
    case ProblemId::Systemic: return "systemic";
    case ProblemId::MinMax: return "minmax";
    default: return "meanvar";
  }
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  ExperimentConfig cfg;

  if (j.contains("problem")) {
    const json& p = j.at("problem");
    if (p.contains("id")) cfg.problem = problem_from_string(p.at("id").get<std::string>());
    double horizon = 0.0;
    read_into(p, "horizon", horizon);
    const json params = p.value("params", json::object());
    read_into(params, "kappa", cfg.systemic.kappa);
    read_into(params, "q", cfg.systemic.q);
    read_into(params, "eta", cfg.systemic.eta);
    read_into(params, "c", cfg.systemic.c);
    read_into(params, "sigma", cfg.systemic.sigma);
    read_into(params, "a_lin", cfg.minmax.a_lin);
    read_into(params, "a_bar", cfg.minmax.a_bar);
    read_into(params, "b_ctrl", cfg.minmax.b_ctrl);
    read_into(params, "q_cost", cfg.minmax.q_cost);
    read_into(params, "qbar_cost", cfg.minmax.qbar_cost);
    read_into(params, "s_track", cfg.minmax.s_track);
    read_into(params, "r_cost", cfg.minmax.r_cost);
    if (cfg.problem == ProblemId::MinMax) read_into(params, "sigma", cfg.minmax.sigma);
    read_into(params, "zeta1", cfg.minmax.zeta1);
    read_into(params, "zeta2", cfg.minmax.zeta2);
    read_into(params, "beta", cfg.meanvar.beta);
    read_into(params, "nu", cfg.meanvar.nu);
    read_into(params, "lambda", cfg.meanvar.lambda);
    if (horizon > 0.0) {
      cfg.systemic.horizon = horizon;
      cfg.minmax.horizon = horizon;
      cfg.meanvar.horizon = horizon;
    }
  }

  read_into(j, "algorithm", cfg.algorithm);

  if (j.contains("network")) {
    const json& n = j.at("network");
    std::string variant = "bin";
    read_into(n, "variant", variant);
    if (variant == "bin")
      cfg.train.net.variant = MfVariant::Bin;
    else if (variant == "cylindrical" || variant == "cylinder")
      cfg.train.net.variant = MfVariant::Cylindrical;
    else
      throw ConfigError("unknown network variant: " + variant);
    read_into(n, "hidden", cfg.train.net.hidden);
    read_into(n, "latent_dim", cfg.train.net.latent_dim);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    read_into(t, "m_batch", cfg.train.m_batch);
    read_into(t, "n_particles", cfg.train.n_particles);
    read_into(t, "epochs", cfg.train.epochs);
    read_into(t, "lr", cfg.train.lr);
    read_into(t, "lr_actor", cfg.train.lr_actor);
    read_into(t, "lr_critic", cfg.train.lr_critic);
    read_into(t, "critic_epochs", cfg.train.critic_epochs);
    read_into(t, "lr_decay", cfg.train.lr_decay);
    read_into(t, "lr_decay_every", cfg.train.lr_decay_every);
    read_into(t, "seed", cfg.train.seed);
    read_into(t, "n_steps", cfg.train.grid.n_steps);
    read_into(t, "k_bins", cfg.train.k_bins);
    read_into(t, "disjoint_tilde", cfg.train.disjoint_tilde);
    read_into(t, "threads", cfg.train.threads);
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    read_into(e, "cases", cfg.cases);
    read_into(e, "n_particles", cfg.eval.n_particles);
    read_into(e, "seed", cfg.eval.seed);
  }

  if (j.contains("output")) {
    const json& o = j.at("output");
    read_into(o, "dir", cfg.output_dir);
    read_into(o, "checkpoints", cfg.write_checkpoints);
    read_into(o, "loss_csv", cfg.dump_loss);
    read_into(o, "trajectories", cfg.dump_trajectories);
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

ProblemSpec build_problem(const ExperimentConfig& cfg) {
  switch (cfg.problem) {
    case ProblemId::Systemic: return systemic_problem(cfg.systemic);
    case ProblemId::MinMax: return minmax_problem(cfg.minmax);
    default: return meanvar_problem(cfg.meanvar);
  }
}

std::vector<BenchmarkCase> benchmark_cases(const ExperimentConfig& cfg) {
  switch (cfg.problem) {
    case ProblemId::Systemic: return systemic_cases(cfg.systemic);
    case ProblemId::MinMax: return minmax_cases(cfg.minmax);
    default: return meanvar_cases(cfg.meanvar);
  }
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.algorithm < 1 || cfg.algorithm > 8)
    throw ConfigError("algorithm must be in 1..8");
  const ProblemSpec spec = build_problem(cfg);  // validates problem parameters
  if (cfg.algorithm >= 4 && !spec.has_bsde_form)
    throw ConfigError("algorithm " + std::to_string(cfg.algorithm) +
                      " needs a BSDE form; '" + spec.name +
                      "' has a controlled diffusion coefficient");
  validate(cfg.train);
  const auto known = benchmark_cases(cfg);
  for (const auto& name : cfg.cases) {
    if (name == "all") continue;
    const bool ok = std::any_of(known.begin(), known.end(),
                                [&](const BenchmarkCase& c) { return c.name == name; });
    if (!ok) throw ConfigError("unknown case id: " + name);
  }
  // the training grid must cover the problem horizon
  const double want = spec.horizon;
  ExperimentConfig& mut = const_cast<ExperimentConfig&>(cfg);
  mut.train.grid.horizon = want;
}

double round4_half_even(double v) {
  return std::nearbyint(v * 1e4) / 1e4;  // default FP rounding is ties-to-even
}

namespace {

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", round4_half_even(v));
  return buf;
}

std::vector<BenchmarkCase> selected_cases(const ExperimentConfig& cfg) {
  auto all = benchmark_cases(cfg);
  if (cfg.cases.empty()) return all;
  if (cfg.cases.size() == 1 && cfg.cases[0] == "all") return all;
  std::vector<BenchmarkCase> out;
  for (const auto& name : cfg.cases)
    for (auto& c : all)
      if (c.name == name) out.push_back(c);
  return out;
}

std::string method_label(const ExperimentConfig& cfg) {
  return "alg" + std::to_string(cfg.algorithm) +
         (cfg.train.net.variant == MfVariant::Bin ? "-bins" : "-cylinder");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write: " + path);
  out << text;
}

void dump_loss_csv(const std::string& path, const TrainDiagnostics& diag) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < diag.loss.size(); ++i) os << i << "," << diag.loss[i] << "\n";
  write_text(path, os.str());
}

void dump_trajectories_csv(const std::string& path, const TrajectoryBatch& batch) {
  std::ostringstream os;
  const bool with_y = !batch.paths.empty() && !batch.paths[0].y.empty();
  os << "step,m,n,x" << (with_y ? ",y,p\n" : "\n");
  for (std::size_t m = 0; m < batch.paths.size(); ++m)
    for (int i = 0; i <= batch.grid.n_steps; ++i)
      for (int n = 0; n < batch.n_particles; ++n) {
        os << i << "," << m << "," << n << "," << batch.paths[m].x[i](0, n);
        if (with_y)
          os << "," << batch.paths[m].y[i](0, n) << "," << batch.paths[m].y[i](1, n);
        os << "\n";
      }
  write_text(path, os.str());
}

}  // namespace

std::string emit_table(std::vector<ReportRow> rows) {
  if (rows.empty()) throw ConfigError("emit_table needs at least one row");
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.method != b.method) return a.method < b.method;
    if (a.k_bins != b.k_bins) return a.k_bins < b.k_bins;
    if (a.dt != b.dt) return a.dt < b.dt;
    return a.case_name < b.case_name;
  });
  std::ostringstream os;
  os << "Method,K,dt,Case,Calc,Ref,AbsErr\n";
  for (const auto& r : rows) {
    os << r.method << "," << r.k_bins << "," << r.dt << "," << r.case_name << ","
       << fmt4(r.calc) << ",";
    if (r.ref) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.12g", r.abs_err());
      os << fmt4(*r.ref) << "," << buf << "\n";
    } else {
      os << ",\n";
    }
  }
  return os.str();
}

std::vector<ReportRow> parse_table(const std::string& csv_text) {
  std::vector<ReportRow> rows;
  std::istringstream is(csv_text);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::istringstream ls(line);
    std::string field;
    ReportRow r;
    std::getline(ls, r.method, ',');
    std::getline(ls, field, ',');
    r.k_bins = std::stoi(field);
    std::getline(ls, field, ',');
    r.dt = std::stod(field);
    std::getline(ls, r.case_name, ',');
    std::getline(ls, field, ',');
    r.calc = std::stod(field);
    if (std::getline(ls, field, ',') && !field.empty()) r.ref = std::stod(field);
    rows.push_back(r);
  }
  return rows;
}

SolverReport run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  const ProblemSpec spec = build_problem(cfg);
  const TrainConfig& tc = cfg.train;
  const auto cases = selected_cases(cfg);

  SolverReport report;
  {
    std::ostringstream echo;
    echo << problem_name(cfg.problem) << " alg=" << cfg.algorithm << " K=" << tc.k_bins
         << " dt=" << tc.grid.dt() << " N=" << tc.n_particles << " M=" << tc.m_batch
         << " epochs=" << tc.epochs << " lr=" << tc.lr << " seed=" << tc.seed;
    report.config_echo = echo.str();
  }

  std::filesystem::create_directories(cfg.output_dir);
  TrainDiagnostics diag;
  const auto t0 = std::chrono::steady_clock::now();

  // trained artifacts (one of them per algorithm family)
  MeanFieldNet global_net;
  std::vector<MeanFieldNet> step_nets;
  ValueIterationNets vi_nets;
  std::vector<BsdeStageNets> stage_nets;
  BsdeGlobalNets global_pair;
  BsdeSpec bspec;
  if (cfg.algorithm >= 4)
    bspec = cfg.problem == ProblemId::Systemic ? systemic_bsde(cfg.systemic)
                                               : minmax_bsde(cfg.minmax);

  try {
    switch (cfg.algorithm) {
      case 1: global_net = train_global_control(spec, tc, &diag); break;
      case 2: step_nets = train_policy_iteration(spec, tc, &diag); break;
      case 3: vi_nets = train_value_iteration(spec, tc, &diag); break;
      case 4: stage_nets = train_deep_backward(spec, bspec, tc, &diag); break;
      case 5: stage_nets = train_multistep_backward(spec, bspec, tc, &diag); break;
      case 6: global_pair = train_deep_mkv_global(spec, bspec, tc, &diag); break;
      case 7: global_pair = train_global_local(spec, bspec, tc, &diag); break;
      default: global_pair = train_global_multistep(spec, bspec, tc, &diag); break;
    }
  } catch (const std::runtime_error& e) {
    report.diverged = true;
    report.divergence_message = e.what();
  }
  report.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (cfg.dump_loss) dump_loss_csv(cfg.output_dir + "/loss.csv", diag);

  if (report.diverged) {
    write_text(cfg.output_dir + "/report.csv",
               "Method,K,dt,Case,Calc,Ref,AbsErr\n# diverged: " + report.divergence_message +
                   "\n");
    return report;
  }

  for (const auto& bc : cases) {
    ReportRow row;
    row.method = method_label(cfg);
    row.k_bins = tc.k_bins;
    row.dt = tc.grid.dt();
    row.case_name = bc.name;
    switch (cfg.algorithm) {
      case 1:
        row.calc = evaluate_policy_cost(policy_of(global_net), spec, tc, bc.mu0, cfg.eval);
        break;
      case 2:
        row.calc = evaluate_policy_cost(policy_of(step_nets), spec, tc, bc.mu0, cfg.eval);
        break;
      case 3:
        row.calc = evaluate_net_expectation(vi_nets.values[0], 0.0, spec, tc, bc.mu0, cfg.eval);
        break;
      case 4:
      case 5:
        row.calc =
            evaluate_net_expectation(stage_nets[0].y, 0.0, spec, tc, bc.mu0, cfg.eval, 0);
        break;
      default:
        row.calc = evaluate_net_expectation(global_pair.y, 0.0, spec, tc, bc.mu0, cfg.eval, 0);
        break;
    }
    row.ref = bc.reference;
    report.rows.push_back(row);
  }

  write_text(cfg.output_dir + "/report.csv", emit_table(report.rows));

  if (cfg.write_checkpoints) {
    const std::string base = cfg.output_dir + "/";
    switch (cfg.algorithm) {
      case 1: save_checkpoint(global_net, base + "control.mfn"); break;
      case 2:
        for (std::size_t i = 0; i < step_nets.size(); ++i)
          save_checkpoint(step_nets[i], base + "control_step" + std::to_string(i) + ".mfn");
        break;
      case 3:
        for (std::size_t i = 0; i < vi_nets.controls.size(); ++i) {
          save_checkpoint(vi_nets.controls[i], base + "actor_step" + std::to_string(i) + ".mfn");
          save_checkpoint(vi_nets.values[i], base + "critic_step" + std::to_string(i) + ".mfn");
        }
        break;
      case 4:
      case 5:
        for (std::size_t i = 0; i < stage_nets.size(); ++i) {
          save_checkpoint(stage_nets[i].y, base + "ynet_step" + std::to_string(i) + ".mfn");
          save_checkpoint(stage_nets[i].z, base + "znet_step" + std::to_string(i) + ".mfn");
        }
        break;
      default:
        save_checkpoint(global_pair.y, base + "ynet.mfn");
        save_checkpoint(global_pair.z, base + "znet.mfn");
        break;
    }
  }

  if (cfg.dump_trajectories && !cases.empty()) {
    const BinDensity mu0 = bin_density_from_initial(cases[0].mu0, training_grid(spec, tc));
    TrajectoryBatch batch;
    const int n_dump = std::min(tc.n_particles, 200);
    if (cfg.algorithm <= 3) {
      PolicyView view = cfg.algorithm == 1
                            ? policy_of(global_net)
                            : (cfg.algorithm == 2 ? policy_of(step_nets)
                                                  : policy_of(vi_nets.controls));
      rollout_policy(view, {mu0}, n_dump, tc.grid, spec, cfg.eval.seed, 0xd00du, batch);
    } else {
      BsdeStack stack;
      if (cfg.algorithm >= 6) {
        stack = carry_stack(global_pair, tc.grid);
      } else {
        stack.carry_y = false;
        stack.y_at = [&](int i, double t, const Eigen::MatrixXd& x, const BinDensity& mu,
                         Eigen::MatrixXd& out) {
          const auto view = view_of(stage_nets, bspec, tc.grid);
          view.y(i, t, x, mu, out);
        };
      }
      rollout_bsde_forward(stack, {mu0}, n_dump, tc.grid, bspec, cfg.eval.seed, 0xd00du, batch);
    }
    dump_trajectories_csv(cfg.output_dir + "/trajectories.csv", batch);
  }
  return report;
}

namespace {

// Backward RK4 on the Riccati equation reconstructed from the closed form;
// a CLI-facing cross-check of the primary closed-form path.
double riccati_ode_q(double t, const SystemicParams& p, int n_steps) {
  const double rho = p.kappa + p.q;
  const double half_eq = 0.5 * (p.eta - p.q * p.q);
  auto rhs = [rho, half_eq](double q) { return 2.0 * q * q + 2.0 * rho * q - half_eq; };
  double q = 0.5 * p.c;
  const double dt = (p.horizon - t) / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    const double k1 = rhs(q);
    const double k2 = rhs(q - 0.5 * dt * k1);
    const double k3 = rhs(q - 0.5 * dt * k2);
    const double k4 = rhs(q - dt * k3);
    q -= dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return q;
}

}  // namespace

std::string oracle_check(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os.precision(12);
  if (cfg.problem == ProblemId::Systemic) {
    const SystemicParams& p = cfg.systemic;
    const SystemicQ qT = systemic_Q(p.horizon, p);
    os << "systemic oracle (T=" << p.horizon << ")\n";
    os << "  Q_T = " << qT.q_t << " (expected c/2 = " << 0.5 * p.c
       << ", diff = " << std::abs(qT.q_t - 0.5 * p.c) << ")\n";
    os << "  int_T^T Q = " << qT.int_q << "\n";
    double worst = 0.0;
    for (double t : {0.0, 0.25 * p.horizon, 0.5 * p.horizon, 0.75 * p.horizon})
      worst = std::max(worst, std::abs(systemic_Q(t, p).q_t - riccati_ode_q(t, p, 20000)));
    os << "  max |closed form - Riccati ODE (RK4)| = " << worst << "\n";
    for (const auto& c : systemic_cases(p))
      os << "  " << c.name << ": v(mu0) = " << *c.reference << "\n";
  } else if (cfg.problem == ProblemId::MeanVar) {
    const MeanVarParams& p = cfg.meanvar;
    os << "mean-variance oracle (T=" << p.horizon << ", R = beta^2/nu^2 = " << p.rate() << ")\n";
    os << "  point mass at 0: v = " << meanvar_value(Moments{0.0, 0.0}, p) << "\n";
    os << "  terminal feedback at the mean: " << meanvar_feedback(p.horizon, 0.0, 0.0, p)
       << "\n";
    for (const auto& c : meanvar_cases(p))
      os << "  " << c.name << ": v(mu0) = " << *c.reference << "\n";
  } else {
    throw ConfigError(
        "the min/max problem has stored external references, not an analytic oracle");
  }
  return os.str();
}

}  // namespace mfc
