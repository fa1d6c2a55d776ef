#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mfc/experiment.hpp"
#include "mfc/errors.hpp"

using namespace mfc;

namespace {

int cmd_train(const std::string& config_path, std::uint64_t seed_override, bool has_seed,
              const std::string& out_override, int threads_override) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (has_seed) cfg.train.seed = seed_override;
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (threads_override > 0) cfg.train.threads = threads_override;
  validate(cfg);

  std::cout << "training " << problem_name(cfg.problem) << " with algorithm " << cfg.algorithm
            << " -> " << cfg.output_dir << "\n";
  const SolverReport report = run_experiment(cfg);
  if (report.diverged) {
    std::cerr << "training diverged: " << report.divergence_message << "\n";
    return 2;
  }
  std::cout << emit_table(report.rows);
  std::cout << "train wall time: " << report.train_seconds << " s\n";
  std::cout << "config: " << report.config_echo << "\n";
  return 0;
}

int cmd_table(const std::string& out_path, const std::vector<std::string>& inputs) {
  std::vector<ReportRow> rows;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open table: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    const auto part = parse_table(buf.str());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::string merged = emit_table(rows);
  if (out_path.empty() || out_path == "-") {
    std::cout << merged;
  } else {
    std::ofstream out(out_path);
    out << merged;
  }
  return 0;
}

int cmd_dump_density(const std::string& problem, const std::string& case_name, int k_bins,
                     double horizon, const std::string& out_path) {
  ExperimentConfig cfg;
  cfg.problem = problem == "systemic"  ? ProblemId::Systemic
                : problem == "minmax"  ? ProblemId::MinMax
                : problem == "meanvar" ? ProblemId::MeanVar
                                       : throw ConfigError("unknown problem: " + problem);
  if (horizon > 0.0) {
    cfg.systemic.horizon = horizon;
    cfg.minmax.horizon = horizon;
    cfg.meanvar.horizon = horizon;
  }
  const ProblemSpec spec = build_problem(cfg);
  const auto cases = benchmark_cases(cfg);
  const BenchmarkCase* found = nullptr;
  for (const auto& c : cases)
    if (c.name == case_name) found = &c;
  if (!found) throw ConfigError("unknown case: " + case_name);

  const BinGrid grid{spec.domain_lo, spec.domain_hi, k_bins};
  const BinDensity d = bin_density_from_initial(found->mu0, grid);
  std::ostringstream os;
  os << "k,x_k,p_k\n";
  os.precision(12);
  for (int k = 0; k < grid.k_bins; ++k)
    os << (k + 1) << "," << grid.center(k) << "," << d.w[k] << "\n";
  if (out_path.empty() || out_path == "-") {
    std::cout << os.str();
  } else {
    std::ofstream out(out_path);
    out << os.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mean-field control solvers: training, oracles and tables"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "run an experiment from a config file");
  std::string config_path;
  std::string out_override;
  std::uint64_t seed_override = 0;
  int threads_override = 0;
  train->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  auto* seed_opt = train->add_option("--seed", seed_override, "override the training seed");
  train->add_option("--out", out_override, "override the output directory");
  train->add_option("--threads", threads_override, "worker threads for the batch loop");

  auto* oracle = app.add_subcommand("oracle-check", "print closed-form oracle values");
  std::string oracle_problem = "systemic";
  double oracle_horizon = 0.0;
  oracle->add_option("--problem", oracle_problem, "systemic or meanvar");
  oracle->add_option("--horizon", oracle_horizon, "override the horizon T");

  auto* table = app.add_subcommand("table", "merge report CSVs into one sorted table");
  std::string table_out;
  std::vector<std::string> table_inputs;
  table->add_option("-o,--out", table_out, "output CSV path ('-' for stdout)");
  table->add_option("inputs", table_inputs, "input CSV files")->required();

  auto* dump = app.add_subcommand("dump-density", "emit a benchmark case as a bin-density CSV");
  std::string dump_problem = "systemic", dump_case = "case1", dump_out;
  int dump_bins = 100;
  double dump_horizon = 0.0;
  dump->add_option("--problem", dump_problem, "systemic, minmax or meanvar");
  dump->add_option("--case", dump_case, "case id, e.g. case1");
  dump->add_option("--k-bins", dump_bins, "number of bins");
  dump->add_option("--horizon", dump_horizon, "override the horizon T");
  dump->add_option("-o,--out", dump_out, "output path ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return cmd_train(config_path, seed_override, seed_opt->count() > 0, out_override,
                       threads_override);
    if (oracle->parsed()) {
      ExperimentConfig cfg;
      cfg.problem = oracle_problem == "systemic"  ? ProblemId::Systemic
                    : oracle_problem == "meanvar" ? ProblemId::MeanVar
                                                  : ProblemId::MinMax;
      if (oracle_horizon > 0.0) {
        cfg.systemic.horizon = oracle_horizon;
        cfg.meanvar.horizon = oracle_horizon;
      }
      std::cout << oracle_check(cfg);
      return 0;
    }
    if (table->parsed()) return cmd_table(table_out, table_inputs);
    if (dump->parsed())
      return cmd_dump_density(dump_problem, dump_case, dump_bins, dump_horizon, dump_out);
  } catch (const TrainingDiverged& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const SimulationDiverged& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
