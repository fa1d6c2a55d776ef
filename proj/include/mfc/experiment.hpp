#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mfc/train.hpp"

namespace mfc {

enum class ProblemId { Systemic, MinMax, MeanVar };

/// Experiment declaration: problem + parameters, algorithm 1-8, network
/// variant and sizes, training budget, evaluation cases, output paths.
/// Parsed from a JSON config file; every field has a desk-scale default.
struct ExperimentConfig {
  ProblemId problem = ProblemId::Systemic;
  SystemicParams systemic;
  MinMaxParams minmax;
  MeanVarParams meanvar;
  int algorithm = 1;  // 1 global control, 2 policy iter, 3 value iter,
                      // 4 deep backward, 5 multi-step backward, 6 deep MKV,
                      // 7 global/local, 8 global multi-step
  TrainConfig train;
  std::vector<std::string> cases;  // "case1".. or "all"
  EvalConfig eval;
  std::string output_dir = "out";
  bool write_checkpoints = true;
  bool dump_loss = false;
  bool dump_trajectories = false;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

/// Problem/algorithm compatibility plus field validation. Throws ConfigError
/// before any compute runs.
void validate(const ExperimentConfig& cfg);

std::string problem_name(ProblemId id);
ProblemSpec build_problem(const ExperimentConfig& cfg);
std::vector<BenchmarkCase> benchmark_cases(const ExperimentConfig& cfg);

struct ReportRow {
  std::string method;  // e.g. "alg1-bins"
  int k_bins = 0;
  double dt = 0.0;
  std::string case_name;
  double calc = 0.0;
  std::optional<double> ref;
  double abs_err() const { return ref ? std::abs(calc - *ref) : 0.0; }
};

struct SolverReport {
  std::vector<ReportRow> rows;
  double train_seconds = 0.0;
  std::string config_echo;
  bool diverged = false;
  std::string divergence_message;
};

/// Train per the config, evaluate every requested case, write report.csv,
/// checkpoints and optional dumps under output_dir. A training divergence is
/// reported in the returned (partial) report rather than thrown.
SolverReport run_experiment(const ExperimentConfig& cfg);

/// CSV table with columns Method,K,dt,Case,Calc,Ref,AbsErr: Calc/Ref rounded
/// half-even to 4 decimals, AbsErr carried at full precision, rows sorted by
/// (method, K, dt, case).
std::string emit_table(std::vector<ReportRow> rows);

/// Parse rows back from CSV text (the `table` merge command).
std::vector<ReportRow> parse_table(const std::string& csv_text);

/// Oracle verification text: terminal Riccati value, ODE cross-check and the
/// analytic values of every benchmark case. Problems without a closed form
/// are rejected.
std::string oracle_check(const ExperimentConfig& cfg);

/// Half-even rounding to 4 decimals used by the table emitter.
double round4_half_even(double v);

}  // namespace mfc
