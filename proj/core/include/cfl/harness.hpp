#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cfl/config.hpp"
#include "cfl/dfiv.hpp"
#include "cfl/optim.hpp"

namespace cfl {

enum class Task : std::uint8_t { synth_regression, synth_classification, dfiv, theory_suite };

Task parse_task(std::string_view name);
std::string_view to_string(Task t);

/// Synthetic data parameters. The data seed is fixed across training seeds.
struct TaskData {
  std::size_t n = 1000;
  std::size_t input_dim = 8;
  std::size_t output_dim = 2;
  std::size_t teacher_width = 16;
  double noise = 0.0;
  std::size_t classes = 10;
  double separation = 3.0;
  std::uint64_t data_seed = 0;
  // IV task
  std::size_t n1 = 1000;
  std::size_t n2 = 1000;
  std::size_t n_test = 500;
  double confound = 2.0;
  double iv_noise = 0.1;
};

/// Grids over hyperparameters; an empty axis keeps the base value.
struct SweepGrid {
  std::vector<double> lr;
  std::vector<double> lambda;
  std::vector<double> beta;
  std::vector<std::size_t> batch_size;
};

struct TheorySuiteOptions {
  /// Check names; nullopt runs the default battery, an empty list runs nothing.
  std::optional<std::vector<std::string>> checks;
  std::uint64_t seed = 0;
  /// Perturbs the analytic envelope gradient so that those checks must fail.
  bool inject_fault = false;
};

struct ExperimentSpec {
  Task task = Task::synth_regression;
  TrainConfig train;
  DfivConfig dfiv;
  TaskData data;
  SweepGrid grid;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path out = "runs";
  /// Worker threads across cells; each cell runs single-threaded.
  unsigned threads = 1;
  bool snapshots = false;
  TheorySuiteOptions theory;

  /// Throws ConfigError on empty grids or seeds.
  void validate() const;
};

/// Applies one key = value setting (the same keys the CLI accepts).
void apply_setting(ExperimentSpec& spec, std::string_view key, std::string_view value);
/// Replaces one sweep axis from a list of values.
void apply_sweep(ExperimentSpec& spec, std::string_view key, const std::vector<std::string>& values);
ExperimentSpec spec_from_config(const ConfigFile& file, ExperimentSpec base = {});

/// One point of the sweep grid.
struct Cell {
  std::size_t index = 0;
  double lr = 0.0;
  std::optional<double> lambda;
  std::optional<double> beta;
  std::size_t batch_size = 0;
};

std::vector<Cell> expand_grid(const ExperimentSpec& spec);

struct SeedOutcome {
  std::uint64_t seed = 0;
  double final_train_loss = 0.0;
  double final_val = 0.0;
  double test = 0.0;
  /// DFIV only: test MSE with the in-training heads.
  double test_current = 0.0;
  bool diverged = false;
  std::string diagnostic;
  std::filesystem::path csv;
};

struct CellOutcome {
  Cell cell;
  std::vector<SeedOutcome> seeds;
  double mean_val = 0.0;
  double mean_test = 0.0;
  double mean_train = 0.0;
  std::size_t diverged = 0;
};

struct ExperimentSummary {
  Task task = Task::synth_regression;
  /// "val_mse" or "val_accuracy".
  std::string selection_metric;
  bool higher_is_better = false;
  std::vector<CellOutcome> cells;
  /// Index into cells; nullopt when every cell diverged.
  std::optional<std::size_t> selected;
};

inline constexpr int kSummarySchemaVersion = 1;

/// Runs every (cell, seed) pair, writing runs/cell<i>_seed<s>.csv and
/// summary.json under spec.out. Selection uses the mean final validation
/// metric over seeds among cells with no diverged seed.
ExperimentSummary run_experiment(const ExperimentSpec& spec);

void write_summary_json(std::ostream& os, const ExperimentSpec& spec, const ExperimentSummary& summary);

struct CheckVerdict {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct TheoryReport {
  std::vector<CheckVerdict> checks;
  std::vector<std::string> warnings;

  bool passed() const;
};

/// The default battery. "flow_eig_monotone" is available but not included:
/// individual eigenvalues of Y_star Y_star^T are not monotone in general.
std::vector<std::string> default_theory_checks();

TheoryReport run_theory_suite(const TheorySuiteOptions& opts);
void write_theory_json(std::ostream& os, const TheoryReport& report);

}  // namespace cfl
