// cfl: train, sweep, DFIV and verification runs from the command line.
//
//   cfl train --method closed_form_proximal_simple --batch-size 8 --lr 0.05 --lambda 1 --out runs/a
//   cfl sweep --config sweep.ini --out runs/sweep
//   cfl dfiv --lambda 1 --lr 0.001 --seeds 0,1,2
//   cfl verify --out runs/theory
//   cfl gen-data --task dfiv --out data/iv

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "cfl/config.hpp"
#include "cfl/data.hpp"
#include "cfl/dfiv.hpp"
#include "cfl/errors.hpp"
#include "cfl/harness.hpp"
#include "cfl/record.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::string> task, method, batch_size, lr, lambda, beta, epochs, seed, seeds, out, threads;
  std::vector<std::string> sets;
  bool record_time = false;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key = value config file (flags override it)");
  app->add_option("--task", f.task, "synth_regression | synth_classification | dfiv");
  app->add_option("--method", f.method, "training method");
  app->add_option("--batch-size", f.batch_size, "minibatch size, 0 or 'full' for full batch");
  app->add_option("--lr", f.lr, "learning rate");
  app->add_option("--lambda", f.lambda, "proximal strength");
  app->add_option("--beta", f.beta, "ridge strength");
  app->add_option("--epochs", f.epochs, "training epochs");
  app->add_option("--seed", f.seed, "single training seed");
  app->add_option("--seeds", f.seeds, "comma-separated training seeds");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--threads", f.threads, "worker threads across sweep cells");
  app->add_option("--set", f.sets, "extra key=value setting (repeatable)");
  app->add_flag("--record-time", f.record_time, "fill the wall_ms column");
}

cfl::ExperimentSpec build_spec(const CommonFlags& f, cfl::ExperimentSpec base) {
  cfl::ExperimentSpec spec = f.config.empty() ? base : cfl::spec_from_config(cfl::load_config(f.config), base);
  auto apply = [&](const char* key, const std::optional<std::string>& v) {
    if (v) cfl::apply_setting(spec, key, *v);
  };
  apply("task", f.task);
  apply("method", f.method);
  apply("batch_size", f.batch_size);
  apply("lr", f.lr);
  apply("lambda", f.lambda);
  apply("beta", f.beta);
  apply("epochs", f.epochs);
  apply("seed", f.seed);
  apply("seeds", f.seeds);
  apply("out", f.out);
  apply("threads", f.threads);
  for (const auto& kv : f.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw cfl::ConfigError("--set expects key=value, got '" + kv + "'");
    cfl::apply_setting(spec, cfl::trim(kv.substr(0, eq)), cfl::trim(kv.substr(eq + 1)));
  }
  if (f.record_time) cfl::apply_setting(spec, "record_time", "true");
  return spec;
}

void print_summary(const cfl::ExperimentSummary& s, const cfl::ExperimentSpec& spec) {
  std::printf("%zu cell(s) x %zu seed(s) -> %s\n", s.cells.size(), spec.seeds.size(), spec.out.string().c_str());
  for (const auto& c : s.cells) {
    std::printf("  cell %zu  lr=%s batch=%zu%s%s  val=%s test=%s%s\n", c.cell.index,
                cfl::format_real(c.cell.lr).c_str(), c.cell.batch_size,
                c.cell.lambda ? (" lambda=" + cfl::format_real(*c.cell.lambda)).c_str() : "",
                c.cell.beta ? (" beta=" + cfl::format_real(*c.cell.beta)).c_str() : "",
                cfl::format_real(c.mean_val).c_str(), cfl::format_real(c.mean_test).c_str(),
                c.diverged ? "  (diverged)" : "");
  }
  if (s.selected) {
    std::printf("selected cell %zu (%s %s)\n", *s.selected, s.selection_metric.c_str(),
                cfl::format_real(s.cells[*s.selected].mean_val).c_str());
  } else {
    std::printf("no cell finished without divergence\n");
  }
}

void write_split(const std::filesystem::path& path, const cfl::Dataset& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw cfl::IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < d.x.rows(); ++i) os << (i ? "," : "") << 'x' << i;
  for (std::size_t i = 0; i < d.y.rows(); ++i) os << ",y" << i;
  if (!d.labels.empty()) os << ",label";
  os << '\n';
  for (std::size_t j = 0; j < d.size(); ++j) {
    for (std::size_t i = 0; i < d.x.rows(); ++i) os << (i ? "," : "") << cfl::format_real(d.x(i, j));
    for (std::size_t i = 0; i < d.y.rows(); ++i) os << ',' << cfl::format_real(d.y(i, j));
    if (!d.labels.empty()) os << ',' << d.labels[j];
    os << '\n';
  }
}

int gen_data(const cfl::ExperimentSpec& spec) {
  const auto& td = spec.data;
  std::filesystem::create_directories(spec.out);
  switch (spec.task) {
    case cfl::Task::dfiv:
      cfl::write_iv_bundle(spec.out,
                           cfl::generate_iv_data(td.n1, td.n2, td.n_test, td.confound, td.iv_noise, td.data_seed));
      break;
    case cfl::Task::synth_regression:
    case cfl::Task::synth_classification: {
      auto splits = spec.task == cfl::Task::synth_regression
                        ? cfl::gen_regression_task(td.n, td.input_dim, td.output_dim, td.teacher_width, td.noise,
                                                   td.data_seed)
                        : cfl::gen_classification_task(td.n, td.classes, td.input_dim, td.data_seed, td.separation);
      write_split(spec.out / "train.csv", splits.train);
      write_split(spec.out / "val.csv", splits.val);
      write_split(spec.out / "test.csv", splits.test);
      break;
    }
    case cfl::Task::theory_suite:
      throw cfl::ConfigError("gen-data has nothing to generate for theory_suite");
  }
  std::printf("wrote %s data to %s\n", std::string(cfl::to_string(spec.task)).c_str(), spec.out.string().c_str());
  return 0;
}

int verify(const cfl::ExperimentSpec& spec, bool quiet) {
  cfl::TheoryReport report = cfl::run_theory_suite(spec.theory);
  std::filesystem::create_directories(spec.out);
  std::ofstream js(spec.out / "theory.json", std::ios::binary);
  if (!js) throw cfl::IoError("cannot write theory.json");
  cfl::write_theory_json(js, report);
  if (!quiet) {
    for (const auto& c : report.checks) {
      std::printf("%-24s %s  measured=%s threshold=%s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL",
                  cfl::format_real(c.measured).c_str(), cfl::format_real(c.threshold).c_str());
    }
    for (const auto& w : report.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
  return report.passed() ? 0 : 1;
}

// Full-batch steps allocate many same-sized temporaries above glibc's mmap
// threshold; keep them on the heap instead of mapping and trimming every step.
void keep_large_allocations() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 16 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);
#endif
}

}  // namespace

int main(int argc, char** argv) {
  keep_large_allocations();
  CLI::App app{"closed-form last layer training and verification"};
  app.require_subcommand(1);

  CommonFlags train_f, sweep_f, dfiv_f, verify_f, gen_f;
  auto* train = app.add_subcommand("train", "one configuration, one or more seeds");
  add_common(train, train_f);
  auto* sweep = app.add_subcommand("sweep", "grid sweep with seed averaging and selection");
  add_common(sweep, sweep_f);
  auto* dfiv = app.add_subcommand("dfiv", "two-stage instrumental-variable training");
  add_common(dfiv, dfiv_f);
  auto* ver = app.add_subcommand("verify", "numerical checks of the closed-form theory");
  add_common(ver, verify_f);
  std::optional<std::string> checks;
  bool inject = false, quiet = false;
  ver->add_option("--checks", checks, "comma-separated checks; empty string runs none");
  ver->add_flag("--inject-fault", inject, "perturb the analytic gradient (negative control)");
  ver->add_flag("--quiet", quiet, "only write theory.json");
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  add_common(gen, gen_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      cfl::ExperimentSpec spec = build_spec(train_f, {});
      spec.grid = {};
      spec.snapshots = true;
      auto s = cfl::run_experiment(spec);
      print_summary(s, spec);
      return s.selected ? 0 : 2;
    }
    if (*sweep) {
      cfl::ExperimentSpec spec = build_spec(sweep_f, {});
      auto s = cfl::run_experiment(spec);
      print_summary(s, spec);
      return s.selected ? 0 : 2;
    }
    if (*dfiv) {
      cfl::ExperimentSpec base;
      base.task = cfl::Task::dfiv;
      cfl::ExperimentSpec spec = build_spec(dfiv_f, base);
      if (spec.task != cfl::Task::dfiv) throw cfl::ConfigError("the dfiv verb only runs task = dfiv");
      if (dfiv_f.lambda) spec.dfiv.reg1 = spec.dfiv.reg2 = cfl::parse_double("lambda", *dfiv_f.lambda);
      if (dfiv_f.beta) {
        spec.dfiv.head = cfl::DfivHeadKind::ridge;
        spec.dfiv.reg1 = spec.dfiv.reg2 = cfl::parse_double("beta", *dfiv_f.beta);
      }
      auto s = cfl::run_experiment(spec);
      print_summary(s, spec);
      return s.selected ? 0 : 2;
    }
    if (*ver) {
      cfl::ExperimentSpec base;
      base.task = cfl::Task::theory_suite;
      base.out = "theory";
      cfl::ExperimentSpec spec = build_spec(verify_f, base);
      if (checks) spec.theory.checks = cfl::split_list(*checks);
      if (inject) spec.theory.inject_fault = true;
      if (verify_f.seed) spec.theory.seed = spec.seeds.front();
      return verify(spec, quiet);
    }
    if (*gen) return gen_data(build_spec(gen_f, {}));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cfl: %s\n", e.what());
    return 1;
  }
  return 0;
}
