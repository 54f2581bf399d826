// Acceptance battery. One verdict line per criterion; exit status is the
// number of failed criteria. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cfl/data.hpp"
#include "cfl/dfiv.hpp"
#include "cfl/harness.hpp"
#include "cfl/head.hpp"
#include "cfl/losses.hpp"
#include "cfl/optim.hpp"
#include "cfl/theory.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using cfl::Matrix;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void note(const std::string& s) { std::printf("    %s\n", s.c_str()); }

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::vector<double> flat(const Matrix& m) { return {m.data().begin(), m.data().end()}; }

// ---------------------------------------------------------------------------

cfl::MlpBackbone random_network(std::mt19937_64& rng, cfl::Activation act, std::size_t m) {
  std::uniform_int_distribution<std::size_t> width(3, 10), depth(1, 2), feat(2, 6);
  std::vector<std::size_t> dims{m};
  const std::size_t h = depth(rng);
  for (std::size_t k = 0; k < h; ++k) dims.push_back(width(rng));
  dims.push_back(feat(rng));
  auto bb = cfl::init_backbone(dims, act, cfl::Parameterization::standard, rng());
  // Zero biases put whole samples exactly on a relu kink once a layer is dead.
  std::normal_distribution<double> b(0.0, 0.5);
  for (std::size_t l = 0; l < bb.num_layers(); ++l)
    for (double& v : bb.bias(l)) v = b(rng);
  return bb;
}

Verdict envelope_battery(cfl::EnvelopeMode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> in(2, 5), outs(1, 3), samples(8, 30);
  const double lambdas[] = {0.1, 1.0, 100.0};
  double worst = 0;
  std::size_t max_params = 0;
  for (int k = 0; k < 20; ++k) {
    const auto act = k % 2 ? cfl::Activation::relu : cfl::Activation::tanh;
    const std::size_t m = in(rng), o = outs(rng), n = samples(rng);
    auto bb = random_network(rng, act, m);
    max_params = std::max(max_params, bb.parameter_count());
    cfl::EnvelopeProblem p;
    p.x = cfl::testing::randn(m, n, rng);
    p.y = cfl::testing::randn(o, n, rng);
    p.has_bias = k % 3 != 0;
    p.mode = mode;
    if (mode == cfl::EnvelopeMode::ridge) {
      p.strength = std::pow(10.0, std::uniform_real_distribution<double>(-2, 1)(rng));
    } else {
      p.strength = lambdas[k % 3];
      p.w_prev = cfl::testing::randn(o, bb.feature_dim() + (p.has_bias ? 1 : 0), rng);
    }
    worst = std::max(worst, cfl::check_envelope_gradient(bb, p).max_rel_err);
  }
  return {worst <= 1e-4 && max_params <= 1000,
          fmt("max_rel_err=%.3g (<= 1e-4) over 20 networks, largest %zu params", worst, max_params)};
}

Verdict criterion1() { return envelope_battery(cfl::EnvelopeMode::ridge, 101); }
Verdict criterion2() { return envelope_battery(cfl::EnvelopeMode::proximal, 202); }

Verdict criterion3() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> logreg(-2, 2);
  double grad_worst = 0, iter_worst = 0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t o = dim(rng), d = dim(rng), n = dim(rng) + 2;
    const Matrix phi = cfl::testing::randn(d, n, rng);
    const Matrix y = cfl::testing::randn(o, n, rng);
    const Matrix prev = cfl::testing::randn(o, d, rng);
    const double reg = std::pow(10.0, logreg(rng));

    const Matrix wr = cfl::ridge_solution(y, phi, reg);
    const Matrix wp = cfl::proximal_solution(y, phi, prev, reg);
    const double gr = cfl::frobenius_norm(*cfl::ridge_loss(wr, phi, y, reg).grad_W) /
                      (2.0 * cfl::frobenius_norm(cfl::matmul_nt(y, phi)));
    const double gp =
        cfl::frobenius_norm(*cfl::proximal_loss(wp, phi, y, prev, reg).grad_W) /
        (2.0 * cfl::frobenius_norm(cfl::add(cfl::matmul_nt(y, phi), cfl::scale(prev, reg))));
    grad_worst = std::max({grad_worst, gr, gp});

    const Matrix ir = cfl::minimize_head_quadratic(y, phi, Matrix::zeros(o, d), 1.0, reg);
    const Matrix ip = cfl::minimize_head_quadratic(y, phi, prev, 1.0, reg);
    iter_worst = std::max({iter_worst, cfl::testing::rel_diff(ir, wr), cfl::testing::rel_diff(ip, wp)});
  }
  return {grad_worst <= 1e-8 && iter_worst <= 1e-6,
          fmt("gradient residual %.3g (<= 1e-8), iterative agreement %.3g (<= 1e-6), 100 instances",
              grad_worst, iter_worst)};
}

Verdict criterion4() {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> logs(-1, 1);
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t o = dim(rng), d = dim(rng), n = dim(rng) + 2;
    const Matrix phi = cfl::testing::randn(d, n, rng);
    const Matrix y = cfl::testing::randn(o, n, rng);
    const Matrix prev = cfl::testing::randn(o, d, rng);
    const auto rep = cfl::check_kalman_equivalence(y, phi, prev, std::pow(10.0, logs(rng)),
                                                   std::pow(10.0, logs(rng)));
    worst = std::max(worst, rep.rel_err);
  }
  return {worst <= 1e-6, fmt("max rel_err=%.3g (<= 1e-6) over 20 instances", worst)};
}

Matrix row_space_projector(const Matrix& a) {
  const auto e = cfl::sym_eigen(cfl::matmul_tn(a, a));
  const std::size_t n = a.cols();
  Matrix q(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    if (e.values[k] <= 1e-10 * (1.0 + e.values.back())) continue;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) q(i, j) += e.vectors(i, k) * e.vectors(j, k);
  }
  return q;
}

Verdict criterion5() {
  std::mt19937_64 rng(505);
  bool ok = true;

  const Matrix y0 = cfl::testing::randn(2, 6, rng);
  const auto zero = cfl::is_critical(y0, Matrix::zeros(3, 6), 0.1);
  const bool zero_ok = zero.critical && !zero.is_global &&
                       cfl::max_abs(cfl::functional_gradient(y0, Matrix::zeros(3, 6), 0.1)) == 0.0;
  ok &= zero_ok;

  double fd_worst = 0;
  for (int k = 0; k < 20; ++k) {
    const Matrix phi = cfl::testing::randn(4, 9, rng);
    const Matrix y = cfl::testing::randn(2, 9, rng);
    const double beta = std::pow(10.0, std::uniform_real_distribution<double>(-2, 0)(rng));
    auto f = [&](const std::vector<double>& p) { return cfl::induced_loss(Matrix(4, 9, p), y, beta); };
    fd_worst = std::max(fd_worst, cfl::testing::max_rel_err(flat(cfl::functional_gradient(y, phi, beta)),
                                                            cfl::testing::numeric_grad(f, flat(phi))));
  }
  ok &= fd_worst <= 1e-4;

  // critical => cross term vanishes, and cross term vanishes => gradient vanishes
  std::size_t agree = 0, total = 0;
  for (int k = 0; k < 20; ++k) {
    const Matrix y = cfl::testing::randn(2, 9, rng);
    Matrix phi = cfl::testing::randn(3, 9, rng);
    if (k % 2 == 0) phi = cfl::sub(phi, cfl::matmul(phi, row_space_projector(y)));
    const auto rep = cfl::is_critical(y, phi, 0.2);
    const double g = cfl::max_abs(cfl::functional_gradient(y, phi, 0.2));
    const bool grad_zero = g <= 1e-8 * (1.0 + cfl::squared_norm(y));
    agree += (rep.critical == grad_zero) && (rep.critical == (k % 2 == 0));
    ++total;
  }
  ok &= agree == total;
  return {ok, fmt("zero-feature witness %s, functional gradient fd err %.3g (<= 1e-4), "
                  "criticality/gradient agreement %zu/%zu",
                  zero_ok ? "ok" : "WRONG", fd_worst, agree, total)};
}

Verdict criterion6() {
  std::size_t reached = 0, eig_bad = 0, loss_bad = 0, trace_bad = 0;
  double eig_worst = 0, loss_worst = 0;
  std::size_t max_steps = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto st = cfl::make_flow_state(cfl::testing::randn(6, 8, rng), cfl::default_kernel(6, rng()), 1e-3);
    const Matrix y = cfl::testing::randn(2, 8, rng);
    cfl::FlowOptions o;
    o.dt = 0.1 * cfl::default_dt(st.xi);
    o.max_steps = 100000;
    o.stop_ratio = 1e-3;
    const auto traj = cfl::integrate_flow(st, y, o);
    reached += traj.reached_target;
    max_steps = std::max(max_steps, traj.steps);
    const auto eig = cfl::check_eig_monotone(traj.samples, 1e-6);
    const auto loss = cfl::check_loss_nonincreasing(traj.samples);
    const auto trace = cfl::check_trace_nondecreasing(traj.samples, 1e-6);
    eig_bad += eig.violations > 0;
    loss_bad += loss.violations > 0;
    trace_bad += trace.violations > 0;
    eig_worst = std::max(eig_worst, eig.max_violation);
    loss_worst = std::max(loss_worst, loss.max_violation);
    if (eig.violations > 0)
      note(fmt("seed %llu: %zu of %zu eigenvalue steps decrease, worst %.3g", static_cast<unsigned long long>(seed),
               eig.violations, eig.pairs, eig.max_violation));
  }
  note(fmt("trace of Y*Y*^T non-decreasing on %zu/10 trajectories", 10 - trace_bad));
  return {reached == 10 && eig_bad == 0 && loss_bad == 0,
          fmt("converged %zu/10 (max %zu steps), eigenvalue-monotone %zu/10 (worst drop %.3g), "
              "loss non-increasing %zu/10",
              reached, max_steps, 10 - eig_bad, eig_worst, 10 - loss_bad)};
}

// ---------------------------------------------------------------------------

struct RunStats {
  double train_mse = 0, val_mse = 0, w_delta = 0;
  bool diverged = false;
};

RunStats run_regression(const cfl::DatasetSplits& d, cfl::Method method, std::size_t batch, double lr,
                        double strength, std::size_t iterations, std::uint64_t seed) {
  cfl::TrainConfig c;
  c.method = method;
  c.batch_size = batch;
  c.learning_rate = lr;
  c.max_iterations = iterations;
  c.seed = seed;
  c.eval_every = iterations;
  if (method == cfl::Method::closed_form_proximal_simple) c.lambda = strength;
  else c.beta = strength;
  const auto r = cfl::train(c, d.train);
  RunStats s;
  s.diverged = r.diverged;
  if (r.diverged) return s;
  s.train_mse = cfl::mse(cfl::predict(r.model, d.train.x), d.train.y);
  s.val_mse = cfl::mse(cfl::predict(r.model, d.val.x), d.val.y);
  s.w_delta = r.record.mean_w_delta();
  return s;
}

struct Tuned {
  bool found = false;
  double lr = 0, strength = 0, train = std::numeric_limits<double>::infinity(), w_delta = 0;
};

// Picks (lr, strength) by mean final validation MSE over 3 seeds; cells with a
// diverged seed are excluded.
Tuned tune(const cfl::DatasetSplits& d, cfl::Method method, std::size_t batch, std::size_t iterations,
           const std::vector<double>& strengths) {
  Tuned best;
  double best_val = std::numeric_limits<double>::infinity();
  for (double lr : {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1}) {
    for (double strength : strengths) {
      std::vector<double> tr, va, wd;
      bool diverged = false;
      for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto s = run_regression(d, method, batch, lr, strength, iterations, seed);
        diverged |= s.diverged || !std::isfinite(s.val_mse) || !std::isfinite(s.train_mse);
        if (diverged) break;
        tr.push_back(s.train_mse);
        va.push_back(s.val_mse);
        wd.push_back(s.w_delta);
      }
      if (diverged || !(mean(va) < best_val)) continue;
      best_val = mean(va);
      best = {true, lr, strength, mean(tr), mean(wd)};
    }
  }
  return best;
}

Verdict criterion7() {
  const auto d = cfl::gen_regression_task(1000, 8, 2, 16, 0.1, 0);
  const std::size_t iterations = 1500;
  const std::vector<double> head_strengths = {1.0, 10.0, 100.0};
  bool a_ok = true;
  Tuned prox_full, prox8;
  for (std::size_t batch : {8u, 64u, 0u}) {
    const auto prox = tune(d, cfl::Method::closed_form_proximal_simple, batch, iterations, head_strengths);
    const auto joint = tune(d, cfl::Method::joint_sgd_l2, batch, iterations, {0.0});
    const bool ok = prox.found && joint.found && prox.train <= joint.train;
    a_ok &= ok;
    note(fmt("batch %s: proximal train mse %.4g (lr %g, lambda %g) vs joint sgd %.4g (lr %g) %s",
             batch ? std::to_string(batch).c_str() : "full", prox.train, prox.lr, prox.strength, joint.train,
             joint.lr, ok ? "ok" : "WORSE"));
    if (batch == 0) prox_full = prox;
    if (batch == 8) prox8 = prox;
  }
  const auto ridge_full = tune(d, cfl::Method::closed_form_ridge, 0, iterations, head_strengths);
  const auto ridge8 = tune(d, cfl::Method::closed_form_ridge, 8, iterations, head_strengths);
  const double ratio =
      std::max(ridge_full.train, prox_full.train) / std::min(ridge_full.train, prox_full.train);
  const double churn = ridge8.w_delta / prox8.w_delta;
  {
    // Diagnostic only: ridge at the proximal cell's lr with the weakest beta of the grid.
    std::vector<double> tr;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      tr.push_back(run_regression(d, cfl::Method::closed_form_ridge, 0, prox_full.lr, head_strengths.front(),
                                  iterations, seed).train_mse);
    note(fmt("diagnostic: full-batch ridge with beta %g at lr %g reaches train mse %.4g", head_strengths.front(),
             prox_full.lr, mean(tr)));
  }
  note(fmt("full batch: ridge %.4g (lr %g, beta %g) vs proximal %.4g", ridge_full.train, ridge_full.lr,
           ridge_full.strength, prox_full.train));
  note(fmt("batch 8 mean |W_t - W_t-1|: ridge %.4g (lr %g, beta %g) vs proximal %.4g", ridge8.w_delta, ridge8.lr,
           ridge8.strength, prox8.w_delta));
  const bool b_ok = ridge_full.found && ridge8.found && ratio <= 1.2 && churn >= 3.0;
  return {a_ok && b_ok,
          fmt("(a) proximal <= joint sgd at every batch size: %s; (b) full-batch ratio %.3g (<= 1.2), "
              "batch-8 head churn ratio %.3g (>= 3)",
              a_ok ? "yes" : "no", ratio, churn)};
}

Verdict criterion8() {
  const auto d = cfl::gen_classification_task(1000, 10, 8, 0);
  cfl::TrainConfig c;
  c.method = cfl::Method::closed_form_proximal_simple;
  c.lambda = 1.0;
  c.batch_size = 32;
  c.learning_rate = 1e-2;
  c.epochs = 20;
  const auto r = cfl::train(c, d.train);
  const auto pred = cfl::predict_class(r.model.head, cfl::features(r.model.backbone, d.test.x));
  const double acc = cfl::accuracy(pred, d.test.labels);

  const Matrix logits = cfl::predict(r.model, d.test.x);
  bool invariant = true;
  for (double s : {1e-6, 0.01, 0.5, 3.0, 1e4, 1e8}) invariant &= cfl::argmax_columns(cfl::scale(logits, s)) == pred;
  return {!r.diverged && acc >= 0.95 && invariant,
          fmt("test accuracy %.4f after 20 epochs (>= 0.95), argmax rescaling invariant: %s", acc,
              invariant ? "yes" : "no")};
}

Verdict criterion9() {
  std::vector<double> dfiv_mse, naive_mse, gaps;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto data = cfl::generate_iv_data(1000, 1000, 500, 2.0, 0.1, seed);
    cfl::DfivConfig c;
    c.head = cfl::DfivHeadKind::proximal;
    c.optimizer = cfl::OptimizerKind::adam;
    c.lr1 = c.lr2 = 1e-3;
    c.reg1 = c.reg2 = 100.0;
    c.iterations = 1000;
    c.batch1 = c.batch2 = 100;
    c.t1 = 20;
    c.t2 = 1;
    c.seed = seed;
    const auto r = cfl::dfiv_train(c, data);
    if (r.diverged) return {false, "DFIV diverged: " + r.diagnostic};
    const double re = cfl::dfiv_evaluate(r.state, data, cfl::DfivEvalMode::reestimate);
    const double cur = cfl::dfiv_evaluate(r.state, data, cfl::DfivEvalMode::current);

    cfl::TrainConfig nc;
    nc.method = cfl::Method::closed_form_proximal_simple;
    nc.lambda = 100.0;
    nc.optimizer = cfl::OptimizerKind::adam;
    nc.learning_rate = 1e-3;
    nc.batch_size = 100;
    nc.max_iterations = 5000;
    nc.hidden = c.hidden_x;
    nc.feature_dim = c.features_x;
    nc.activation = c.activation;
    nc.seed = seed;
    const auto naive = cfl::naive_iv_baseline(data, nc);

    dfiv_mse.push_back(re);
    naive_mse.push_back(naive.test_mse);
    gaps.push_back(std::max(re, cur) / std::min(re, cur));
    note(fmt("seed %llu: dfiv %.4g (current heads %.4g), naive %.4g", static_cast<unsigned long long>(seed), re,
             cur, naive.test_mse));
  }
  const double ratio = mean(dfiv_mse) / mean(naive_mse);
  const double gap = *std::max_element(gaps.begin(), gaps.end());
  return {ratio <= 0.5 && gap <= 1.5,
          fmt("mean test mse dfiv %.4g vs naive %.4g, ratio %.3g (<= 0.5); worst current/reestimate gap %.3g "
              "(<= 1.5)",
              mean(dfiv_mse), mean(naive_mse), ratio, gap)};
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string record_bytes(const cfl::RunRecord& r) {
  std::ostringstream os;
  cfl::write_csv(os, r);
  return os.str();
}

Verdict criterion10() {
  std::size_t same = 0, total = 0;
  const auto reg = cfl::gen_regression_task(300, 4, 2, 8, 0.1, 3);
  for (auto m : {cfl::Method::joint_sgd_l2, cfl::Method::closed_form_ridge, cfl::Method::closed_form_proximal_simple,
                 cfl::Method::closed_form_proximal_lookahead, cfl::Method::joint_sgd_xent}) {
    cfl::TrainConfig c;
    c.method = m;
    if (m == cfl::Method::closed_form_proximal_simple || m == cfl::Method::closed_form_proximal_lookahead)
      c.lambda = 0.5;
    else
      c.beta = 0.01;
    c.batch_size = 16;
    c.epochs = 3;
    c.momentum = 0.9;
    c.seed = 11;
    auto eval = [&](const cfl::Model& model) { return cfl::mse(cfl::predict(model, reg.val.x), reg.val.y); };
    same += record_bytes(cfl::train(c, reg.train, eval).record) == record_bytes(cfl::train(c, reg.train, eval).record);
    ++total;
  }

  const auto iv = cfl::generate_iv_data(200, 200, 100, 2.0, 0.1, 4);
  cfl::DfivConfig dc;
  dc.iterations = 10;
  dc.batch1 = dc.batch2 = 50;
  dc.optimizer = cfl::OptimizerKind::adam;
  dc.seed = 4;
  dc.eval_every = 2;
  auto deval = [&](const cfl::DfivState& s) { return cfl::dfiv_evaluate(s, iv, cfl::DfivEvalMode::current, true); };
  same += record_bytes(cfl::dfiv_train(dc, iv, deval).record) == record_bytes(cfl::dfiv_train(dc, iv, deval).record);
  ++total;

  const auto base = fs::temp_directory_path() / "cfl_acceptance_determinism";
  fs::remove_all(base);
  cfl::ExperimentSpec spec;
  spec.data.n = 200;
  spec.data.input_dim = 4;
  spec.train.lambda = 1.0;
  spec.train.batch_size = 16;
  spec.train.epochs = 2;
  spec.train.hidden = {8};
  spec.train.feature_dim = 8;
  spec.grid.lr = {0.01, 0.03};
  spec.seeds = {0, 1};
  spec.threads = 2;
  spec.out = base / "a";
  cfl::run_experiment(spec);
  spec.out = base / "b";
  cfl::run_experiment(spec);
  for (const auto& e : fs::directory_iterator(base / "a" / "runs")) {
    same += file_bytes(e.path()) == file_bytes(base / "b" / "runs" / e.path().filename());
    ++total;
  }
  fs::remove_all(base);
  return {same == total && total == 10, fmt("%zu/%zu repeated runs byte-identical", same, total)};
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
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"envelope gradient, ridge head", criterion1},
      {"envelope gradient, proximal head", criterion2},
      {"closed-form optimality", criterion3},
      {"Kalman/MAP equivalence", criterion4},
      {"function-space critical points", criterion5},
      {"kernel gradient flow", criterion6},
      {"stochastic training, regression", criterion7},
      {"classification with argmax heads", criterion8},
      {"DFIV versus naive regression", criterion9},
      {"determinism", criterion10},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  criterion %2d  %-36s %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first,
                v.detail.c_str(), sec);
    std::fflush(stdout);
    failed += !v.pass;
  }
  std::printf("%d criteria failed\n", failed);
  return failed;
}
