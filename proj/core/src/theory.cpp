#include "cfl/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>

#include "cfl/errors.hpp"
#include "cfl/head.hpp"
#include "cfl/losses.hpp"
#include "cfl/record.hpp"

namespace cfl {

namespace {

Matrix solve_head(const EnvelopeProblem& p, const Matrix& phi) {
  if (p.mode == EnvelopeMode::ridge) return ridge_solution(p.y, phi, p.strength);
  return proximal_solution(p.y, phi, p.w_prev, p.strength);
}

double head_loss(const EnvelopeProblem& p, const Matrix& w, const Matrix& phi) {
  if (p.mode == EnvelopeMode::ridge) return ridge_loss(w, phi, p.y, p.strength).value;
  return proximal_loss(w, phi, p.y, p.w_prev, p.strength).value;
}

// Signs of all ReLU pre-activations; used to detect a kink between two evaluations.
std::vector<bool> pre_signs(const MlpBackbone& bb, const Matrix& x) {
  std::vector<bool> s;
  auto fr = forward(bb, x);
  for (const auto& pre : fr.tape.pre) {
    for (double v : pre.data()) s.push_back(v > 0.0);
  }
  return s;
}

double rel_err(double a, double n, double floor) {
  double den = std::max({std::abs(a), std::abs(n), floor, 1e-12});
  return std::abs(a - n) / den;
}

}  // namespace

GradientCheck compare_gradients(std::vector<double> analytic, std::vector<double> numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: size mismatch");
  GradientCheck r;
  double scale_a = 0.0;
  for (double a : analytic) scale_a = std::max(scale_a, std::abs(a));
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    double e = rel_err(analytic[i], numeric[i], 1e-6 * scale_a);
    if (!(e <= r.max_rel_err)) {
      r.max_rel_err = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
      r.worst_index = i;
    }
  }
  r.analytic = std::move(analytic);
  r.numeric = std::move(numeric);
  return r;
}

double composite_loss(const MlpBackbone& bb, const EnvelopeProblem& problem) {
  Matrix phi = augment_features(features(bb, problem.x), problem.has_bias);
  return head_loss(problem, solve_head(problem, phi), phi);
}

std::vector<double> envelope_gradient(const MlpBackbone& bb, const EnvelopeProblem& problem) {
  auto fr = forward(bb, problem.x);
  Matrix phi = augment_features(fr.features, problem.has_bias);
  Matrix w = solve_head(problem, phi);
  Matrix g = scale(matmul_tn(w, sub(matmul(w, phi), problem.y)), 2.0);
  if (problem.has_bias) g = row_block(g, 0, bb.feature_dim());
  return backward(bb, fr.tape, g).flatten();
}

GradientCheck check_envelope_gradient(const MlpBackbone& bb, const EnvelopeProblem& problem,
                                      const FiniteDifferenceOptions& fd) {
  std::vector<double> analytic = envelope_gradient(bb, problem);
  std::vector<double> theta = bb.parameters();
  std::vector<double> numeric(theta.size());
  MlpBackbone probe = bb;
  const bool kinks = bb.activation() == Activation::relu;

  for (std::size_t i = 0; i < theta.size(); ++i) {
    double h = fd.rel_step * (1.0 + std::abs(theta[i]));
    double lp = 0.0, lm = 0.0;
    for (int attempt = 0;; ++attempt) {
      std::vector<double> t = theta;
      t[i] = theta[i] + h;
      probe.set_parameters(t);
      lp = composite_loss(probe, problem);
      std::vector<bool> sp = kinks ? pre_signs(probe, problem.x) : std::vector<bool>{};
      t[i] = theta[i] - h;
      probe.set_parameters(t);
      lm = composite_loss(probe, problem);
      if (!kinks || attempt >= fd.kink_retries || sp == pre_signs(probe, problem.x)) break;
      h *= 0.1;
    }
    numeric[i] = (lp - lm) / (2.0 * h);
  }
  return compare_gradients(std::move(analytic), std::move(numeric));
}

// ---------------------------------------------------------------------------

Matrix minimize_head_quadratic(const Matrix& y, const Matrix& phi, const Matrix& anchor,
                               double data_weight, double anchor_weight, double tol,
                               QuadraticSolveInfo* info) {
  if (y.cols() != phi.cols() || anchor.rows() != y.rows() || anchor.cols() != phi.rows()) {
    throw DimensionError("minimize_head_quadratic: shapes do not conform");
  }
  if (!(data_weight > 0.0) || !(anchor_weight > 0.0)) {
    throw ConfigError("minimize_head_quadratic: weights must be positive");
  }
  // Normal equations W (dw Phi Phi^T + aw I) = dw Y Phi^T + aw anchor, applied
  // without ever forming Phi Phi^T.
  auto apply = [&](const Matrix& w) {
    return add(scale(matmul_nt(matmul(w, phi), phi), data_weight), scale(w, anchor_weight));
  };
  Matrix rhs = add(scale(matmul_nt(y, phi), data_weight), scale(anchor, anchor_weight));

  Matrix w = anchor;
  Matrix r = sub(rhs, apply(w));
  Matrix p = r;
  double rr = squared_norm(r);
  const double stop = tol * tol * std::max(squared_norm(rhs), std::numeric_limits<double>::min());
  const int max_iter = static_cast<int>(20 * anchor.size() + 200);
  int it = 0;
  for (; it < max_iter && rr > stop; ++it) {
    Matrix ap = apply(p);
    double alpha = rr / dot(p, ap);
    w = add(w, scale(p, alpha));
    // Recompute the true residual periodically to shed accumulated drift.
    r = (it % 50 == 49) ? sub(rhs, apply(w)) : sub(r, scale(ap, alpha));
    double rr_new = squared_norm(r);
    p = add(r, scale(p, rr_new / rr));
    rr = rr_new;
  }
  if (info) {
    info->iterations = it;
    info->residual = std::sqrt(rr);
  }
  return w;
}

KalmanReport check_kalman_equivalence(const Matrix& y_batch, const Matrix& phi_batch,
                                      const Matrix& w_prev, double sigma_y, double sigma_w) {
  if (!(sigma_y > 0.0) || !(sigma_w > 0.0)) throw ConfigError("noise scales must be positive");
  KalmanReport r;
  r.lambda = (sigma_y * sigma_y) / (sigma_w * sigma_w);
  r.closed_form = proximal_solution(y_batch, phi_batch, w_prev, r.lambda);
  // -log p(W | Y) = ||Y - W Phi||^2 / (2 sy^2) + ||W - W_prev||^2 / (2 sw^2) + const.
  QuadraticSolveInfo info;
  r.map = minimize_head_quadratic(y_batch, phi_batch, w_prev, 0.5 / (sigma_y * sigma_y),
                                  0.5 / (sigma_w * sigma_w), 1e-14, &info);
  r.iterations = info.iterations;
  r.rel_err = frobenius_norm(sub(r.closed_form, r.map)) /
              std::max(frobenius_norm(r.map), std::numeric_limits<double>::min());
  return r;
}

// ---------------------------------------------------------------------------

namespace {

void check_structure_args(const Matrix& y, const Matrix& phi, double beta) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (y.cols() != phi.cols()) throw DimensionError("Y and Phi must have the same number of columns");
}

// (Phi Phi^T + beta I)^{-1} Phi, d x n.
Matrix regularized_pinv_t(const Matrix& phi, double beta) {
  return Cholesky(add_diagonal(gram(phi), beta)).solve(phi);
}

}  // namespace

Decomposition decompose(const Matrix& y, const Matrix& phi, double beta) {
  check_structure_args(y, phi, beta);
  Decomposition d;
  d.p_beta = matmul_tn(phi, regularized_pinv_t(phi, beta));
  d.y_star = matmul(y, d.p_beta);
  d.y_perp = sub(y, d.y_star);
  return d;
}

Matrix functional_gradient(const Matrix& y, const Matrix& phi, double beta) {
  check_structure_args(y, phi, beta);
  Matrix g = regularized_pinv_t(phi, beta);  // A^{-1} Phi
  Matrix y_perp = sub(y, matmul(y, matmul_tn(phi, g)));
  return scale(matmul(g, matmul_tn(y, y_perp)), -2.0);
}

Matrix compressed_functional_gradient(const Matrix& y, const Matrix& phi, double beta) {
  check_structure_args(y, phi, beta);
  Matrix g = regularized_pinv_t(phi, beta);
  Matrix y_star = matmul(y, matmul_tn(phi, g));
  Matrix y_perp = sub(y, y_star);
  return scale(matmul(g, matmul_tn(y_star, y_perp)), -2.0);
}

CriticalityReport is_critical(const Matrix& y, const Matrix& phi, double beta, double tol) {
  Decomposition d = decompose(y, phi, beta);
  CriticalityReport r;
  double ynorm = frobenius_norm(y);
  r.cross_norm = frobenius_norm(matmul_tn(d.y_star, d.y_perp));
  r.perp_norm = frobenius_norm(d.y_perp);
  r.critical = r.cross_norm <= tol * (1.0 + ynorm * ynorm);
  r.is_global = r.critical && r.perp_norm <= tol * (1.0 + ynorm);
  return r;
}

// ---------------------------------------------------------------------------

FlowState make_flow_state(Matrix phi, Matrix xi, double beta) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (xi.rows() != xi.cols() || xi.rows() != phi.rows()) {
    throw DimensionError("kernel must be d x d with d = rows of Phi");
  }
  if (!is_symmetric(xi)) throw SymmetryError("kernel is not symmetric");
  auto ev = sym_eigvals(xi);
  if (!ev.empty() && !(ev.front() > 0.0)) throw DefinitenessError("kernel is not positive definite");
  return FlowState{std::move(phi), std::move(xi), beta, 0.0};
}

Matrix default_kernel(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix m(d, d);
  for (double& v : m.data()) v = n01(rng);
  return add_diagonal(scale(gram(m), 1.0 / static_cast<double>(d)), 0.1);
}

double default_dt(const Matrix& xi) {
  auto ev = sym_eigvals(xi);
  double top = ev.empty() ? 1.0 : std::max(std::abs(ev.front()), std::abs(ev.back()));
  return 0.1 / top;
}

Matrix flow_rhs(const FlowState& fs, const Matrix& y, FlowRhs rhs) {
  Matrix g = rhs == FlowRhs::gradient ? functional_gradient(y, fs.phi, fs.beta)
                                      : compressed_functional_gradient(y, fs.phi, fs.beta);
  return scale(matmul(fs.xi, g), -1.0);
}

Matrix ystar_gram_rate(const FlowState& fs, const Matrix& y) {
  Decomposition d = decompose(y, fs.phi, fs.beta);
  const Matrix a = gram(d.y_perp);
  const Matrix c = matmul_nt(regularized_pinv_t(fs.phi, fs.beta), d.y_star);  // M^{-1} Phi Y_star^T
  const Matrix b = matmul_tn(c, matmul(fs.xi, c));
  return scale(add(matmul(a, b), matmul(b, a)), 2.0);
}

FlowSample flow_sample(const FlowState& fs, const Matrix& y) {
  Decomposition d = decompose(y, fs.phi, fs.beta);
  FlowSample s;
  s.t = fs.t;
  s.eigenvalues = sym_eigvals(gram(d.y_star));
  s.perp_norm = frobenius_norm(d.y_perp);
  s.loss = induced_loss(fs.phi, y, fs.beta);
  return s;
}

FlowState rk4_step(const FlowState& fs, const Matrix& y, double dt, FlowRhs rhs) {
  auto at = [&](const Matrix& k, double c) {
    FlowState s = fs;
    s.phi = add(fs.phi, scale(k, c));
    return s;
  };
  Matrix k1 = flow_rhs(fs, y, rhs);
  Matrix k2 = flow_rhs(at(k1, dt / 2), y, rhs);
  Matrix k3 = flow_rhs(at(k2, dt / 2), y, rhs);
  Matrix k4 = flow_rhs(at(k3, dt), y, rhs);
  FlowState out = fs;
  auto o = out.phi.data();
  auto a = k1.data(), b = k2.data(), c = k3.data(), e = k4.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += dt / 6.0 * (a[i] + 2.0 * b[i] + 2.0 * c[i] + e[i]);
  out.t = fs.t + dt;
  return out;
}

FlowTrajectory integrate_flow(const FlowState& fs, const Matrix& y, const FlowOptions& opts) {
  if (y.cols() != fs.phi.cols()) throw DimensionError("Y and Phi must have the same number of columns");
  FlowTrajectory traj;
  traj.dt = opts.dt > 0.0 ? opts.dt : default_dt(fs.xi);
  const std::size_t every = std::max<std::size_t>(1, opts.record_every);
  const double limit = opts.blowup_factor * (1.0 + frobenius_norm(fs.phi));
  const double target = opts.stop_ratio * frobenius_norm(y);

  FlowState cur = fs;
  traj.samples.push_back(flow_sample(cur, y));
  std::size_t step = 0;
  bool recorded_last = true;
  while (step < opts.max_steps) {
    if (opts.stop_ratio > 0.0 && traj.samples.back().perp_norm <= target && recorded_last) {
      traj.reached_target = true;
      break;
    }
    ++step;
    try {
      cur = rk4_step(cur, y, traj.dt, opts.rhs);
    } catch (const DefinitenessError&) {
      // An overshooting stage can leave Phi Phi^T + beta I numerically indefinite.
      throw InstabilityError("flow integration lost definiteness at step " + std::to_string(step) +
                             "; retry with a smaller dt than " + format_real(traj.dt));
    }
    double norm = frobenius_norm(cur.phi);
    if (!std::isfinite(norm) || norm > limit) {
      throw InstabilityError("flow integration blew up at step " + std::to_string(step) +
                             "; retry with a smaller dt than " + format_real(traj.dt));
    }
    recorded_last = step % every == 0 || step == opts.max_steps;
    if (!recorded_last && opts.stop_ratio > 0.0) {
      // Cheap convergence probe between recorded samples.
      Decomposition d = decompose(y, cur.phi, cur.beta);
      if (frobenius_norm(d.y_perp) <= target) recorded_last = true;
    }
    if (recorded_last) traj.samples.push_back(flow_sample(cur, y));
  }
  if (opts.stop_ratio > 0.0 && traj.samples.back().perp_norm <= target) traj.reached_target = true;
  traj.steps = step;
  traj.final_state = std::move(cur);
  return traj;
}

FlowTrajectory integrate_flow_adaptive(const FlowState& fs, const Matrix& y, FlowOptions opts) {
  if (opts.dt <= 0.0) opts.dt = default_dt(fs.xi);
  for (int halvings = 0;; ++halvings) {
    try {
      return integrate_flow(fs, y, opts);
    } catch (const InstabilityError&) {
      if (halvings >= opts.max_halvings) throw;
      opts.dt *= 0.5;
    }
  }
}

void write_trajectory_csv(std::ostream& os, const FlowTrajectory& traj) {
  std::size_t k = traj.samples.empty() ? 0 : traj.samples.front().eigenvalues.size();
  os << 't';
  for (std::size_t i = 0; i < k; ++i) os << ",eig" << i;
  os << ",perp_norm,loss\n";
  for (const auto& s : traj.samples) {
    os << format_real(s.t);
    for (double e : s.eigenvalues) os << ',' << format_real(e);
    os << ',' << format_real(s.perp_norm) << ',' << format_real(s.loss) << '\n';
  }
}

MonotoneReport check_eig_monotone(std::span<const FlowSample> samples, double rel_eps) {
  MonotoneReport r;
  for (std::size_t k = 1; k < samples.size(); ++k) {
    const auto& a = samples[k - 1].eigenvalues;
    const auto& b = samples[k].eigenvalues;
    if (a.size() != b.size()) throw DimensionError("eigenvalue count changed along trajectory");
    for (std::size_t i = 0; i < a.size(); ++i) {
      ++r.pairs;
      double drop = a[i] - b[i] - rel_eps * (1.0 + std::abs(a[i]));
      if (drop > 0.0) {
        ++r.violations;
        r.max_violation = std::max(r.max_violation, drop);
      }
    }
  }
  return r;
}

MonotoneReport check_trace_nondecreasing(std::span<const FlowSample> samples, double rel_eps) {
  MonotoneReport r;
  auto sum = [](const FlowSample& s) {
    double t = 0.0;
    for (double e : s.eigenvalues) t += e;
    return t;
  };
  for (std::size_t k = 1; k < samples.size(); ++k) {
    ++r.pairs;
    const double a = sum(samples[k - 1]);
    const double drop = a - sum(samples[k]) - rel_eps * (1.0 + std::abs(a));
    if (drop > 0.0) {
      ++r.violations;
      r.max_violation = std::max(r.max_violation, drop);
    }
  }
  return r;
}

MonotoneReport check_loss_nonincreasing(std::span<const FlowSample> samples, double rel_eps) {
  MonotoneReport r;
  for (std::size_t k = 1; k < samples.size(); ++k) {
    ++r.pairs;
    double rise = samples[k].loss - samples[k - 1].loss - rel_eps * (1.0 + std::abs(samples[k - 1].loss));
    if (rise > 0.0) {
      ++r.violations;
      r.max_violation = std::max(r.max_violation, rise);
    }
  }
  return r;
}

}  // namespace cfl
