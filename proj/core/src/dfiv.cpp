#include "cfl/dfiv.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include "cfl/errors.hpp"
#include "cfl/losses.hpp"

namespace cfl {

namespace {

constexpr double kV[kIvTreatmentDim] = {0.6, -0.6, 0.4, 0.4, -0.8};
constexpr double kOutcomeNoise = 0.5;

struct IvDraw {
  Matrix x, z, y;
};

IvDraw draw_iv(std::size_t n, double confound, double noise, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uz(-2.0, 2.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  IvDraw d{Matrix(kIvTreatmentDim, n), Matrix(kIvInstrumentDim, n), Matrix(1, n)};
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < kIvInstrumentDim; ++i) d.z(i, j) = uz(rng);
  }
  const Matrix g = iv_treatment_mean(d.z);
  for (std::size_t j = 0; j < n; ++j) {
    const double e = n01(rng);
    for (std::size_t i = 0; i < kIvTreatmentDim; ++i) d.x(i, j) = g(i, j) + confound * e + noise * n01(rng);
    d.y(0, j) = confound * e + kOutcomeNoise * n01(rng);
  }
  const Matrix f = iv_structural(d.x);
  for (std::size_t j = 0; j < n; ++j) d.y(0, j) += f(0, j);
  return d;
}

void write_columns(const std::filesystem::path& path, const std::vector<std::pair<std::string, const Matrix*>>& blocks) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  bool first = true;
  std::size_t n = blocks.front().second->cols();
  for (const auto& [name, m] : blocks) {
    for (std::size_t i = 0; i < m->rows(); ++i) {
      os << (first ? "" : ",") << name << (m->rows() > 1 ? std::to_string(i) : "");
      first = false;
    }
  }
  os << '\n';
  for (std::size_t j = 0; j < n; ++j) {
    first = true;
    for (const auto& block : blocks) {
      const Matrix& m = *block.second;
      for (std::size_t i = 0; i < m.rows(); ++i) {
        os << (first ? "" : ",") << format_real(m(i, j));
        first = false;
      }
    }
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw DivergenceError(std::string("non-finite ") + what, -1);
}

Matrix strip_last_row(const Matrix& g) { return row_block(g, 0, g.rows() - 1); }

Matrix fit_head(DfivHeadKind kind, const Matrix& target, const Matrix& phi, const Matrix& prev, double reg) {
  return kind == DfivHeadKind::proximal ? proximal_solution(target, phi, prev, reg)
                                        : ridge_solution(target, phi, reg);
}

// ||grad_W|| of the head objective at w, relative to the size of its constant part.
double head_grad_ratio(DfivHeadKind kind, const Matrix& w, const Matrix& phi, const Matrix& target,
                       const Matrix& prev, double reg) {
  LossReport r = kind == DfivHeadKind::proximal ? proximal_loss(w, phi, target, prev, reg)
                                                : ridge_loss(w, phi, target, reg);
  double ref = 2.0 * frobenius_norm(matmul_nt(target, phi));
  if (kind == DfivHeadKind::proximal) ref += 2.0 * reg * frobenius_norm(prev);
  return frobenius_norm(*r.grad_W) / std::max(ref, 1e-300);
}

void backbone_step(MlpBackbone& bb, const ParamGrads& g, double lr, OptimizerState& opt) {
  std::vector<double> theta = bb.parameters();
  optimizer_step(theta, g.flatten(), opt, lr);
  bb.set_parameters(theta);
}

double reg12_of(const DfivConfig& c) { return c.head == DfivHeadKind::proximal ? c.reg12 : c.reg1; }

}  // namespace

Matrix iv_treatment_mean(const Matrix& z) {
  if (z.rows() != kIvInstrumentDim) throw DimensionError("instrument must have 3 rows");
  Matrix g(kIvTreatmentDim, z.cols());
  for (std::size_t j = 0; j < z.cols(); ++j) {
    g(0, j) = z(0, j);
    g(1, j) = z(1, j);
    g(2, j) = z(2, j);
    g(3, j) = std::tanh(z(0, j) - z(2, j));
    g(4, j) = 0.5 * z(1, j) * z(2, j);
  }
  return g;
}

Matrix iv_structural(const Matrix& x) {
  if (x.rows() != kIvTreatmentDim) throw DimensionError("treatment must have 5 rows");
  Matrix f(1, x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < kIvTreatmentDim; ++i) s += kV[i] * x(i, j);
    f(0, j) = (s * s - 1.6) / 2.2;
  }
  return f;
}

IvDataset generate_iv_data(std::size_t n1, std::size_t n2, std::size_t n_test, double confound,
                           double noise, std::uint64_t seed) {
  if (n1 == 0 || n2 == 0 || n_test == 0) throw ConfigError("generate_iv_data: sizes must be positive");
  if (!(noise >= 0.0)) throw ConfigError("generate_iv_data: noise must be >= 0");
  std::mt19937_64 rng(derive_seed(seed, 0));
  IvDataset d;
  d.confound = confound;
  d.noise = noise;
  d.seed = seed;
  IvDraw s1 = draw_iv(n1, confound, noise, rng);
  IvDraw s2 = draw_iv(n2, confound, noise, rng);
  IvDraw val = draw_iv(n_test, confound, noise, rng);
  IvDraw test = draw_iv(n_test, confound, noise, rng);
  d.stage1_x = std::move(s1.x);
  d.stage1_z = std::move(s1.z);
  d.stage2_x = std::move(s2.x);
  d.stage2_z = std::move(s2.z);
  d.stage2_y = std::move(s2.y);
  d.val_f = iv_structural(val.x);
  d.val_x = std::move(val.x);
  d.test_f = iv_structural(test.x);
  d.test_x = std::move(test.x);
  return d;
}

void write_iv_bundle(const std::filesystem::path& dir, const IvDataset& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_columns(dir / "stage1.csv", {{"x", &data.stage1_x}, {"z", &data.stage1_z}});
  write_columns(dir / "stage2.csv", {{"x", &data.stage2_x}, {"z", &data.stage2_z}, {"y", &data.stage2_y}});
  write_columns(dir / "val.csv", {{"x", &data.val_x}, {"f", &data.val_f}});
  write_columns(dir / "test.csv", {{"x", &data.test_x}, {"f", &data.test_f}});
  std::ofstream meta(dir / "meta.csv", std::ios::binary);
  meta << "key,value\n"
       << "confound," << format_real(data.confound) << '\n'
       << "noise," << format_real(data.noise) << '\n'
       << "seed," << data.seed << '\n'
       << "n1," << data.stage1_x.cols() << '\n'
       << "n2," << data.stage2_x.cols() << '\n'
       << "n_test," << data.test_x.cols() << '\n';
  if (!meta) throw IoError("failed writing meta.csv");
}

DfivHeadKind parse_dfiv_head(std::string_view name) {
  if (name == "proximal") return DfivHeadKind::proximal;
  if (name == "ridge") return DfivHeadKind::ridge;
  throw ConfigError("unknown DFIV head '" + std::string(name) + "'");
}

std::string_view to_string(DfivHeadKind k) { return k == DfivHeadKind::proximal ? "proximal" : "ridge"; }

void DfivConfig::validate() const {
  if (!(reg1 > 0.0) || !(reg2 > 0.0) || !(reg12 > 0.0)) throw ConfigError("DFIV strengths must be > 0");
  if (t1 == 0 || t2 == 0) throw ConfigError("t1 and t2 must be >= 1");
  if (!(lr1 > 0.0) || !(lr2 > 0.0)) throw ConfigError("learning rates must be > 0");
  if (features_x == 0 || features_z == 0) throw ConfigError("feature sizes must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
}

DfivState init_dfiv(const DfivConfig& cfg) {
  cfg.validate();
  auto dims = [](std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> d{in};
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(out);
    return d;
  };
  return DfivState{
      cfg,
      init_backbone(dims(kIvTreatmentDim, cfg.hidden_x, cfg.features_x), cfg.activation,
                    Parameterization::standard, derive_seed(cfg.seed, 11)),
      Matrix(1, cfg.features_x + 1),
      init_backbone(dims(kIvInstrumentDim, cfg.hidden_z, cfg.features_z), cfg.activation,
                    Parameterization::standard, derive_seed(cfg.seed, 12)),
      Matrix(cfg.features_x, cfg.features_z + 1),
  };
}

Matrix stage2_head_features(const DfivState& st, const Matrix& psi1, const Matrix& phi1, const Matrix& phi2) {
  const Matrix w_star = fit_head(st.cfg.head, psi1, phi1, st.W, reg12_of(st.cfg));
  return augment_features(matmul(w_star, phi2), true);
}

ParamGrads stage2_gradient(const DfivState& st, const Matrix& x1, const Matrix& phi1, const Matrix& phi2,
                           const Matrix& y2, double* loss) {
  // W*(theta_X) = (psi1 phi1^T + r W) M^{-1} with M = phi1 phi1^T + r I, so
  // dL/dpsi1 = dL/dW* M^{-1} phi1.
  auto fx = forward(st.treatment, x1);
  const Matrix u = stage2_head_features(st, fx.features, phi1, phi2);
  const Matrix resid = sub(matmul(st.w, u), y2);
  if (loss) *loss = squared_norm(resid);
  const Matrix d_u = strip_last_row(scale(matmul_tn(st.w, resid), 2.0));
  const Matrix m_inv_phi1 = Cholesky(add_diagonal(gram(phi1), reg12_of(st.cfg))).solve(phi1);
  const Matrix d_psi = matmul(matmul_nt(d_u, phi2), m_inv_phi1);
  return backward(st.treatment, fx.tape, d_psi);
}

void dfiv_outer_step(DfivState& st, const Matrix& x1, const Matrix& z1, const Matrix& z2,
                     const Matrix& y2, OptimizerState& opt_z, OptimizerState& opt_x,
                     DfivDiagnostics* diag, double* stage2_loss) {
  const DfivConfig& c = st.cfg;
  // Stage 1: the treatment features are the regression target.
  const Matrix target1 = features(st.treatment, x1);
  for (std::size_t k = 0; k < c.t1; ++k) {
    ++st.t1;
    auto fz = forward(st.instrument, z1);
    const Matrix phi = augment_features(fz.features, true);
    const Matrix resid = sub(matmul(st.W, phi), target1);
    const Matrix g = strip_last_row(scale(matmul_tn(st.W, resid), 2.0));
    backbone_step(st.instrument, backward(st.instrument, fz.tape, g), c.lr1, opt_z);

    const Matrix phi_new = augment_features(features(st.instrument, z1), true);
    Matrix w_new = fit_head(c.head, target1, phi_new, st.W, c.reg1);
    require_finite(w_new, "stage-1 head");
    if (diag) {
      diag->max_stage1_head_grad = std::max(
          diag->max_stage1_head_grad, head_grad_ratio(c.head, w_new, phi_new, target1, st.W, c.reg1));
    }
    st.W = std::move(w_new);
  }

  // Stage 2.
  const Matrix phi1 = augment_features(features(st.instrument, z1), true);
  const Matrix phi2 = augment_features(features(st.instrument, z2), true);
  for (std::size_t k = 0; k < c.t2; ++k) {
    ++st.t2;
    double err = 0.0;
    const ParamGrads g = stage2_gradient(st, x1, phi1, phi2, y2, &err);
    if (!std::isfinite(err)) throw DivergenceError("non-finite stage-2 loss", -1);
    if (stage2_loss) *stage2_loss = err / static_cast<double>(y2.cols());
    backbone_step(st.treatment, g, c.lr2, opt_x);

    const Matrix u_new = stage2_head_features(st, features(st.treatment, x1), phi1, phi2);
    Matrix w_new = fit_head(c.head, y2, u_new, st.w, c.reg2);
    require_finite(w_new, "stage-2 head");
    if (diag) {
      diag->max_stage2_head_grad =
          std::max(diag->max_stage2_head_grad, head_grad_ratio(c.head, w_new, u_new, y2, st.w, c.reg2));
    }
    st.w = std::move(w_new);
  }
}

DfivResult dfiv_train(const DfivConfig& cfg, const IvDataset& data, const DfivEvalFn& eval) {
  return dfiv_train_from(init_dfiv(cfg), data, eval);
}

DfivResult dfiv_train_from(DfivState state, const IvDataset& data, const DfivEvalFn& eval) {
  using Clock = std::chrono::steady_clock;
  const DfivConfig cfg = state.cfg;
  cfg.validate();
  RunRecord record;
  DfivDiagnostics diag;
  bool diverged = false;
  std::string diagnostic;
  BatchSampler s1(data.stage1_x.cols(), cfg.batch1, derive_seed(cfg.seed, 13));
  BatchSampler s2(data.stage2_z.cols(), cfg.batch2, derive_seed(cfg.seed, 14));
  OptimizerState opt_z = make_optimizer(cfg.optimizer, cfg.momentum);
  OptimizerState opt_x = make_optimizer(cfg.optimizer, cfg.momentum);
  const auto t0 = Clock::now();
  long it = 0;
  try {
    for (it = 1; it <= static_cast<long>(cfg.iterations); ++it) {
      const auto b1 = s1.next();
      const auto b2 = s2.next();
      const Matrix x1 = select_columns(data.stage1_x, b1);
      const Matrix z1 = select_columns(data.stage1_z, b1);
      const Matrix z2 = select_columns(data.stage2_z, b2);
      const Matrix y2 = select_columns(data.stage2_y, b2);
      const Matrix w_before = state.w;
      double loss = 0.0;
      dfiv_outer_step(state, x1, z1, z2, y2, opt_z, opt_x, &diag, &loss);
      for (double p : state.treatment.parameters()) {
        if (!std::isfinite(p)) throw DivergenceError("non-finite treatment parameter", it);
      }
      for (double p : state.instrument.parameters()) {
        if (!std::isfinite(p)) throw DivergenceError("non-finite instrument parameter", it);
      }
      RunRow row;
      row.iter = state.t2;
      row.train_loss = loss;
      row.w_delta = frobenius_norm(sub(state.w, w_before));
      if (eval && (it % static_cast<long>(cfg.eval_every) == 0 || it == static_cast<long>(cfg.iterations))) {
        row.eval_metric = eval(state);
      }
      if (cfg.record_time) row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      record.append(row);
    }
  } catch (const DivergenceError& e) {
    diverged = true;
    diagnostic = std::string(e.what()) + " at outer iteration " + std::to_string(it);
  } catch (const DefinitenessError& e) {
    diverged = true;
    diagnostic = std::string(e.what()) + " at outer iteration " + std::to_string(it);
  }
  return DfivResult{std::move(state), std::move(record), diag, diverged, std::move(diagnostic)};
}

Matrix dfiv_predict(const DfivState& state, const Matrix& x, const Matrix& w) {
  return matmul(w, augment_features(features(state.treatment, x), true));
}

double dfiv_evaluate(const DfivState& state, const IvDataset& data, DfivEvalMode mode, bool on_validation) {
  const Matrix& x = on_validation ? data.val_x : data.test_x;
  const Matrix& f = on_validation ? data.val_f : data.test_f;
  if (mode == DfivEvalMode::current) return mse(dfiv_predict(state, x, state.w), f);

  const Matrix psi1 = features(state.treatment, data.stage1_x);
  const Matrix phi1 = augment_features(features(state.instrument, data.stage1_z), true);
  // The coefficient is on the per-sample scale; losses here are sums.
  const double n1 = static_cast<double>(data.stage1_x.cols());
  const double n2 = static_cast<double>(data.stage2_z.cols());
  const Matrix w1 = ridge_solution(psi1, phi1, kDfivReestimateRidge * n1);
  const Matrix phi2 = augment_features(features(state.instrument, data.stage2_z), true);
  const Matrix u = augment_features(matmul(w1, phi2), true);
  const Matrix w2 = ridge_solution(data.stage2_y, u, kDfivReestimateRidge * n2);
  return mse(dfiv_predict(state, x, w2), f);
}

NaiveIvResult naive_iv_baseline(const IvDataset& data, const TrainConfig& cfg) {
  Dataset d;
  d.x = data.stage2_x;
  d.y = data.stage2_y;
  TrainResult run = train(cfg, d);
  const double test = mse(predict(run.model, data.test_x), data.test_f);
  const double val = mse(predict(run.model, data.val_x), data.val_f);
  return NaiveIvResult{test, val, std::move(run)};
}

}  // namespace cfl
