#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cfl/backbone.hpp"
#include "cfl/data.hpp"
#include "cfl/head.hpp"
#include "cfl/optim.hpp"
#include "cfl/record.hpp"

namespace cfl {

/// Instrumental-variable regression data. Instrument z in R^3, treatment x in
/// R^5, scalar outcome y; a hidden confounder e enters both x and y.
///
///   z ~ U[-2, 2]^3,  e ~ N(0, 1)
///   x = g(z) + c e 1 + N(0, sigma^2 I)
///   y = f_struct(x) + c e + N(0, 0.5^2)
///
/// with g(z) = (z1, z2, z3, tanh(z1 - z3), z2 z3 / 2) and
/// f_struct(x) = ((v^T x)^2 - 1.6) / 2.2, v = (0.6, -0.6, 0.4, 0.4, -0.8).
struct IvDataset {
  Matrix stage1_x, stage1_z;
  Matrix stage2_x, stage2_z, stage2_y;  ///< stage2_x is only used by the naive baseline
  Matrix val_x, val_f;
  Matrix test_x, test_f;
  double confound = 0.0;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kIvTreatmentDim = 5;
inline constexpr std::size_t kIvInstrumentDim = 3;

Matrix iv_treatment_mean(const Matrix& z);
/// f_struct applied column-wise; 1 x n.
Matrix iv_structural(const Matrix& x);

/// The validation split has n_test samples as well.
IvDataset generate_iv_data(std::size_t n1, std::size_t n2, std::size_t n_test, double confound,
                           double noise, std::uint64_t seed);

/// stage1.csv, stage2.csv, val.csv, test.csv and meta.csv under `dir`.
void write_iv_bundle(const std::filesystem::path& dir, const IvDataset& data);

enum class DfivHeadKind : std::uint8_t { proximal, ridge };
DfivHeadKind parse_dfiv_head(std::string_view name);
std::string_view to_string(DfivHeadKind k);

struct DfivConfig {
  DfivHeadKind head = DfivHeadKind::proximal;
  /// Stage-1 head strength (lambda_1, or beta_1 for ridge).
  double reg1 = 1.0;
  /// Stage-2 head strength (lambda_2, or beta_2 for ridge).
  double reg2 = 1.0;
  /// Proximal strength of the stage-1 head re-solved inside stage 2 (proximal only).
  double reg12 = 1e-4;
  std::size_t t1 = 20;
  std::size_t t2 = 1;
  /// Outer iterations of the alternating loop.
  std::size_t iterations = 100;
  /// 0 means full batch.
  std::size_t batch1 = 0;
  std::size_t batch2 = 0;
  double lr1 = 1e-3;
  double lr2 = 1e-3;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.0;
  std::vector<std::size_t> hidden_x = {32};
  std::size_t features_x = 16;
  std::vector<std::size_t> hidden_z = {32};
  std::size_t features_z = 16;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;
  bool record_time = false;

  void validate() const;
};

/// Treatment network psi with scalar head w (1 x (dx + 1)); instrument
/// network phi with head W (dx x (dz + 1)). Both heads act on features with a
/// constant row appended.
struct DfivState {
  DfivConfig cfg;
  MlpBackbone treatment;
  Matrix w;
  MlpBackbone instrument;
  Matrix W;
  long t1 = 0;
  long t2 = 0;
};

DfivState init_dfiv(const DfivConfig& cfg);

/// Largest relative ||grad_W|| of the head objective seen immediately after a
/// closed-form update, over the whole run. Exposed for testing.
struct DfivDiagnostics {
  double max_stage1_head_grad = 0.0;
  double max_stage2_head_grad = 0.0;
};

struct DfivResult {
  DfivState state;
  RunRecord record;  ///< train_loss is the stage-2 per-sample squared error
  DfivDiagnostics diagnostics;
  bool diverged = false;
  std::string diagnostic;
};

using DfivEvalFn = std::function<double(const DfivState&)>;

/// Alternating two-stage training. Per outer iteration: sample B1 and B2;
/// t1 times {theta_Z step with W fixed, closed-form W}; t2 times {re-solve
/// W*(theta_X) on B1, theta_X step with w fixed, closed-form w}.
DfivResult dfiv_train(const DfivConfig& cfg, const IvDataset& data, const DfivEvalFn& eval = {});
/// Continues from `state` for cfg.iterations more outer iterations.
DfivResult dfiv_train_from(DfivState state, const IvDataset& data, const DfivEvalFn& eval = {});

/// [W*(theta_X) phi~(z2); 1] with W* re-solved on (psi1, phi1) using the
/// stage-2 strength (reg12 for proximal, reg1 for ridge).
Matrix stage2_head_features(const DfivState& state, const Matrix& psi1, const Matrix& phi1, const Matrix& phi2);

/// Gradient of ||w u(theta_X) - y2||^2 over the treatment parameters, with
/// the dependence of W* on theta_X included. phi1, phi2 are augmented.
ParamGrads stage2_gradient(const DfivState& state, const Matrix& x1, const Matrix& phi1, const Matrix& phi2,
                           const Matrix& y2, double* loss = nullptr);

/// One outer iteration on explicit batches.
void dfiv_outer_step(DfivState& state, const Matrix& x1, const Matrix& z1, const Matrix& z2,
                     const Matrix& y2, OptimizerState& opt_z, OptimizerState& opt_x,
                     DfivDiagnostics* diag = nullptr, double* stage2_loss = nullptr);

enum class DfivEvalMode : std::uint8_t { reestimate, current };

inline constexpr double kDfivReestimateRidge = 0.01;

/// Estimated structural function w [psi(x); 1], 1 x n.
Matrix dfiv_predict(const DfivState& state, const Matrix& x, const Matrix& w);

/// MSE against f_struct on (x, f). reestimate refits both heads by ridge on
/// all training data with coefficient 0.01 per sample (0.01 n on the summed
/// loss); current uses the in-training w.
double dfiv_evaluate(const DfivState& state, const IvDataset& data, DfivEvalMode mode,
                     bool on_validation = false);

/// Plain regression of stage-2 y on stage-2 x with the same treatment
/// network, ignoring the instrument. Returns test MSE against f_struct.
struct NaiveIvResult {
  double test_mse = 0.0;
  double val_mse = 0.0;
  TrainResult run;
};
NaiveIvResult naive_iv_baseline(const IvDataset& data, const TrainConfig& cfg);

}  // namespace cfl
