#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfl/backbone.hpp"
#include "cfl/data.hpp"
#include "cfl/head.hpp"
#include "cfl/record.hpp"

namespace cfl {

enum class Method : std::uint8_t {
  joint_sgd_l2,                    ///< SGD on W and theta jointly, squared loss
  closed_form_ridge,               ///< per-batch ridge head, then theta step (full batch: alternation)
  closed_form_proximal_simple,     ///< theta step with W_{t-1}, then proximal head on the same batch
  closed_form_proximal_lookahead,  ///< theta step with W_t, then proximal head on the next batch
  joint_sgd_xent,                  ///< SGD on W and theta jointly, softmax cross-entropy
};

enum class OptimizerKind : std::uint8_t { sgd, adam };

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind k);
bool is_closed_form(Method m);

struct TrainConfig {
  Method method = Method::closed_form_proximal_simple;
  /// 0 means full batch.
  std::size_t batch_size = 0;
  double learning_rate = 1e-3;
  std::optional<double> beta;
  std::optional<double> lambda;
  double momentum = 0.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  std::size_t epochs = 1;
  /// When nonzero, overrides epochs with a fixed iteration budget.
  std::size_t max_iterations = 0;
  std::uint64_t seed = 0;

  std::vector<std::size_t> hidden = {32};
  std::size_t feature_dim = 32;
  Activation activation = Activation::relu;
  bool has_bias = true;
  InitPolicy head_init = InitPolicy::zeros;

  std::size_t eval_every = 1;
  /// Wall-clock column is zero unless set; keeps CSVs byte-reproducible.
  bool record_time = false;

  /// Throws ConfigError on invalid combinations.
  void validate() const;
  double head_strength() const;
};

/// Momentum (Nesterov) and Adam buffers for a flat parameter vector.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> velocity;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;
};

OptimizerState make_optimizer(OptimizerKind kind, double momentum = 0.0);

/// v <- gamma v + g;  theta <- theta - lr (gamma v + g).
void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr);

/// Bias-corrected Adam with the state's beta1, beta2, epsilon.
void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr);

/// Dispatches on state.kind.
void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    double lr);

struct Model {
  MlpBackbone backbone;
  HeadState head;
};

Model init_model(const TrainConfig& cfg, std::size_t input_dim, std::size_t output_dim);

/// Augmented features phi~(X) for the model's head.
Matrix head_features(const Model& model, const Matrix& x);
Matrix predict(const Model& model, const Matrix& x);

struct StepResult {
  /// Mean squared error (or mean cross-entropy) on the batch at the point
  /// where the backbone gradient was taken.
  double loss = 0.0;
  /// ||W_after - W_before||_F.
  double w_delta = 0.0;
};

/// Gradient of the data term of L_B(W, theta) w.r.t. theta for a fixed head.
ParamGrads backbone_gradient(const MlpBackbone& bb, const HeadState& head, const Matrix& x,
                             const Matrix& y, double* squared_error = nullptr);

/// One SGD step on W and theta for the batch loss.
StepResult step_joint_sgd(Model& model, const Matrix& x, const Matrix& y, double lr, double beta,
                          OptimizerState& opt);

/// One SGD step on W and theta for softmax cross-entropy plus beta ||W||^2.
StepResult step_joint_xent(Model& model, const Matrix& x, const Matrix& y, double lr, double beta,
                           OptimizerState& opt);

/// W_{t+1} = ridge solution at theta_t on all data, then theta step with W_{t+1}.
StepResult step_full_batch_closed_form(Model& model, const Matrix& x, const Matrix& y, double lr,
                                       double beta, OptimizerState& opt);

/// Same ordering as step_full_batch_closed_form, restricted to one batch.
StepResult step_naive_batch_ridge(Model& model, const Matrix& x, const Matrix& y, double lr,
                                  double beta, OptimizerState& opt);

/// theta_t = theta_{t-1} - lr grad L_B(W_{t-1}, theta_{t-1}), then
/// W_t = proximal solution on the same batch with features at theta_t.
StepResult step_algorithm1(Model& model, const Matrix& x, const Matrix& y, double lr, double lambda,
                           OptimizerState& opt);

/// Initial head fit on the first batch for the lookahead ordering.
void prime_algorithm2(Model& model, const Matrix& x_first, const Matrix& y_first, double lambda);

/// theta step on the current batch with the up-to-date W_t, then
/// W_{t+1} = proximal solution on the next batch at theta_t.
StepResult step_algorithm2(Model& model, const Matrix& x, const Matrix& y, const Matrix& x_next,
                           const Matrix& y_next, double lr, double lambda, OptimizerState& opt);

struct TrainResult {
  Model model;
  RunRecord record;
  bool diverged = false;
  long diverged_at = -1;
  std::string diagnostic;
};

using EvalFn = std::function<double(const Model&)>;

/// Runs cfg on `data`. Divergence ends the run early with diverged = true
/// and a diagnostic; the record keeps all rows before the failure.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const EvalFn& eval = {});

/// Same as train() but starting from an existing model.
TrainResult train_from(const TrainConfig& cfg, Model model, const Dataset& data,
                       const EvalFn& eval = {});

}  // namespace cfl
