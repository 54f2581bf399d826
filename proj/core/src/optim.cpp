#include "cfl/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "cfl/errors.hpp"
#include "cfl/losses.hpp"

namespace cfl {

Method parse_method(std::string_view name) {
  if (name == "joint_sgd_l2") return Method::joint_sgd_l2;
  if (name == "closed_form_ridge") return Method::closed_form_ridge;
  if (name == "closed_form_proximal_simple") return Method::closed_form_proximal_simple;
  if (name == "closed_form_proximal_lookahead") return Method::closed_form_proximal_lookahead;
  if (name == "joint_sgd_xent") return Method::joint_sgd_xent;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::joint_sgd_l2: return "joint_sgd_l2";
    case Method::closed_form_ridge: return "closed_form_ridge";
    case Method::closed_form_proximal_simple: return "closed_form_proximal_simple";
    case Method::closed_form_proximal_lookahead: return "closed_form_proximal_lookahead";
    case Method::joint_sgd_xent: return "joint_sgd_xent";
  }
  return "?";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

bool is_closed_form(Method m) {
  return m == Method::closed_form_ridge || m == Method::closed_form_proximal_simple ||
         m == Method::closed_form_proximal_lookahead;
}

namespace {

bool uses_lambda(Method m) {
  return m == Method::closed_form_proximal_simple || m == Method::closed_form_proximal_lookahead;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be finite and non-negative");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs == 0 && max_iterations == 0) throw ConfigError("need epochs > 0 or max_iterations > 0");
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (is_closed_form(method)) {
    if (beta.has_value() == lambda.has_value()) {
      throw ConfigError(std::string(to_string(method)) + " needs exactly one of beta / lambda");
    }
    if (uses_lambda(method) && !lambda) throw ConfigError(std::string(to_string(method)) + " needs lambda");
    if (!uses_lambda(method) && !beta) throw ConfigError(std::string(to_string(method)) + " needs beta");
    if (!(head_strength() > 0.0)) throw ConfigError("beta / lambda must be > 0");
  } else {
    if (lambda) throw ConfigError(std::string(to_string(method)) + " does not take lambda");
    if (beta && *beta < 0.0) throw ConfigError("beta must be >= 0");
  }
}

double TrainConfig::head_strength() const {
  if (lambda) return *lambda;
  if (beta) return *beta;
  return 0.0;
}

OptimizerState make_optimizer(OptimizerKind kind, double momentum) {
  OptimizerState s;
  s.kind = kind;
  s.momentum = momentum;
  return s;
}

void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr) {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: size mismatch");
  if (state.momentum == 0.0) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
    ++state.step_count;
    return;
  }
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), 0.0);
  const double g = state.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& v = state.velocity[i];
    v = g * v + grads[i];
    params[i] -= lr * (g * v + grads[i]);
  }
  ++state.step_count;
}

void adam_step(std::span<double> params, std::span<const double> grads, OptimizerState& state, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: size mismatch");
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  ++state.step_count;
  const double b1 = state.beta1;
  const double b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = b1 * m + (1.0 - b1) * grads[i];
    v = b2 * v + (1.0 - b2) * grads[i] * grads[i];
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

void optimizer_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                    double lr) {
  if (state.kind == OptimizerKind::adam) {
    adam_step(params, grads, state, lr);
  } else {
    sgd_step(params, grads, state, lr);
  }
}

Model init_model(const TrainConfig& cfg, std::size_t input_dim, std::size_t output_dim) {
  std::vector<std::size_t> dims;
  dims.push_back(input_dim);
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(cfg.feature_dim);
  Model model{init_backbone(dims, cfg.activation, Parameterization::standard, derive_seed(cfg.seed, 1)),
              {}};
  const double strength = cfg.head_strength();
  const Regularizer reg = uses_lambda(cfg.method) ? Regularizer::proximal(strength)
                                                  : Regularizer::ridge(strength > 0.0 ? strength : 1.0);
  model.head = init_head(output_dim, cfg.feature_dim, cfg.head_init, derive_seed(cfg.seed, 2),
                         cfg.has_bias, reg);
  return model;
}

Matrix head_features(const Model& model, const Matrix& x) {
  return augment_features(features(model.backbone, x), model.head.has_bias);
}

Matrix predict(const Model& model, const Matrix& x) {
  return predict(model.head, features(model.backbone, x));
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite ") + what, -1);
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw DivergenceError(std::string("non-finite ") + what, -1);
}

// Drops the constant-row gradient when the head carries a bias column.
Matrix strip_bias_row(Matrix grad_aug, bool has_bias) {
  if (!has_bias) return grad_aug;
  return row_block(grad_aug, 0, grad_aug.rows() - 1);
}

double per_entry(double total, const Matrix& y) {
  return y.empty() ? 0.0 : total / static_cast<double>(y.size());
}

// Flat [theta; W] vector for joint optimizers.
std::vector<double> joint_parameters(const Model& model) {
  std::vector<double> p = model.backbone.parameters();
  auto w = model.head.W.data();
  p.insert(p.end(), w.begin(), w.end());
  return p;
}

void set_joint_parameters(Model& model, std::span<const double> p) {
  const std::size_t n = model.backbone.parameter_count();
  model.backbone.set_parameters(p.first(n));
  auto w = model.head.W.data();
  std::copy(p.begin() + static_cast<std::ptrdiff_t>(n), p.end(), w.begin());
}

void backbone_update(MlpBackbone& bb, const ParamGrads& grads, double lr, OptimizerState& opt) {
  std::vector<double> params = bb.parameters();
  optimizer_step(params, grads.flatten(), opt, lr);
  bb.set_parameters(params);
}

StepResult joint_step(Model& model, const Matrix& grad_w, const ParamGrads& grad_theta, double loss,
                      double lr, OptimizerState& opt) {
  require_finite(loss, "loss");
  std::vector<double> params = joint_parameters(model);
  std::vector<double> grads = grad_theta.flatten();
  grads.insert(grads.end(), grad_w.data().begin(), grad_w.data().end());
  const Matrix w_before = model.head.W;
  optimizer_step(params, grads, opt, lr);
  set_joint_parameters(model, params);
  require_finite(model.head.W, "head");
  return {loss, frobenius_norm(sub(model.head.W, w_before))};
}

}  // namespace

ParamGrads backbone_gradient(const MlpBackbone& bb, const HeadState& head, const Matrix& x,
                             const Matrix& y, double* squared_error) {
  auto fwd = forward(bb, x);
  const Matrix phi = augment_features(fwd.features, head.has_bias);
  const Matrix residual = sub(matmul(head.W, phi), y);
  if (squared_error) *squared_error = squared_norm(residual);
  Matrix grad_phi = strip_bias_row(scale(matmul_tn(head.W, residual), 2.0), head.has_bias);
  return backward(bb, fwd.tape, grad_phi);
}

StepResult step_joint_sgd(Model& model, const Matrix& x, const Matrix& y, double lr, double beta,
                          OptimizerState& opt) {
  if (x.cols() == 0) throw ConfigError("step_joint_sgd: empty batch");
  auto fwd = forward(model.backbone, x);
  const Matrix phi = augment_features(fwd.features, model.head.has_bias);
  LossReport loss = batch_loss(model.head.W, phi, y, beta);
  require_finite(loss.value, "loss");
  const ParamGrads gtheta =
      backward(model.backbone, fwd.tape, strip_bias_row(*loss.grad_features, model.head.has_bias));
  const double err = per_entry(squared_error(model.head.W, phi, y), y);
  return joint_step(model, *loss.grad_W, gtheta, err, lr, opt);
}

StepResult step_joint_xent(Model& model, const Matrix& x, const Matrix& y, double lr, double beta,
                           OptimizerState& opt) {
  if (x.cols() == 0) throw ConfigError("step_joint_xent: empty batch");
  auto fwd = forward(model.backbone, x);
  const Matrix phi = augment_features(fwd.features, model.head.has_bias);
  const Matrix logits = matmul(model.head.W, phi);
  if (logits.rows() != y.rows() || logits.cols() != y.cols()) {
    throw DimensionError("step_joint_xent: targets do not match logits");
  }

  // d/dz sum_j -y_j . log softmax(z_j) = softmax(z_j) * sum(y_j) - y_j
  Matrix grad_logits(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    double mx = logits(0, j);
    for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) z += std::exp(logits(i, j) - mx);
    const double log_z = mx + std::log(z);
    double mass = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) mass += y(i, j);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      const double log_p = logits(i, j) - log_z;
      total -= y(i, j) * log_p;
      grad_logits(i, j) = std::exp(log_p) * mass - y(i, j);
    }
  }
  require_finite(total, "cross-entropy loss");

  Matrix grad_w = matmul_nt(grad_logits, phi);
  if (beta > 0.0) {
    auto g = grad_w.data();
    auto w = model.head.W.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * beta * w[i];
  }
  const Matrix grad_phi = strip_bias_row(matmul_tn(model.head.W, grad_logits), model.head.has_bias);
  const ParamGrads gtheta = backward(model.backbone, fwd.tape, grad_phi);
  return joint_step(model, grad_w, gtheta, total / static_cast<double>(x.cols()), lr, opt);
}

namespace {

// Refit the head on (x, y) at theta_t, then step theta with the refitted head.
StepResult refit_then_step(Model& model, const Matrix& x, const Matrix& y, double lr, double beta,
                           OptimizerState& opt) {
  if (x.cols() == 0) throw ConfigError("closed-form step: empty batch");
  auto fwd = forward(model.backbone, x);
  const Matrix phi = augment_features(fwd.features, model.head.has_bias);
  Matrix w_new = ridge_solution(y, phi, beta);
  require_finite(w_new, "closed-form head");
  const double delta = frobenius_norm(sub(w_new, model.head.W));
  model.head.W = std::move(w_new);

  const Matrix residual = sub(matmul(model.head.W, phi), y);
  const double err = squared_norm(residual);
  require_finite(err, "loss");
  const Matrix grad_phi =
      strip_bias_row(scale(matmul_tn(model.head.W, residual), 2.0), model.head.has_bias);
  backbone_update(model.backbone, backward(model.backbone, fwd.tape, grad_phi), lr, opt);
  return {per_entry(err, y), delta};
}

}  // namespace

StepResult step_full_batch_closed_form(Model& model, const Matrix& x, const Matrix& y, double lr,
                                       double beta, OptimizerState& opt) {
  return refit_then_step(model, x, y, lr, beta, opt);
}

StepResult step_naive_batch_ridge(Model& model, const Matrix& x, const Matrix& y, double lr,
                                  double beta, OptimizerState& opt) {
  return refit_then_step(model, x, y, lr, beta, opt);
}

StepResult step_algorithm1(Model& model, const Matrix& x, const Matrix& y, double lr, double lambda,
                           OptimizerState& opt) {
  if (x.cols() == 0) throw ConfigError("step_algorithm1: empty batch");
  if (!(lambda > 0.0)) throw ConfigError("step_algorithm1: lambda must be > 0");
  double err = 0.0;
  const ParamGrads g = backbone_gradient(model.backbone, model.head, x, y, &err);
  require_finite(err, "loss");
  backbone_update(model.backbone, g, lr, opt);

  const Matrix phi = head_features(model, x);
  Matrix w_new = proximal_solution(y, phi, model.head.W, lambda);
  require_finite(w_new, "closed-form head");
  const double delta = frobenius_norm(sub(w_new, model.head.W));
  model.head.W = std::move(w_new);
  return {per_entry(err, y), delta};
}

void prime_algorithm2(Model& model, const Matrix& x_first, const Matrix& y_first, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("prime_algorithm2: lambda must be > 0");
  const Matrix phi = head_features(model, x_first);
  Matrix w = proximal_solution(y_first, phi, model.head.W, lambda);
  require_finite(w, "closed-form head");
  model.head.W = std::move(w);
}

StepResult step_algorithm2(Model& model, const Matrix& x, const Matrix& y, const Matrix& x_next,
                           const Matrix& y_next, double lr, double lambda, OptimizerState& opt) {
  if (x.cols() == 0 || x_next.cols() == 0) throw ConfigError("step_algorithm2: empty batch");
  if (!(lambda > 0.0)) throw ConfigError("step_algorithm2: lambda must be > 0");
  double err = 0.0;
  const ParamGrads g = backbone_gradient(model.backbone, model.head, x, y, &err);
  require_finite(err, "loss");
  backbone_update(model.backbone, g, lr, opt);

  const Matrix phi_next = head_features(model, x_next);
  Matrix w_new = proximal_solution(y_next, phi_next, model.head.W, lambda);
  require_finite(w_new, "closed-form head");
  const double delta = frobenius_norm(sub(w_new, model.head.W));
  model.head.W = std::move(w_new);
  return {per_entry(err, y), delta};
}

TrainResult train(const TrainConfig& cfg, const Dataset& data, const EvalFn& eval) {
  cfg.validate();
  return train_from(cfg, init_model(cfg, data.x.rows(), data.y.rows()), data, eval);
}

TrainResult train_from(const TrainConfig& cfg, Model model, const Dataset& data, const EvalFn& eval) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");

  TrainResult result{std::move(model), {}, false, -1, {}};
  Model& m = result.model;
  OptimizerState opt = make_optimizer(cfg.optimizer, cfg.momentum);
  BatchSampler sampler(data.size(), cfg.batch_size, derive_seed(cfg.seed, 3));
  const std::size_t iterations =
      cfg.max_iterations ? cfg.max_iterations : cfg.epochs * sampler.batches_per_epoch();
  const double lr = cfg.learning_rate;
  const double strength = cfg.head_strength();

  using Clock = std::chrono::steady_clock;
  long it = 0;
  try {
    Dataset current = data.subset(sampler.next());
    if (cfg.method == Method::closed_form_proximal_lookahead) prime_algorithm2(m, current.x, current.y, strength);

    for (it = 1; it <= static_cast<long>(iterations); ++it) {
      const auto t0 = Clock::now();
      StepResult step;
      switch (cfg.method) {
        case Method::joint_sgd_l2:
          step = step_joint_sgd(m, current.x, current.y, lr, strength, opt);
          break;
        case Method::joint_sgd_xent:
          step = step_joint_xent(m, current.x, current.y, lr, strength, opt);
          break;
        case Method::closed_form_ridge:
          step = step_naive_batch_ridge(m, current.x, current.y, lr, strength, opt);
          break;
        case Method::closed_form_proximal_simple:
          step = step_algorithm1(m, current.x, current.y, lr, strength, opt);
          break;
        case Method::closed_form_proximal_lookahead: {
          Dataset next = data.subset(sampler.next());
          step = step_algorithm2(m, current.x, current.y, next.x, next.y, lr, strength, opt);
          current = std::move(next);
          break;
        }
      }
      if (cfg.method != Method::closed_form_proximal_lookahead && it < static_cast<long>(iterations)) {
        current = data.subset(sampler.next());
      }
      for (double p : m.backbone.parameters()) require_finite(p, "backbone parameter");

      RunRow row;
      row.iter = it;
      row.train_loss = step.loss;
      row.w_delta = step.w_delta;
      if (eval && (it % static_cast<long>(cfg.eval_every) == 0 || it == static_cast<long>(iterations))) {
        row.eval_metric = eval(m);
      }
      if (cfg.record_time) {
        row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      }
      result.record.append(row);
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.diverged_at = it;
    result.diagnostic = std::string(e.what()) + " at iteration " + std::to_string(it);
  } catch (const DefinitenessError& e) {
    // Exploding features make the head system numerically indefinite.
    result.diverged = true;
    result.diverged_at = it;
    result.diagnostic = std::string(e.what()) + " at iteration " + std::to_string(it);
  }
  return result;
}

}  // namespace cfl
