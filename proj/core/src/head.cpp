#include "cfl/head.hpp"

#include <cmath>
#include <random>
#include <string>

#include "cfl/errors.hpp"

namespace cfl {

InitPolicy parse_init_policy(std::string_view name) {
  if (name == "zeros") return InitPolicy::zeros;
  if (name == "lecun") return InitPolicy::lecun;
  if (name == "xavier") return InitPolicy::xavier;
  if (name == "he") return InitPolicy::he;
  throw ConfigError("unknown head init policy '" + std::string(name) + "'");
}

std::string_view to_string(InitPolicy p) {
  switch (p) {
    case InitPolicy::zeros: return "zeros";
    case InitPolicy::lecun: return "lecun";
    case InitPolicy::xavier: return "xavier";
    case InitPolicy::he: return "he";
  }
  return "?";
}

Matrix augment_features(const Matrix& features, bool has_bias) {
  if (!has_bias) return features;
  return vstack(features, Matrix(1, features.cols(), 1.0));
}

namespace {

void check_system(const Matrix& y, const Matrix& phi, const char* op) {
  if (y.cols() != phi.cols()) {
    throw DimensionError(std::string(op) + ": targets have " + std::to_string(y.cols()) +
                         " columns, features have " + std::to_string(phi.cols()));
  }
}

}  // namespace

Matrix ridge_solution(const Matrix& y, const Matrix& phi, double beta) {
  if (!(beta > 0.0)) throw ConfigError("ridge_solution: beta must be > 0");
  check_system(y, phi, "ridge_solution");
  const Cholesky chol(add_diagonal(gram(phi), beta));
  return chol.solve_right(matmul_nt(y, phi));
}

Matrix proximal_solution(const Matrix& y, const Matrix& phi, const Matrix& w_prev, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("proximal_solution: lambda must be > 0");
  check_system(y, phi, "proximal_solution");
  if (w_prev.rows() != y.rows() || w_prev.cols() != phi.rows()) {
    throw DimensionError("proximal_solution: previous head has the wrong shape");
  }
  const Cholesky chol(add_diagonal(gram(phi), lambda));
  Matrix rhs = matmul_nt(y, phi);
  auto r = rhs.data();
  auto w = w_prev.data();
  for (std::size_t i = 0; i < r.size(); ++i) r[i] += lambda * w[i];
  return chol.solve_right(rhs);
}

Matrix closed_form_update(const HeadState& head, const Matrix& y, const Matrix& phi) {
  if (head.reg.kind == Regularizer::Kind::ridge) return ridge_solution(y, phi, head.reg.strength);
  return proximal_solution(y, phi, head.W, head.reg.strength);
}

HeadState init_head(std::size_t outputs, std::size_t feature_dim, InitPolicy policy,
                    std::uint64_t seed, bool has_bias, Regularizer reg) {
  if (!(reg.strength > 0.0)) throw ConfigError("init_head: regularization strength must be > 0");
  HeadState head;
  head.has_bias = has_bias;
  head.init_policy = policy;
  head.reg = reg;
  head.W = Matrix(outputs, feature_dim + (has_bias ? 1 : 0));

  const double d = static_cast<double>(feature_dim);
  const double o = static_cast<double>(outputs);
  double variance = 0.0;
  switch (policy) {
    case InitPolicy::zeros: return head;
    case InitPolicy::lecun: variance = 1.0 / d; break;
    case InitPolicy::xavier: variance = 2.0 / (d + o); break;
    case InitPolicy::he: variance = 2.0 / d; break;
    default: throw ConfigError("init_head: unknown policy");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  for (std::size_t i = 0; i < outputs; ++i)
    for (std::size_t j = 0; j < feature_dim; ++j) head.W(i, j) = normal(rng);
  return head;
}

Matrix predict(const HeadState& head, const Matrix& features) {
  if (features.rows() != head.feature_dim()) {
    throw DimensionError("predict: features have " + std::to_string(features.rows()) +
                         " rows, head expects " + std::to_string(head.feature_dim()));
  }
  if (!head.has_bias) return matmul(head.W, features);
  Matrix out = matmul(column_block(head.W, 0, head.feature_dim()), features);
  const std::size_t bcol = head.feature_dim();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double b = head.W(i, bcol);
    for (double& v : out.row(i)) v += b;
  }
  return out;
}

std::vector<std::size_t> argmax_columns(const Matrix& scores) {
  std::vector<std::size_t> out(scores.cols(), 0);
  for (std::size_t j = 0; j < scores.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.rows(); ++i) {
      if (scores(i, j) > scores(best, j)) best = i;
    }
    out[j] = best;
  }
  return out;
}

std::vector<std::size_t> predict_class(const HeadState& head, const Matrix& features) {
  return argmax_columns(predict(head, features));
}

}  // namespace cfl
