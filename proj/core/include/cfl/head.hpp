#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "cfl/linalg.hpp"

namespace cfl {

enum class InitPolicy : std::uint8_t { zeros = 0, lecun = 1, xavier = 2, he = 3 };

InitPolicy parse_init_policy(std::string_view name);
std::string_view to_string(InitPolicy p);

/// How the closed-form head is regularized: beta * ||W||^2 or lambda * ||W - W_prev||^2.
struct Regularizer {
  enum class Kind : std::uint8_t { ridge = 0, proximal = 1 };
  Kind kind = Kind::ridge;
  double strength = 1.0;

  static Regularizer ridge(double beta) { return {Kind::ridge, beta}; }
  static Regularizer proximal(double lambda) { return {Kind::proximal, lambda}; }

  friend bool operator==(const Regularizer&, const Regularizer&) = default;
};

/// Linear last layer. With has_bias the last column of W is the bias b and
/// features are augmented with a constant row of ones before use.
struct HeadState {
  Matrix W;
  bool has_bias = false;
  InitPolicy init_policy = InitPolicy::zeros;
  Regularizer reg;

  std::size_t outputs() const noexcept { return W.rows(); }
  /// Number of backbone features (excluding the bias column).
  std::size_t feature_dim() const noexcept { return W.cols() - (has_bias ? 1 : 0); }

  friend bool operator==(const HeadState&, const HeadState&) = default;
};

/// Appends a row of ones when has_bias is set.
Matrix augment_features(const Matrix& features, bool has_bias);

/// Y Phi^T (Phi Phi^T + beta I)^{-1}; the minimizer of ||Y - W Phi||^2 + beta ||W||^2.
Matrix ridge_solution(const Matrix& y, const Matrix& phi, double beta);

/// (Y Phi^T + lambda W_prev)(Phi Phi^T + lambda I)^{-1}; the minimizer of
/// ||Y - W Phi||^2 + lambda ||W - W_prev||^2.
Matrix proximal_solution(const Matrix& y, const Matrix& phi, const Matrix& w_prev, double lambda);

/// Closed-form update according to head.reg, using head.W as the proximal anchor.
/// `phi` must already be augmented.
Matrix closed_form_update(const HeadState& head, const Matrix& y, const Matrix& phi);

/// zeros: W = 0; lecun: N(0, 1/d); xavier: N(0, 2/(d + o)); he: N(0, 2/d).
/// The bias column, when present, is always zero.
HeadState init_head(std::size_t outputs, std::size_t feature_dim, InitPolicy policy,
                    std::uint64_t seed, bool has_bias = false,
                    Regularizer reg = Regularizer::ridge(1.0));

/// W [features; 1?].
Matrix predict(const HeadState& head, const Matrix& features);

/// Column-wise argmax of `scores`; ties go to the lowest index.
std::vector<std::size_t> argmax_columns(const Matrix& scores);
std::vector<std::size_t> predict_class(const HeadState& head, const Matrix& features);

}  // namespace cfl
