#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cfl/linalg.hpp"

namespace cfl {

enum class Activation : std::uint8_t { relu = 0, tanh = 1, identity = 2 };
enum class Parameterization : std::uint8_t { standard = 0, ntk = 1 };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);
Parameterization parse_parameterization(std::string_view name);
std::string_view to_string(Parameterization p);

/// Gradients (or any other quantity) shaped like the backbone parameters.
struct ParamGrads {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  std::size_t size() const;
  std::vector<double> flatten() const;
};

/// Cached intermediates of one forward pass. `activations[0]` is the input,
/// `activations[l + 1] = act(pre[l])`.
struct ForwardTape {
  std::vector<Matrix> pre;
  std::vector<Matrix> activations;

  std::size_t batch() const { return activations.empty() ? 0 : activations.front().cols(); }
};

/// Fully connected feature map phi_theta with the nonlinearity applied after
/// every layer, including the last one.
///
/// With Parameterization::ntk the layer map is W a / sqrt(fan_in) + b; with
/// standard it is W a + b. A backbone is single-writer.
class MlpBackbone {
 public:
  MlpBackbone(std::vector<std::size_t> layer_dims, Activation activation,
              Parameterization parameterization);

  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t feature_dim() const noexcept { return dims_.back(); }
  std::size_t num_layers() const noexcept { return weights_.size(); }
  Activation activation() const noexcept { return activation_; }
  Parameterization parameterization() const noexcept { return parameterization_; }

  Matrix& weight(std::size_t layer) { return weights_.at(layer); }
  const Matrix& weight(std::size_t layer) const { return weights_.at(layer); }
  std::vector<double>& bias(std::size_t layer) { return biases_.at(layer); }
  const std::vector<double>& bias(std::size_t layer) const { return biases_.at(layer); }

  /// Multiplier applied to W a in layer `layer` (1 or 1/sqrt(fan_in)).
  double layer_scale(std::size_t layer) const;

  std::size_t parameter_count() const;
  /// Weights row-major layer by layer, each followed by its bias.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> flat);

  ParamGrads zero_grads() const;

  friend bool operator==(const MlpBackbone&, const MlpBackbone&) = default;

 private:
  std::vector<std::size_t> dims_;
  Activation activation_;
  Parameterization parameterization_;
  std::vector<Matrix> weights_;
  std::vector<std::vector<double>> biases_;
};

/// Standard: W ~ N(0, 1/fan_in), b = 0. NTK: every weight and bias ~ N(0, 1).
MlpBackbone init_backbone(std::vector<std::size_t> layer_dims, Activation activation,
                          Parameterization parameterization, std::uint64_t seed);

struct ForwardResult {
  Matrix features;
  ForwardTape tape;
};

/// X is input_dim x B (one sample per column); features are feature_dim x B.
ForwardResult forward(const MlpBackbone& bb, const Matrix& x);
/// Forward pass without keeping the tape.
Matrix features(const MlpBackbone& bb, const Matrix& x);

/// Reverse-mode gradient of <grad_features, phi_theta(X)> w.r.t. all parameters.
/// Throws StateError if the tape does not match this backbone and gradient.
ParamGrads backward(const MlpBackbone& bb, const ForwardTape& tape, const Matrix& grad_features);

/// theta <- theta - step * grads.
void apply_grads(MlpBackbone& bb, const ParamGrads& grads, double step);

}  // namespace cfl
