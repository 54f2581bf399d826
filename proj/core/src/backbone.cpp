#include "cfl/backbone.hpp"

#include <cmath>
#include <random>
#include <string>

#include "cfl/errors.hpp"

namespace cfl {

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity" || name == "linear") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "?";
}

Parameterization parse_parameterization(std::string_view name) {
  if (name == "standard") return Parameterization::standard;
  if (name == "ntk") return Parameterization::ntk;
  throw ConfigError("unknown parameterization '" + std::string(name) + "'");
}

std::string_view to_string(Parameterization p) {
  return p == Parameterization::ntk ? "ntk" : "standard";
}

std::size_t ParamGrads::size() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

std::vector<double> ParamGrads::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto w = weights[l].data();
    flat.insert(flat.end(), w.begin(), w.end());
    flat.insert(flat.end(), biases[l].begin(), biases[l].end());
  }
  return flat;
}

MlpBackbone::MlpBackbone(std::vector<std::size_t> layer_dims, Activation activation,
                         Parameterization parameterization)
    : dims_(std::move(layer_dims)), activation_(activation), parameterization_(parameterization) {
  if (dims_.size() < 2) throw ConfigError("backbone needs at least two layer dims");
  for (std::size_t d : dims_) {
    if (d == 0) throw ConfigError("backbone layer dims must be positive");
  }
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    weights_.emplace_back(dims_[l + 1], dims_[l]);
    biases_.emplace_back(dims_[l + 1], 0.0);
  }
}

double MlpBackbone::layer_scale(std::size_t layer) const {
  return parameterization_ == Parameterization::ntk
             ? 1.0 / std::sqrt(static_cast<double>(dims_.at(layer)))
             : 1.0;
}

std::size_t MlpBackbone::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
  return n;
}

std::vector<double> MlpBackbone::parameters() const {
  return ParamGrads{weights_, biases_}.flatten();
}

void MlpBackbone::set_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw DimensionError("set_parameters: expected " + std::to_string(parameter_count()) +
                         " values, got " + std::to_string(flat.size()));
  }
  std::size_t at = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    for (double& w : weights_[l].data()) w = flat[at++];
    for (double& b : biases_[l]) b = flat[at++];
  }
}

ParamGrads MlpBackbone::zero_grads() const {
  ParamGrads g;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    g.weights.emplace_back(weights_[l].rows(), weights_[l].cols());
    g.biases.emplace_back(biases_[l].size(), 0.0);
  }
  return g;
}

MlpBackbone init_backbone(std::vector<std::size_t> layer_dims, Activation activation,
                          Parameterization parameterization, std::uint64_t seed) {
  MlpBackbone bb(std::move(layer_dims), activation, parameterization);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    const double fan_in = static_cast<double>(bb.layer_dims()[l]);
    const double stddev = parameterization == Parameterization::ntk ? 1.0 : 1.0 / std::sqrt(fan_in);
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& w : bb.weight(l).data()) w = normal(rng);
    if (parameterization == Parameterization::ntk) {
      std::normal_distribution<double> unit(0.0, 1.0);
      for (double& b : bb.bias(l)) b = unit(rng);
    }
  }
  return bb;
}

namespace {

void activate(Activation act, const Matrix& pre, Matrix& out) {
  out = pre;
  switch (act) {
    case Activation::relu:
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::tanh:
      for (double& v : out.data()) v = std::tanh(v);
      break;
    case Activation::identity:
      break;
  }
}

// grad <- grad * act'(pre), using the cached activation where cheaper.
void activation_backward(Activation act, const Matrix& pre, const Matrix& post, Matrix& grad) {
  auto g = grad.data();
  switch (act) {
    case Activation::relu: {
      auto p = pre.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = p[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Activation::tanh: {
      auto a = post.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - a[i] * a[i];
      break;
    }
    case Activation::identity:
      break;
  }
}

}  // namespace

ForwardResult forward(const MlpBackbone& bb, const Matrix& x) {
  if (x.rows() != bb.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(x.rows()) + " rows, backbone expects " +
                         std::to_string(bb.input_dim()));
  }
  ForwardResult out;
  auto& tape = out.tape;
  tape.activations.reserve(bb.num_layers() + 1);
  tape.pre.reserve(bb.num_layers());
  tape.activations.push_back(x);
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    Matrix pre = matmul(bb.weight(l), tape.activations.back());
    const double s = bb.layer_scale(l);
    const auto& b = bb.bias(l);
    for (std::size_t i = 0; i < pre.rows(); ++i) {
      for (double& v : pre.row(i)) v = s * v + b[i];
    }
    Matrix post;
    activate(bb.activation(), pre, post);
    tape.pre.push_back(std::move(pre));
    tape.activations.push_back(std::move(post));
  }
  out.features = tape.activations.back();
  return out;
}

Matrix features(const MlpBackbone& bb, const Matrix& x) { return forward(bb, x).features; }

ParamGrads backward(const MlpBackbone& bb, const ForwardTape& tape, const Matrix& grad_features) {
  const std::size_t layers = bb.num_layers();
  if (tape.pre.size() != layers || tape.activations.size() != layers + 1) {
    throw StateError("backward: tape depth does not match backbone");
  }
  const std::size_t batch = tape.batch();
  for (std::size_t l = 0; l <= layers; ++l) {
    if (tape.activations[l].rows() != bb.layer_dims()[l] || tape.activations[l].cols() != batch) {
      throw StateError("backward: stale tape (activation shape mismatch at layer " +
                       std::to_string(l) + ")");
    }
  }
  if (grad_features.rows() != bb.feature_dim() || grad_features.cols() != batch) {
    throw StateError("backward: feature gradient shape does not match tape");
  }

  ParamGrads grads = bb.zero_grads();
  Matrix delta = grad_features;
  for (std::size_t l = layers; l-- > 0;) {
    activation_backward(bb.activation(), tape.pre[l], tape.activations[l + 1], delta);
    const double s = bb.layer_scale(l);
    grads.weights[l] = matmul_nt(delta, tape.activations[l]);
    if (s != 1.0) {
      for (double& v : grads.weights[l].data()) v *= s;
    }
    auto& gb = grads.biases[l];
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      double acc = 0.0;
      for (double v : delta.row(i)) acc += v;
      gb[i] = acc;
    }
    if (l > 0) {
      delta = matmul_tn(bb.weight(l), delta);
      if (s != 1.0) {
        for (double& v : delta.data()) v *= s;
      }
    }
  }
  return grads;
}

void apply_grads(MlpBackbone& bb, const ParamGrads& grads, double step) {
  if (grads.weights.size() != bb.num_layers()) throw DimensionError("apply_grads: layer count mismatch");
  for (std::size_t l = 0; l < bb.num_layers(); ++l) {
    auto w = bb.weight(l).data();
    auto g = grads.weights[l].data();
    if (g.size() != w.size() || grads.biases[l].size() != bb.bias(l).size()) {
      throw DimensionError("apply_grads: shape mismatch at layer " + std::to_string(l));
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
    auto& b = bb.bias(l);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= step * grads.biases[l][i];
  }
}

}  // namespace cfl
