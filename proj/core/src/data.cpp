#include "cfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfl/backbone.hpp"
#include "cfl/errors.hpp"

namespace cfl {

Dataset Dataset::subset(std::span<const std::size_t> columns) const {
  Dataset d{select_columns(x, columns), select_columns(y, columns), {}};
  if (!labels.empty()) {
    d.labels.reserve(columns.size());
    for (std::size_t c : columns) d.labels.push_back(labels.at(c));
  }
  return d;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(batch_size == 0 || batch_size > n ? n : batch_size), rng_(seed), order_(n) {
  if (n == 0) throw ConfigError("BatchSampler: empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

void BatchSampler::reshuffle() {
  if (batch_ < n_) std::shuffle(order_.begin(), order_.end(), rng_);
}

std::size_t BatchSampler::batches_per_epoch() const noexcept { return (n_ + batch_ - 1) / batch_; }

std::vector<std::size_t> BatchSampler::next() {
  if (cursor_ >= n_) {
    cursor_ = 0;
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(n_, cursor_ + batch_);
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return batch;
}

SplitSizes split_sizes(std::size_t n) {
  const std::size_t train = n * 72 / 100;
  const std::size_t val = n * 8 / 100;
  return {train, val, n - train - val};
}

namespace {

DatasetSplits split(const Dataset& all) {
  const auto sizes = split_sizes(all.size());
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto part = [&](std::size_t first, std::size_t count) {
    return all.subset(std::span<const std::size_t>(idx).subspan(first, count));
  };
  return {part(0, sizes.train), part(sizes.train, sizes.val), part(sizes.train + sizes.val, sizes.test)};
}

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = normal(rng);
  return m;
}

}  // namespace

DatasetSplits gen_regression_task(std::size_t n, std::size_t m, std::size_t d_out,
                                  std::size_t teacher_width, double noise, std::uint64_t seed) {
  if (n == 0 || m == 0 || d_out == 0 || teacher_width == 0) {
    throw ConfigError("gen_regression_task: sizes must be positive");
  }
  std::mt19937_64 rng(derive_seed(seed, 0));
  Dataset all;
  all.x = gaussian(m, n, 1.0, rng);

  // Hidden tanh layer with N(0, 1/m) weights; linear readout normalized to
  // roughly unit output variance.
  const MlpBackbone hidden = init_backbone({m, teacher_width}, Activation::tanh,
                                           Parameterization::standard, derive_seed(seed, 1));
  std::mt19937_64 out_rng(derive_seed(seed, 2));
  const Matrix readout = gaussian(d_out, teacher_width, 1.0 / std::sqrt(0.4 * teacher_width), out_rng);
  all.y = matmul(readout, features(hidden, all.x));
  if (noise > 0.0) {
    std::normal_distribution<double> eps(0.0, noise);
    for (double& v : all.y.data()) v += eps(rng);
  }
  return split(all);
}

DatasetSplits gen_classification_task(std::size_t n, std::size_t classes, std::size_t m,
                                      std::uint64_t seed, double separation) {
  if (n == 0 || classes < 2 || m == 0) throw ConfigError("gen_classification_task: bad sizes");
  std::mt19937_64 rng(derive_seed(seed, 0));
  const Matrix centres = gaussian(m, classes, separation, rng);
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  std::normal_distribution<double> unit(0.0, 1.0);

  Dataset all;
  all.x = Matrix(m, n);
  all.y = Matrix(classes, n);
  all.labels.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t c = pick(rng);
    all.labels[j] = c;
    all.y(c, j) = 1.0;
    for (std::size_t i = 0; i < m; ++i) all.x(i, j) = centres(i, c) + unit(rng);
  }
  return split(all);
}

double mse(const Matrix& pred, const Matrix& y) {
  if (pred.rows() != y.rows() || pred.cols() != y.cols()) throw DimensionError("mse: shape mismatch");
  if (y.empty()) return 0.0;
  return squared_norm(sub(pred, y)) / static_cast<double>(y.size());
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw DimensionError("accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace cfl
