#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cfl/linalg.hpp"

namespace cfl {

/// Paired inputs (m x n) and targets (o x n); one sample per column.
struct Dataset {
  Matrix x;
  Matrix y;
  /// Class index per column for classification tasks, empty otherwise.
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return x.cols(); }
  Dataset subset(std::span<const std::size_t> columns) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Independent stream seed derived from a base seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Epoch-based minibatch sampler: a fresh seeded permutation each epoch, the
/// last short batch is kept. batch_size 0 or >= n means full batch, unshuffled.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  /// Column indices of the next batch; rolls over into the next epoch.
  std::vector<std::size_t> next();

  std::size_t batches_per_epoch() const noexcept;
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch_size() const noexcept { return batch_; }

 private:
  void reshuffle();

  std::size_t n_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// 72/8/20 train/val/test split sizes for n samples.
struct SplitSizes {
  std::size_t train, val, test;
};
SplitSizes split_sizes(std::size_t n);

/// Inputs x ~ N(0, I_m); targets from a fixed random tanh teacher MLP
/// [m, teacher_width, d_out] plus N(0, noise^2) noise; split 72/8/20.
DatasetSplits gen_regression_task(std::size_t n, std::size_t m, std::size_t d_out,
                                  std::size_t teacher_width, double noise, std::uint64_t seed);

/// C Gaussian blobs in R^m with unit within-class spread and class centres
/// ~ N(0, separation^2 I); one-hot targets; split 72/8/20.
DatasetSplits gen_classification_task(std::size_t n, std::size_t classes, std::size_t m,
                                      std::uint64_t seed, double separation = 3.0);

/// Mean squared error per entry: ||pred - y||_F^2 / (rows * cols).
double mse(const Matrix& pred, const Matrix& y);
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

}  // namespace cfl
