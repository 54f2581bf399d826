#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace cfl {

/// Dense row-major matrix of doubles.
///
/// Value type: copies are deep, there is no shared storage. All free
/// functions below are pure and may be called concurrently on shared
/// const instances.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  /// Row-wise literal, e.g. Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a a^T, exactly symmetric.
Matrix gram(const Matrix& a);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
/// a + s * I; a must be square.
Matrix add_diagonal(const Matrix& a, double s);
double frobenius_norm(const Matrix& a);
double squared_norm(const Matrix& a);
double max_abs(const Matrix& a);
/// Frobenius inner product sum_ij a_ij b_ij.
double dot(const Matrix& a, const Matrix& b);

/// Columns [first, first + count) of a.
Matrix column_block(const Matrix& a, std::size_t first, std::size_t count);
/// Selected columns of a, in the given order.
Matrix select_columns(const Matrix& a, std::span<const std::size_t> cols);
/// Rows [first, first + count) of a.
Matrix row_block(const Matrix& a, std::size_t first, std::size_t count);
/// [a; b] stacked vertically.
Matrix vstack(const Matrix& a, const Matrix& b);
/// [a, b] side by side.
Matrix hstack(const Matrix& a, const Matrix& b);

/// True when |a_ij - a_ji| <= rel_tol * max(1, max|a|) for all i, j.
bool is_symmetric(const Matrix& a, double rel_tol = 1e-10);

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// No pivoting: callers regularize their systems explicitly.
class Cholesky {
 public:
  /// Throws SymmetryError or DefinitenessError.
  explicit Cholesky(const Matrix& a);

  std::size_t dim() const noexcept { return lower_.rows(); }
  const Matrix& lower() const noexcept { return lower_; }

  /// Solves a X = b for X.
  Matrix solve(const Matrix& b) const;
  /// Solves a X^T = b^T and returns X, i.e. X = b a^{-1} for symmetric a.
  Matrix solve_right(const Matrix& b) const;

 private:
  Matrix lower_;
};

/// X with a X = b for symmetric positive definite a.
Matrix solve_spd(const Matrix& a, const Matrix& b);

/// Eigenvalues of a small symmetric matrix, ascending, by cyclic Jacobi rotations.
std::vector<double> sym_eigvals(const Matrix& a);

/// Eigen-decomposition a = V diag(values) V^T; columns of `vectors` are eigenvectors.
struct SymEigen {
  std::vector<double> values;
  Matrix vectors;
};
SymEigen sym_eigen(const Matrix& a);

}  // namespace cfl
