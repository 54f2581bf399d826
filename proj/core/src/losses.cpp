#include "cfl/losses.hpp"

#include "cfl/errors.hpp"
#include "cfl/head.hpp"

namespace cfl {

namespace {

// Shared body: data term plus reg * ||W - anchor||^2 (anchor = 0 for ridge).
LossReport regularized_loss(const Matrix& w, const Matrix& phi, const Matrix& y,
                            const Matrix* anchor, double reg) {
  if (w.cols() != phi.rows() || w.rows() != y.rows() || phi.cols() != y.cols()) {
    throw DimensionError("loss: W, Phi and Y shapes do not conform");
  }
  Matrix residual = sub(matmul(w, phi), y);  // W Phi - Y
  Matrix diff = anchor ? sub(w, *anchor) : w;

  LossReport r;
  r.value = squared_norm(residual) + reg * squared_norm(diff);

  Matrix gw = matmul_nt(residual, phi);
  auto g = gw.data();
  auto dd = diff.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * g[i] + 2.0 * reg * dd[i];
  r.grad_W = std::move(gw);
  r.grad_features = scale(matmul_tn(w, residual), 2.0);
  return r;
}

}  // namespace

LossReport ridge_loss(const Matrix& w, const Matrix& phi, const Matrix& y, double beta) {
  return regularized_loss(w, phi, y, nullptr, beta);
}

LossReport batch_loss(const Matrix& w, const Matrix& phi_batch, const Matrix& y_batch, double beta) {
  return regularized_loss(w, phi_batch, y_batch, nullptr, beta);
}

LossReport proximal_loss(const Matrix& w, const Matrix& phi_batch, const Matrix& y_batch,
                         const Matrix& w_prev, double lambda) {
  if (w_prev.rows() != w.rows() || w_prev.cols() != w.cols()) {
    throw DimensionError("proximal_loss: previous head has the wrong shape");
  }
  return regularized_loss(w, phi_batch, y_batch, &w_prev, lambda);
}

double induced_loss(const Matrix& phi, const Matrix& y, double beta) {
  return ridge_loss(ridge_solution(y, phi, beta), phi, y, beta).value;
}

double induced_proximal_loss(const Matrix& phi, const Matrix& y, const Matrix& w_prev, double lambda) {
  return proximal_loss(proximal_solution(y, phi, w_prev, lambda), phi, y, w_prev, lambda).value;
}

double squared_error(const Matrix& w, const Matrix& phi, const Matrix& y) {
  return squared_norm(sub(matmul(w, phi), y));
}

}  // namespace cfl
