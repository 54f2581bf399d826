#pragma once

#include <optional>

#include "cfl/linalg.hpp"

namespace cfl {

/// Loss value with optional gradients w.r.t. the head W and the (augmented) features.
struct LossReport {
  double value = 0.0;
  std::optional<Matrix> grad_W;
  std::optional<Matrix> grad_features;
};

/// ||Y - W Phi||_F^2 + beta ||W||_F^2, summed (not averaged) over columns.
/// grad_W = 2 (W Phi - Y) Phi^T + 2 beta W, grad_features = 2 W^T (W Phi - Y).
LossReport ridge_loss(const Matrix& w, const Matrix& phi, const Matrix& y, double beta);

/// ridge_loss restricted to one batch; identical formula.
LossReport batch_loss(const Matrix& w, const Matrix& phi_batch, const Matrix& y_batch, double beta);

/// ||Y - W Phi||_F^2 + lambda ||W - W_prev||_F^2.
LossReport proximal_loss(const Matrix& w, const Matrix& phi_batch, const Matrix& y_batch,
                         const Matrix& w_prev, double lambda);

/// L*(Phi) = ridge loss at the ridge solution for (Y, Phi, beta).
double induced_loss(const Matrix& phi, const Matrix& y, double beta);

/// L^{prox*}: proximal loss at the proximal solution.
double induced_proximal_loss(const Matrix& phi, const Matrix& y, const Matrix& w_prev, double lambda);

/// ||Y - W Phi||_F^2 only.
double squared_error(const Matrix& w, const Matrix& phi, const Matrix& y);

}  // namespace cfl
