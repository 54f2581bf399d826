#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cfl/backbone.hpp"
#include "cfl/linalg.hpp"

namespace cfl {

// ---------------------------------------------------------------------------
// Envelope gradients
// ---------------------------------------------------------------------------

enum class EnvelopeMode { ridge, proximal };

/// A data set plus a closed-form head rule. For proximal mode w_prev is the
/// anchor, held fixed while theta is perturbed.
struct EnvelopeProblem {
  Matrix x;
  Matrix y;
  bool has_bias = false;
  EnvelopeMode mode = EnvelopeMode::ridge;
  double strength = 1.0;
  Matrix w_prev;
};

struct FiniteDifferenceOptions {
  /// h_i = rel_step * (1 + |theta_i|).
  double rel_step = 1e-5;
  /// Shrink h by 10x this many times while a ReLU kink lies inside [theta - h, theta + h].
  int kink_retries = 3;
};

struct GradientCheck {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

/// Entrywise |a - n| / max(|a|, |n|, 1e-6 max|a|, 1e-12), maximized.
GradientCheck compare_gradients(std::vector<double> analytic, std::vector<double> numeric);

/// Induced loss theta -> L(W*(theta), theta), with W* re-solved at theta.
double composite_loss(const MlpBackbone& bb, const EnvelopeProblem& problem);

/// grad_theta L(W*, theta) with W* held fixed, via one backpropagation.
std::vector<double> envelope_gradient(const MlpBackbone& bb, const EnvelopeProblem& problem);

/// Compares envelope_gradient against central differences of composite_loss.
GradientCheck check_envelope_gradient(const MlpBackbone& bb, const EnvelopeProblem& problem,
                                      const FiniteDifferenceOptions& fd = {});

// ---------------------------------------------------------------------------
// Kalman / MAP
// ---------------------------------------------------------------------------

struct QuadraticSolveInfo {
  int iterations = 0;
  double residual = 0.0;
};

/// Minimizes data_weight ||Y - W Phi||^2 + anchor_weight ||W - anchor||^2 by
/// matrix-free conjugate gradients (no factorization of Phi Phi^T).
Matrix minimize_head_quadratic(const Matrix& y, const Matrix& phi, const Matrix& anchor,
                               double data_weight, double anchor_weight, double tol = 1e-14,
                               QuadraticSolveInfo* info = nullptr);

struct KalmanReport {
  double lambda = 0.0;
  Matrix closed_form;
  Matrix map;
  double rel_err = 0.0;
  int iterations = 0;
};

/// proximal_solution with lambda = sigma_y^2 / sigma_w^2 versus direct
/// minimization of the negative log posterior of the Gaussian random-walk model.
KalmanReport check_kalman_equivalence(const Matrix& y_batch, const Matrix& phi_batch, const Matrix& w_prev,
                                      double sigma_y, double sigma_w);

// ---------------------------------------------------------------------------
// Function-space structure
// ---------------------------------------------------------------------------

/// Y = Y_star + Y_perp with Y_star = Y P_beta, P_beta = Phi^T (Phi Phi^T + beta I)^{-1} Phi.
struct Decomposition {
  Matrix y_star;
  Matrix y_perp;
  Matrix p_beta;
};

Decomposition decompose(const Matrix& y, const Matrix& phi, double beta);

/// Gradient of Phi -> L*(Phi): 2 W*^T (W* Phi - Y) = -2 (Phi Phi^T + beta I)^{-1} Phi Y^T Y_perp.
Matrix functional_gradient(const Matrix& y, const Matrix& phi, double beta);

/// -2 (Phi Phi^T + beta I)^{-1} Phi Y_star^T Y_perp. Agrees with functional_gradient
/// only as beta -> 0; kept for comparison.
Matrix compressed_functional_gradient(const Matrix& y, const Matrix& phi, double beta);

struct CriticalityReport {
  bool critical = false;
  bool is_global = false;
  double cross_norm = 0.0;  ///< ||Y_star^T Y_perp||_F
  double perp_norm = 0.0;   ///< ||Y_perp||_F
};

/// critical <=> ||Y_star^T Y_perp|| <= tol (1 + ||Y||^2);
/// is_global <=> critical and ||Y_perp|| <= tol (1 + ||Y||).
CriticalityReport is_critical(const Matrix& y, const Matrix& phi, double beta, double tol = 1e-8);

// ---------------------------------------------------------------------------
// Kernel gradient flow
// ---------------------------------------------------------------------------

enum class FlowRhs {
  gradient,    ///< dPhi/dt = -Xi grad L*(Phi)
  compressed,  ///< dPhi/dt = 2 Xi (Phi Phi^T + beta I)^{-1} Phi Y_star^T Y_perp
};

/// Features Phi (d x n) under a fixed SPD d x d kernel Xi.
struct FlowState {
  Matrix phi;
  Matrix xi;
  double beta = 1e-2;
  double t = 0.0;
};

/// Validates shapes, beta > 0 and Xi symmetric positive definite.
FlowState make_flow_state(Matrix phi, Matrix xi, double beta);

/// M M^T / d + 0.1 I with Gaussian M.
Matrix default_kernel(std::size_t d, std::uint64_t seed);
/// 0.1 / ||Xi||_2.
double default_dt(const Matrix& xi);

Matrix flow_rhs(const FlowState& fs, const Matrix& y, FlowRhs rhs = FlowRhs::gradient);

/// Closed-form time derivative of Y_star Y_star^T along the flow: 2 (A B + B A)
/// with A = Y_perp Y_perp^T and B = Y_star Phi^T M^{-1} Xi M^{-1} Phi Y_star^T,
/// M = Phi Phi^T + beta I. Exact as beta -> 0. A B + B A need not be positive
/// semi-definite, so individual eigenvalues of Y_star Y_star^T can decrease;
/// its trace 2 tr(A B) cannot.
Matrix ystar_gram_rate(const FlowState& fs, const Matrix& y);

struct FlowSample {
  double t = 0.0;
  std::vector<double> eigenvalues;  ///< of Y_star Y_star^T, ascending
  double perp_norm = 0.0;
  double loss = 0.0;  ///< L*(Phi)
};

struct FlowOptions {
  /// <= 0 selects default_dt(xi).
  double dt = 0.0;
  std::size_t max_steps = 1000;
  std::size_t record_every = 1;
  FlowRhs rhs = FlowRhs::gradient;
  /// Stop once ||Y_perp|| <= stop_ratio ||Y||; 0 disables.
  double stop_ratio = 0.0;
  /// Growth of ||Phi|| beyond this factor raises InstabilityError.
  double blowup_factor = 1e6;
  /// Step halvings integrate_flow_adaptive may try.
  int max_halvings = 8;
};

struct FlowTrajectory {
  std::vector<FlowSample> samples;
  FlowState final_state;
  double dt = 0.0;
  std::size_t steps = 0;
  bool reached_target = false;
};

FlowSample flow_sample(const FlowState& fs, const Matrix& y);

/// One classical RK4 step of size dt.
FlowState rk4_step(const FlowState& fs, const Matrix& y, double dt, FlowRhs rhs = FlowRhs::gradient);

/// Explicit RK4 with a fixed step; samples[0] is the initial state.
FlowTrajectory integrate_flow(const FlowState& fs, const Matrix& y, const FlowOptions& opts);
/// As integrate_flow, halving dt and restarting on InstabilityError.
FlowTrajectory integrate_flow_adaptive(const FlowState& fs, const Matrix& y, FlowOptions opts);

void write_trajectory_csv(std::ostream& os, const FlowTrajectory& traj);

struct MonotoneReport {
  double max_violation = 0.0;
  std::size_t violations = 0;
  std::size_t pairs = 0;
};

/// Sorted eigenvalues must satisfy eig_{k+1} >= eig_k - rel_eps (1 + eig_k).
MonotoneReport check_eig_monotone(std::span<const FlowSample> samples, double rel_eps = 1e-6);

/// ||Y_star||_F^2 (the eigenvalue sum) must satisfy s_{k+1} >= s_k - rel_eps (1 + s_k).
MonotoneReport check_trace_nondecreasing(std::span<const FlowSample> samples, double rel_eps = 1e-6);

/// L* must satisfy loss_{k+1} <= loss_k + rel_eps (1 + loss_k).
MonotoneReport check_loss_nonincreasing(std::span<const FlowSample> samples, double rel_eps = 1e-9);

}  // namespace cfl
