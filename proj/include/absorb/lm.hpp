#pragma once

// Damped least-squares (Levenberg-Marquardt) engine shared by the 1-D and
// 2-D Gaussian fitters.

#include <cmath>
#include <limits>
#include <string_view>

#include <Eigen/Dense>

#include "absorb/error.hpp"

namespace absorb {

struct FitConfig {
  int max_iterations = 200;
  double param_tolerance = 1e-8;     // relative step size
  double residual_tolerance = 1e-8;  // relative decrease of the sum of squares
  double lm_lambda0 = 1e-3;
  double lm_lambda_up = 10.0;
  double lm_lambda_down = 0.1;
  int slice_rounds = 3;  // row/column alternations of the slice fitter

  void validate() const {
    if (max_iterations <= 0 || slice_rounds <= 0) fail(Errc::config, "iteration counts must be positive");
    if (!(param_tolerance > 0.0) || !(residual_tolerance > 0.0) || !(lm_lambda0 > 0.0)) {
      fail(Errc::config, "tolerances and lambda0 must be positive");
    }
    if (!(lm_lambda_up > 1.0) || !(lm_lambda_down > 0.0) || !(lm_lambda_down < 1.0)) {
      fail(Errc::config, "need lambda_up > 1 > lambda_down > 0");
    }
  }
};

enum class LmStatus {
  zero_residual,
  small_step,
  small_decrease,
  max_iterations,
  singular,
  non_finite,
};

inline std::string_view to_string(LmStatus s) {
  switch (s) {
    case LmStatus::zero_residual: return "zero-residual";
    case LmStatus::small_step: return "small-step";
    case LmStatus::small_decrease: return "small-decrease";
    case LmStatus::max_iterations: return "max-iterations";
    case LmStatus::singular: return "singular";
    case LmStatus::non_finite: return "non-finite";
  }
  return "unknown";
}

struct LmResult {
  Eigen::VectorXd x;
  double cost = 0.0;  // sum of squared residuals at x
  int iterations = 0;
  bool converged = false;
  LmStatus status = LmStatus::max_iterations;
};

/// Minimizes |r(x)|^2. `model(x, r, J)` fills the residual vector `r` and,
/// when `J` is non-null, the Jacobian dr/dx.
///
/// Each iteration solves (J^T J + lambda diag(J^T J)) dx = -J^T r. A step
/// that lowers the cost is accepted and lambda shrinks; otherwise lambda
/// grows and the step is retried. Accepted steps never increase the cost.
template <class Model>
LmResult lm_minimize(Model&& model, Eigen::VectorXd x, const FitConfig& cfg) {
  constexpr double kLambdaMax = 1e16;
  constexpr double kLambdaMin = 1e-20;
  const Eigen::Index k = x.size();

  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  model(x, r, &jac);
  LmResult out;
  out.x = x;
  out.cost = r.squaredNorm();
  if (!std::isfinite(out.cost)) {
    out.status = LmStatus::non_finite;
    return out;
  }
  if (out.cost == 0.0) {
    out.converged = true;
    out.status = LmStatus::zero_residual;
    return out;
  }

  double lambda = cfg.lm_lambda0;
  Eigen::MatrixXd normal = jac.transpose() * jac;
  Eigen::VectorXd grad = jac.transpose() * r;
  Eigen::VectorXd r_trial;

  while (out.iterations < cfg.max_iterations) {
    ++out.iterations;
    if (grad.lpNorm<Eigen::Infinity>() == 0.0) {
      out.converged = true;
      out.status = LmStatus::small_step;
      return out;
    }
    Eigen::MatrixXd damped = normal;
    for (Eigen::Index i = 0; i < k; ++i) {
      const double d = normal(i, i) > 0.0 ? normal(i, i) : 1e-12;
      damped(i, i) += lambda * d;
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
    Eigen::VectorXd step;
    if (ldlt.info() == Eigen::Success) step = ldlt.solve(-grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) {
      lambda *= cfg.lm_lambda_up;
      if (lambda > kLambdaMax) {
        out.status = LmStatus::singular;
        return out;
      }
      continue;
    }

    const bool tiny_step = step.norm() <= cfg.param_tolerance * (x.norm() + cfg.param_tolerance);
    const Eigen::VectorXd trial = x + step;
    model(trial, r_trial, nullptr);
    const double trial_cost = r_trial.squaredNorm();

    if (std::isfinite(trial_cost) && trial_cost < out.cost) {
      const double decrease = out.cost - trial_cost;
      const double previous = out.cost;
      x = trial;
      out.x = x;
      out.cost = trial_cost;
      lambda = std::max(lambda * cfg.lm_lambda_down, kLambdaMin);
      if (trial_cost == 0.0) {
        out.converged = true;
        out.status = LmStatus::zero_residual;
        return out;
      }
      if (tiny_step) {
        out.converged = true;
        out.status = LmStatus::small_step;
        return out;
      }
      if (decrease <= cfg.residual_tolerance * previous) {
        out.converged = true;
        out.status = LmStatus::small_decrease;
        return out;
      }
      model(x, r, &jac);
      normal.noalias() = jac.transpose() * jac;
      grad.noalias() = jac.transpose() * r;
    } else {
      // A rejected step that is already below tolerance means no further
      // progress is numerically possible.
      if (tiny_step) {
        out.converged = true;
        out.status = LmStatus::small_step;
        return out;
      }
      lambda *= cfg.lm_lambda_up;
      if (lambda > kLambdaMax) {
        out.status = LmStatus::singular;
        return out;
      }
    }
  }
  out.status = LmStatus::max_iterations;
  return out;
}

}  // namespace absorb
