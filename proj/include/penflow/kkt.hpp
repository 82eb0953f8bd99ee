#pragma once

#include "penflow/problem.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace penflow {

struct KktReport {
  Vector mu;
  /// || f_x + J^T mu ||_2
  double stationarity = 0.0;
  /// max_i max(0, c_i)
  double primal_infeasibility = 0.0;
  /// max_i max(0, -mu_i)
  double dual_infeasibility = 0.0;
  /// max_i |mu_i c_i|
  double complementarity = 0.0;
};

/**
 * Multipliers read off a flow state:
 *
 *   mu_i = 0                        if c_i(x) < 0
 *   mu_i = rho * m * c_i(x)^(m-1)   otherwise
 *
 * With these, f_x + J^T mu is exactly the weighted-cost gradient, so the
 * stationarity residual equals g(x, rho).
 */
inline Vector extract_multipliers(const Problem& problem, const Vector& x, double rho,
                                  const PenaltyConfig& cfg = {}) {
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be >= 0");
  const Vector c = problem.eval_constraints(x);
  Vector mu = Vector::Zero(problem.nc);
  for (int i = 0; i < problem.nc; ++i) {
    if (c(i) >= 0.0) mu(i) = rho * cfg.m * detail::ipow(c(i), cfg.m - 1);
  }
  return mu;
}

inline KktReport kkt_residuals(const Problem& problem, const Vector& x, const Vector& mu) {
  if (mu.size() != problem.nc) {
    throw std::invalid_argument("multiplier vector has " + std::to_string(mu.size()) +
                                " entries, expected " + std::to_string(problem.nc));
  }
  KktReport r;
  r.mu = mu;
  Vector stat = problem.eval_gradient(x);
  if (problem.nc > 0) {
    const Vector c = problem.eval_constraints(x);
    stat.noalias() += problem.eval_jacobian(x).transpose() * mu;
    for (int i = 0; i < problem.nc; ++i) {
      r.primal_infeasibility = std::max(r.primal_infeasibility, c(i));
      r.dual_infeasibility = std::max(r.dual_infeasibility, -mu(i));
      r.complementarity = std::max(r.complementarity, std::abs(mu(i) * c(i)));
    }
  }
  r.stationarity = stat.norm();
  return r;
}

}  // namespace penflow
