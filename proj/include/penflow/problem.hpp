#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace penflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/**
 * Raised when an evaluator returns a non-finite value. `index` is the
 * offending constraint, or -1 for the objective.
 */
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(const std::string& what, int index)
      : std::runtime_error(what), index_(index) {}

  int index() const noexcept { return index_; }

 private:
  int index_;
};

/**
 * Differentiable NLP  min f(x)  s.t.  c_i(x) <= 0, i = 0..nc-1.
 *
 * Evaluators must be total on R^n and free of hidden state; a Problem is
 * shared read-only between solves.
 */
struct Problem {
  int n = 0;
  int nc = 0;
  std::function<double(const Vector&)> objective;
  std::function<Vector(const Vector&)> gradient;
  /// Returns the nc constraint values. May be empty when nc == 0.
  std::function<Vector(const Vector&)> constraints;
  /// Returns the nc x n Jacobian; row i is dc_i/dx.
  std::function<Matrix(const Vector&)> jacobian;

  Vector eval_constraints(const Vector& x) const {
    if (nc == 0) return Vector(0);
    Vector c = constraints(x);
    if (c.size() != nc) {
      throw std::invalid_argument("constraint evaluator returned " +
                                  std::to_string(c.size()) + " values, expected " +
                                  std::to_string(nc));
    }
    for (int i = 0; i < nc; ++i) {
      if (!std::isfinite(c(i))) {
        throw EvaluationError("constraint " + std::to_string(i) + " is not finite", i);
      }
    }
    return c;
  }

  Matrix eval_jacobian(const Vector& x) const {
    if (nc == 0) return Matrix(0, n);
    Matrix J = jacobian(x);
    if (J.rows() != nc || J.cols() != n) {
      throw std::invalid_argument("constraint Jacobian has wrong shape");
    }
    for (int i = 0; i < nc; ++i) {
      if (!J.row(i).allFinite()) {
        throw EvaluationError("Jacobian row " + std::to_string(i) + " is not finite", i);
      }
    }
    return J;
  }

  double eval_objective(const Vector& x) const {
    double f = objective(x);
    if (!std::isfinite(f)) throw EvaluationError("objective is not finite", -1);
    return f;
  }

  Vector eval_gradient(const Vector& x) const {
    Vector g = gradient(x);
    if (g.size() != n) throw std::invalid_argument("objective gradient has wrong size");
    if (!g.allFinite()) throw EvaluationError("objective gradient is not finite", -1);
    return g;
  }
};

/// Exponent m of the penalty  psi(x) = sum_i max(0, c_i(x))^m.
struct PenaltyConfig {
  int m = 2;
};

namespace detail {

inline double ipow(double base, int e) {
  double r = 1.0;
  for (int k = 0; k < e; ++k) r *= base;
  return r;
}

inline void check_config(const PenaltyConfig& cfg) {
  if (cfg.m < 1) throw std::invalid_argument("penalty exponent m must be >= 1");
}

}  // namespace detail

/// psi from precomputed constraint values.
inline double penalty_from_values(const Vector& c, const PenaltyConfig& cfg) {
  double psi = 0.0;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    if (c(i) > 0.0) psi += detail::ipow(c(i), cfg.m);
  }
  return psi;
}

/**
 * Per-constraint weights  m * max(0, c_i)^(m-1)  so that
 * grad psi = J^T w. For m = 1 a constraint exactly on its boundary gets
 * weight zero.
 */
inline Vector penalty_weights(const Vector& c, const PenaltyConfig& cfg) {
  Vector w = Vector::Zero(c.size());
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    if (c(i) > 0.0) w(i) = cfg.m * detail::ipow(c(i), cfg.m - 1);
  }
  return w;
}

inline double eval_penalty(const Problem& problem, const Vector& x, const PenaltyConfig& cfg = {}) {
  detail::check_config(cfg);
  return penalty_from_values(problem.eval_constraints(x), cfg);
}

/// f(x) + rho * psi(x).
inline double eval_weighted_cost(const Problem& problem, const Vector& x, double rho,
                                 const PenaltyConfig& cfg = {}) {
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be >= 0");
  const double f = problem.eval_objective(x);
  if (problem.nc == 0) return f;
  const double psi = eval_penalty(problem, x, cfg);
  return rho == 0.0 ? f : f + rho * psi;
}

/// Gradient of the weighted cost w.r.t. x: f_x + rho * J^T w.
inline Vector eval_weighted_grad(const Problem& problem, const Vector& x, double rho,
                                 const PenaltyConfig& cfg = {}) {
  detail::check_config(cfg);
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be >= 0");
  Vector grad = problem.eval_gradient(x);
  if (problem.nc == 0) return grad;
  const Vector c = problem.eval_constraints(x);
  const Vector w = penalty_weights(c, cfg);
  if (rho != 0.0 && w.any()) {
    grad.noalias() += rho * (problem.eval_jacobian(x).transpose() * w);
  }
  return grad;
}

/// g(x, rho): Euclidean norm of the weighted-cost gradient.
inline double eval_g(const Problem& problem, const Vector& x, double rho,
                     const PenaltyConfig& cfg = {}) {
  return eval_weighted_grad(problem, x, rho, cfg).norm();
}

struct GradientReport {
  /// max-norm deviation of f_x from central differences, relative to max(1, |fd|).
  double objective_error = 0.0;
  /// worst such deviation over the constraint Jacobian rows.
  double constraint_error = 0.0;
  /// row index of the worst constraint, -1 if none.
  int worst_constraint = -1;

  double worst() const { return std::max(objective_error, constraint_error); }
};

/**
 * Compares the analytic gradients of `problem` at `x` with central
 * differences of step `step`. Informational only; never throws on mismatch.
 */
inline GradientReport check_gradients(const Problem& problem, const Vector& x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be > 0");
  const int n = problem.n;
  Vector fd_f(n);
  Matrix fd_c(problem.nc, n);
  Vector xp = x;
  Vector xm = x;
  for (int j = 0; j < n; ++j) {
    xp(j) = x(j) + step;
    xm(j) = x(j) - step;
    fd_f(j) = (problem.eval_objective(xp) - problem.eval_objective(xm)) / (2.0 * step);
    if (problem.nc > 0) {
      fd_c.col(j) = (problem.eval_constraints(xp) - problem.eval_constraints(xm)) / (2.0 * step);
    }
    xp(j) = x(j);
    xm(j) = x(j);
  }

  auto rel = [](const auto& analytic, const auto& fd) {
    const double scale = std::max(1.0, fd.template lpNorm<Eigen::Infinity>());
    return (analytic - fd).template lpNorm<Eigen::Infinity>() / scale;
  };

  GradientReport report;
  report.objective_error = rel(problem.eval_gradient(x), fd_f);
  if (problem.nc > 0) {
    const Matrix J = problem.eval_jacobian(x);
    for (int i = 0; i < problem.nc; ++i) {
      const double e = rel(J.row(i), fd_c.row(i));
      if (report.worst_constraint < 0 || e > report.constraint_error) {
        report.constraint_error = e;
        report.worst_constraint = i;
      }
    }
  }
  return report;
}

/// Relative max-norm deviation of the weighted-cost gradient f_x + rho J'w
/// from central differences of f + rho psi.
inline double check_weighted_gradient(const Problem& problem, const Vector& x, double rho,
                                      const PenaltyConfig& cfg, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be > 0");
  Vector fd(problem.n);
  Vector xp = x;
  Vector xm = x;
  for (int j = 0; j < problem.n; ++j) {
    xp(j) = x(j) + step;
    xm(j) = x(j) - step;
    fd(j) = (eval_weighted_cost(problem, xp, rho, cfg) - eval_weighted_cost(problem, xm, rho, cfg)) /
            (2.0 * step);
    xp(j) = x(j);
    xm(j) = x(j);
  }
  const double scale = std::max(1.0, fd.lpNorm<Eigen::Infinity>());
  return (eval_weighted_grad(problem, x, rho, cfg) - fd).lpNorm<Eigen::Infinity>() / scale;
}

}  // namespace penflow
