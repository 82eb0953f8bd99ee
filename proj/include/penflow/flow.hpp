#pragma once

#include "penflow/problem.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace penflow {

/// Which scalar multiplies the descent direction -fbar_x.
enum class FlowMode {
  truncated,    ///< sum_{i=1..q} (lambda g)^(i-1) / (i-1)!
  exponential,  ///< exp(lambda g)
  plain,        ///< 1
};

inline const char* to_string(FlowMode mode) {
  switch (mode) {
    case FlowMode::truncated: return "truncated";
    case FlowMode::exponential: return "exponential";
    case FlowMode::plain: return "plain";
  }
  return "?";
}

inline FlowMode parse_flow_mode(const std::string& s) {
  if (s == "truncated") return FlowMode::truncated;
  if (s == "exponential") return FlowMode::exponential;
  if (s == "plain") return FlowMode::plain;
  throw std::invalid_argument("unknown flow mode '" + s + "'");
}

struct FlowParams {
  double lambda = 1e-4;
  double gamma = 1e-6;
  int q = 2;
  FlowMode mode = FlowMode::truncated;
  PenaltyConfig penalty{};

  void validate() const {
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be > 0");
    if (q < 1) throw std::invalid_argument("q must be >= 1");
    if (penalty.m < 1) throw std::invalid_argument("penalty exponent m must be >= 1");
  }
};

struct FlowState {
  Vector x;
  double rho = 0.0;
  double t = 0.0;
};

/// The multiplier on -fbar_x blew up; rescale the problem or lower lambda.
class FactorOverflow : public EvaluationError {
 public:
  explicit FactorOverflow(double magnitude)
      : EvaluationError("descent factor overflow at lambda*g = " + std::to_string(magnitude) +
                            "; rescale the problem or reduce lambda",
                        -1),
        magnitude_(magnitude) {}

  double magnitude() const noexcept { return magnitude_; }

 private:
  double magnitude_;
};

/// Largest lambda*g accepted by the exponential factor.
inline constexpr double kMaxExponent = 700.0;

inline double series_factor(double g, double lambda, int q) {
  if (!(g >= 0.0)) throw std::invalid_argument("g must be >= 0");
  if (q < 1) throw std::invalid_argument("q must be >= 1");
  const double z = lambda * g;
  double term = 1.0;
  double sum = 1.0;
  for (int i = 1; i < q; ++i) {
    term *= z / i;
    sum += term;
  }
  if (!std::isfinite(sum)) throw FactorOverflow(z);
  return sum;
}

inline double exp_factor(double g, double lambda) {
  if (!(g >= 0.0)) throw std::invalid_argument("g must be >= 0");
  const double z = lambda * g;
  if (z > kMaxExponent) throw FactorOverflow(z);
  return std::exp(z);
}

inline double descent_factor(double g, const FlowParams& params) {
  switch (params.mode) {
    case FlowMode::truncated: return series_factor(g, params.lambda, params.q);
    case FlowMode::exponential: return exp_factor(g, params.lambda);
    case FlowMode::plain: return 1.0;
  }
  return 1.0;
}

/// Everything the flow needs at one (x, rho), computed from a single pass
/// over the evaluators.
struct FlowPoint {
  Vector fbar_x;
  double psi = 0.0;
  double g = 0.0;
  double factor = 1.0;
  Vector dx;
  double drho = 0.0;
};

/// Per-constraint flag: evaluate the penalty on its smooth branch c^m.
using BranchMask = std::vector<char>;

/// Constraints with c_i >= -band; empty when m < 2 (no smooth branch).
inline BranchMask near_active_mask(const Vector& c, double band, const PenaltyConfig& cfg) {
  BranchMask mask;
  if (cfg.m < 2) return mask;
  mask.assign(static_cast<std::size_t>(c.size()), 0);
  for (Eigen::Index i = 0; i < c.size(); ++i) mask[static_cast<std::size_t>(i)] = c(i) >= -band;
  return mask;
}

namespace detail {

inline FlowPoint evaluate_flow_impl(const Problem& problem, const Vector& x, double rho,
                                    const FlowParams& params, const BranchMask* branch) {
  FlowPoint p;
  p.fbar_x = problem.eval_gradient(x);
  if (problem.nc > 0) {
    const Vector c = problem.eval_constraints(x);
    Vector w;
    if (branch == nullptr || branch->empty()) {
      p.psi = penalty_from_values(c, params.penalty);
      w = penalty_weights(c, params.penalty);
    } else {
      const int m = params.penalty.m;
      w = Vector::Zero(c.size());
      for (Eigen::Index i = 0; i < c.size(); ++i) {
        if ((*branch)[static_cast<std::size_t>(i)] || c(i) > 0.0) {
          p.psi += ipow(c(i), m);
          w(i) = m * ipow(c(i), m - 1);
        }
      }
    }
    if (rho != 0.0 && w.any()) {
      p.fbar_x.noalias() += rho * (problem.eval_jacobian(x).transpose() * w);
    }
  }
  p.g = p.fbar_x.norm();
  p.factor = descent_factor(p.g, params);
  p.dx = -p.factor * p.fbar_x;
  p.drho = params.gamma * p.psi;
  return p;
}

}  // namespace detail

inline FlowPoint evaluate_flow(const Problem& problem, const Vector& x, double rho,
                               const FlowParams& params) {
  return detail::evaluate_flow_impl(problem, x, rho, params, nullptr);
}

/**
 * Same as evaluate_flow, except that constraints flagged in `branch` use
 * c^m on both sides of their boundary. Differentiating this smooth
 * extension gives a Jacobian that keeps the penalty curvature of
 * constraints sitting on or just inside their boundary.
 */
inline FlowPoint evaluate_flow_on_branch(const Problem& problem, const Vector& x, double rho,
                                         const FlowParams& params, const BranchMask& branch) {
  return detail::evaluate_flow_impl(problem, x, rho, params, &branch);
}

struct FlowRhs {
  Vector dx;
  double drho = 0.0;
};

/**
 * Right-hand side of the coupled flow
 *
 *   dx/dt   = -factor(g) * fbar_x(x, rho)
 *   drho/dt = gamma * psi(x)
 *
 * with factor chosen by `params.mode`.
 */
inline FlowRhs flow_rhs(const Problem& problem, const FlowState& state, const FlowParams& params) {
  FlowPoint p = evaluate_flow(problem, state.x, state.rho, params);
  return {std::move(p.dx), p.drho};
}

/// Diagnostic constants for the gamma smallness bound.
struct GammaBoundInputs {
  double k_c = 1.0;
  std::vector<double> alphas;
};

/**
 * Largest gamma for which the decrease argument goes through:
 *
 *   sqrt(gamma) <= min_i (lambda k_c)^i / (2 alpha_i lambda (i-1)!)
 *
 * Purely advisory; the solver never consults it.
 */
inline double gamma_bound(double lambda, const GammaBoundInputs& inputs) {
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
  if (!(inputs.k_c > 0.0)) throw std::invalid_argument("k_c must be > 0");
  if (inputs.alphas.empty()) throw std::invalid_argument("need at least one growth coefficient");
  double best = std::numeric_limits<double>::infinity();
  double power = 1.0;      // (lambda k_c)^i
  double factorial = 1.0;  // (i-1)!
  for (std::size_t k = 0; k < inputs.alphas.size(); ++k) {
    const double alpha = inputs.alphas[k];
    if (!(alpha > 0.0)) throw std::invalid_argument("growth coefficients must be > 0");
    const int i = static_cast<int>(k) + 1;
    power *= lambda * inputs.k_c;
    if (i > 1) factorial *= (i - 1);
    best = std::min(best, power / (2.0 * alpha * lambda * factorial));
  }
  return best * best;
}

struct FbarRate {
  /// gamma psi^2 - factor g^2
  double analytic = 0.0;
  /// <fbar_x, dx> + psi * drho
  double assembled = 0.0;
};

/**
 * Time derivative of fbar along the flow, computed two ways. Since
 * dfbar/dt = <fbar_x, dx/dt> + psi drho/dt and dx/dt = -factor fbar_x, the
 * closed form is gamma psi^2 - factor g^2.
 */
inline FbarRate fbar_dot_identity(const Problem& problem, const FlowState& state,
                                  const FlowParams& params) {
  const FlowPoint p = evaluate_flow(problem, state.x, state.rho, params);
  FbarRate r;
  r.analytic = params.gamma * p.psi * p.psi - p.factor * p.g * p.g;
  r.assembled = p.fbar_x.dot(p.dx) + p.psi * p.drho;
  return r;
}

}  // namespace penflow
