#pragma once

#include "penflow/flow.hpp"
#include "penflow/kkt.hpp"
#include "penflow/problem.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace penflow {

enum class Method {
  /// Stiffly accurate Rosenbrock RODAS4, finite-difference Jacobian.
  rodas4,
  /// Explicit Dormand-Prince 5(4) pair.
  dopri45,
};

inline const char* to_string(Method m) {
  return m == Method::rodas4 ? "rodas4" : "dopri45";
}

inline Method parse_method(const std::string& s) {
  if (s == "rodas4") return Method::rodas4;
  if (s == "dopri45") return Method::dopri45;
  throw std::invalid_argument("unknown integration method '" + s + "'");
}

struct IntegratorConfig {
  double rtol = 1e-6;
  double atol = 1e-9;
  double h_init = 1e-3;
  double h_min = 1e-12;
  double h_max = 1e22;
  int sample_stride = 10;
  Method method = Method::rodas4;
  /// Constraints within this distance of their boundary keep their penalty
  /// curvature in the stiff-solver Jacobian.
  double kink_band = 1e-6;

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw std::invalid_argument("rtol and atol must be > 0");
    if (!(h_min > 0.0 && h_min <= h_init && h_init <= h_max)) {
      throw std::invalid_argument("step bounds must satisfy 0 < h_min <= h_init <= h_max");
    }
    if (sample_stride < 1) throw std::invalid_argument("sample_stride must be >= 1");
    if (!(kink_band >= 0.0)) throw std::invalid_argument("kink_band must be >= 0");
  }
};

struct StopCriteria {
  double eps_psi = 1e-8;
  double eps_g = 1e-4;
  double t_max = 1e24;
  double rho_max = 1e9;
  std::int64_t max_steps = 5'000'000;

  void validate() const {
    if (!(eps_psi > 0.0) || !(eps_g > 0.0)) throw std::invalid_argument("thresholds must be > 0");
    if (!(t_max > 0.0)) throw std::invalid_argument("t_max must be > 0");
    if (!(rho_max > 0.0)) throw std::invalid_argument("rho_max must be > 0");
    if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  }
};

enum class Status {
  converged,
  t_max_reached,
  rho_max_reached,
  step_budget_exhausted,
  rhs_failure,
};

inline const char* to_string(Status s) {
  switch (s) {
    case Status::converged: return "converged";
    case Status::t_max_reached: return "t_max_reached";
    case Status::rho_max_reached: return "rho_max_reached";
    case Status::step_budget_exhausted: return "step_budget_exhausted";
    case Status::rhs_failure: return "rhs_failure";
  }
  return "?";
}

struct Sample {
  double t = 0.0;
  double rho = 0.0;
  double psi = 0.0;
  double g = 0.0;
  double f = 0.0;
  double fbar = 0.0;
  Vector x;
};

struct SolveResult {
  Status status = Status::rhs_failure;
  FlowState state;
  double psi = 0.0;
  double g = 0.0;
  double f = 0.0;
  double fbar = 0.0;
  std::vector<Sample> trajectory;
  /// Filled by solve(); empty after integrate().
  KktReport kkt;
  std::int64_t accepted = 0;
  std::int64_t rejected = 0;
  /// Steps taken at h_min although the error test failed.
  std::int64_t forced = 0;
  /// fbar rose for 50 consecutive steps while x was off the stationary set.
  bool gamma_warning = false;
  std::string message;

  bool converged() const { return status == Status::converged; }
};

/// Time-dependent right-hand side y' = rhs(t, y).
using Rhs = std::function<Vector(double, const Vector&)>;
/// Jacobian of the right-hand side at (t, y); the third argument is rhs(t, y).
using JacobianFn = std::function<Matrix(double, const Vector&, const Vector&)>;

struct StepResult {
  Vector y;
  /// Scaled local error; the step is acceptable when <= 1.
  double error = 0.0;
  double h_next = 0.0;
};

namespace detail {

inline double error_norm(const Vector& err, const Vector& y0, const Vector& y1,
                         const IntegratorConfig& cfg) {
  if (err.size() == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    const double sc = cfg.atol + cfg.rtol * std::max(std::abs(y0(i)), std::abs(y1(i)));
    const double r = err(i) / sc;
    sum += r * r;
  }
  const double e = std::sqrt(sum / static_cast<double>(err.size()));
  return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
}

/// PI step-size controller; `k` is the order of the error estimate.
inline double next_step(double h, double err, double prev_err, double k,
                        const IntegratorConfig& cfg) {
  double fac;
  if (!std::isfinite(err)) {
    fac = 0.2;
  } else if (err == 0.0) {
    fac = 5.0;
  } else if (err > 1.0) {
    fac = std::max(0.2, 0.9 * std::pow(err, -1.0 / k));
  } else {
    fac = 0.9 * std::pow(err, -0.7 / k) * std::pow(std::max(prev_err, 1e-4), 0.4 / k);
  }
  fac = std::clamp(fac, 0.2, 5.0);
  return std::clamp(h * fac, cfg.h_min, cfg.h_max);
}

inline void check_step(double h, const IntegratorConfig& cfg) {
  if (!(h >= cfg.h_min && h <= cfg.h_max)) {
    throw std::invalid_argument("step size outside [h_min, h_max]");
  }
}

}  // namespace detail

/**
 * One Dormand-Prince 5(4) step from (t, y) with size h. The candidate is
 * the fifth-order solution; the error is the embedded difference.
 */
inline StepResult rk_step(const Rhs& rhs, const Vector& y, double t, double h,
                          const IntegratorConfig& cfg, double prev_error = 1.0) {
  detail::check_step(h, cfg);
  constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                   a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                   a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                   b6 = 11.0 / 84;
  // b - b*, with b* the fourth-order weights.
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                   e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  const Vector k1 = rhs(t, y);
  const Vector k2 = rhs(t + c2 * h, y + h * (a21 * k1));
  const Vector k3 = rhs(t + c3 * h, y + h * (a31 * k1 + a32 * k2));
  const Vector k4 = rhs(t + c4 * h, y + h * (a41 * k1 + a42 * k2 + a43 * k3));
  const Vector k5 = rhs(t + c5 * h, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
  const Vector k6 =
      rhs(t + h, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));

  StepResult out;
  out.y = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
  const Vector k7 = rhs(t + h, out.y);
  const Vector err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
  out.error = detail::error_norm(err, y, out.y, cfg);
  out.h_next = detail::next_step(h, out.error, prev_error, 5.0, cfg);
  return out;
}

/// Forward-difference Jacobian of rhs at (t, y); `f0` is rhs(t, y).
inline Matrix numeric_jacobian(const Rhs& rhs, double t, const Vector& y, const Vector& f0) {
  const Eigen::Index n = y.size();
  Matrix J(n, n);
  Vector yp = y;
  const double sqrt_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  for (Eigen::Index j = 0; j < n; ++j) {
    const double delta = sqrt_eps * std::max(1.0, std::abs(y(j)));
    yp(j) = y(j) + delta;
    J.col(j) = (rhs(t, yp) - f0) / (yp(j) - y(j));
    yp(j) = y(j);
  }
  return J;
}

/**
 * One step of the stiffly accurate Rosenbrock method RODAS4 (Hairer and
 * Wanner): fourth order, embedded third-order solution for the error.
 * The Jacobian comes from `jac` when given, otherwise from forward
 * differences of rhs, and is rebuilt on every attempt. Unless `autonomous`
 * is set, the time derivative of rhs is taken by a forward difference.
 */
inline StepResult rosenbrock_step(const Rhs& rhs, const Vector& y, double t, double h,
                                  const IntegratorConfig& cfg, double prev_error = 1.0,
                                  const JacobianFn& jac = {}, bool autonomous = false) {
  detail::check_step(h, cfg);
  constexpr double gamma = 0.25;
  constexpr double c2 = 0.386, c3 = 0.21, c4 = 0.63;
  constexpr double d1 = 0.25, d2 = -0.1043, d3 = 0.1035, d4 = -0.0362;
  constexpr double a21 = 1.544;
  constexpr double a31 = 0.9466785280815826, a32 = 0.2557011698983284;
  constexpr double a41 = 3.314825187068521, a42 = 2.896124015972201, a43 = 0.9986419139977817;
  constexpr double a51 = 1.221224509226641, a52 = 6.019134481288629, a53 = 12.53708332932087,
                   a54 = -0.6878860361058950;
  constexpr double c21 = -5.6688;
  constexpr double c31 = -2.430093356833875, c32 = -0.2063599157091915;
  constexpr double c41 = -0.1073529058151375, c42 = -9.594562251023355,
                   c43 = -20.47028614809616;
  constexpr double c51 = 7.496443313967647, c52 = -10.24680431464352, c53 = -33.99990352819905,
                   c54 = 11.70890893206160;
  constexpr double c61 = 8.083246795921522, c62 = -7.981132988064893, c63 = -31.52159432874371,
                   c64 = 16.31930543123136, c65 = -6.058818238834054;

  const Eigen::Index n = y.size();
  const Vector f0 = rhs(t, y);
  const Matrix J = jac ? jac(t, y, f0) : numeric_jacobian(rhs, t, y, f0);
  const Matrix E = (1.0 / (h * gamma)) * Matrix::Identity(n, n) - J;
  const Eigen::PartialPivLU<Matrix> lu(E);
  const double ih = 1.0 / h;

  Vector ft = Vector::Zero(n);
  if (!autonomous) {
    const double dt = std::sqrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(t));
    ft = (rhs(t + dt, y) - f0) / dt;
  }

  const Vector k1 = lu.solve(f0 + (d1 * h) * ft);
  const Vector k2 = lu.solve(rhs(t + c2 * h, y + a21 * k1) + (d2 * h) * ft + (c21 * ih) * k1);
  const Vector k3 = lu.solve(rhs(t + c3 * h, y + a31 * k1 + a32 * k2) + (d3 * h) * ft +
                             ih * (c31 * k1 + c32 * k2));
  const Vector k4 = lu.solve(rhs(t + c4 * h, y + a41 * k1 + a42 * k2 + a43 * k3) +
                             (d4 * h) * ft + ih * (c41 * k1 + c42 * k2 + c43 * k3));
  const Vector y5 = y + a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4;
  const Vector k5 = lu.solve(rhs(t + h, y5) + ih * (c51 * k1 + c52 * k2 + c53 * k3 + c54 * k4));
  const Vector y6 = y5 + k5;
  const Vector k6 = lu.solve(rhs(t + h, y6) +
                             ih * (c61 * k1 + c62 * k2 + c63 * k3 + c64 * k4 + c65 * k5));

  StepResult out;
  out.y = y6 + k6;
  out.error = detail::error_norm(k6, y, out.y, cfg);
  if (!out.y.allFinite()) out.error = std::numeric_limits<double>::infinity();
  out.h_next = detail::next_step(h, out.error, prev_error, 4.0, cfg);
  return out;
}

namespace detail {

/// Consecutive accepted steps with rising fbar before the gamma warning fires.
inline constexpr int kMonitorWindow = 50;

struct Observables {
  double psi, g, f, fbar;
};

inline Observables observe(const Problem& problem, const Vector& x, double rho,
                           const FlowParams& params) {
  const FlowPoint p = evaluate_flow(problem, x, rho, params);
  const double f = problem.eval_objective(x);
  return {p.psi, p.g, f, f + rho * p.psi};
}

inline Sample make_sample(double t, const Vector& x, double rho, const Observables& o) {
  return {t, rho, o.psi, o.g, o.f, o.fbar, x};
}

}  // namespace detail

/**
 * Integrates the flow from `state0` until one of the stop criteria fires.
 * Convergence (psi <= eps_psi and g <= eps_g) is checked at the initial
 * state and after every accepted step. Evaluator failures end the run with
 * Status::rhs_failure; nothing is thrown past this call except for invalid
 * configuration.
 */
inline SolveResult integrate(const Problem& problem, const FlowParams& params,
                             const FlowState& state0, const StopCriteria& stop,
                             const IntegratorConfig& config) {
  params.validate();
  stop.validate();
  config.validate();
  if (state0.x.size() != problem.n) throw std::invalid_argument("initial x has wrong size");
  if (!(state0.rho >= 0.0)) throw std::invalid_argument("initial rho must be >= 0");

  const int n = problem.n;
  const Rhs rhs = [&problem, &params, n](double, const Vector& y) {
    const FlowPoint p = evaluate_flow(problem, y.head(n), y(n), params);
    Vector dy(n + 1);
    dy.head(n) = p.dx;
    dy(n) = p.drho;
    return dy;
  };
  // Differentiates the smooth-branch extension around the base point so that
  // a state resting on a constraint boundary still sees its stiffness.
  const JacobianFn jac = [&problem, &params, &config, &rhs, n](double t0, const Vector& y0,
                                                               const Vector& f0) {
    if (problem.nc == 0) return numeric_jacobian(rhs, t0, y0, f0);
    const BranchMask mask = near_active_mask(problem.eval_constraints(y0.head(n)),
                                             config.kink_band, params.penalty);
    if (mask.empty()) return numeric_jacobian(rhs, t0, y0, f0);
    const Rhs branch_rhs = [&problem, &params, &mask, n](double, const Vector& y) {
      const FlowPoint p = evaluate_flow_on_branch(problem, y.head(n), y(n), params, mask);
      Vector dy(n + 1);
      dy.head(n) = p.dx;
      dy(n) = p.drho;
      return dy;
    };
    return numeric_jacobian(branch_rhs, t0, y0, branch_rhs(t0, y0));
  };

  SolveResult result;
  Vector y(n + 1);
  y.head(n) = state0.x;
  y(n) = state0.rho;
  double t = state0.t;

  std::int64_t since_sample = 0;
  auto finish = [&](Status status, const detail::Observables& o) {
    result.status = status;
    result.state = {y.head(n), y(n), t};
    result.psi = o.psi;
    result.g = o.g;
    result.f = o.f;
    result.fbar = o.fbar;
    if (since_sample > 0) result.trajectory.push_back(detail::make_sample(t, y.head(n), y(n), o));
    return std::move(result);
  };

  detail::Observables obs;
  try {
    obs = detail::observe(problem, state0.x, state0.rho, params);
  } catch (const EvaluationError& e) {
    result.status = Status::rhs_failure;
    result.state = state0;
    result.message = e.what();
    return result;
  }
  result.trajectory.push_back(detail::make_sample(t, state0.x, state0.rho, obs));
  if (obs.psi <= stop.eps_psi && obs.g <= stop.eps_g) return finish(Status::converged, obs);

  double h = config.h_init;
  double prev_err = 1.0;
  int rising = 0;

  while (true) {
    if (result.accepted >= stop.max_steps) return finish(Status::step_budget_exhausted, obs);
    if (t >= stop.t_max) return finish(Status::t_max_reached, obs);

    StepResult step;
    detail::Observables next;
    try {
      step = config.method == Method::rodas4 ? rosenbrock_step(rhs, y, t, h, config, prev_err, jac, true)
                                                   : rk_step(rhs, y, t, h, config, prev_err);
      const bool at_floor = h <= config.h_min;
      if (step.error > 1.0 && !at_floor) {
        ++result.rejected;
        h = step.h_next;
        continue;
      }
      if (!step.y.allFinite()) {
        throw EvaluationError("integration produced a non-finite state at t = " +
                                  std::to_string(t),
                              -1);
      }
      // rho' = gamma psi >= 0: a decrease beyond the local tolerance means the
      // step was too long; smaller ones are rounding and get projected away.
      const double drop = y(n) - step.y(n);
      if (drop > 0.0) {
        if (drop > config.atol + config.rtol * std::abs(y(n)) && !at_floor) {
          ++result.rejected;
          h = std::max(config.h_min, 0.5 * h);
          continue;
        }
        step.y(n) = y(n);
      }
      next = detail::observe(problem, step.y.head(n), step.y(n), params);
      if (step.error > 1.0) ++result.forced;
    } catch (const EvaluationError& e) {
      result.message = std::string(e.what()) + " (t = " + std::to_string(t) + ")";
      return finish(Status::rhs_failure, obs);
    }

    const double tol = 10.0 * (config.atol + config.rtol * std::abs(obs.fbar));
    if (next.fbar > obs.fbar + tol && next.g > stop.eps_g) {
      if (++rising >= detail::kMonitorWindow) result.gamma_warning = true;
    } else {
      rising = 0;
    }

    t += h;
    y = step.y;
    obs = next;
    prev_err = std::max(step.error, 1e-4);
    h = step.h_next;
    ++result.accepted;

    if (++since_sample >= config.sample_stride) {
      result.trajectory.push_back(detail::make_sample(t, y.head(n), y(n), obs));
      since_sample = 0;
    }
    if (obs.psi <= stop.eps_psi && obs.g <= stop.eps_g) return finish(Status::converged, obs);
    if (y(n) >= stop.rho_max) return finish(Status::rho_max_reached, obs);
  }
}

/// integrate() followed by multiplier extraction and KKT residuals at the
/// final state.
inline SolveResult solve(const Problem& problem, const FlowParams& params,
                         const FlowState& state0, const StopCriteria& stop,
                         const IntegratorConfig& config) {
  SolveResult result = integrate(problem, params, state0, stop, config);
  try {
    const Vector mu = extract_multipliers(problem, result.state.x, result.state.rho, params.penalty);
    result.kkt = kkt_residuals(problem, result.state.x, mu);
  } catch (const EvaluationError& e) {
    if (result.message.empty()) result.message = e.what();
  }
  return result;
}

/// Default starting point: x = 0, rho = 0.
inline FlowState origin(int n) { return {Vector::Zero(n), 0.0, 0.0}; }

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Trajectory CSV: t,rho,psi,g,f,fbar,x0,...,x{n-1}
inline void write_trace_csv(std::ostream& os, const SolveResult& result) {
  const Eigen::Index n = result.state.x.size();
  os << "t,rho,psi,g,f,fbar";
  for (Eigen::Index j = 0; j < n; ++j) os << ",x" << j;
  os << '\n';
  for (const Sample& s : result.trajectory) {
    os << format_double(s.t) << ',' << format_double(s.rho) << ',' << format_double(s.psi) << ','
       << format_double(s.g) << ',' << format_double(s.f) << ',' << format_double(s.fbar);
    for (Eigen::Index j = 0; j < s.x.size(); ++j) os << ',' << format_double(s.x(j));
    os << '\n';
  }
}

}  // namespace penflow
