#pragma once

#include "penflow/integrator.hpp"
#include "penflow/io.hpp"
#include "penflow/qp.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace penflow {

/// Discrete-time LTI plant  xi+ = A xi + B u.
struct Plant {
  Matrix A;
  Matrix B;

  int nx() const { return static_cast<int>(A.rows()); }
  int nu() const { return static_cast<int>(B.cols()); }

  void validate() const {
    if (A.rows() != A.cols() || B.rows() != A.rows() || B.cols() < 1) {
      throw std::invalid_argument("plant dimensions are inconsistent");
    }
  }

  Vector step(const Vector& xi, const Vector& u) const { return A * xi + B * u; }
};

/**
 * QP whose linear term and constraint bounds are affine in the plant state:
 *
 *   min 1/2 x'Hx + (f0 + F1 xi)'x   s.t.  A x <= b0 + Bmat xi
 *
 * with the applied input sequence  (u_0, ..., u_{N-1}) = Pi x.
 */
struct ParametricQp {
  Matrix H;
  Vector f0;
  Matrix F1;
  Matrix A;
  Vector b0;
  Matrix Bmat;
  Matrix Pi;
  int N = 0;
  int nu = 0;

  int n() const { return static_cast<int>(H.rows()); }
};

/**
 * Condenses the finite-horizon problem
 *
 *   J = sum_{k=1..N} xi_k'Q xi_k + sum_{k=0..N-1} u_k'R u_k + xi_N'P xi_N
 *
 * over the stacked inputs x = (u_0, ..., u_{N-1}) with |u| <= u_max
 * componentwise. The QP objective equals J/2 up to a constant in xi.
 */
inline ParametricQp condense(const Plant& plant, int N, const Matrix& Q, const Matrix& R,
                             const Matrix& P, double u_max) {
  plant.validate();
  const int nx = plant.nx();
  const int nu = plant.nu();
  if (N < 1) throw std::invalid_argument("horizon must be >= 1");
  if (Q.rows() != nx || Q.cols() != nx || P.rows() != nx || P.cols() != nx) {
    throw std::invalid_argument("state weights must be nx x nx");
  }
  if (R.rows() != nu || R.cols() != nu) throw std::invalid_argument("input weight must be nu x nu");
  if (!(u_max >= 0.0)) throw std::invalid_argument("u_max must be >= 0");

  const int n = N * nu;
  // Stacked predictions (xi_1..xi_N) = Sx xi_0 + Su x.
  Matrix Sx(N * nx, nx);
  Matrix Su = Matrix::Zero(N * nx, n);
  Matrix Ak = Matrix::Identity(nx, nx);
  for (int k = 1; k <= N; ++k) {
    // Su block (k-1, j) = A^(k-1-j) B, built from the row above.
    Ak = plant.A * Ak;
    Sx.block((k - 1) * nx, 0, nx, nx) = Ak;
    for (int j = 0; j < k; ++j) {
      if (j == k - 1) {
        Su.block((k - 1) * nx, j * nu, nx, nu) = plant.B;
      } else {
        Su.block((k - 1) * nx, j * nu, nx, nu) = plant.A * Su.block((k - 2) * nx, j * nu, nx, nu);
      }
    }
  }
  Matrix Qbar = Matrix::Zero(N * nx, N * nx);
  for (int k = 0; k < N; ++k) Qbar.block(k * nx, k * nx, nx, nx) = Q;
  Qbar.block((N - 1) * nx, (N - 1) * nx, nx, nx) += P;
  Matrix Rbar = Matrix::Zero(n, n);
  for (int k = 0; k < N; ++k) Rbar.block(k * nu, k * nu, nu, nu) = R;

  ParametricQp pqp;
  pqp.N = N;
  pqp.nu = nu;
  pqp.H = Su.transpose() * Qbar * Su + Rbar;
  pqp.H = (0.5 * (pqp.H + pqp.H.transpose())).eval();
  pqp.f0 = Vector::Zero(n);
  pqp.F1 = Su.transpose() * Qbar * Sx;
  pqp.A.resize(2 * n, n);
  pqp.A << Matrix::Identity(n, n), -Matrix::Identity(n, n);
  pqp.b0 = Vector::Constant(2 * n, u_max);
  pqp.Bmat = Matrix::Zero(2 * n, nx);
  pqp.Pi = Matrix::Identity(n, n);
  return pqp;
}

inline QpData instantiate(const ParametricQp& pqp, const Vector& xi) {
  if (xi.size() != pqp.F1.cols() || xi.size() != pqp.Bmat.cols()) {
    throw std::invalid_argument("state has wrong dimension for this parametric QP");
  }
  QpData qp{pqp.H, pqp.f0 + pqp.F1 * xi, pqp.A, pqp.b0 + pqp.Bmat * xi};
  qp.validate();
  return qp;
}

/// Flow settings for the per-step QPs: plain descent, gamma = 1e-4.
inline FlowParams mpc_flow_params() {
  FlowParams p;
  p.mode = FlowMode::plain;
  p.gamma = 1e-4;
  return p;
}

/// psi <= 1e-13 keeps every input within about 3e-7 of its bound.
inline StopCriteria mpc_stop_criteria() {
  StopCriteria s;
  s.eps_psi = 1e-13;
  s.eps_g = 1e-6;
  return s;
}

struct MpcStep {
  /// First nu entries of Pi x_final.
  Vector u;
  /// Full decision vector at the end of the flow.
  Vector x;
  SolveResult result;
  /// Set when the inner solve did not converge; u is still the last state.
  bool warning = false;
};

inline MpcStep mpc_step(const ParametricQp& pqp, const Vector& xi, const FlowParams& params,
                        const StopCriteria& stop, const IntegratorConfig& config,
                        const std::optional<Vector>& warm = std::nullopt) {
  const int n = pqp.n();
  if (warm && warm->size() != n) throw std::invalid_argument("warm start has wrong size");
  const Problem problem = qp_problem(instantiate(pqp, xi));
  FlowState s0 = origin(n);
  if (warm) s0.x = *warm;

  MpcStep out;
  out.result = solve(problem, params, s0, stop, config);
  out.x = out.result.state.x;
  out.u = (pqp.Pi * out.x).head(pqp.nu);
  out.warning = !out.result.converged();
  return out;
}

struct MpcRecord {
  int k = 0;
  Vector xi;
  Vector u;
  Status status = Status::rhs_failure;
  double psi_final = 0.0;
  double g_final = 0.0;
  std::int64_t steps = 0;
  /// ||x_flow - x_oracle|| / (1 + ||x_oracle||); NaN unless checked.
  double oracle_gap = std::numeric_limits<double>::quiet_NaN();
};

struct ClosedLoopTrace {
  std::vector<MpcRecord> records;
  /// State after the last applied input.
  Vector xi_final;
  bool aborted = false;

  bool all_converged() const {
    for (const auto& r : records)
      if (r.status != Status::converged) return false;
    return !aborted;
  }
};

struct LoopOptions {
  bool warm_start = true;
  /// Solve every instantiated QP with the enumeration oracle as well.
  bool check_oracle = false;
};

inline ClosedLoopTrace simulate_closed_loop(const Plant& plant, const ParametricQp& pqp,
                                            const Vector& xi0, int steps,
                                            const FlowParams& params, const StopCriteria& stop,
                                            const IntegratorConfig& config,
                                            const LoopOptions& options = {}) {
  plant.validate();
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  if (xi0.size() != plant.nx()) throw std::invalid_argument("xi0 has wrong dimension");

  ClosedLoopTrace trace;
  Vector xi = xi0;
  std::optional<Vector> warm;
  for (int k = 0; k < steps; ++k) {
    MpcStep st = mpc_step(pqp, xi, params, stop, config, options.warm_start ? warm : std::nullopt);
    MpcRecord rec;
    rec.k = k;
    rec.xi = xi;
    rec.u = st.u;
    rec.status = st.result.status;
    rec.psi_final = st.result.psi;
    rec.g_final = st.result.g;
    rec.steps = st.result.accepted;
    if (options.check_oracle) {
      const OracleSolution o = active_set_oracle(instantiate(pqp, xi));
      rec.oracle_gap = (st.x - o.x_star).norm() / (1.0 + o.x_star.norm());
    }
    trace.records.push_back(rec);
    if (st.result.status == Status::rhs_failure) {
      trace.aborted = true;
      break;
    }
    xi = plant.step(xi, st.u);
    warm = st.x;
  }
  trace.xi_final = xi;
  return trace;
}

/// Same loop with the enumeration oracle as the QP solver.
inline ClosedLoopTrace simulate_oracle_loop(const Plant& plant, const ParametricQp& pqp,
                                            const Vector& xi0, int steps) {
  ClosedLoopTrace trace;
  Vector xi = xi0;
  for (int k = 0; k < steps; ++k) {
    const OracleSolution o = active_set_oracle(instantiate(pqp, xi));
    MpcRecord rec;
    rec.k = k;
    rec.xi = xi;
    rec.u = (pqp.Pi * o.x_star).head(pqp.nu);
    rec.status = Status::converged;
    rec.oracle_gap = 0.0;
    trace.records.push_back(rec);
    xi = plant.step(xi, rec.u);
  }
  trace.xi_final = xi;
  return trace;
}

/// k,xi0..,u0..,status,psi_final,g_final,steps
inline void write_closed_loop_csv(std::ostream& os, const ClosedLoopTrace& trace) {
  if (trace.records.empty()) {
    os << "k,status,psi_final,g_final,steps\n";
    return;
  }
  const auto nx = trace.records.front().xi.size();
  const auto nu = trace.records.front().u.size();
  os << 'k';
  for (Eigen::Index i = 0; i < nx; ++i) os << ",xi" << i;
  for (Eigen::Index i = 0; i < nu; ++i) os << ",u" << i;
  os << ",status,psi_final,g_final,steps\n";
  for (const auto& r : trace.records) {
    os << r.k;
    for (Eigen::Index i = 0; i < nx; ++i) os << ',' << format_double(r.xi(i));
    for (Eigen::Index i = 0; i < nu; ++i) os << ',' << format_double(r.u(i));
    os << ',' << to_string(r.status) << ',' << format_double(r.psi_final) << ','
       << format_double(r.g_final) << ',' << r.steps << '\n';
  }
}

// --- scenarios ----------------------------------------------------------------

struct MpcScenario {
  Plant plant;
  int horizon = 10;
  double u_max = 0.5;
  Matrix Q;
  Matrix R;
  Matrix P;
  Vector xi0;
  int steps = 60;

  ParametricQp condensed() const { return condense(plant, horizon, Q, R, P, u_max); }
};

/// Fixed point of the discrete Riccati recursion, used as terminal weight.
inline Matrix riccati_terminal_weight(const Plant& plant, const Matrix& Q, const Matrix& R,
                                      int iterations = 2000) {
  Matrix P = Q;
  for (int i = 0; i < iterations; ++i) {
    const Matrix BtP = plant.B.transpose() * P;
    const Matrix K = (R + BtP * plant.B).ldlt().solve(BtP * plant.A);
    Matrix next = Q + plant.A.transpose() * P * (plant.A - plant.B * K);
    next = (0.5 * (next + next.transpose())).eval();
    if ((next - P).lpNorm<Eigen::Infinity>() <= 1e-13 * (1.0 + P.lpNorm<Eigen::Infinity>())) {
      return next;
    }
    P = std::move(next);
  }
  return P;
}

/**
 * Zero-order-hold double integrator (sampling 0.1) with N = 10, |u| <= 0.5,
 * Q = I, R = 0.1 and the Riccati solution as terminal weight, started at
 * xi0 = (1, 0).
 */
inline MpcScenario double_integrator_scenario() {
  constexpr double dt = 0.1;
  MpcScenario s;
  s.plant.A.resize(2, 2);
  s.plant.A << 1.0, dt, 0.0, 1.0;
  s.plant.B.resize(2, 1);
  s.plant.B << 0.5 * dt * dt, dt;
  s.horizon = 10;
  s.u_max = 0.5;
  s.Q = Matrix::Identity(2, 2);
  s.R = Matrix::Constant(1, 1, 0.1);
  s.P = riccati_terminal_weight(s.plant, s.Q, s.R);
  s.xi0.resize(2);
  s.xi0 << 1.0, 0.0;
  s.steps = 60;
  return s;
}

/**
 * {"plant": {"nx":..,"nu":..,"A":[..],"B":[..]}, "horizon":.., "u_max":..,
 *  "Q":[..], "R":[..], "P":[..], "xi0":[..], "steps":..}
 * Matrices are row-major. "P" defaults to zero and "steps" to 60.
 */
inline MpcScenario scenario_from_json(const io::Json& j) {
  MpcScenario s;
  const io::Json& plant = io::require(j, "plant");
  const int nx = io::read_int(plant, "nx", 1);
  const int nu = io::read_int(plant, "nu", 1);
  s.plant.A = io::read_matrix(plant, "A", nx, nx);
  s.plant.B = io::read_matrix(plant, "B", nx, nu);
  s.horizon = io::read_int(j, "horizon", 1);
  s.u_max = io::read_double(j, "u_max");
  if (s.u_max < 0.0) throw ParseError("u_max", "must be >= 0");
  s.Q = io::read_matrix(j, "Q", nx, nx);
  s.R = io::read_matrix(j, "R", nu, nu);
  s.P = j.contains("P") ? io::read_matrix(j, "P", nx, nx) : Matrix::Zero(nx, nx);
  s.xi0 = io::read_vector(j, "xi0", nx);
  s.steps = j.contains("steps") ? io::read_int(j, "steps", 1) : 60;
  return s;
}

inline io::Json scenario_to_json(const MpcScenario& s) {
  io::Json j;
  j["plant"] = {{"nx", s.plant.nx()},
                {"nu", s.plant.nu()},
                {"A", io::matrix_json(s.plant.A)},
                {"B", io::matrix_json(s.plant.B)}};
  j["horizon"] = s.horizon;
  j["u_max"] = s.u_max;
  j["Q"] = io::matrix_json(s.Q);
  j["R"] = io::matrix_json(s.R);
  j["P"] = io::matrix_json(s.P);
  j["xi0"] = io::vector_json(s.xi0);
  j["steps"] = s.steps;
  return j;
}

}  // namespace penflow
