#pragma once

#include "penflow/integrator.hpp"
#include "penflow/io.hpp"
#include "penflow/kkt.hpp"
#include "penflow/problem.hpp"

#include <Eigen/Cholesky>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace penflow {

/// min 1/2 x'Hx + F'x  s.t.  A x <= B.
struct QpData {
  Matrix H;
  Vector F;
  Matrix A;
  Vector B;

  int n() const { return static_cast<int>(H.rows()); }
  int nc() const { return static_cast<int>(A.rows()); }

  void validate() const {
    const auto n = H.rows();
    if (H.cols() != n || F.size() != n || A.cols() != n || B.size() != A.rows()) {
      throw std::invalid_argument("QP dimensions are inconsistent");
    }
  }

  /// Replaces H by (H + H')/2.
  void symmetrize() { H = (0.5 * (H + H.transpose())).eval(); }

  double objective(const Vector& x) const { return 0.5 * x.dot(H * x) + F.dot(x); }
};

inline QpData make_qp(Matrix H, Vector F, Matrix A, Vector B) {
  QpData qp{std::move(H), std::move(F), std::move(A), std::move(B)};
  qp.validate();
  qp.symmetrize();
  return qp;
}

/// Problem view of a QP with c_i(x) = A_i x - B_i. The data is shared, not
/// copied, between the evaluators.
inline Problem qp_problem(const QpData& data) {
  data.validate();
  auto qp = std::make_shared<const QpData>(data);
  Problem p;
  p.n = qp->n();
  p.nc = qp->nc();
  p.objective = [qp](const Vector& x) { return qp->objective(x); };
  p.gradient = [qp](const Vector& x) -> Vector { return qp->H * x + qp->F; };
  p.constraints = [qp](const Vector& x) -> Vector { return qp->A * x - qp->B; };
  p.jacobian = [qp](const Vector&) -> Matrix { return qp->A; };
  return p;
}

struct RandomQp {
  QpData data;
  Vector feasible_point;
};

/**
 * Seeded random feasible QP:
 *   H = M'M + I with M ~ N(0,1)^{n x n};  F, A ~ N(0,1);
 *   B = A x_f + s with x_f ~ N(0,1), s ~ U(0.1, 1.0).
 * x_f is strictly feasible by construction.
 */
inline RandomQp generate_random_qp(int n, int nc, std::uint64_t seed) {
  if (n < 1 || nc < 0) throw std::invalid_argument("need n >= 1 and nc >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> slack(0.1, 1.0);

  Matrix M(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) M(r, c) = normal(rng);
  Vector F(n);
  for (int i = 0; i < n; ++i) F(i) = normal(rng);
  Matrix A(nc, n);
  for (int r = 0; r < nc; ++r)
    for (int c = 0; c < n; ++c) A(r, c) = normal(rng);
  Vector xf(n);
  for (int i = 0; i < n; ++i) xf(i) = normal(rng);
  Vector s(nc);
  for (int i = 0; i < nc; ++i) s(i) = slack(rng);

  Matrix H = M.transpose() * M + Matrix::Identity(n, n);
  Vector B = A * xf + s;
  return {make_qp(std::move(H), std::move(F), std::move(A), std::move(B)), std::move(xf)};
}

/// Largest constraint count the enumeration oracle accepts.
inline constexpr int kOracleMaxConstraints = 25;

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OracleSolution {
  Vector x_star;
  double f_star = 0.0;
  std::vector<int> active_set;
  Vector mu_star;
  /// Candidate active sets dropped because their KKT system was singular.
  std::int64_t singular_subsets = 0;
  /// Scaled KKT residual of (x_star, mu_star).
  double residual = 0.0;
};

namespace detail {

/// Calls visit(subset) for every subset of {0..m-1} with at most k_max
/// elements, by increasing size and lexicographically within a size, until
/// visit returns false.
template <class Visit>
void for_each_subset(int m, int k_max, Visit&& visit) {
  std::vector<int> idx;
  for (int k = 0; k <= k_max; ++k) {
    idx.resize(k);
    for (int i = 0; i < k; ++i) idx[i] = i;
    while (true) {
      if (!visit(static_cast<const std::vector<int>&>(idx))) return;
      int i = k - 1;
      while (i >= 0 && idx[i] == m - k + i) --i;
      if (i < 0) break;
      ++idx[i];
      for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
}

}  // namespace detail

/**
 * Exact solution of a strictly convex QP by active-set enumeration.
 *
 * For each candidate set S the equality-constrained KKT system is reduced
 * to its Schur complement  (A_S H^-1 A_S') mu_S = -(A_S H^-1 F + B_S).
 * A candidate with mu_S >= 0 and A x <= B satisfies the KKT conditions,
 * which for H > 0 identify the unique global minimizer, so the scan stops
 * at the first one. Sets larger than n are never independent and are not
 * visited.
 */
inline OracleSolution active_set_oracle(const QpData& qp) {
  qp.validate();
  const int n = qp.n();
  const int nc = qp.nc();
  if (nc > kOracleMaxConstraints) {
    throw OracleError("active-set enumeration is limited to " +
                      std::to_string(kOracleMaxConstraints) + " constraints, got " +
                      std::to_string(nc));
  }
  const Eigen::LLT<Matrix> hfact(qp.H);
  if (hfact.info() != Eigen::Success) throw OracleError("H is not positive definite");

  const Vector x_free = -hfact.solve(qp.F);
  const Matrix HinvAt = hfact.solve(qp.A.transpose());     // n x nc
  const Matrix G = qp.A * HinvAt;                          // nc x nc
  const Vector v = qp.A * x_free - qp.B;                   // c(x_free)
  const double feas_tol = 1e-9;
  const double dual_tol = 1e-12;

  OracleSolution best;
  bool found = false;
  Vector mu_s;

  detail::for_each_subset(nc, std::min(n, nc), [&](const std::vector<int>& S) {
    const int k = static_cast<int>(S.size());
    if (k > 0) {
      Matrix Gs(k, k);
      Vector rhs(k);
      for (int a = 0; a < k; ++a) {
        rhs(a) = v(S[a]);
        for (int b = 0; b < k; ++b) Gs(a, b) = G(S[a], S[b]);
      }
      const Eigen::LLT<Matrix> gf(Gs);
      if (gf.info() != Eigen::Success || gf.rcond() < 1e-12) {
        ++best.singular_subsets;
        return true;
      }
      // x = x_free - H^-1 A_S' mu_S with A_S x = B_S  =>  G_SS mu_S = c_S(x_free).
      mu_s = gf.solve(rhs);
      for (int a = 0; a < k; ++a)
        if (mu_s(a) < -dual_tol) return true;
    } else {
      mu_s.resize(0);
    }
    Vector x = x_free;
    for (int a = 0; a < k; ++a) x.noalias() -= mu_s(a) * HinvAt.col(S[a]);
    const Vector c = qp.A * x - qp.B;
    for (int i = 0; i < nc; ++i)
      if (c(i) > feas_tol * (1.0 + std::abs(qp.B(i)))) return true;
    found = true;
    best.x_star = x;
    best.f_star = qp.objective(x);
    best.active_set = S;
    best.mu_star = Vector::Zero(nc);
    for (int a = 0; a < k; ++a) best.mu_star(S[a]) = std::max(0.0, mu_s(a));
    return false;
  });

  if (!found) throw OracleError("QP is infeasible: no active set passes the KKT test");

  const KktReport r = kkt_residuals(qp_problem(qp), best.x_star, best.mu_star);
  const double scale = 1.0 + qp.F.norm() + (qp.H * best.x_star).norm() +
                       (qp.A.transpose() * best.mu_star).norm();
  best.residual =
      std::max({r.stationarity / scale, r.primal_infeasibility / (1.0 + qp.B.lpNorm<Eigen::Infinity>()),
                r.complementarity / scale});
  if (best.residual > 1e-9) {
    throw OracleError("oracle solution fails its KKT self-check (residual " +
                      std::to_string(best.residual) + ")");
  }
  return best;
}

// --- benchmark --------------------------------------------------------------

struct BenchThresholds {
  double psi_max = 1e-6;
  double ratio_band = 1e-2;
  /// stationarity <= stationarity_factor * (1 + ||f_x||)
  double stationarity_factor = 1e-3;
};

struct BenchRow {
  std::uint64_t seed = 0;
  int n = 0;
  int nc = 0;
  Status status = Status::rhs_failure;
  double psi_final = 0.0;
  double g_final = 0.0;
  double f_flow = 0.0;
  double f_oracle = std::numeric_limits<double>::quiet_NaN();
  double ratio = std::numeric_limits<double>::quiet_NaN();
  double stationarity = 0.0;
  double stationarity_bound = 0.0;
  double complementarity = 0.0;
  double x_error = std::numeric_limits<double>::quiet_NaN();
  std::int64_t steps = 0;
  double millis = 0.0;
  bool passed = false;
  std::string error;
  /// Decimated (t, psi, f) samples of the flow trajectory.
  std::vector<Sample> trajectory;
};

struct BenchReport {
  std::vector<BenchRow> rows;

  int passed() const {
    int k = 0;
    for (const auto& r : rows) k += r.passed ? 1 : 0;
    return k;
  }
  bool all_passed() const { return passed() == static_cast<int>(rows.size()); }
};

/// Solves one generated instance by flow and by the oracle and compares them.
inline BenchRow bench_instance(int n, int nc, std::uint64_t seed, const FlowParams& params,
                               const StopCriteria& stop, const IntegratorConfig& config,
                               const BenchThresholds& thr = {}) {
  BenchRow row;
  row.seed = seed;
  row.n = n;
  row.nc = nc;
  try {
    const RandomQp inst = generate_random_qp(n, nc, seed);
    const Problem problem = qp_problem(inst.data);

    const auto start = std::chrono::steady_clock::now();
    const SolveResult res = solve(problem, params, origin(n), stop, config);
    row.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                     .count();

    row.status = res.status;
    row.psi_final = res.psi;
    row.g_final = res.g;
    row.f_flow = res.f;
    row.stationarity = res.kkt.stationarity;
    row.complementarity = res.kkt.complementarity;
    row.stationarity_bound =
        thr.stationarity_factor * (1.0 + problem.eval_gradient(res.state.x).norm());
    row.steps = res.accepted;
    row.trajectory = res.trajectory;

    const OracleSolution oracle = active_set_oracle(inst.data);
    row.f_oracle = oracle.f_star;
    row.ratio = res.f / oracle.f_star;
    row.x_error = (res.state.x - oracle.x_star).norm() / (1.0 + oracle.x_star.norm());
    row.passed = row.psi_final <= thr.psi_max && std::abs(row.ratio - 1.0) <= thr.ratio_band &&
                 row.stationarity <= row.stationarity_bound;
    if (!res.message.empty()) row.error = res.message;
  } catch (const std::exception& e) {
    row.error = e.what();
    row.passed = false;
  }
  return row;
}

/// Instance i uses seed `seed + i`; rows come back in that order.
inline BenchReport run_benchmark(int count, int n, int nc, const FlowParams& params,
                                 const StopCriteria& stop, const IntegratorConfig& config,
                                 std::uint64_t seed, const BenchThresholds& thr = {}) {
  if (count < 0) throw std::invalid_argument("count must be >= 0");
  if (nc > kOracleMaxConstraints) {
    throw OracleError("benchmark needs the oracle; nc must be <= " +
                      std::to_string(kOracleMaxConstraints));
  }
  BenchReport report;
  report.rows.reserve(count);
  for (int i = 0; i < count; ++i) {
    report.rows.push_back(bench_instance(n, nc, seed + static_cast<std::uint64_t>(i), params, stop,
                                         config, thr));
  }
  return report;
}

/// seed,n,nc,status,psi_final,g_final,f_flow,f_oracle,ratio,stationarity,steps,millis
/// With `timing` false the millis column is written as 0 so reruns compare
/// byte-for-byte.
inline void write_bench_csv(std::ostream& os, const BenchReport& report, bool timing = true) {
  os << "seed,n,nc,status,psi_final,g_final,f_flow,f_oracle,ratio,stationarity,steps,millis\n";
  for (const auto& r : report.rows) {
    os << r.seed << ',' << r.n << ',' << r.nc << ',' << to_string(r.status) << ','
       << format_double(r.psi_final) << ',' << format_double(r.g_final) << ','
       << format_double(r.f_flow) << ',' << format_double(r.f_oracle) << ','
       << format_double(r.ratio) << ',' << format_double(r.stationarity) << ',' << r.steps << ','
       << (timing ? format_double(r.millis) : std::string("0")) << '\n';
  }
}

/// Per-instance decimated psi and f/f* series: seed,t,psi,ratio
inline void write_bench_trajectories_csv(std::ostream& os, const BenchReport& report) {
  os << "seed,t,psi,ratio\n";
  for (const auto& r : report.rows) {
    for (const auto& s : r.trajectory) {
      os << r.seed << ',' << format_double(s.t) << ',' << format_double(s.psi) << ','
         << format_double(s.f / r.f_oracle) << '\n';
    }
  }
}

// --- QP files -----------------------------------------------------------------

/// {"n":..,"nc":..,"H":[row-major],"F":[..],"A":[row-major],"B":[..]}
inline QpData qp_from_json(const io::Json& j) {
  const int n = io::read_int(j, "n", 1);
  const int nc = io::read_int(j, "nc", 0);
  QpData qp;
  qp.H = io::read_matrix(j, "H", n, n);
  qp.F = io::read_vector(j, "F", n);
  qp.A = io::read_matrix(j, "A", nc, n);
  qp.B = io::read_vector(j, "B", nc);
  qp.symmetrize();
  return qp;
}

inline io::Json qp_to_json(const QpData& qp) {
  io::Json j;
  j["n"] = qp.n();
  j["nc"] = qp.nc();
  j["H"] = io::matrix_json(qp.H);
  j["F"] = io::vector_json(qp.F);
  j["A"] = io::matrix_json(qp.A);
  j["B"] = io::vector_json(qp.B);
  return j;
}

inline QpData read_qp_file(const std::string& path) { return qp_from_json(io::read_json_file(path)); }

inline void write_qp_file(const std::string& path, const QpData& qp) {
  io::write_file_atomic(path, [&](std::ostream& os) { os << qp_to_json(qp).dump(1) << '\n'; });
}

}  // namespace penflow
