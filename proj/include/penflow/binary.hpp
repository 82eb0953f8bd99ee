#pragma once

#include "penflow/integrator.hpp"
#include "penflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace penflow {

struct QuadraticData {
  Matrix H;
  Vector F;
  Matrix A;
  Vector B;
};

/// Scalar cost with its gradient.
struct Cost {
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
};

/**
 * Minimization over x in {0,1}^n subject to native constraints c(x) <= 0.
 * `constraints` and `jacobian` may be empty when nc_native == 0.
 */
struct BinaryProblem {
  int n = 0;
  int nc_native = 0;
  Cost cost;
  std::function<Vector(const Vector&)> constraints;
  std::function<Matrix(const Vector&)> jacobian;

  Vector native_constraints(const Vector& x) const {
    if (nc_native == 0) return Vector(0);
    return constraints(x);
  }

  bool native_feasible(const Vector& x, double tol = 1e-9) const {
    if (nc_native == 0) return true;
    return native_constraints(x).maxCoeff() <= tol;
  }
};

/// Quadratic cost 1/2 x'Hx + F'x with linear native constraints Ax <= B.
inline BinaryProblem make_quadratic_binary(Matrix H, Vector F, Matrix A, Vector B) {
  const auto n = F.size();
  if (n < 1 || H.rows() != n || H.cols() != n) throw std::invalid_argument("H must be n x n");
  if (A.rows() != B.size() || (A.rows() > 0 && A.cols() != n)) {
    throw std::invalid_argument("A must be nc x n and B of length nc");
  }
  H = (0.5 * (H + H.transpose())).eval();
  auto d = std::make_shared<const QuadraticData>(QuadraticData{std::move(H), std::move(F),
                                                               std::move(A), std::move(B)});
  BinaryProblem bp;
  bp.n = static_cast<int>(n);
  bp.nc_native = static_cast<int>(d->A.rows());
  bp.cost.value = [d](const Vector& x) { return 0.5 * x.dot(d->H * x) + d->F.dot(x); };
  bp.cost.gradient = [d](const Vector& x) -> Vector { return d->H * x + d->F; };
  bp.constraints = [d](const Vector& x) -> Vector { return d->A * x - d->B; };
  bp.jacobian = [d](const Vector&) -> Matrix { return d->A; };
  return bp;
}

/// Number of penalty sums of the binarized problem for m = 2; the flow uses q = n_psi.
inline constexpr int kBinaryPsiTerms = 4;

/**
 * Continuous problem whose feasible set is the native-feasible part of
 * {0,1}^n. Constraint order: native, then x_i - x_i^2, then -x_i, then
 * x_i - 1, each block in index order.
 */
inline Problem binarize(const BinaryProblem& bp) {
  if (bp.n < 1) throw std::invalid_argument("binary problem needs n >= 1");
  const int n = bp.n;
  const int nn = bp.nc_native;
  Problem p;
  p.n = n;
  p.nc = nn + 3 * n;
  p.objective = bp.cost.value;
  p.gradient = bp.cost.gradient;
  p.constraints = [bp, n, nn](const Vector& x) -> Vector {
    Vector c(nn + 3 * n);
    if (nn > 0) c.head(nn) = bp.constraints(x);
    c.segment(nn, n) = x - x.cwiseProduct(x);
    c.segment(nn + n, n) = -x;
    c.segment(nn + 2 * n, n) = x.array() - 1.0;
    return c;
  };
  p.jacobian = [bp, n, nn](const Vector& x) -> Matrix {
    Matrix J = Matrix::Zero(nn + 3 * n, n);
    if (nn > 0) J.topRows(nn) = bp.jacobian(x);
    for (int i = 0; i < n; ++i) {
      J(nn + i, i) = 1.0 - 2.0 * x(i);
      J(nn + n + i, i) = -1.0;
      J(nn + 2 * n + i, i) = 1.0;
    }
    return J;
  };
  return p;
}

/// Componentwise rounding with threshold 0.5, ties to 1.
inline Vector round_binary(const Vector& x) {
  Vector b(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) b(i) = x(i) >= 0.5 ? 1.0 : 0.0;
  return b;
}

inline std::string bits(const Vector& x) {
  std::string s;
  s.reserve(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) s.push_back(x(i) >= 0.5 ? '1' : '0');
  return s;
}

/**
 * First native-feasible vertex at infinity-distance 1 from x_s: single flips
 * in index order, then pairs (i, j), i < j, in lexicographic order.
 */
inline std::optional<Vector> find_neighbor(const Vector& x_s, const BinaryProblem& bp) {
  if (x_s.size() != bp.n) throw std::invalid_argument("x_s has wrong size");
  const Vector base = round_binary(x_s);
  auto flip = [](Vector& v, int i) { v(i) = 1.0 - v(i); };
  for (int i = 0; i < bp.n; ++i) {
    Vector z = base;
    flip(z, i);
    if (bp.native_feasible(z)) return z;
  }
  for (int i = 0; i < bp.n; ++i) {
    for (int j = i + 1; j < bp.n; ++j) {
      Vector z = base;
      flip(z, i);
      flip(z, j);
      if (bp.native_feasible(z)) return z;
    }
  }
  return std::nullopt;
}

/// Amplitude of the bump placed at x_s: 1 + 2 |f_s(z_s)|.
inline double bump_amplitude(const Cost& f_s, const Vector& z_s) {
  return 1.0 + 2.0 * std::abs(f_s.value(z_s));
}

/**
 * f_{s+1}(x) = f_s(x) + a * exp(-mu_defl * ||x - x_s||^2 / 4) with
 * a = bump_amplitude(f_s, z_s).
 */
inline Cost deflate_cost(const Cost& f_s, const Vector& x_s, const Vector& z_s, double mu_defl) {
  if (!(mu_defl > 0.0)) throw std::invalid_argument("mu_defl must be > 0");
  if (x_s.size() != z_s.size()) throw std::invalid_argument("x_s and z_s differ in size");
  const double a = bump_amplitude(f_s, z_s);
  // Shared so that a chain of deflations stays linear in size.
  auto prev = std::make_shared<const Cost>(f_s);
  Cost out;
  out.value = [prev, x_s, a, mu_defl](const Vector& x) {
    return prev->value(x) + a * std::exp(-0.25 * mu_defl * (x - x_s).squaredNorm());
  };
  out.gradient = [prev, x_s, a, mu_defl](const Vector& x) -> Vector {
    const Vector d = x - x_s;
    const double bump = a * std::exp(-0.25 * mu_defl * d.squaredNorm());
    return prev->gradient(x) - (0.5 * mu_defl * bump) * d;
  };
  return out;
}

struct DeflationConfig {
  int max_minima = 64;
  double mu_defl = 40.0;

  void validate() const {
    if (max_minima < 1) throw std::invalid_argument("max_minima must be >= 1");
    if (!(mu_defl > 0.0)) throw std::invalid_argument("mu_defl must be > 0");
  }
};

/// min(2^n, 64).
inline int default_max_minima(int n) { return n >= 6 ? 64 : (1 << n); }

/// Flow parameters used for binarized problems: q = 4, m = 2.
inline FlowParams binary_flow_params() {
  FlowParams p;
  p.q = kBinaryPsiTerms;
  p.penalty.m = 2;
  return p;
}

struct DeflationRecord {
  int s = 0;
  /// Final continuous state of the inner solve.
  Vector x_final;
  /// Rounded local minimum.
  Vector x_s;
  std::optional<Vector> z_s;
  /// Deflated cost f_s at x_s.
  double f_s_value = 0.0;
  /// Original cost at x_s.
  double f_original = 0.0;
  bool native_feasible = false;
  double bump_strength = 0.0;
  /// Amplitude of the bump added after this visit; 0 when none was added.
  double bump_amplitude = 0.0;
  Status inner_status = Status::rhs_failure;
};

enum class BinaryStatus {
  budget_reached,
  no_neighbor,
  inner_failure,
  revisited,
};

inline const char* to_string(BinaryStatus s) {
  switch (s) {
    case BinaryStatus::budget_reached: return "budget_reached";
    case BinaryStatus::no_neighbor: return "no_neighbor";
    case BinaryStatus::inner_failure: return "inner_failure";
    case BinaryStatus::revisited: return "revisited";
  }
  return "unknown";
}

struct BinaryResult {
  std::vector<DeflationRecord> records;
  BinaryStatus status = BinaryStatus::budget_reached;
  std::optional<Vector> best;
  double best_f = std::numeric_limits<double>::infinity();
  std::string message;
};

/**
 * Deflation loop. Each round integrates the flow for the current cost from
 * (x_start, rho = 0), rounds the final state to x_s and adds a bump at x_s.
 * The first round starts at 0.5 * 1, later rounds at the previous x_s.
 * The loop stops after max_minima rounds, when no neighbor exists, when an
 * inner solve fails to converge, or when a round lands on an already
 * recorded minimum (that round is not recorded).
 */
inline BinaryResult solve_binary(const BinaryProblem& bp, const FlowParams& params,
                                 const StopCriteria& stop, const IntegratorConfig& config,
                                 const DeflationConfig& defl) {
  defl.validate();
  BinaryResult out;
  Cost cost = bp.cost;
  Vector start = Vector::Constant(bp.n, 0.5);
  std::vector<std::string> seen;

  for (int round = 0; round < defl.max_minima; ++round) {
    BinaryProblem current = bp;
    current.cost = cost;
    const Problem problem = binarize(current);
    const SolveResult r = integrate(problem, params, FlowState{start, 0.0, 0.0}, stop, config);

    DeflationRecord rec;
    rec.s = static_cast<int>(out.records.size());
    rec.inner_status = r.status;
    rec.x_final = r.state.x;
    rec.x_s = round_binary(r.state.x);
    rec.f_s_value = cost.value(rec.x_s);
    rec.f_original = bp.cost.value(rec.x_s);
    rec.native_feasible = bp.native_feasible(rec.x_s);
    rec.bump_strength = defl.mu_defl;

    if (!r.converged()) {
      out.records.push_back(std::move(rec));
      out.status = BinaryStatus::inner_failure;
      out.message = "inner solve ended with " + std::string(to_string(r.status)) +
                    " in round " + std::to_string(round);
      if (!r.message.empty()) out.message += ": " + r.message;
      return out;
    }
    const std::string key = bits(rec.x_s);
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      out.status = BinaryStatus::revisited;
      out.message = "round " + std::to_string(round) + " returned to " + key;
      return out;
    }
    seen.push_back(key);
    if (rec.native_feasible && rec.f_original < out.best_f) {
      out.best = rec.x_s;
      out.best_f = rec.f_original;
    }

    rec.z_s = find_neighbor(rec.x_s, bp);
    if (!rec.z_s) {
      out.records.push_back(std::move(rec));
      out.status = BinaryStatus::no_neighbor;
      return out;
    }
    if (round + 1 < defl.max_minima) {
      rec.bump_amplitude = bump_amplitude(cost, *rec.z_s);
      cost = deflate_cost(cost, rec.x_s, *rec.z_s, defl.mu_defl);
      start = rec.x_s;
    }
    out.records.push_back(std::move(rec));
  }
  out.status = BinaryStatus::budget_reached;
  return out;
}

// --- oracle -------------------------------------------------------------------

inline constexpr int kBruteForceMaxN = 20;

struct BinaryOptimum {
  Vector x;
  double f = 0.0;
};

/// Exhaustive scan in lexicographic order; the first minimizer wins ties.
inline std::optional<BinaryOptimum> brute_force_oracle(const BinaryProblem& bp) {
  if (bp.n < 1 || bp.n > kBruteForceMaxN) {
    throw std::invalid_argument("brute force needs 1 <= n <= " + std::to_string(kBruteForceMaxN));
  }
  std::optional<BinaryOptimum> best;
  const std::uint32_t count = 1u << bp.n;
  Vector x(bp.n);
  for (std::uint32_t mask = 0; mask < count; ++mask) {
    // Bit n-1-i of mask is x_i, so increasing mask is lexicographic order.
    for (int i = 0; i < bp.n; ++i) x(i) = (mask >> (bp.n - 1 - i)) & 1u ? 1.0 : 0.0;
    if (!bp.native_feasible(x)) continue;
    const double f = bp.cost.value(x);
    if (!best || f < best->f) best = BinaryOptimum{x, f};
  }
  return best;
}

// --- instances ------------------------------------------------------------------

struct BinaryInstance {
  QuadraticData data;
  BinaryProblem problem;
};

inline BinaryInstance make_binary_instance(QuadraticData data) {
  BinaryInstance inst{data, make_quadratic_binary(data.H, data.F, data.A, data.B)};
  return inst;
}

/// min -(x1 + 2 x2)  s.t.  x1 + x2 <= 1.
inline BinaryInstance knapsack2_instance() {
  QuadraticData d;
  d.H = Matrix::Zero(2, 2);
  d.F = Vector(2);
  d.F << -1.0, -2.0;
  d.A = Matrix::Ones(1, 2);
  d.B = Vector::Ones(1);
  return make_binary_instance(std::move(d));
}

/**
 * Seeded quadratic binary instance: H = (M + M')/2 and F with N(0,1)
 * entries. With `knapsack`, one native row w'x <= sum(w)/2 is added with
 * w ~ U(0.5, 1.5).
 */
inline BinaryInstance random_binary_instance(int n, std::uint64_t seed, bool knapsack = false) {
  if (n < 1) throw std::invalid_argument("n must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> weight(0.5, 1.5);
  QuadraticData d;
  Matrix M(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) M(i, j) = normal(rng);
  d.H = 0.5 * (M + M.transpose());
  d.F.resize(n);
  for (int i = 0; i < n; ++i) d.F(i) = normal(rng);
  if (knapsack) {
    d.A.resize(1, n);
    for (int j = 0; j < n; ++j) d.A(0, j) = weight(rng);
    d.B = Vector::Constant(1, 0.5 * d.A.sum());
  } else {
    d.A = Matrix(0, n);
    d.B = Vector(0);
  }
  return make_binary_instance(std::move(d));
}

/**
 * {"builtin": "knapsack2"} |
 * {"builtin": "random", "n": .., "seed": .., "knapsack": false} |
 * {"n": .., "H": [..], "F": [..], "nc": .., "A": [..], "B": [..]}
 * with row-major matrices; "nc", "A", "B" may be omitted together.
 */
inline BinaryInstance binary_from_json(const io::Json& j) {
  if (j.is_object() && j.contains("builtin")) {
    const io::Json& b = j.at("builtin");
    if (!b.is_string()) throw ParseError("builtin", "expected a string");
    const std::string name = b.get<std::string>();
    if (name == "knapsack2") return knapsack2_instance();
    if (name == "random") {
      const int n = io::read_int(j, "n", 1);
      bool knapsack = false;
      if (j.contains("knapsack")) {
        if (!j.at("knapsack").is_boolean()) throw ParseError("knapsack", "expected a boolean");
        knapsack = j.at("knapsack").get<bool>();
      }
      return random_binary_instance(n, static_cast<std::uint64_t>(io::read_int(j, "seed", 0)),
                                    knapsack);
    }
    throw ParseError("builtin", "unknown builtin '" + name + "'");
  }
  QuadraticData d;
  const int n = io::read_int(j, "n", 1);
  d.H = io::read_matrix(j, "H", n, n);
  d.F = io::read_vector(j, "F", n);
  const int nc = j.contains("nc") ? io::read_int(j, "nc", 0) : 0;
  d.A = nc > 0 ? io::read_matrix(j, "A", nc, n) : Matrix(0, n);
  d.B = nc > 0 ? io::read_vector(j, "B", nc) : Vector(0);
  return make_binary_instance(std::move(d));
}

inline io::Json binary_to_json(const QuadraticData& d) {
  io::Json j;
  j["n"] = d.F.size();
  j["H"] = io::matrix_json(d.H);
  j["F"] = io::vector_json(d.F);
  j["nc"] = d.A.rows();
  j["A"] = io::matrix_json(d.A);
  j["B"] = io::vector_json(d.B);
  return j;
}

/// Oracle outcome as reported next to a deflation run.
struct OracleColumn {
  enum class Kind { value, infeasible, skipped };
  Kind kind = Kind::skipped;
  double f = 0.0;

  static OracleColumn from(const std::optional<BinaryOptimum>& o) {
    return o ? OracleColumn{Kind::value, o->f} : OracleColumn{Kind::infeasible, 0.0};
  }
};

/// Runs the brute-force oracle when n is within its bound.
inline OracleColumn oracle_column(const BinaryProblem& bp) {
  if (bp.n > kBruteForceMaxN) return {};
  return OracleColumn::from(brute_force_oracle(bp));
}

/// s,x_s,f_original,native_feasible,neighbor,status,gap
/// gap is f_original - f_oracle, "none" without a feasible oracle point and
/// "skipped" above the oracle size bound.
inline void write_binary_csv(std::ostream& os, const BinaryResult& result,
                             const OracleColumn& oracle = {}) {
  os << "s,x_s,f_original,native_feasible,neighbor,status,gap\n";
  for (const auto& r : result.records) {
    os << r.s << ',' << bits(r.x_s) << ',' << format_double(r.f_original) << ','
       << (r.native_feasible ? 1 : 0) << ',' << (r.z_s ? bits(*r.z_s) : std::string("none"))
       << ',' << to_string(r.inner_status) << ',';
    switch (oracle.kind) {
      case OracleColumn::Kind::value: os << format_double(r.f_original - oracle.f); break;
      case OracleColumn::Kind::infeasible: os << "none"; break;
      case OracleColumn::Kind::skipped: os << "skipped"; break;
    }
    os << '\n';
  }
}

}  // namespace penflow
