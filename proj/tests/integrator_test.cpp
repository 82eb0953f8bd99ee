#include <gtest/gtest.h>

#include <penflow/integrator.hpp>
#include <penflow/qp.hpp>

#include <cmath>
#include <sstream>

#include "test_problems.hpp"

using namespace penflow;

namespace {

using Stepper = StepResult (*)(const Rhs&, const Vector&, double, double, const IntegratorConfig&,
                               double);

StepResult rodas(const Rhs& rhs, const Vector& y, double t, double h, const IntegratorConfig& cfg,
                 double prev) {
  return rosenbrock_step(rhs, y, t, h, cfg, prev);
}

StepResult dopri(const Rhs& rhs, const Vector& y, double t, double h, const IntegratorConfig& cfg,
                 double prev) {
  return rk_step(rhs, y, t, h, cfg, prev);
}

/// Adaptive drive from t0 to t1 accepting steps with error <= 1.
Vector drive(Stepper step, const Rhs& rhs, Vector y, double t0, double t1,
             const IntegratorConfig& cfg) {
  double t = t0;
  double h = cfg.h_init;
  double prev = 1.0;
  while (t < t1) {
    h = std::min(h, t1 - t);
    const StepResult r = step(rhs, y, t, h, cfg, prev);
    if (r.error <= 1.0) {
      t += h;
      y = r.y;
      prev = std::max(r.error, 1e-4);
    }
    h = r.h_next;
  }
  return y;
}

const Rhs kDecay = [](double, const Vector& y) { return Vector(-y); };

}  // namespace

class Steppers : public ::testing::TestWithParam<Stepper> {};

TEST_P(Steppers, ConstantField) {
  const Rhs zero = [](double, const Vector& y) { return Vector(Vector::Zero(y.size())); };
  const StepResult r = GetParam()(zero, Vector::Ones(1), 0.0, 0.7, IntegratorConfig{}, 1.0);
  EXPECT_EQ(r.y(0), 1.0);
  EXPECT_EQ(r.error, 0.0);
}

TEST_P(Steppers, LinearFieldIsExact) {
  const Rhs one = [](double, const Vector& y) { return Vector(Vector::Ones(y.size())); };
  const StepResult r = GetParam()(one, Vector::Zero(1), 0.0, 0.5, IntegratorConfig{}, 1.0);
  EXPECT_NEAR(r.y(0), 0.5, 1e-15);
  // Normalized error; the tableau constants are rounded to 16 digits.
  EXPECT_NEAR(r.error, 0.0, 1e-6);
}

TEST_P(Steppers, ExponentialDecay) {
  IntegratorConfig cfg;
  cfg.rtol = 1e-8;
  cfg.atol = 1e-12;
  const Vector y = drive(GetParam(), kDecay, Vector::Ones(1), 0.0, 1.0, cfg);
  EXPECT_NEAR(y(0), 0.3678794412, 1e-7);
}

TEST_P(Steppers, SuggestedStepRespectsBounds) {
  IntegratorConfig cfg;
  cfg.h_min = 1e-3;
  cfg.h_init = 1e-2;
  cfg.h_max = 2e-2;
  const StepResult r = GetParam()(kDecay, Vector::Ones(1), 0.0, 1e-2, cfg, 1.0);
  EXPECT_GE(r.h_next, cfg.h_min);
  EXPECT_LE(r.h_next, cfg.h_max);
  EXPECT_THROW(GetParam()(kDecay, Vector::Ones(1), 0.0, 1.0, cfg, 1.0), std::invalid_argument);
}

INSTANTIATE_TEST_SUITE_P(Integrator, Steppers, ::testing::Values(&rodas, &dopri));

TEST(Rosenbrock, FourthOrderConvergence) {
  const Rhs rhs = [](double t, const Vector& y) {
    Vector d(2);
    d << y(1), -y(0) + std::cos(t);
    return d;
  };
  auto error_with = [&](int steps) {
    Vector y = Vector::Zero(2);
    const double h = 1.0 / steps;
    for (int k = 0; k < steps; ++k) y = rosenbrock_step(rhs, y, k * h, h, {}, 1.0).y;
    // y'' + y = cos t, y(0) = y'(0) = 0  =>  y = t sin(t) / 2.
    return std::abs(y(0) - 0.5 * std::sin(1.0));
  };
  const double order = std::log2(error_with(10) / error_with(20));
  EXPECT_GT(order, 3.7);
  EXPECT_LT(order, 4.5);
}

TEST(DormandPrince, FifthOrderConvergence) {
  auto error_with = [&](int steps) {
    Vector y = Vector::Ones(1);
    const double h = 2.0 / steps;
    for (int k = 0; k < steps; ++k) y = rk_step(kDecay, y, k * h, h, {}, 1.0).y;
    return std::abs(y(0) - std::exp(-2.0));
  };
  const double order = std::log2(error_with(8) / error_with(16));
  EXPECT_GT(order, 4.6);
}

TEST(Rosenbrock, HandlesStiffDecay) {
  const Rhs stiff = [](double, const Vector& y) { return Vector(-1e6 * y); };
  const StepResult r = rosenbrock_step(stiff, Vector::Ones(1), 0.0, 1.0, {}, 1.0);
  EXPECT_TRUE(std::isfinite(r.y(0)));
  EXPECT_LT(std::abs(r.y(0)), 1e-3);
}

// --- integrate / solve ----------------------------------------------------------

TEST(Integrate, UnconstrainedConverges) {
  StopCriteria stop;
  const SolveResult r = integrate(test::half_norm(2), {}, {Vector::Ones(2), 0.0, 0.0}, stop, {});
  EXPECT_EQ(r.status, Status::converged);
  EXPECT_LE(r.state.x.norm(), stop.eps_g);
  EXPECT_EQ(r.state.rho, 0.0);
}

TEST(Integrate, ConstantViolationDrivesRhoToCeiling) {
  Problem p;
  p.n = 1;
  p.nc = 1;
  p.objective = [](const Vector&) { return 0.0; };
  p.gradient = [](const Vector&) { return Vector::Zero(1); };
  p.constraints = [](const Vector&) { return Vector::Ones(1); };
  p.jacobian = [](const Vector&) { return Matrix::Zero(1, 1); };
  StopCriteria stop;
  stop.rho_max = 1e6;
  const SolveResult r = integrate(p, {}, origin(1), stop, {});
  EXPECT_EQ(r.status, Status::rho_max_reached);
  EXPECT_GE(r.state.rho, stop.rho_max);
}

TEST(Solve, HalfspaceProjection) {
  const SolveResult r = solve(test::halfspace(), {}, origin(2), {}, {});
  ASSERT_EQ(r.status, Status::converged);
  EXPECT_NEAR(r.state.x(0), 1.0, 1e-3);
  EXPECT_NEAR(r.state.x(1), 0.0, 1e-3);
  ASSERT_EQ(r.kkt.mu.size(), 1);
  EXPECT_NEAR(r.kkt.mu(0), 1.0, 1e-2);
  EXPECT_LE(r.kkt.stationarity, 1e-3);
  EXPECT_FALSE(r.gamma_warning);
}

TEST(Solve, ExplicitMethodOnNonStiffProblem) {
  // Late in a constrained run the flow is stiff and needs t ~ 1e17, which an
  // explicit pair cannot reach within a step budget; an unconstrained
  // quadratic is fine.
  IntegratorConfig cfg;
  cfg.method = Method::dopri45;
  Vector x0(3);
  x0 << 1.0, -2.0, 0.5;
  const SolveResult r = solve(test::half_norm(3), {}, {x0, 0.0, 0.0}, {}, cfg);
  ASSERT_TRUE(r.converged());
  EXPECT_LE(r.state.x.norm(), StopCriteria{}.eps_g);

  StopCriteria budget;
  budget.max_steps = 20000;
  const SolveResult stiff = solve(test::halfspace(), {}, origin(2), budget, cfg);
  EXPECT_EQ(stiff.status, Status::step_budget_exhausted);
}

TEST(Solve, AllModesReachHalfspaceOptimum) {
  for (FlowMode mode : {FlowMode::truncated, FlowMode::exponential, FlowMode::plain}) {
    FlowParams params;
    params.mode = mode;
    const SolveResult r = solve(test::halfspace(), params, origin(2), {}, {});
    ASSERT_TRUE(r.converged()) << to_string(mode);
    EXPECT_NEAR(r.state.x(0), 1.0, 1e-3);
  }
}

TEST(Solve, InteriorOptimumHasZeroMultipliers) {
  // min 1/2 ||x - (2, 3)||^2 s.t. x_0 >= 1: the constraint is inactive.
  Problem p = test::halfspace();
  Vector target(2);
  target << 2.0, 3.0;
  p.objective = [target](const Vector& x) { return 0.5 * (x - target).squaredNorm(); };
  p.gradient = [target](const Vector& x) { return Vector(x - target); };
  StopCriteria stop;
  const SolveResult r = solve(p, {}, origin(2), stop, {});
  ASSERT_TRUE(r.converged());
  EXPECT_EQ(r.kkt.mu(0), 0.0);
  EXPECT_LE(r.kkt.stationarity, stop.eps_g);
  EXPECT_LE((r.state.x - target).norm(), 1e-3);
}

TEST(Solve, SeededBenchInstanceMatchesOracle) {
  const RandomQp inst = generate_random_qp(15, 20, 0);
  const SolveResult r = solve(qp_problem(inst.data), {}, origin(15), {}, {});
  ASSERT_TRUE(r.converged());
  const OracleSolution o = active_set_oracle(inst.data);
  EXPECT_GE(r.f / o.f_star, 0.99);
  EXPECT_LE(r.f / o.f_star, 1.01);
}

TEST(Solve, LargeGammaRaisesWarning) {
  FlowParams params;
  params.gamma = 1.0;
  const SolveResult r = solve(test::halfspace(), params, origin(2), {}, {});
  EXPECT_TRUE(r.converged());
  EXPECT_TRUE(r.gamma_warning);
}

TEST(Solve, FactorOverflowBecomesRhsFailure) {
  FlowParams params;
  params.mode = FlowMode::exponential;
  params.lambda = 1e3;
  Problem p = test::half_norm(1);
  const SolveResult r = integrate(p, params, {Vector::Constant(1, 10.0), 0.0, 0.0}, {}, {});
  EXPECT_EQ(r.status, Status::rhs_failure);
  EXPECT_NE(r.message.find("rescale"), std::string::npos);
}

TEST(Solve, InvalidConfigurationThrows) {
  IntegratorConfig cfg;
  cfg.h_min = 1.0;
  cfg.h_init = 0.1;
  EXPECT_THROW(integrate(test::halfspace(), {}, origin(2), {}, cfg), std::invalid_argument);
  StopCriteria stop;
  stop.eps_psi = 0.0;
  EXPECT_THROW(integrate(test::halfspace(), {}, origin(2), stop, {}), std::invalid_argument);
  EXPECT_THROW(integrate(test::halfspace(), {}, origin(3), {}, {}), std::invalid_argument);
}

// --- properties -----------------------------------------------------------------

TEST(IntegrateProperty, RhoNonDecreasingAndConvergedIsSound) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    StopCriteria stop;
    const SolveResult r = solve(qp_problem(generate_random_qp(15, 20, seed).data), {},
                                origin(15), stop, {});
    ASSERT_FALSE(r.trajectory.empty());
    for (std::size_t k = 1; k < r.trajectory.size(); ++k) {
      EXPECT_GE(r.trajectory[k].rho, r.trajectory[k - 1].rho) << "sample " << k;
    }
    if (r.converged()) {
      EXPECT_LE(r.psi, stop.eps_psi);
      EXPECT_LE(r.g, stop.eps_g);
      EXPECT_EQ(r.trajectory.back().psi, r.psi);
    }
  }
}

TEST(IntegrateProperty, WeightedCostNonIncreasingForSmallGamma) {
  IntegratorConfig cfg;
  cfg.sample_stride = 1;
  const Problem p = qp_problem(generate_random_qp(15, 20, 2).data);
  auto rises = [&](const SolveResult& r, bool only_unpredicted, const FlowParams& params) {
    int count = 0;
    for (std::size_t k = 1; k < r.trajectory.size(); ++k) {
      const Sample& a = r.trajectory[k - 1];
      const Sample& b = r.trajectory[k];
      const double tol = 10.0 * (cfg.atol + cfg.rtol * std::abs(a.fbar));
      if (b.fbar <= a.fbar + tol || b.g <= StopCriteria{}.eps_g) continue;
      // Closed-form rate gamma psi^2 - factor g^2 at either end.
      auto ascent = [&](const Sample& s) {
        return params.gamma * s.psi * s.psi > descent_factor(s.g, params) * s.g * s.g;
      };
      if (!only_unpredicted || !(ascent(a) || ascent(b))) ++count;
    }
    return count;
  };

  FlowParams small;
  small.gamma = gamma_bound(small.lambda, {1.0, {1.0, 1.0}});
  const SolveResult r = solve(p, small, origin(15), {}, cfg);
  ASSERT_TRUE(r.converged());
  EXPECT_FALSE(r.gamma_warning);
  EXPECT_EQ(rises(r, false, small), 0);

  // Above the bound fbar may rise, but only where the rate formula says so.
  const SolveResult loose = solve(p, {}, origin(15), {}, cfg);
  ASSERT_TRUE(loose.converged());
  EXPECT_EQ(rises(loose, true, {}), 0);
}

TEST(IntegrateProperty, DeterministicTrace) {
  const Problem p = qp_problem(generate_random_qp(10, 12, 3).data);
  std::ostringstream a, b;
  write_trace_csv(a, solve(p, {}, origin(10), {}, {}));
  write_trace_csv(b, solve(p, {}, origin(10), {}, {}));
  EXPECT_EQ(a.str(), b.str());
}

TEST(TraceCsv, HeaderAndRoundTrip) {
  const SolveResult r = solve(test::halfspace(), {}, origin(2), {}, {});
  std::ostringstream os;
  write_trace_csv(os, r);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "t,rho,psi,g,f,fbar,x0,x1");
  std::string last, line;
  while (std::getline(is, line)) last = line;
  const double rho = std::stod(last.substr(last.find(',') + 1));
  EXPECT_EQ(rho, r.state.rho);
}
