#pragma once

#include "penflow/binary.hpp"
#include "penflow/mpc.hpp"
#include "penflow/qp.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace penflow::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kSolverFailure = 3,
};

/// Solver settings as given on the command line; unset entries keep the
/// value from the input file or the subcommand default.
struct FlagSettings {
  double lambda = 0.0, gamma = 0.0, rtol = 0.0, atol = 0.0, eps_psi = 0.0, eps_g = 0.0,
         t_max = 0.0, rho_max = 0.0;
  int q = 0, m = 0;
  std::int64_t max_steps = 0;
  std::string mode, method;
  std::vector<CLI::Option*> options;

  bool given(const std::string& name) const {
    for (const CLI::Option* o : options)
      if (o->check_lname(name) && o->count() > 0) return true;
    return false;
  }
};

struct Settings {
  FlowParams params;
  StopCriteria stop;
  IntegratorConfig config;
};

inline void add_solver_flags(CLI::App& app, FlagSettings& f) {
  auto add = [&](const std::string& name, auto& target, const std::string& help) {
    f.options.push_back(app.add_option(name, target, help));
  };
  add("--lambda", f.lambda, "descent-factor gain lambda");
  add("--gamma", f.gamma, "penalty-weight rate gamma");
  add("--q", f.q, "number of series terms in truncated mode");
  add("--m", f.m, "penalty exponent");
  f.options.push_back(app.add_option("--mode", f.mode, "descent factor")
                          ->check(CLI::IsMember({"truncated", "exponential", "plain"})));
  f.options.push_back(app.add_option("--method", f.method, "integration method")
                          ->check(CLI::IsMember({"rodas4", "dopri45"})));
  add("--rtol", f.rtol, "relative integration tolerance");
  add("--atol", f.atol, "absolute integration tolerance");
  add("--eps-psi", f.eps_psi, "convergence threshold on psi");
  add("--eps-g", f.eps_g, "convergence threshold on g");
  add("--t-max", f.t_max, "integration horizon");
  add("--rho-max", f.rho_max, "penalty-weight ceiling");
  add("--max-steps", f.max_steps, "accepted-step budget");
}

/**
 * Reads the optional "settings" object of an input file:
 * {"lambda", "gamma", "q", "m", "mode", "method", "rtol", "atol", "eps_psi",
 *  "eps_g", "t_max", "rho_max", "max_steps"}. Unknown keys are errors.
 */
inline void apply_file_settings(const io::Json& root, Settings& s) {
  if (!root.is_object() || !root.contains("settings")) return;
  const io::Json& j = root.at("settings");
  if (!j.is_object()) throw ParseError("settings", "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const std::string field = "settings." + k;
    auto num = [&] {
      if (!it->is_number()) throw ParseError(field, "expected a number");
      return it->get<double>();
    };
    auto integer = [&] {
      if (!it->is_number_integer()) throw ParseError(field, "expected an integer");
      return it->get<long long>();
    };
    auto text = [&] {
      if (!it->is_string()) throw ParseError(field, "expected a string");
      return it->get<std::string>();
    };
    try {
      if (k == "lambda") s.params.lambda = num();
      else if (k == "gamma") s.params.gamma = num();
      else if (k == "q") s.params.q = static_cast<int>(integer());
      else if (k == "m") s.params.penalty.m = static_cast<int>(integer());
      else if (k == "mode") s.params.mode = parse_flow_mode(text());
      else if (k == "method") s.config.method = parse_method(text());
      else if (k == "rtol") s.config.rtol = num();
      else if (k == "atol") s.config.atol = num();
      else if (k == "eps_psi") s.stop.eps_psi = num();
      else if (k == "eps_g") s.stop.eps_g = num();
      else if (k == "t_max") s.stop.t_max = num();
      else if (k == "rho_max") s.stop.rho_max = num();
      else if (k == "max_steps") s.stop.max_steps = integer();
      else throw ParseError(field, "unknown setting");
    } catch (const std::invalid_argument& e) {
      throw ParseError(field, e.what());
    }
  }
}

inline void apply_flags(const FlagSettings& f, Settings& s) {
  if (f.given("lambda")) s.params.lambda = f.lambda;
  if (f.given("gamma")) s.params.gamma = f.gamma;
  if (f.given("q")) s.params.q = f.q;
  if (f.given("m")) s.params.penalty.m = f.m;
  if (f.given("mode")) s.params.mode = parse_flow_mode(f.mode);
  if (f.given("method")) s.config.method = parse_method(f.method);
  if (f.given("rtol")) s.config.rtol = f.rtol;
  if (f.given("atol")) s.config.atol = f.atol;
  if (f.given("eps-psi")) s.stop.eps_psi = f.eps_psi;
  if (f.given("eps-g")) s.stop.eps_g = f.eps_g;
  if (f.given("t-max")) s.stop.t_max = f.t_max;
  if (f.given("rho-max")) s.stop.rho_max = f.rho_max;
  if (f.given("max-steps")) s.stop.max_steps = f.max_steps;
}

inline void validate(const Settings& s) {
  s.params.validate();
  s.stop.validate();
  s.config.validate();
}

inline void write_output(const std::string& path, const std::function<void(std::ostream&)>& w) {
  if (!path.empty()) io::write_file_atomic(path, w);
}

inline std::string fmt(double v) { return format_double(v); }

inline const char* gamma_warning_text() {
  return "warning: gamma may be too large: the weighted cost kept increasing away from "
         "stationarity";
}

// --- subcommands ----------------------------------------------------------------

struct SolveQpArgs {
  std::string input;
  std::string trace;
  std::string report;
};

inline int cmd_solve_qp(const SolveQpArgs& a, const FlagSettings& flags, std::ostream& out,
                        std::ostream& err) {
  const io::Json j = io::read_json_file(a.input);
  const QpData qp = qp_from_json(j);
  qp.validate();
  Settings s;
  apply_file_settings(j, s);
  apply_flags(flags, s);
  validate(s);

  const Problem problem = qp_problem(qp);
  const SolveResult r = solve(problem, s.params, origin(problem.n), s.stop, s.config);

  std::ostringstream line;
  line << "status=" << to_string(r.status) << " psi=" << fmt(r.psi) << " g=" << fmt(r.g)
       << " f=" << fmt(r.f) << " stationarity=" << fmt(r.kkt.stationarity)
       << " primal=" << fmt(r.kkt.primal_infeasibility)
       << " dual=" << fmt(r.kkt.dual_infeasibility)
       << " complementarity=" << fmt(r.kkt.complementarity) << " steps=" << r.accepted
       << " rho=" << fmt(r.state.rho);
  out << line.str() << '\n';
  if (r.gamma_warning) err << gamma_warning_text() << '\n';
  if (!r.message.empty()) err << r.message << '\n';

  write_output(a.trace, [&](std::ostream& os) { write_trace_csv(os, r); });
  write_output(a.report, [&](std::ostream& os) { os << line.str() << '\n'; });
  return r.converged() ? kOk : kSolverFailure;
}

struct BenchArgs {
  int count = 50;
  int n = 15;
  int nc = 20;
  std::uint64_t seed = 0;
  bool timing = true;
  std::string trace;
  std::string report;
};

inline int cmd_bench(const BenchArgs& a, const FlagSettings& flags, std::ostream& out,
                     std::ostream& err) {
  if (a.count < 0 || a.n < 1 || a.nc < 0) throw ParseError("count/n/nc", "must be non-negative");
  if (a.nc > kOracleMaxConstraints) {
    throw ParseError("nc", "the oracle handles at most " + std::to_string(kOracleMaxConstraints) +
                               " constraints");
  }
  Settings s;
  apply_flags(flags, s);
  validate(s);

  const auto start = std::chrono::steady_clock::now();
  const BenchReport report = run_benchmark(a.count, a.n, a.nc, s.params, s.stop, s.config, a.seed);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

  write_output(a.report, [&](std::ostream& os) { write_bench_csv(os, report, a.timing); });
  write_output(a.trace, [&](std::ostream& os) { write_bench_trajectories_csv(os, report); });

  out << "passed " << report.passed() << '/' << report.rows.size();
  if (a.timing) out << " in " << fmt(ms) << " ms";
  out << '\n';
  if (report.all_passed()) return kOk;
  err << "failing seeds:";
  for (const auto& r : report.rows)
    if (!r.passed) err << ' ' << r.seed;
  err << '\n';
  return kSolverFailure;
}

struct MpcArgs {
  std::string input;
  int steps = 0;
  bool cold = false;
  bool check_oracle = false;
  std::string trace;
  std::string report;
};

inline int cmd_mpc(const MpcArgs& a, const FlagSettings& flags, std::ostream& out,
                   std::ostream& err) {
  MpcScenario sc = double_integrator_scenario();
  Settings s{mpc_flow_params(), mpc_stop_criteria(), {}};
  if (!a.input.empty()) {
    const io::Json j = io::read_json_file(a.input);
    sc = scenario_from_json(j);
    apply_file_settings(j, s);
  }
  if (a.steps > 0) sc.steps = a.steps;
  apply_flags(flags, s);
  validate(s);

  const ParametricQp pqp = sc.condensed();
  LoopOptions opt;
  opt.warm_start = !a.cold;
  opt.check_oracle = a.check_oracle;
  const ClosedLoopTrace trace =
      simulate_closed_loop(sc.plant, pqp, sc.xi0, sc.steps, s.params, s.stop, s.config, opt);

  double max_u = 0.0;
  double max_gap = 0.0;
  for (const auto& r : trace.records) {
    max_u = std::max(max_u, r.u.lpNorm<Eigen::Infinity>());
    if (a.check_oracle) max_gap = std::max(max_gap, r.oracle_gap);
  }
  const bool bounded = max_u <= sc.u_max + 1e-6;

  std::ostringstream line;
  line << "steps=" << trace.records.size() << " converged=" << (trace.all_converged() ? 1 : 0)
       << " max_abs_u=" << fmt(max_u) << " u_max=" << fmt(sc.u_max)
       << " final_norm=" << fmt(trace.xi_final.norm());
  if (a.check_oracle) line << " max_oracle_gap=" << fmt(max_gap);
  out << line.str() << '\n';
  write_output(a.trace, [&](std::ostream& os) { write_closed_loop_csv(os, trace); });
  write_output(a.report, [&](std::ostream& os) { os << line.str() << '\n'; });

  if (!trace.all_converged()) {
    err << "non-converged steps:";
    for (const auto& r : trace.records)
      if (r.status != Status::converged) err << ' ' << r.k << '(' << to_string(r.status) << ')';
    err << '\n';
    return kSolverFailure;
  }
  if (!bounded) {
    err << "input bound violated: max |u| = " << fmt(max_u) << '\n';
    return kSolverFailure;
  }
  return kOk;
}

struct MinlpArgs {
  std::string input;
  std::string builtin;
  int n = 6;
  std::uint64_t seed = 0;
  bool knapsack = false;
  int max_minima = 0;
  double mu_defl = 40.0;
  std::string trace;
  std::string report;
};

inline int cmd_minlp(const MinlpArgs& a, const FlagSettings& flags, std::ostream& out,
                     std::ostream& err) {
  Settings s{binary_flow_params(), {}, {}};
  BinaryInstance inst;
  if (!a.input.empty()) {
    const io::Json j = io::read_json_file(a.input);
    inst = binary_from_json(j);
    apply_file_settings(j, s);
  } else if (a.builtin == "random") {
    if (a.n < 1) throw ParseError("n", "must be >= 1");
    inst = random_binary_instance(a.n, a.seed, a.knapsack);
  } else {
    inst = knapsack2_instance();
  }
  apply_flags(flags, s);
  validate(s);

  DeflationConfig defl;
  defl.max_minima = a.max_minima > 0 ? a.max_minima : default_max_minima(inst.problem.n);
  defl.mu_defl = a.mu_defl;
  const BinaryResult r = solve_binary(inst.problem, s.params, s.stop, s.config, defl);
  const OracleColumn oracle = oracle_column(inst.problem);

  std::ostringstream line;
  line << "status=" << to_string(r.status) << " minima=" << r.records.size()
       << " best=" << (r.best ? bits(*r.best) : std::string("none"))
       << " f=" << (r.best ? fmt(r.best_f) : std::string("none"));
  switch (oracle.kind) {
    case OracleColumn::Kind::value:
      line << " oracle_f=" << fmt(oracle.f)
           << " gap=" << (r.best ? fmt(r.best_f - oracle.f) : std::string("none"));
      break;
    case OracleColumn::Kind::infeasible: line << " oracle=infeasible"; break;
    case OracleColumn::Kind::skipped: line << " oracle=skipped"; break;
  }
  out << line.str() << '\n';
  if (!r.message.empty()) err << r.message << '\n';
  write_output(a.trace, [&](std::ostream& os) { write_binary_csv(os, r, oracle); });
  write_output(a.report, [&](std::ostream& os) { os << line.str() << '\n'; });
  return r.best ? kOk : kSolverFailure;
}

struct CheckGradsArgs {
  std::string input;
  std::string kind = "qp";
  int points = 5;
  double rho = 1.7;
  double step = 1e-6;
  std::uint64_t seed = 0;
  double tolerance = 1e-5;
};

inline int cmd_check_grads(const CheckGradsArgs& a, const FlagSettings& flags, std::ostream& out,
                           std::ostream&) {
  Settings s;
  Problem problem;
  if (a.kind == "qp") {
    const io::Json j = io::read_json_file(a.input);
    problem = qp_problem(qp_from_json(j));
    apply_file_settings(j, s);
  } else if (a.kind == "minlp") {
    const io::Json j = a.input.empty() ? io::Json{{"builtin", "knapsack2"}}
                                       : io::read_json_file(a.input);
    problem = binarize(binary_from_json(j).problem);
    apply_file_settings(j, s);
  } else {
    MpcScenario sc = double_integrator_scenario();
    if (!a.input.empty()) {
      const io::Json j = io::read_json_file(a.input);
      sc = scenario_from_json(j);
      apply_file_settings(j, s);
    }
    problem = qp_problem(instantiate(sc.condensed(), sc.xi0));
  }
  apply_flags(flags, s);
  validate(s);
  if (a.points < 1) throw ParseError("points", "must be >= 1");

  std::mt19937_64 rng(a.seed);
  std::uniform_real_distribution<double> coord(-1.0, 2.0);
  double worst = 0.0;
  for (int p = 0; p < a.points; ++p) {
    Vector x(problem.n);
    for (int i = 0; i < problem.n; ++i) x(i) = coord(rng);
    const GradientReport g = check_gradients(problem, x, a.step);
    const double w = check_weighted_gradient(problem, x, a.rho, s.params.penalty, a.step);
    out << "point=" << p << " objective=" << fmt(g.objective_error)
        << " constraints=" << fmt(g.constraint_error) << " weighted=" << fmt(w) << '\n';
    worst = std::max({worst, g.worst(), w});
  }
  out << "worst=" << fmt(worst) << '\n';
  return worst <= a.tolerance ? kOk : kSolverFailure;
}

// --- entry point ------------------------------------------------------------------

/// Parses argv and runs one subcommand; all output goes to `out` and `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Penalty-flow solver for constrained optimization"};
  app.require_subcommand(1);

  SolveQpArgs qp_args;
  FlagSettings qp_flags;
  CLI::App* qp = app.add_subcommand("solve-qp", "solve a QP file by integrating the flow");
  qp->add_option("input", qp_args.input, "QP file")->required();
  qp->add_option("--trace", qp_args.trace, "trajectory CSV output");
  qp->add_option("--report", qp_args.report, "one-line report output");
  add_solver_flags(*qp, qp_flags);

  BenchArgs bench_args;
  FlagSettings bench_flags;
  CLI::App* bench = app.add_subcommand("bench", "random QP benchmark against the oracle");
  bench->add_option("--count", bench_args.count, "number of instances");
  bench->add_option("--n", bench_args.n, "decision variables");
  bench->add_option("--nc", bench_args.nc, "constraints");
  bench->add_option("--seed", bench_args.seed, "seed of the first instance");
  bench->add_flag("!--no-timing", bench_args.timing, "write 0 in the millis column");
  bench->add_option("--trace", bench_args.trace, "per-instance psi and f/f* trajectories CSV");
  bench->add_option("--report", bench_args.report, "per-instance results CSV");
  add_solver_flags(*bench, bench_flags);

  MpcArgs mpc_args;
  FlagSettings mpc_flags;
  CLI::App* mpc = app.add_subcommand("mpc", "closed-loop MPC simulation");
  mpc->add_option("input", mpc_args.input, "scenario file (default: built-in double integrator)");
  mpc->add_option("--steps", mpc_args.steps, "number of control steps");
  mpc->add_flag("--cold", mpc_args.cold, "start every solve at the origin");
  mpc->add_flag("--check-oracle", mpc_args.check_oracle, "compare every step with the oracle");
  mpc->add_option("--trace", mpc_args.trace, "closed-loop trace CSV");
  mpc->add_option("--report", mpc_args.report, "one-line report output");
  add_solver_flags(*mpc, mpc_flags);

  MinlpArgs minlp_args;
  FlagSettings minlp_flags;
  CLI::App* minlp = app.add_subcommand("minlp", "binary problem by deflation");
  minlp->add_option("input", minlp_args.input, "binary problem file");
  minlp->add_option("--builtin", minlp_args.builtin, "built-in instance")
      ->check(CLI::IsMember({"knapsack2", "random"}));
  minlp->add_option("--n", minlp_args.n, "variables of the random instance");
  minlp->add_option("--seed", minlp_args.seed, "seed of the random instance");
  minlp->add_flag("--knapsack", minlp_args.knapsack, "add a knapsack row to the random instance");
  minlp->add_option("--max-minima", minlp_args.max_minima, "deflation rounds (default min(2^n, 64))");
  minlp->add_option("--mu-defl", minlp_args.mu_defl, "bump strength");
  minlp->add_option("--trace", minlp_args.trace, "deflation report CSV");
  minlp->add_option("--report", minlp_args.report, "one-line summary output");
  add_solver_flags(*minlp, minlp_flags);

  CheckGradsArgs cg_args;
  FlagSettings cg_flags;
  CLI::App* cg = app.add_subcommand("check-grads", "compare analytic gradients with differences");
  cg->add_option("input", cg_args.input, "problem file");
  cg->add_option("--kind", cg_args.kind, "problem family")
      ->check(CLI::IsMember({"qp", "minlp", "mpc"}));
  cg->add_option("--points", cg_args.points, "random points in [-1, 2]^n");
  cg->add_option("--rho", cg_args.rho, "penalty weight for the weighted-cost check");
  cg->add_option("--step", cg_args.step, "central-difference step");
  cg->add_option("--seed", cg_args.seed, "seed for the points");
  cg->add_option("--tolerance", cg_args.tolerance, "largest accepted relative error");
  add_solver_flags(*cg, cg_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*qp) return cmd_solve_qp(qp_args, qp_flags, out, err);
    if (*bench) return cmd_bench(bench_args, bench_flags, out, err);
    if (*mpc) return cmd_mpc(mpc_args, mpc_flags, out, err);
    if (*minlp) return cmd_minlp(minlp_args, minlp_flags, out, err);
    if (cg_args.kind == "qp" && cg_args.input.empty()) {
      throw ParseError("input", "a QP file is required for --kind qp");
    }
    return cmd_check_grads(cg_args, cg_flags, out, err);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const OracleError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kSolverFailure;
  }
}

}  // namespace penflow::cli
