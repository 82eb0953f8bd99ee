#include <gtest/gtest.h>

#include <penflow/cli.hpp>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace penflow;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "penflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string data(const std::string& name) { return std::string(PENFLOW_TEST_DATA) + "/" + name; }

double field(const std::string& line, const std::string& key) {
  const std::regex re(key + "=([^ \n]+)");
  std::smatch m;
  if (!std::regex_search(line, m, re)) return std::nan("");
  return std::stod(m[1]);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class TempDir {
 public:
  TempDir() {
    path_ = std::filesystem::temp_directory_path() /
            ("penflow_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

void write(const std::string& path, const std::string& text) {
  std::ofstream(path) << text;
}

}  // namespace

TEST(CliSolveQp, HalfspaceFile) {
  TempDir dir;
  const CliRun r = run_cli({"solve-qp", data("halfspace.json"), "--trace", dir.file("t.csv"),
                         "--report", dir.file("r.txt")});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("status=converged"), std::string::npos);
  EXPECT_NEAR(field(r.out, "f"), 0.5, 1e-3);
  EXPECT_LE(field(r.out, "stationarity"), 1e-3);
  EXPECT_EQ(slurp(dir.file("r.txt")), r.out);
  const std::string trace = slurp(dir.file("t.csv"));
  EXPECT_EQ(trace.substr(0, trace.find('\n')), "t,rho,psi,g,f,fbar,x0,x1");
}

TEST(CliSolveQp, MalformedFileNamesField) {
  const CliRun r = run_cli({"solve-qp", data("malformed.json")});
  EXPECT_EQ(r.code, cli::kConfigError);
  EXPECT_NE(r.err.find("'F'"), std::string::npos) << r.err;
}

TEST(CliSolveQp, MissingFileAndBadJson) {
  EXPECT_EQ(run_cli({"solve-qp", data("does-not-exist.json")}).code, cli::kConfigError);
  TempDir dir;
  write(dir.file("bad.json"), "{ not json");
  EXPECT_EQ(run_cli({"solve-qp", dir.file("bad.json")}).code, cli::kConfigError);
}

TEST(CliSolveQp, LargeGammaWarnsButSucceeds) {
  const CliRun r = run_cli({"solve-qp", data("halfspace.json"), "--gamma", "1"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.err.find("gamma may be too large"), std::string::npos) << r.err;
  const CliRun quiet = run_cli({"solve-qp", data("halfspace.json")});
  EXPECT_EQ(quiet.err.find("gamma"), std::string::npos);
}

TEST(CliSolveQp, SolverFailureExitCode) {
  const CliRun r = run_cli({"solve-qp", data("halfspace.json"), "--max-steps", "3"});
  EXPECT_EQ(r.code, cli::kSolverFailure);
  EXPECT_NE(r.out.find("step_budget_exhausted"), std::string::npos);
}

TEST(CliSolveQp, FlagsOverrideFileSettings) {
  TempDir dir;
  const std::string body =
      R"("n": 2, "nc": 1, "H": [[1, 0], [0, 1]], "F": [0, 0], "A": [[-1, 0]], "B": [-1])";
  write(dir.file("s.json"), "{" + body + R"(, "settings": {"max_steps": 3}})");
  EXPECT_EQ(run_cli({"solve-qp", dir.file("s.json")}).code, cli::kSolverFailure);
  EXPECT_EQ(run_cli({"solve-qp", dir.file("s.json"), "--max-steps", "100000"}).code, cli::kOk);

  write(dir.file("u.json"), "{" + body + R"(, "settings": {"speed": 3}})");
  const CliRun unknown = run_cli({"solve-qp", dir.file("u.json")});
  EXPECT_EQ(unknown.code, cli::kConfigError);
  EXPECT_NE(unknown.err.find("settings.speed"), std::string::npos);
}

TEST(CliSolveQp, InvalidFlagValues) {
  EXPECT_EQ(run_cli({"solve-qp", data("halfspace.json"), "--mode", "fast"}).code,
            cli::kConfigError);
  EXPECT_EQ(run_cli({"solve-qp", data("halfspace.json"), "--lambda", "-1"}).code,
            cli::kConfigError);
  EXPECT_EQ(run_cli({"solve-qp", data("halfspace.json"), "--unknown"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kOk);
}

TEST(CliBench, OneDimensionalCase) {
  TempDir dir;
  const CliRun r = run_cli({"bench", "--count", "1", "--n", "1", "--nc", "1", "--report",
                         dir.file("b.csv"), "--trace", dir.file("tr.csv")});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  const std::string csv = slurp(dir.file("b.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(slurp(dir.file("tr.csv")).substr(0, 17), "seed,t,psi,ratio\n");
}

TEST(CliBench, RefusesOracleBound) {
  const CliRun r = run_cli({"bench", "--nc", "30"});
  EXPECT_EQ(r.code, cli::kConfigError);
  EXPECT_NE(r.err.find("nc"), std::string::npos);
}

TEST(CliBench, FailingSeedsAreListed) {
  const CliRun r = run_cli({"bench", "--count", "2", "--n", "3", "--nc", "4", "--max-steps", "2"});
  EXPECT_EQ(r.code, cli::kSolverFailure);
  EXPECT_NE(r.err.find("failing seeds: 0 1"), std::string::npos) << r.err;
}

TEST(CliBench, NoTimingIsByteIdentical) {
  TempDir dir;
  for (const char* name : {"a.csv", "b.csv"}) {
    ASSERT_EQ(run_cli({"bench", "--count", "3", "--n", "5", "--nc", "6", "--seed", "9",
                       "--no-timing", "--report", dir.file(name)})
                  .code,
              cli::kOk);
  }
  EXPECT_EQ(slurp(dir.file("a.csv")), slurp(dir.file("b.csv")));
}

TEST(CliMpc, BuiltinScenario) {
  TempDir dir;
  const CliRun r = run_cli({"mpc", "--check-oracle", "--trace", dir.file("m.csv")});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_LE(field(r.out, "max_abs_u"), 0.5 + 1e-6);
  EXPECT_LE(field(r.out, "max_oracle_gap"), 1e-2);
  const std::string csv = slurp(dir.file("m.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 61);
}

TEST(CliMpc, ScenarioFiles) {
  TempDir dir;
  io::Json j = scenario_to_json(double_integrator_scenario());
  j["steps"] = 4;
  j["xi0"] = {0.0, 0.0};
  write(dir.file("rest.json"), j.dump());
  const CliRun rest = run_cli({"mpc", dir.file("rest.json"), "--trace", dir.file("rest.csv")});
  EXPECT_EQ(rest.code, cli::kOk) << rest.err;
  EXPECT_EQ(field(rest.out, "max_abs_u"), 0.0);

  j["xi0"] = {1.0, 0.0};
  j["u_max"] = 0.0;
  write(dir.file("zero.json"), j.dump());
  const CliRun zero = run_cli({"mpc", dir.file("zero.json")});
  EXPECT_EQ(zero.code, cli::kOk) << zero.err;

  j.erase("plant");
  write(dir.file("bad.json"), j.dump());
  const CliRun bad = run_cli({"mpc", dir.file("bad.json")});
  EXPECT_EQ(bad.code, cli::kConfigError);
  EXPECT_NE(bad.err.find("plant"), std::string::npos);
}

TEST(CliMinlp, Knapsack2) {
  TempDir dir;
  const CliRun r = run_cli({"minlp", "--builtin", "knapsack2", "--trace", dir.file("k.csv")});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("best=01 "), std::string::npos) << r.out;
  EXPECT_EQ(field(r.out, "gap"), 0.0);
  const std::string csv = slurp(dir.file("k.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "s,x_s,f_original,native_feasible,neighbor,status,gap");
}

TEST(CliMinlp, InfeasibleNatives) {
  TempDir dir;
  write(dir.file("inf.json"),
        R"({"n": 2, "H": [[0, 0], [0, 0]], "F": [1, 1], "nc": 1, "A": [[1, 1]], "B": [-1]})");
  const CliRun r = run_cli({"minlp", dir.file("inf.json")});
  EXPECT_EQ(r.code, cli::kSolverFailure);
  EXPECT_NE(r.out.find("oracle=infeasible"), std::string::npos);
}

TEST(CliMinlp, LargeInstanceSkipsOracle) {
  TempDir dir;
  const CliRun r = run_cli({"minlp", "--builtin", "random", "--n", "25", "--seed", "3", "--trace",
                         dir.file("big.csv")});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("oracle=skipped"), std::string::npos);
  EXPECT_NE(slurp(dir.file("big.csv")).find(",skipped\n"), std::string::npos);
}

TEST(CliMinlp, ReportsAreByteIdentical) {
  TempDir dir;
  for (const char* name : {"a.csv", "b.csv"}) {
    ASSERT_EQ(run_cli({"minlp", "--builtin", "random", "--n", "6", "--seed", "2", "--trace",
                       dir.file(name)})
                  .code,
              cli::kOk);
  }
  EXPECT_EQ(slurp(dir.file("a.csv")), slurp(dir.file("b.csv")));
}

TEST(CliCheckGrads, AllKinds) {
  const CliRun qp = run_cli({"check-grads", data("halfspace.json")});
  EXPECT_EQ(qp.code, cli::kOk) << qp.err;
  EXPECT_LE(field(qp.out, "worst"), 1e-5);
  EXPECT_EQ(run_cli({"check-grads", "--kind", "minlp"}).code, cli::kOk);
  EXPECT_EQ(run_cli({"check-grads", "--kind", "mpc", "--points", "2"}).code, cli::kOk);
  EXPECT_EQ(run_cli({"check-grads"}).code, cli::kConfigError);
  EXPECT_EQ(run_cli({"check-grads", "--kind", "nope"}).code, cli::kConfigError);
}
