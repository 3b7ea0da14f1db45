#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"

using namespace postsel;
namespace fs = std::filesystem;

namespace {

fs::path data_dir() {
  const char* d = std::getenv("POSTSEL_DATA_DIR");
  return d ? fs::path(d) : fs::path("data");
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("postsel_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "postsel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Format, RoundTripsDoubles) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> e(-300, 300);
  for (int i = 0; i < 10000; ++i) {
    const double x = std::ldexp(std::uniform_real_distribution<double>(-1, 1)(gen), static_cast<int>(e(gen)));
    EXPECT_EQ(*cli::parse_double(cli::fmt(x)), x);
  }
  EXPECT_EQ(*cli::parse_double(cli::fmt(-std::numeric_limits<double>::infinity())),
            -std::numeric_limits<double>::infinity());
  EXPECT_FALSE(cli::parse_double("1.5x"));
  EXPECT_FALSE(cli::parse_double(""));
}

TEST(ReadCsv, ReportsLineAndField) {
  std::istringstream ok("a,b\n1,2\n3,4e-1\n");
  const auto t = cli::read_csv(ok, "ok.csv");
  EXPECT_EQ(t.names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(t.values(1, 1), 0.4);

  std::istringstream bad("a,b\n1,2\n3,oops\n");
  try {
    cli::read_csv(bad, "bad.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
    EXPECT_NE(std::string(e.what()).find("bad.csv:3: field 2 ('b')"), std::string::npos) << e.what();
  }
  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(cli::read_csv(ragged, "r.csv"), Error);
}

TEST(ExitCodes, StableContract) {
  EXPECT_EQ(cli::exit_code(ErrorKind::NoSelection), 2);
  EXPECT_EQ(cli::exit_code(ErrorKind::RankDeficient), 3);
  EXPECT_EQ(cli::exit_code(ErrorKind::SingularCovariance), 3);
  EXPECT_EQ(cli::exit_code(ErrorKind::Parse), 4);
  EXPECT_EQ(cli::exit_code(ErrorKind::Config), 4);
  EXPECT_EQ(cli::exit_code(ErrorKind::NonConvergence), 1);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"no-such-command"}).code, 4);
  EXPECT_EQ(run({"lasso-mle"}).code, 4);  // --data is required
}

TEST(TmvnSample, Figure2SpecRunsEndToEnd) {
  const fs::path out = scratch("fig2");
  const auto r = run({"tmvn-sample", "--spec", (data_dir() / "figure2_tmvn.json").string(), "-o", out.string(),
                      "--samples", "500"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto t = cli::read_csv(out / "samples.csv");
  EXPECT_EQ(t.values.rows(), 500);
  for (Index i = 0; i < t.values.rows(); ++i) {
    EXPECT_LE(std::abs(t.values(i, 0)), 1.65);
    EXPECT_GE(std::abs(t.values(i, 1)), 1.65);
  }
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST(TmvnSample, UnboundedRegionsGiveTheMean) {
  const fs::path out = scratch("free");
  write(out / "spec.json",
        R"({"schema_version": 1, "mu": [1.0, -2.0], "sigma": [[1, 0.3], [0.3, 2]],
            "regions": [{"kind": "inside"}, {"kind": "inside", "lower": null, "upper": "inf"}]})");
  const auto r = run({"tmvn-sample", "--spec", (out / "spec.json").string(), "-o", out.string(), "--samples", "20000",
                      "--seed", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto t = cli::read_csv(out / "samples.csv");
  // Gibbs draws are autocorrelated; allow a generous 6 iid standard errors.
  EXPECT_NEAR(t.values.col(0).mean(), 1.0, 6 * std::sqrt(1.0 / 20000));
  EXPECT_NEAR(t.values.col(1).mean(), -2.0, 6 * std::sqrt(2.0 / 20000));
}

TEST(TmvnSample, MalformedJsonIsAParseError) {
  const fs::path out = scratch("bad");
  write(out / "spec.json", "{\"mu\": [1, 2");
  const auto r = run({"tmvn-sample", "--spec", (out / "spec.json").string(), "-o", out.string()});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("parse-error"), std::string::npos);
}

TEST(NormalMeans, Figure4FixtureRowsMatchSelection) {
  const fs::path out = scratch("fig4");
  const auto r = run({"normal-means", "--problem", (data_dir() / "figure4_problem.json").string(), "--y",
                      (data_dir() / "figure4_y.csv").string(), "-o", out.string(), "--seed", "11"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto y = cli::read_csv(data_dir() / "figure4_y.csv");
  const Index selected = (y.values.col(0).array().abs() >= 1.65).count();
  const auto t = cli::read_csv(out / "normal_means.csv");
  EXPECT_EQ(t.values.rows(), selected);
  EXPECT_GE(t.column("mu"), 0);
  const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m["config"]["alpha"], 0.05);
}

TEST(NormalMeans, EmptySelectionExitsTwo) {
  const fs::path out = scratch("empty");
  write(out / "y.csv", "y\n0.1\n-0.2\n");
  const auto r = run({"normal-means", "--problem", (data_dir() / "figure2_problem.json").string(), "--y",
                      (out / "y.csv").string(), "-o", out.string()});
  EXPECT_EQ(r.code, 2);
}

TEST(NormalMeans, FixedSeedIsDeterministicAndReplayable) {
  const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  const std::vector<std::string> base = {"normal-means", "--problem", (data_dir() / "figure2_problem.json").string(),
                                         "--y", (data_dir() / "figure2_y.csv").string(), "--seed", "77"};
  auto args = base;
  args.insert(args.end(), {"-o", a.string()});
  ASSERT_EQ(run(args).code, 0);
  args = base;
  args.insert(args.end(), {"-o", b.string()});
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(slurp(a / "normal_means.csv"), slurp(b / "normal_means.csv"));
  ASSERT_EQ(run({"replay", (a / "manifest.json").string(), "-o", c.string()}).code, 0);
  EXPECT_EQ(slurp(a / "normal_means.csv"), slurp(c / "normal_means.csv"));
}

TEST(Seed, EnvironmentFallback) {
  const fs::path out = scratch("env");
  setenv("POSTSEL_SEED", "4242", 1);
  const auto r = run({"tmvn-sample", "--spec", (data_dir() / "figure2_tmvn.json").string(), "-o", out.string(),
                      "--samples", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(out / "manifest.json"))["seed"], 4242);
  setenv("POSTSEL_SEED", "not-a-number", 1);
  EXPECT_EQ(run({"tmvn-sample", "--spec", (data_dir() / "figure2_tmvn.json").string(), "-o", out.string()}).code, 4);
  unsetenv("POSTSEL_SEED");
}

TEST(LassoMle, LargeLambdaIsAnEmptyModel) {
  const fs::path out = scratch("lmax");
  const auto r = run({"lasso-mle", "--data", (data_dir() / "appendix_b.csv").string(), "--lambda", "1e9", "-o",
                      out.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("empty model"), std::string::npos);
}

TEST(LassoMle, SaturatedSelectionExitsThree) {
  const fs::path out = scratch("sat");
  // n = 4 and p = 6: at this penalty the lasso keeps four variables.
  const std::string text =
      "y,a,b,c,d,e,f\n"
      "1.2881847531554629,1.449445608699771,0.06633580893826191,-0.7645436509716318,-1.0921732151041414,"
      "0.03133451683171687,-1.022103170010873\n"
      "-1.4368294451025299,0.19931197648375384,0.13337460465860485,0.5464683003382316,-0.9139709437353126,"
      "0.005005283626572444,-0.06474176037268789\n"
      "-1.5058290012607418,0.5379971786610338,0.32071110099884825,2.389112043240686,0.20296917730996422,"
      "-0.14470230816492052,1.2327571750289237\n"
      "0.1987912481934255,0.9090310261532091,-0.3655442662325168,0.21817181336058245,1.024288678487018,"
      "0.6962470224529616,0.1284722486328564\n";
  write(out / "d.csv", text);
  const auto r = run({"lasso-mle", "--data", (out / "d.csv").string(), "--lambda", "0.05", "-o", out.string()});
  EXPECT_EQ(r.code, 3) << r.err;
}

TEST(LassoMle, Example4FixtureUnderOneMinute) {
  const fs::path out = scratch("ex4");
  const auto start = std::chrono::steady_clock::now();
  const auto r = run({"lasso-mle", "--data", (data_dir() / "example4.csv").string(), "-o", out.string()});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_LT(secs, 60.0);
  // The first column holds variable names; parse the rest as numbers.
  std::ifstream in(out / "lasso_mle.csv");
  std::string line, numeric;
  while (std::getline(in, line)) numeric += line.substr(line.find(',') + 1) + '\n';
  std::istringstream ns(numeric);
  const auto t = cli::read_csv(ns, "lasso_mle.csv");
  EXPECT_GT(t.values.rows(), 0);
  for (Index i = 0; i < t.values.rows(); ++i) {
    EXPECT_LE(t.values(i, t.column("conditional_lower")), t.values(i, t.column("conditional_upper")));
    EXPECT_LE(t.values(i, t.column("wald_lower")), t.values(i, t.column("wald_upper")));
  }
  const auto m = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m["config"]["imputation"], "zero");
  EXPECT_EQ(m["inputs"][0]["sha256"].get<std::string>().size(), 64u);
}

TEST(Simulate, SmokeRunAndLassoOnly) {
  const fs::path out = scratch("sim");
  auto r = run({"simulate", "--n", "60", "--p", "10", "--k", "2", "--reps", "1", "--methods", "lasso", "-o",
                out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto agg = nlohmann::json::parse(slurp(out / "aggregate.json"));
  EXPECT_EQ(agg["schema_version"], 1);
  EXPECT_EQ(agg["reps"], 1);
  EXPECT_EQ(agg["score_checked"], 0);  // the conditional fit never ran
  EXPECT_FALSE(agg["methods"].contains("conditional"));
  EXPECT_EQ(run({"simulate", "--k", "60", "--p", "10", "-o", out.string()}).code, 4);
  EXPECT_EQ(run({"simulate", "--methods", "ridge", "-o", out.string()}).code, 4);
}

TEST(Simulate, GridRunsEachConfigAndReplays) {
  const fs::path out = scratch("grid"), again = scratch("grid_again");
  write(out / "grid.json", R"({"schema_version": 1, "configs": [
      {"name": "a", "config": {"n": 50, "p": 8, "k": 2, "reps": 2, "cv_folds": 5, "methods": ["lasso", "refitted"]}},
      {"name": "b", "config": {"n": 80, "p": 8, "k": 2, "reps": 2, "cv_folds": 5,
                               "methods": ["lasso", "conditional"],
                               "ascent": {"n_steps": 100, "polish_rounds": 1, "polish_samples": 500}}}]})");
  const auto r = run({"simulate", "--grid", (out / "grid.json").string(), "-o", out.string(), "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"a", "b"}) {
    EXPECT_TRUE(fs::exists(out / name / "replicates.csv"));
    EXPECT_TRUE(fs::exists(out / name / "aggregate.json"));
    EXPECT_TRUE(fs::exists(out / name / "manifest.json"));
  }
  ASSERT_EQ(run({"replay", (out / "b" / "manifest.json").string(), "-o", again.string()}).code, 0);
  EXPECT_EQ(slurp(out / "b" / "replicates.csv"), slurp(again / "replicates.csv"));
  EXPECT_EQ(slurp(out / "b" / "coordinates.csv"), slurp(again / "coordinates.csv"));
}

TEST(Simulate, ReplayRejectsChangedInputs) {
  const fs::path out = scratch("changed");
  write(out / "cfg.json", R"({"n": 50, "p": 8, "k": 2, "reps": 1, "cv_folds": 5, "methods": ["lasso"]})");
  ASSERT_EQ(run({"simulate", "--config", (out / "cfg.json").string(), "-o", out.string()}).code, 0);
  write(out / "cfg.json", R"({"n": 51})");
  EXPECT_EQ(run({"replay", (out / "manifest.json").string(), "-o", (out / "r").string()}).code, 4);
}
