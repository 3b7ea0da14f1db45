#pragma once

// Command-line front end. Every command resolves its flags into a JSON
// config, runs from that config alone and writes a manifest next to its
// outputs, so `replay` can rerun any manifest bit-for-bit.

#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "postsel/error.hpp"
#include "postsel/lasso_core.hpp"
#include "postsel/lasso_postsel.hpp"
#include "postsel/normal_means.hpp"
#include "postsel/rng.hpp"
#include "postsel/sim_harness.hpp"
#include "postsel/truncated_gaussian.hpp"

namespace postsel::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::uint64_t kDefaultSeed = 1;

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kEmptySelection = 2,
  kLinearAlgebra = 3,
  kConfig = 4,
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NoSelection:
    case ErrorKind::NotSelected:
      return kEmptySelection;
    case ErrorKind::RankDeficient:
    case ErrorKind::SingularCovariance:
    case ErrorKind::SaturatedModel:
      return kLinearAlgebra;
    case ErrorKind::Parse:
    case ErrorKind::Config:
    case ErrorKind::InvalidArgument:
    case ErrorKind::InvalidRegion:
    case ErrorKind::InvalidInit:
    case ErrorKind::InsufficientSamples:
    case ErrorKind::DimensionTooLarge:
    case ErrorKind::EmptyFold:
      return kConfig;
    default:
      return kInternal;
  }
}

// ---------------------------------------------------------------------------
// Numbers and CSV.

// Shortest decimal that reads back to the same double.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s == "inf" || s == "+inf" || s == "Inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf" || s == "-Inf") return -std::numeric_limits<double>::infinity();
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

struct Table {
  std::vector<std::string> names;
  Eigen::MatrixXd values;  // rows x names.size()

  Index column(const std::string& name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return static_cast<Index>(j);
    return -1;
  }
};

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

// Numeric CSV with a header row. Errors name the file, line and field.
inline Table read_csv(std::istream& in, const std::string& origin) {
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Parse, origin + ": empty file, expected a header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  t.names = split_fields(line);
  for (std::size_t j = 0; j < t.names.size(); ++j)
    if (t.names[j].empty())
      throw Error(ErrorKind::Parse, origin + ":1: field " + std::to_string(j + 1) + " has an empty name");
  std::vector<double> vals;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != t.names.size())
      throw Error(ErrorKind::Parse, origin + ":" + std::to_string(lineno) + ": expected " +
                                        std::to_string(t.names.size()) + " fields, found " +
                                        std::to_string(fields.size()));
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const auto v = parse_double(fields[j]);
      if (!v)
        throw Error(ErrorKind::Parse, origin + ":" + std::to_string(lineno) + ": field " + std::to_string(j + 1) +
                                          " ('" + t.names[j] + "'): cannot parse '" + fields[j] + "' as a number");
      vals.push_back(*v);
    }
    ++rows;
  }
  const auto cols = static_cast<Index>(t.names.size());
  t.values.resize(static_cast<Index>(rows), cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (Index j = 0; j < cols; ++j) t.values(static_cast<Index>(r), j) = vals[r * t.names.size() + static_cast<std::size_t>(j)];
  return t;
}

inline Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Parse, path.string() + ": cannot open");
  return read_csv(in, path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Parse, path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Parse, path.string() + ": " + e.what());
  }
}

// Reads a JSON number, allowing "inf" / "-inf" strings and null for infinity
// of the given sign.
inline double json_double(const json& v, double null_value, const std::string& what) {
  if (v.is_number()) return v.get<double>();
  if (v.is_null()) return null_value;
  if (v.is_string()) {
    if (auto d = parse_double(v.get<std::string>())) return *d;
  }
  throw Error(ErrorKind::Parse, what + ": expected a number, got " + v.dump());
}

inline Eigen::VectorXd json_vector(const json& v, const std::string& what) {
  if (!v.is_array()) throw Error(ErrorKind::Parse, what + ": expected an array");
  Eigen::VectorXd out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out(static_cast<Index>(i)) = json_double(v[i], std::numeric_limits<double>::quiet_NaN(),
                                             what + "[" + std::to_string(i) + "]");
  return out;
}

// A full matrix as an array of rows, or {"dim", "diagonal", "offdiag"} for an
// equicorrelated one.
inline Eigen::MatrixXd json_matrix(const json& v, const std::string& what) {
  if (v.is_object()) {
    if (!v.contains("dim") || !v.contains("diagonal") || !v.contains("offdiag"))
      throw Error(ErrorKind::Parse, what + ": compact form needs dim, diagonal and offdiag");
    const auto p = v["dim"].get<Index>();
    Eigen::MatrixXd m = Eigen::MatrixXd::Constant(p, p, v["offdiag"].get<double>());
    m.diagonal().setConstant(v["diagonal"].get<double>());
    return m;
  }
  if (!v.is_array()) throw Error(ErrorKind::Parse, what + ": expected an array of rows");
  const auto p = static_cast<Index>(v.size());
  Eigen::MatrixXd m(p, p);
  for (Index i = 0; i < p; ++i) {
    const Eigen::VectorXd row = json_vector(v[static_cast<std::size_t>(i)], what + " row " + std::to_string(i));
    if (row.size() != p) throw Error(ErrorKind::Parse, what + ": matrix must be square");
    m.row(i) = row.transpose();
  }
  return m;
}

// A vector given as an array or as one scalar repeated `dim` times.
inline Eigen::VectorXd json_vector_or_scalar(const json& v, Index dim, double null_value, const std::string& what) {
  if (v.is_array()) {
    Eigen::VectorXd out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i)
      out(static_cast<Index>(i)) = json_double(v[i], null_value, what + "[" + std::to_string(i) + "]");
    return out;
  }
  return Eigen::VectorXd::Constant(dim, json_double(v, null_value, what));
}

inline void check_schema(const json& j, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorKind::Parse, what + ": expected a JSON object");
  if (j.contains("schema_version") && j["schema_version"] != kSchemaVersion)
    throw Error(ErrorKind::Config, what + ": unsupported schema_version " + j["schema_version"].dump());
}

// ---------------------------------------------------------------------------
// Manifests.

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Parse, path.string() + ": cannot open");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += hex[md[i] >> 4], out += hex[md[i] & 15];
  return out;
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Run {
  std::string command;
  json config;                    // fully resolved; input paths are absolute
  std::vector<fs::path> inputs;   // files whose digests go in the manifest
  fs::path out_dir;
};

inline void write_manifest(const Run& run, const fs::path& dir, const std::string& started) {
  json inputs = json::array();
  for (const auto& p : run.inputs) inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  const json m = {{"schema_version", kSchemaVersion},
                  {"command", run.command},
                  {"config", run.config},
                  {"seed", run.config.value("seed", json(nullptr))},
                  {"version", POSTSEL_VERSION},
                  {"started", started},
                  {"finished", utc_now()},
                  {"inputs", inputs}};
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Config, path.string() + ": cannot write");
  return out;
}

inline fs::path absolute_input(const std::string& p) {
  const fs::path path = fs::absolute(p).lexically_normal();
  if (!fs::is_regular_file(path)) throw Error(ErrorKind::Parse, p + ": no such file");
  return path;
}

// ---------------------------------------------------------------------------
// Commands: each runs from a resolved config.

inline TruncRegion parse_region(const json& r, const std::string& what) {
  if (!r.is_object() || !r.contains("kind")) throw Error(ErrorKind::Parse, what + ": expected {kind, lower, upper}");
  const std::string kind = r["kind"].get<std::string>();
  const double lo = json_double(r.value("lower", json(nullptr)), -normal::kInf, what + ".lower");
  const double hi = json_double(r.value("upper", json(nullptr)), normal::kInf, what + ".upper");
  if (kind == "inside") return TruncRegion::inside(lo, hi);
  if (kind == "outside") return TruncRegion::outside(lo, hi);
  throw Error(ErrorKind::Parse, what + ": kind must be inside or outside");
}

// A starting point in the regions: the mean moved to the nearest admissible
// point coordinate by coordinate.
inline Eigen::VectorXd default_init(const TmvnSpec& spec) {
  Eigen::VectorXd x = spec.mu;
  for (Index j = 0; j < x.size(); ++j) {
    const TruncRegion& r = spec.regions[static_cast<std::size_t>(j)];
    if (r.contains(x(j))) continue;
    if (r.is_inside()) {
      x(j) = std::clamp(x(j), r.lower(), r.upper());
    } else {
      const bool go_low = std::isfinite(r.lower()) && (!std::isfinite(r.upper()) || x(j) - r.lower() < r.upper() - x(j));
      x(j) = go_low ? r.lower() : r.upper();
    }
  }
  return x;
}

inline void run_tmvn_sample(const Run& run) {
  const json& c = run.config;
  const json spec_json = read_json(c["spec"].get<std::string>());
  check_schema(spec_json, "spec");
  TmvnSpec spec;
  spec.mu = json_vector(spec_json.at("mu"), "mu");
  spec.sigma = json_matrix(spec_json.at("sigma"), "sigma");
  const json& regions = spec_json.at("regions");
  for (std::size_t j = 0; j < regions.size(); ++j)
    spec.regions.push_back(parse_region(regions[j], "regions[" + std::to_string(j) + "]"));
  spec.validate();
  const Eigen::VectorXd init = spec_json.contains("init") ? json_vector(spec_json["init"], "init") : default_init(spec);
  Rng rng = make_rng(c["seed"].get<std::uint64_t>(), 0, "tmvn-sample");
  const Eigen::MatrixXd draws = sample_tmvn(spec, init, c["samples"].get<std::size_t>(),
                                            c["burn_in"].get<std::size_t>(), c["thin"].get<std::size_t>(), rng);
  auto out = open_out(run.out_dir / "samples.csv");
  for (Index j = 0; j < spec.dim(); ++j) out << (j ? "," : "") << 'x' << j + 1;
  out << '\n';
  for (Index i = 0; i < draws.rows(); ++i) {
    for (Index j = 0; j < draws.cols(); ++j) out << (j ? "," : "") << fmt(draws(i, j));
    out << '\n';
  }
}

inline AscentOptions ascent_from(const json& c) {
  AscentOptions o;
  o.n_steps = c["steps"].get<std::size_t>();
  o.quantile_samples = c["samples"].get<std::size_t>();
  o.ci_level = 1.0 - c["alpha"].get<double>();
  return o;
}

inline void run_normal_means(const Run& run) {
  const json& c = run.config;
  const json pj = read_json(c["problem"].get<std::string>());
  check_schema(pj, "problem");
  const Table yt = read_csv(fs::path(c["y"].get<std::string>()));
  const Index ycol = yt.column("y");
  if (ycol < 0) throw Error(ErrorKind::Parse, c["y"].get<std::string>() + ": no column named 'y'");
  NormalMeansProblem pr;
  pr.y = yt.values.col(ycol);
  const Index p = pr.y.size();
  pr.sigma = json_matrix(pj.at("sigma"), "sigma");
  pr.lower = json_vector_or_scalar(pj.at("lower"), p, -normal::kInf, "lower");
  pr.upper = json_vector_or_scalar(pj.at("upper"), p, normal::kInf, "upper");
  pr.validate();
  const double alpha = c["alpha"].get<double>();
  detail::check_alpha(alpha, c["samples"].get<std::size_t>());
  Rng rng = make_rng(c["seed"].get<std::uint64_t>(), 0, "normal-means");
  const ConditionalFit fit = fit_conditional_mle(pr, ascent_from(c), rng);
  const Intervals naive = naive_ci(pr, alpha);
  const Index mucol = yt.column("mu");
  auto out = open_out(run.out_dir / "normal_means.csv");
  out << "coordinate,observed,naive_lower,naive_upper,estimate,lower,upper,score_z" << (mucol >= 0 ? ",mu" : "")
      << '\n';
  for (std::size_t k = 0; k < fit.selection.size(); ++k) {
    const Index j = fit.selection.selected[k];
    const auto kk = static_cast<Index>(k);
    out << j << ',' << fmt(pr.y(j)) << ',' << fmt(naive.lower(kk)) << ',' << fmt(naive.upper(kk)) << ','
        << fmt(fit.estimate(j)) << ',' << fmt(fit.ci_lower(kk)) << ',' << fmt(fit.ci_upper(kk)) << ','
        << fmt(fit.score_residual(kk) / fit.score_stderr(kk));
    if (mucol >= 0) out << ',' << fmt(yt.values(j, mucol));
    out << '\n';
  }
}

inline Dataset dataset_from(const Table& t, const std::string& response, const std::string& origin,
                            std::vector<std::string>& names) {
  const Index yc = t.column(response);
  if (yc < 0) throw Error(ErrorKind::Parse, origin + ": no response column '" + response + "'");
  Dataset d;
  d.y = t.values.col(yc);
  d.X.resize(t.values.rows(), t.values.cols() - 1);
  Index k = 0;
  for (Index j = 0; j < t.values.cols(); ++j) {
    if (j == yc) continue;
    d.X.col(k++) = t.values.col(j);
    names.push_back(t.names[static_cast<std::size_t>(j)]);
  }
  d.validate();
  return d;
}

inline void run_lasso_mle(const Run& run) {
  const json& c = run.config;
  const std::string path = c["data"].get<std::string>();
  std::vector<std::string> names;
  const Dataset data = dataset_from(read_csv(fs::path(path)), c["response"].get<std::string>(), path, names);
  const std::uint64_t seed = c["seed"].get<std::uint64_t>();
  double lambda = 0.0;
  if (c["lambda"].is_number()) {
    lambda = c["lambda"].get<double>();
  } else {
    lambda = cv_lambda(data, c["cv_folds"].get<int>(), lambda_grid(data),
                       parse_lambda_rule(c["lambda_rule"].get<std::string>()), derive_seed(seed, 0, "cv"))
                 .lambda;
  }
  const LassoFit fit = fit_lasso(data, lambda);
  if (fit.active.empty()) throw Error(ErrorKind::NoSelection, "empty model: the lasso selected no variables");
  const double sigma2 = c["sigma2"].is_number() ? c["sigma2"].get<double>() : sigma2_lasso(data, fit);
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw Error(ErrorKind::Config, "sigma2 must be positive and finite");
  const double alpha = c["alpha"].get<double>();
  const Intervals wald = refitted_wald_ci(data, fit.active, sigma2, alpha);
  AscentOptions opts = ascent_from(c);
  detail::check_alpha(alpha, opts.quantile_samples);
  Rng rng = make_rng(seed, 0, "lasso-mle");
  const ImputationStrategy strategy{parse_imputation(c["imputation"].get<std::string>()), {}};
  const LassoConditionalFit cf = fit_lasso_mle(data, fit, sigma2, strategy, opts, rng);
  auto out = open_out(run.out_dir / "lasso_mle.csv");
  out << "variable,column,lambda,sigma2,lasso,refitted,conditional,conditional_lower,conditional_upper,wald_lower,"
         "wald_upper,score_z\n";
  for (std::size_t k = 0; k < fit.active.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    const Index j = fit.active[k];
    const double z = cf.score_residual(kk) / cf.score_stderr(kk);
    out << names[static_cast<std::size_t>(j)] << ',' << j << ',' << fmt(lambda) << ',' << fmt(sigma2) << ','
        << fmt(cf.beta_lasso(kk)) << ',' << fmt(cf.beta_init(kk)) << ',' << fmt(cf.beta_hat(kk)) << ','
        << fmt(cf.ci_lower(kk)) << ',' << fmt(cf.ci_upper(kk)) << ',' << fmt(wald.lower(kk)) << ','
        << fmt(wald.upper(kk)) << ',' << fmt(z) << '\n';
  }
}

// Runs one simulation config into `dir`. Wall-clock times go to a separate
// file so the other outputs are reproducible byte for byte.
inline void simulate_into(const SimConfig& cfg, unsigned workers, const fs::path& dir) {
  const auto results = run_simulation(cfg, workers);
  {
    auto out = open_out(dir / "replicates.csv");
    write_replicates_csv(out, results);
  }
  {
    auto out = open_out(dir / "coordinates.csv");
    write_coordinates_csv(out, results);
  }
  {
    auto out = open_out(dir / "timings.csv");
    out << "rep_id,wall_seconds\n";
    for (const auto& r : results) out << r.rep_id << ',' << fmt(r.wall_seconds) << '\n';
  }
  open_out(dir / "aggregate.json") << aggregate_json(aggregate(results), cfg).dump(2) << '\n';
}

inline std::string grid_dir_name(const json& entry, std::size_t i) {
  if (entry.contains("name")) return entry["name"].get<std::string>();
  return "config_" + std::to_string(i);
}

inline void run_simulate(const Run& run) {
  const json& c = run.config;
  const auto workers = c["workers"].get<unsigned>();
  if (c.contains("grid")) {
    const json& grid = c["grid"];
    // Validate everything before running anything.
    std::vector<SimConfig> cfgs;
    for (const auto& entry : grid) cfgs.push_back(parse_config(entry["config"]));
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      const fs::path dir = run.out_dir / grid[i]["name"].get<std::string>();
      fs::create_directories(dir);
      const std::string started = utc_now();
      simulate_into(cfgs[i], workers, dir);
      Run sub{run.command, {{"config", grid[i]["config"]}, {"workers", workers}, {"seed", cfgs[i].seed}}, run.inputs, dir};
      write_manifest(sub, dir, started);
    }
  } else {
    simulate_into(parse_config(c["config"]), workers, run.out_dir);
  }
}

inline void execute(const Run& run) {
  fs::create_directories(run.out_dir);
  const std::string started = utc_now();
  if (run.command == "tmvn-sample") run_tmvn_sample(run);
  else if (run.command == "normal-means") run_normal_means(run);
  else if (run.command == "lasso-mle") run_lasso_mle(run);
  else if (run.command == "simulate") run_simulate(run);
  else throw Error(ErrorKind::Config, "unknown command '" + run.command + "'");
  write_manifest(run, run.out_dir, started);
}

// Re-runs a manifest after checking that its inputs are unchanged.
inline Run replay_run(const fs::path& manifest_path, const fs::path& out_dir) {
  const json m = read_json(manifest_path);
  check_schema(m, "manifest");
  Run run;
  try {
    run.command = m.at("command").get<std::string>();
    run.config = m.at("config");
    for (const auto& in : m.at("inputs")) {
      const fs::path p = in.at("path").get<std::string>();
      if (!fs::is_regular_file(p)) throw Error(ErrorKind::Config, p.string() + ": input recorded in the manifest is missing");
      if (sha256_file(p) != in.at("sha256").get<std::string>())
        throw Error(ErrorKind::Config, p.string() + ": input changed since the manifest was written");
      run.inputs.push_back(p);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, manifest_path.string() + ": " + e.what());
  }
  run.out_dir = out_dir;
  return run;
}

// ---------------------------------------------------------------------------
// Flag parsing.

// --seed, then POSTSEL_SEED, then the built-in default.
inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("POSTSEL_SEED")) {
    std::uint64_t v = 0;
    const std::string_view s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
      throw Error(ErrorKind::Config, "POSTSEL_SEED must be an unsigned 64-bit integer, got '" + std::string(s) + "'");
    return v;
  }
  return kDefaultSeed;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Selective inference after thresholding and lasso selection"};
  app.set_version_flag("--version", std::string(POSTSEL_VERSION));
  app.require_subcommand(1);

  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  double alpha = 0.05;
  std::size_t steps = 1000, samples = 2000;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-o,--out-dir", out_dir, "Directory for outputs and manifest.json")->capture_default_str();
    sub->add_option("--seed", seed, "RNG seed (default: $POSTSEL_SEED, else 1)");
  };
  auto add_ascent = [&](CLI::App* sub) {
    sub->add_option("--alpha", alpha, "Miscoverage level of the intervals")->capture_default_str()->check(CLI::Range(1e-6, 1.0));
    sub->add_option("--steps", steps, "Stochastic ascent steps")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--samples", samples, "Samples for the interval quantiles")->capture_default_str()->check(CLI::PositiveNumber);
  };

  std::string spec_path;
  std::size_t tmvn_samples = 1000, burn_in = 200, thin = 1;
  auto* tmvn = app.add_subcommand("tmvn-sample", "Gibbs samples from a truncated multivariate normal");
  tmvn->add_option("--spec", spec_path, "JSON with mu, sigma, regions and optional init")->required();
  tmvn->add_option("--samples", tmvn_samples, "Number of recorded states")->capture_default_str();
  tmvn->add_option("--burn-in", burn_in, "Sweeps discarded first")->capture_default_str();
  tmvn->add_option("--thin", thin, "Sweeps per recorded state")->capture_default_str()->check(CLI::PositiveNumber);
  add_common(tmvn);

  std::string problem_path, y_path;
  auto* nm = app.add_subcommand("normal-means", "Conditional MLE and intervals after thresholding normal means");
  nm->add_option("--problem", problem_path, "JSON with sigma, lower and upper thresholds")->required();
  nm->add_option("--y", y_path, "CSV with a column 'y' (and optionally 'mu')")->required();
  add_ascent(nm);
  add_common(nm);

  std::string data_path, response = "y", lambda_rule = "min", sigma2 = "lasso", imputation = "zero";
  std::optional<double> lambda;
  int cv_folds = 10;
  auto* lm = app.add_subcommand("lasso-mle", "Conditional MLE and intervals after lasso selection");
  lm->add_option("--data", data_path, "CSV with a header; the response column plus predictors")->required();
  lm->add_option("--response", response, "Name of the response column")->capture_default_str();
  auto* lambda_opt = lm->add_option("--lambda", lambda, "Penalty; chosen by cross-validation when absent")->check(CLI::NonNegativeNumber);
  lm->add_option("--cv-folds", cv_folds, "Cross-validation folds")->capture_default_str()->excludes(lambda_opt);
  lm->add_option("--lambda-rule", lambda_rule, "min or 1se")->capture_default_str()->check(CLI::IsMember({"min", "1se"}))->excludes(lambda_opt);
  lm->add_option("--sigma2", sigma2, "Noise variance: 'lasso' or a positive value")->capture_default_str();
  lm->add_option("--imputation", imputation, "Inactive-score imputation")->capture_default_str()->check(CLI::IsMember({"zero", "plugin", "none"}));
  add_ascent(lm);
  add_common(lm);

  std::string config_path, grid_path, methods;
  std::optional<int> n, p, k, reps;
  std::optional<double> rho, snr;
  unsigned workers = 1;
  auto* sim = app.add_subcommand("simulate", "Simulation study comparing lasso, refitted and conditional estimates");
  auto* config_opt = sim->add_option("--config", config_path, "SimConfig JSON");
  sim->add_option("--grid", grid_path, "JSON list of {name, config} run in sequence")->excludes(config_opt);
  sim->add_option("--n", n, "Sample size");
  sim->add_option("--p", p, "Number of predictors");
  sim->add_option("--k", k, "Number of nonzero coefficients");
  sim->add_option("--rho", rho, "AR(1) correlation of the predictors");
  sim->add_option("--snr", snr, "Signal-to-noise ratio");
  sim->add_option("--reps", reps, "Replicates");
  sim->add_option("--methods", methods, "Comma list from lasso, refitted, conditional");
  sim->add_option("--workers", workers, "Replicates run in parallel")->capture_default_str()->check(CLI::PositiveNumber);
  add_common(sim);

  std::string manifest_path;
  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay->add_option("manifest", manifest_path, "manifest.json from an earlier run")->required();
  replay->add_option("-o,--out-dir", out_dir, "Directory for the reproduced outputs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      // --help and --version
      app.exit(e, out, err);
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    Run r;
    r.out_dir = out_dir;
    if (*replay) {
      r = replay_run(manifest_path, out_dir);
    } else if (*tmvn) {
      const auto spec = absolute_input(spec_path);
      r.command = "tmvn-sample";
      r.inputs = {spec};
      r.config = {{"spec", spec.string()}, {"samples", tmvn_samples}, {"burn_in", burn_in}, {"thin", thin},
                  {"seed", resolve_seed(seed)}};
    } else if (*nm) {
      const auto prob = absolute_input(problem_path), y = absolute_input(y_path);
      r.command = "normal-means";
      r.inputs = {prob, y};
      r.config = {{"problem", prob.string()}, {"y", y.string()}, {"alpha", alpha}, {"steps", steps},
                  {"samples", samples}, {"seed", resolve_seed(seed)}};
    } else if (*lm) {
      const auto data = absolute_input(data_path);
      r.command = "lasso-mle";
      r.inputs = {data};
      json s2 = "lasso";
      if (sigma2 != "lasso") {
        const auto v = parse_double(sigma2);
        if (!v || !(*v > 0.0)) throw Error(ErrorKind::Config, "--sigma2 must be 'lasso' or a positive number");
        s2 = *v;
      }
      r.config = {{"data", data.string()}, {"response", response},
                  {"lambda", lambda ? json(*lambda) : json(nullptr)}, {"cv_folds", cv_folds},
                  {"lambda_rule", lambda_rule}, {"sigma2", s2}, {"imputation", imputation},
                  {"alpha", alpha}, {"steps", steps}, {"samples", samples}, {"seed", resolve_seed(seed)}};
    } else if (*sim) {
      r.command = "simulate";
      if (!grid_path.empty()) {
        const auto g = absolute_input(grid_path);
        r.inputs = {g};
        json grid = read_json(g);
        if (grid.is_object()) {
          check_schema(grid, "grid");
          grid = grid.value("configs", json::array());
        }
        if (!grid.is_array() || grid.empty()) throw Error(ErrorKind::Config, "grid must list at least one config");
        json resolved = json::array();
        for (std::size_t i = 0; i < grid.size(); ++i) {
          json cfg = grid[i].contains("config") ? grid[i]["config"] : grid[i];
          cfg.erase("name");
          SimConfig base;
          base.seed = resolve_seed(seed);
          SimConfig parsed = parse_config(cfg, base);
          if (seed) parsed.seed = *seed;
          resolved.push_back({{"name", grid_dir_name(grid[i], i)}, {"config", config_json(parsed)}});
        }
        r.config = {{"grid", resolved}, {"workers", workers}};
      } else {
        SimConfig cfg;
        cfg.seed = resolve_seed(seed);
        if (!config_path.empty()) {
          const auto cp = absolute_input(config_path);
          r.inputs = {cp};
          cfg = parse_config(read_json(cp), cfg);
          if (seed) cfg.seed = *seed;
        }
        if (n) cfg.n = *n;
        if (p) cfg.p = *p;
        if (k) cfg.k = *k;
        if (rho) cfg.rho = *rho;
        if (snr) cfg.snr = *snr;
        if (reps) cfg.reps = *reps;
        if (!methods.empty()) {
          cfg.methods.clear();
          for (const auto& m : split_list(methods)) cfg.methods.push_back(parse_method(m));
        }
        cfg.validate();
        r.config = {{"config", config_json(cfg)}, {"workers", workers}, {"seed", cfg.seed}};
      }
    }
    execute(r);
    out << "wrote " << fs::path(r.out_dir).string() << '\n';
    return kOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    err << "error: parse-error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << '\n';
    return kInternal;
  }
}

}  // namespace postsel::cli
