#pragma once

// Simulation harness: AR(1) designs with sparse Laplace coefficients,
// replicates that compare the lasso, refitted least squares and the
// conditional MLE on the selected model, and aggregate metrics.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <ostream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "postsel/error.hpp"
#include "postsel/lasso_core.hpp"
#include "postsel/lasso_postsel.hpp"
#include "postsel/rng.hpp"
#include "postsel/stats.hpp"

namespace postsel {

inline constexpr int kSimSchemaVersion = 1;

enum class Method { Lasso, Refitted, Conditional };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::Lasso: return "lasso";
    case Method::Refitted: return "refitted";
    case Method::Conditional: return "conditional";
  }
  return "unknown";
}

inline Method parse_method(std::string_view s) {
  if (s == "lasso") return Method::Lasso;
  if (s == "refitted") return Method::Refitted;
  if (s == "conditional") return Method::Conditional;
  throw Error(ErrorKind::Config, "method must be one of lasso, refitted, conditional");
}

inline constexpr Method kAllMethods[] = {Method::Lasso, Method::Refitted, Method::Conditional};

// Ascent budget used by the simulations: shorter polish than the library
// default, which is sized for single fits.
inline AscentOptions simulation_ascent() {
  AscentOptions o;
  o.n_steps = 1000;
  o.quantile_samples = 2000;
  o.polish_samples = 4000;
  o.polish_rounds = 3;
  return o;
}

struct SimConfig {
  int n = 200;
  int p = 50;
  int k = 2;
  double rho = 0.5;
  double snr = 0.8;
  int reps = 1;
  std::uint64_t seed = 1;
  LambdaRule lambda_rule = LambdaRule::Min;
  int cv_folds = 10;
  double ci_level = 0.95;
  // The lasso is always fitted: it defines M and is the baseline of the
  // relative metrics. This list only controls the other two.
  std::vector<Method> methods{Method::Lasso, Method::Refitted, Method::Conditional};
  ImputationStrategy::Kind imputation = ImputationStrategy::Kind::Zero;
  AscentOptions ascent = simulation_ascent();

  bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

  void validate() const {
    if (n < 2 || p < 1) throw Error(ErrorKind::Config, "need n >= 2 and p >= 1");
    if (k < 0 || k > p) throw Error(ErrorKind::Config, "k must lie in [0, p]");
    if (!(rho >= 0.0 && rho < 1.0)) throw Error(ErrorKind::Config, "rho must lie in [0, 1)");
    if (!(snr > 0.0) || !std::isfinite(snr)) throw Error(ErrorKind::Config, "snr must be positive and finite");
    if (reps < 1) throw Error(ErrorKind::Config, "reps must be at least 1");
    if (cv_folds < 2 || cv_folds > n) throw Error(ErrorKind::Config, "cv_folds must lie in [2, n]");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw Error(ErrorKind::Config, "ci_level must lie in (0, 1)");
    if (has(Method::Conditional)) {
      const double alpha = 1.0 - ci_level;
      if (static_cast<double>(ascent.quantile_samples) < 100.0 / alpha - 1e-9)
        throw Error(ErrorKind::Config, "quantile_samples must be at least 100 / (1 - ci_level)");
      if (ascent.n_steps == 0) throw Error(ErrorKind::Config, "ascent steps must be positive");
    }
  }
};

// ---------------------------------------------------------------------------
// Data generation.

// Rows i.i.d. N(0, Sigma) with Sigma_ij = rho^|i-j|, by the AR(1) recursion.
template <class URBG>
Eigen::MatrixXd gen_design(int n, int p, double rho, URBG& rng) {
  if (!(rho >= 0.0 && rho < 1.0)) throw Error(ErrorKind::InvalidArgument, "rho must lie in [0, 1)");
  const double innov = std::sqrt(1.0 - rho * rho);
  Eigen::MatrixXd X(n, p);
  for (Index i = 0; i < n; ++i) {
    double prev = standard_normal(rng);
    if (p > 0) X(i, 0) = prev;
    for (Index j = 1; j < p; ++j) {
      prev = rho * prev + innov * standard_normal(rng);
      X(i, j) = prev;
    }
  }
  return X;
}

// k coordinates chosen uniformly without replacement get Laplace(0, 1) draws.
template <class URBG>
Eigen::VectorXd gen_coefs(int p, int k, URBG& rng) {
  if (k < 0 || k > p) throw Error(ErrorKind::InvalidArgument, "k must lie in [0, p]");
  std::vector<Index> idx(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) idx[static_cast<std::size_t>(j)] = j;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int i = 0; i < k; ++i) {
    const auto left = static_cast<std::size_t>(p - i);
    const auto pick = std::min(left - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(left)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i) + pick]);
    beta(idx[static_cast<std::size_t>(i)]) = laplace(rng);
  }
  return beta;
}

struct Response {
  Eigen::VectorXd y;
  Eigen::VectorXd mu;
  double sigma2 = 1.0;
  bool zero_signal = false;  // Var(mu) = 0, sigma2 set to 1
};

// mu = X beta, sigma2 = sample variance of mu / snr, y = mu + N(0, sigma2 I).
template <class URBG>
Response gen_response(const Eigen::MatrixXd& X, const Eigen::VectorXd& beta, double snr, URBG& rng) {
  if (!(snr > 0.0) || !std::isfinite(snr))
    throw Error(ErrorKind::InvalidArgument, "snr must be positive and finite");
  Response r;
  r.mu = X * beta;
  const Index n = r.mu.size();
  const double var = n > 1 ? (r.mu.array() - r.mu.mean()).square().sum() / static_cast<double>(n - 1) : 0.0;
  if (var > 0.0) {
    r.sigma2 = var / snr;
  } else {
    r.sigma2 = 1.0;
    r.zero_signal = true;
  }
  const double sd = std::sqrt(r.sigma2);
  r.y = r.mu;
  for (Index i = 0; i < n; ++i) r.y(i) += sd * standard_normal(rng);
  return r;
}

// ---------------------------------------------------------------------------
// Replicates.

struct MethodResult {
  Method method = Method::Lasso;
  Eigen::VectorXd estimate;   // over M
  Eigen::VectorXd sq_error;   // (estimate - target)^2 over M
  double prediction_error = 0.0;  // |X beta_hat - mu|^2
  bool has_ci = false;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  std::vector<int> covered;   // 1 iff lower <= target <= upper
  Eigen::VectorXd length;     // upper - lower, +inf when unbounded
};

struct RepResult {
  std::uint64_t rep_id = 0;
  std::size_t selected_size = 0;
  double lambda = 0.0;
  double sigma2_true = 0.0;
  double sigma2_hat = std::numeric_limits<double>::quiet_NaN();
  bool zero_signal = false;
  std::vector<Index> active;
  Eigen::VectorXd target;  // beta0(y) = (X_M'X_M)^-1 X_M' mu
  std::vector<MethodResult> methods;
  // Largest |score residual| / MC stderr over the conditional estimate's
  // coordinates not pinned at zero; NaN when not computed.
  double score_max_z = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;

  bool null_selection() const { return selected_size == 0; }
  const MethodResult* find(Method m) const {
    for (const auto& r : methods)
      if (r.method == m) return &r;
    return nullptr;
  }
};

namespace detail {

inline MethodResult score_method(Method m, const Eigen::VectorXd& est, const Eigen::MatrixXd& xm,
                                 const Eigen::VectorXd& mu, const Eigen::VectorXd& target) {
  MethodResult r;
  r.method = m;
  r.estimate = est;
  r.sq_error = (est - target).array().square().matrix();
  r.prediction_error = (xm * est - mu).squaredNorm();
  return r;
}

inline void attach_ci(MethodResult& r, const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                      const Eigen::VectorXd& target) {
  r.has_ci = true;
  r.lower = lower;
  r.upper = upper;
  const Index m = target.size();
  r.covered.resize(static_cast<std::size_t>(m));
  r.length.resize(m);
  for (Index j = 0; j < m; ++j) {
    r.covered[static_cast<std::size_t>(j)] = lower(j) <= target(j) && target(j) <= upper(j);
    const double len = upper(j) - lower(j);
    r.length(j) = std::isfinite(len) ? len : std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

inline RepResult run_replicate(const SimConfig& cfg, std::uint64_t rep_id) {
  const auto start = std::chrono::steady_clock::now();
  RepResult out;
  out.rep_id = rep_id;
  try {
    Rng design_rng = make_rng(cfg.seed, rep_id, "design");
    Rng coef_rng = make_rng(cfg.seed, rep_id, "coefs");
    Rng noise_rng = make_rng(cfg.seed, rep_id, "noise");
    Dataset data;
    data.X = gen_design(cfg.n, cfg.p, cfg.rho, design_rng);
    const Eigen::VectorXd beta = gen_coefs(cfg.p, cfg.k, coef_rng);
    Response resp = gen_response(data.X, beta, cfg.snr, noise_rng);
    data.y = resp.y;
    out.sigma2_true = resp.sigma2;
    out.zero_signal = resp.zero_signal;

    const CvResult cv = cv_lambda(data, cfg.cv_folds, lambda_grid(data), cfg.lambda_rule,
                                  derive_seed(cfg.seed, rep_id, "cv"));
    const LassoFit fit = fit_lasso(data, cv.lambda);
    out.lambda = cv.lambda;
    out.active = fit.active;
    out.selected_size = fit.active.size();
    if (fit.active.empty()) {
      out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      return out;
    }

    const Eigen::MatrixXd xm = detail::columns(data.X, fit.active);
    const Eigen::MatrixXd ginv = gram_inverse(xm);
    out.target = ginv * (xm.transpose() * resp.mu);
    const Index m = static_cast<Index>(fit.active.size());
    const double alpha = 1.0 - cfg.ci_level;

    Eigen::VectorXd lasso_est(m);
    for (Index j = 0; j < m; ++j) lasso_est(j) = fit.beta(fit.active[static_cast<std::size_t>(j)]);
    out.methods.push_back(detail::score_method(Method::Lasso, lasso_est, xm, resp.mu, out.target));

    if (cfg.has(Method::Refitted) || cfg.has(Method::Conditional)) out.sigma2_hat = sigma2_lasso(data, fit);
    if (cfg.has(Method::Refitted)) {
      const Eigen::VectorXd eta = ginv * (xm.transpose() * data.y);
      MethodResult r = detail::score_method(Method::Refitted, eta, xm, resp.mu, out.target);
      const Intervals ci = refitted_wald_ci(data, fit.active, out.sigma2_hat, alpha);
      detail::attach_ci(r, ci.lower, ci.upper, out.target);
      out.methods.push_back(std::move(r));
    }
    if (cfg.has(Method::Conditional)) {
      ImputationStrategy strategy{cfg.imputation, {}};
      if (cfg.imputation == ImputationStrategy::Kind::Truth)
        strategy.truth = selection_event(data.X, fit).A0 * resp.mu;
      AscentOptions opts = cfg.ascent;
      opts.ci_level = cfg.ci_level;
      Rng sampler_rng = make_rng(cfg.seed, rep_id, "sampler");
      const LassoConditionalFit cf = fit_lasso_mle(data, fit, out.sigma2_hat, strategy, opts, sampler_rng);
      MethodResult r = detail::score_method(Method::Conditional, cf.beta_hat, xm, resp.mu, out.target);
      detail::attach_ci(r, cf.ci_lower, cf.ci_upper, out.target);
      out.methods.push_back(std::move(r));
      double zmax = 0.0;
      for (Index j = 0; j < m; ++j) {
        if (cf.beta_hat(j) == 0.0) continue;
        zmax = std::max(zmax, std::abs(cf.score_residual(j) / cf.score_stderr(j)));
      }
      out.score_max_z = zmax;
    }
  } catch (const Error& e) {
    throw Error(e.kind(), "replicate " + std::to_string(rep_id) + ": " + e.detail());
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// Replicates 0..reps-1 on up to `workers` threads; results are in rep order
// and do not depend on the number of workers. The first failure is rethrown
// after all workers stop.
inline std::vector<RepResult> run_simulation(const SimConfig& cfg, unsigned workers = 1) {
  cfg.validate();
  const auto reps = static_cast<std::size_t>(cfg.reps);
  std::vector<RepResult> results(reps);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t r = next.fetch_add(1);
      if (r >= reps || failed.load()) return;
      try {
        results[r] = run_replicate(cfg, r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
        return;
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(reps)));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return results;
}

// ---------------------------------------------------------------------------
// Aggregation.

struct MeanSe {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

struct MethodAggregate {
  Method method = Method::Lasso;
  // log2 of the summed squared error over M against the lasso's. A per-coordinate
  // log would be -inf whenever a pinned estimate hits a zero target exactly.
  MeanSe rel_mse;
  MeanSe rel_pred;  // log2 relative prediction error against the lasso
  std::size_t covered = 0;
  std::size_t coordinates = 0;
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double median_length = std::numeric_limits<double>::quiet_NaN();  // median of per-replicate medians
  double log2_length_ratio = std::numeric_limits<double>::quiet_NaN();  // against refitted
  double log2_length_ratio_se = std::numeric_limits<double>::quiet_NaN();  // bootstrap
};

struct Aggregate {
  std::size_t reps = 0;
  std::size_t null_selections = 0;
  double mean_selected_size = 0.0;
  std::size_t score_checked = 0;
  std::size_t score_above_4 = 0;  // replicates whose conditional score_max_z > 4
  std::vector<MethodAggregate> methods;

  const MethodAggregate* find(Method m) const {
    for (const auto& r : methods)
      if (r.method == m) return &r;
    return nullptr;
  }
};

namespace detail {

inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe out;
  out.count = v.size();
  if (v.empty()) return out;
  double sum = 0.0;
  for (double x : v) sum += x;
  out.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return out;
}

inline double median_of(const Eigen::VectorXd& v) {
  return stats::median(std::vector<double>(v.data(), v.data() + v.size()));
}

inline constexpr std::size_t kBootstrapResamples = 500;
inline constexpr std::uint64_t kBootstrapSeed = 0x6d6f6d73ULL;

}  // namespace detail

// Metrics over the replicates with a nonempty selection. Results are sorted
// by rep_id first, so the output does not depend on their order.
inline Aggregate aggregate(std::vector<RepResult> results) {
  if (results.empty()) throw Error(ErrorKind::InvalidArgument, "no replicates to aggregate");
  std::sort(results.begin(), results.end(),
            [](const RepResult& a, const RepResult& b) { return a.rep_id < b.rep_id; });
  Aggregate agg;
  agg.reps = results.size();
  double size_sum = 0.0;
  for (const auto& r : results) {
    size_sum += static_cast<double>(r.selected_size);
    if (r.null_selection()) ++agg.null_selections;
    if (!std::isnan(r.score_max_z)) {
      ++agg.score_checked;
      if (r.score_max_z > 4.0) ++agg.score_above_4;
    }
  }
  agg.mean_selected_size = size_sum / static_cast<double>(results.size());

  // Per-replicate median CI lengths, aligned by replicate, for the ratio.
  std::vector<std::vector<double>> medians(std::size(kAllMethods));
  std::vector<std::vector<bool>> present(std::size(kAllMethods));
  for (std::size_t mi = 0; mi < std::size(kAllMethods); ++mi) {
    const Method method = kAllMethods[mi];
    MethodAggregate ma;
    ma.method = method;
    std::vector<double> rel_mse, rel_pred;
    bool seen = false;
    for (const auto& r : results) {
      const MethodResult* mr = r.find(method);
      const MethodResult* base = r.find(Method::Lasso);
      medians[mi].push_back(std::numeric_limits<double>::quiet_NaN());
      present[mi].push_back(false);
      if (!mr || !base || r.null_selection()) continue;
      seen = true;
      rel_mse.push_back(std::log2(mr->sq_error.sum()) - std::log2(base->sq_error.sum()));
      rel_pred.push_back(std::log2(mr->prediction_error) - std::log2(base->prediction_error));
      if (mr->has_ci) {
        for (int c : mr->covered) ma.covered += static_cast<std::size_t>(c);
        ma.coordinates += mr->covered.size();
        medians[mi].back() = detail::median_of(mr->length);
        present[mi].back() = true;
      }
    }
    if (!seen) continue;
    ma.rel_mse = detail::mean_se(rel_mse);
    ma.rel_pred = detail::mean_se(rel_pred);
    if (ma.coordinates > 0) {
      ma.coverage = static_cast<double>(ma.covered) / static_cast<double>(ma.coordinates);
      std::vector<double> meds;
      for (std::size_t i = 0; i < results.size(); ++i)
        if (present[mi][i]) meds.push_back(medians[mi][i]);
      ma.median_length = stats::median(meds);
    }
    agg.methods.push_back(ma);
  }

  // log2 ratio of median-of-medians against the refitted intervals, with a
  // bootstrap standard error over replicates.
  const std::size_t ref = 1;  // index of Method::Refitted in kAllMethods
  for (auto& ma : agg.methods) {
    if (!(ma.coordinates > 0)) continue;
    const auto mi = static_cast<std::size_t>(std::find(std::begin(kAllMethods), std::end(kAllMethods), ma.method) -
                                             std::begin(kAllMethods));
    std::vector<std::size_t> both;
    for (std::size_t i = 0; i < results.size(); ++i)
      if (present[mi][i] && present[ref][i]) both.push_back(i);
    if (both.empty()) continue;
    auto ratio = [&](const std::vector<std::size_t>& rows) {
      std::vector<double> a, b;
      for (std::size_t i : rows) a.push_back(medians[mi][i]), b.push_back(medians[ref][i]);
      return std::log2(stats::median(a)) - std::log2(stats::median(b));
    };
    ma.log2_length_ratio = ratio(both);
    if (both.size() > 1) {
      Rng rng(detail::kBootstrapSeed);
      std::vector<double> boots;
      std::vector<std::size_t> rows(both.size());
      for (std::size_t b = 0; b < detail::kBootstrapResamples; ++b) {
        for (auto& row : rows) {
          const auto pick = std::min(both.size() - 1,
                                     static_cast<std::size_t>(uniform01(rng) * static_cast<double>(both.size())));
          row = both[pick];
        }
        boots.push_back(ratio(rows));
      }
      ma.log2_length_ratio_se = detail::mean_se(boots).se * std::sqrt(static_cast<double>(boots.size()));
    }
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Output.

namespace detail {

inline std::string fmt(double x) {
  if (std::isnan(x)) return "";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline nlohmann::json json_number(double x) {
  if (std::isnan(x)) return nullptr;
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

}  // namespace detail

// One row per replicate; wall times are left out so the table is a pure
// function of the config. Per-method columns are empty when the method was not
// run or the replicate selected nothing; log2_sq_error is log2 of the summed
// squared error over M.
inline void write_replicates_csv(std::ostream& os, const std::vector<RepResult>& results) {
  os << "schema_version,rep_id,selected_size,lambda,sigma2_true,sigma2_hat,zero_signal,score_max_z";
  for (Method m : kAllMethods) {
    const std::string p = to_string(m);
    os << ',' << p << "_log2_sq_error," << p << "_prediction_error," << p << "_covered," << p
       << "_median_length";
  }
  os << '\n';
  for (const auto& r : results) {
    os << kSimSchemaVersion << ',' << r.rep_id << ',' << r.selected_size << ',' << detail::fmt(r.lambda) << ','
       << detail::fmt(r.sigma2_true) << ',' << detail::fmt(r.sigma2_hat) << ',' << (r.zero_signal ? 1 : 0) << ','
       << detail::fmt(r.score_max_z);
    for (Method m : kAllMethods) {
      const MethodResult* mr = r.find(m);
      if (!mr) {
        os << ",,,,";
        continue;
      }
      os << ',' << detail::fmt(std::log2(mr->sq_error.sum())) << ','
         << detail::fmt(mr->prediction_error) << ',';
      if (mr->has_ci) {
        int c = 0;
        for (int v : mr->covered) c += v;
        os << c << ',' << detail::fmt(detail::median_of(mr->length));
      } else {
        os << ',';
      }
    }
    os << '\n';
  }
}

// One row per selected coordinate of every replicate: the columns needed to
// redraw per-coordinate error and interval plots.
inline void write_coordinates_csv(std::ostream& os, const std::vector<RepResult>& results) {
  os << "schema_version,rep_id,variable,target";
  for (Method m : kAllMethods) {
    const std::string p = to_string(m);
    os << ',' << p << "_estimate," << p << "_lower," << p << "_upper";
  }
  os << '\n';
  for (const auto& r : results) {
    for (std::size_t j = 0; j < r.active.size(); ++j) {
      const auto jj = static_cast<Index>(j);
      os << kSimSchemaVersion << ',' << r.rep_id << ',' << r.active[j] << ',' << detail::fmt(r.target(jj));
      for (Method m : kAllMethods) {
        const MethodResult* mr = r.find(m);
        if (!mr) {
          os << ",,,";
          continue;
        }
        os << ',' << detail::fmt(mr->estimate(jj)) << ',';
        if (mr->has_ci) os << detail::fmt(mr->lower(jj)) << ',' << detail::fmt(mr->upper(jj));
        else os << ',';
      }
      os << '\n';
    }
  }
}

inline nlohmann::json config_json(const SimConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  return {{"schema_version", kSimSchemaVersion},
          {"n", c.n},
          {"p", c.p},
          {"k", c.k},
          {"rho", c.rho},
          {"snr", c.snr},
          {"reps", c.reps},
          {"seed", c.seed},
          {"lambda_rule", to_string(c.lambda_rule)},
          {"cv_folds", c.cv_folds},
          {"ci_level", c.ci_level},
          {"methods", methods},
          {"imputation", to_string(c.imputation)},
          {"ascent",
           {{"n_steps", c.ascent.n_steps},
            {"quantile_samples", c.ascent.quantile_samples},
            {"burn_in", c.ascent.burn_in},
            {"thin", c.ascent.thin},
            {"polish_rounds", c.ascent.polish_rounds},
            {"polish_samples", c.ascent.polish_samples},
            {"step_exponent", c.ascent.step_exponent}}}};
}

// Reads a config object; absent keys keep their defaults and unknown keys
// are rejected.
inline SimConfig parse_config(const nlohmann::json& j, SimConfig c = {}) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "simulation config must be a JSON object");
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "schema_version") {
        if (val.get<int>() != kSimSchemaVersion)
          throw Error(ErrorKind::Config, "unsupported schema_version " + val.dump());
      } else if (key == "n") c.n = val.get<int>();
      else if (key == "p") c.p = val.get<int>();
      else if (key == "k") c.k = val.get<int>();
      else if (key == "rho") c.rho = val.get<double>();
      else if (key == "snr") c.snr = val.get<double>();
      else if (key == "reps") c.reps = val.get<int>();
      else if (key == "seed") c.seed = val.get<std::uint64_t>();
      else if (key == "lambda_rule") c.lambda_rule = parse_lambda_rule(val.get<std::string>());
      else if (key == "cv_folds") c.cv_folds = val.get<int>();
      else if (key == "ci_level") c.ci_level = val.get<double>();
      else if (key == "imputation") c.imputation = parse_imputation(val.get<std::string>());
      else if (key == "methods") {
        c.methods.clear();
        for (const auto& m : val) c.methods.push_back(parse_method(m.get<std::string>()));
      } else if (key == "ascent") {
        for (const auto& [ak, av] : val.items()) {
          if (ak == "n_steps") c.ascent.n_steps = av.get<std::size_t>();
          else if (ak == "quantile_samples") c.ascent.quantile_samples = av.get<std::size_t>();
          else if (ak == "burn_in") c.ascent.burn_in = av.get<std::size_t>();
          else if (ak == "thin") c.ascent.thin = av.get<std::size_t>();
          else if (ak == "polish_rounds") c.ascent.polish_rounds = av.get<std::size_t>();
          else if (ak == "polish_samples") c.ascent.polish_samples = av.get<std::size_t>();
          else if (ak == "step_exponent") c.ascent.step_exponent = av.get<double>();
          else throw Error(ErrorKind::Config, "unknown ascent key '" + ak + "'");
        }
      } else {
        throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json aggregate_json(const Aggregate& a, const SimConfig& c) {
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& m : a.methods) {
    methods[to_string(m.method)] = {
        {"rel_mse_log2", {{"mean", detail::json_number(m.rel_mse.mean)}, {"se", detail::json_number(m.rel_mse.se)}, {"count", m.rel_mse.count}}},
        {"rel_pred_log2", {{"mean", detail::json_number(m.rel_pred.mean)}, {"se", detail::json_number(m.rel_pred.se)}, {"count", m.rel_pred.count}}},
        {"coverage", detail::json_number(m.coverage)},
        {"covered", m.covered},
        {"coordinates", m.coordinates},
        {"median_length", detail::json_number(m.median_length)},
        {"log2_length_ratio", detail::json_number(m.log2_length_ratio)},
        {"log2_length_ratio_se", detail::json_number(m.log2_length_ratio_se)}};
  }
  return {{"schema_version", kSimSchemaVersion},
          {"config", config_json(c)},
          {"reps", a.reps},
          {"null_selections", a.null_selections},
          {"mean_selected_size", a.mean_selected_size},
          {"score_checked", a.score_checked},
          {"score_above_4", a.score_above_4},
          {"methods", methods}};
}

}  // namespace postsel
