#pragma once

// Conditional maximum likelihood for normal means selected by coordinate-wise
// thresholds: the selection rule, the plug-in stochastic-ascent estimator,
// conditional-Wald and naive intervals, the exact univariate estimator, and
// quadrature diagnostics for p <= 2.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include "postsel/error.hpp"
#include "postsel/normal.hpp"
#include "postsel/rng.hpp"
#include "postsel/stats.hpp"
#include "postsel/truncated_gaussian.hpp"

namespace postsel {

using Index = Eigen::Index;

struct NormalMeansProblem {
  Eigen::VectorXd y;
  Eigen::MatrixXd sigma;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  Index dim() const { return y.size(); }

  // l_j == u_j is accepted and means "always selected".
  void validate() const {
    const Index p = y.size();
    if (p == 0) throw Error(ErrorKind::InvalidArgument, "empty observation vector");
    if (sigma.rows() != p || sigma.cols() != p || lower.size() != p || upper.size() != p)
      throw Error(ErrorKind::InvalidArgument, "y, sigma and thresholds must agree in dimension");
    for (Index j = 0; j < p; ++j)
      if (std::isnan(lower(j)) || std::isnan(upper(j)) || lower(j) > upper(j))
        throw Error(ErrorKind::InvalidArgument, "thresholds require lower <= upper");
    check_symmetric(sigma);
    if (sigma.llt().info() != Eigen::Success)
      throw Error(ErrorKind::SingularCovariance, "covariance is not positive definite");
  }
};

struct Selection {
  std::vector<Index> selected;

  bool empty() const { return selected.empty(); }
  std::size_t size() const { return selected.size(); }
  bool contains(Index j) const {
    return std::binary_search(selected.begin(), selected.end(), j);
  }
};

// Coordinate j is selected when y_j <= l_j or y_j >= u_j.
inline Selection select(const NormalMeansProblem& problem) {
  Selection s;
  for (Index j = 0; j < problem.dim(); ++j)
    if (problem.y(j) <= problem.lower(j) || problem.y(j) >= problem.upper(j))
      s.selected.push_back(j);
  return s;
}

// Truncation region of coordinate j under the selection event.
inline TruncRegion selection_region(const NormalMeansProblem& problem, const Selection& sel,
                                    Index j) {
  const double l = problem.lower(j), u = problem.upper(j);
  if (sel.contains(j)) {
    if (l == u) return TruncRegion::unbounded();
    return TruncRegion::outside(l, u);
  }
  return TruncRegion::inside(l, u);
}

// gamma_i = scale / i^exponent. Any exponent in (1/2, 1] gives a divergent
// sum with a summable square.
struct StepSchedule {
  double scale = 1.0;
  double exponent = 0.51;

  double operator()(std::size_t i) const {
    return scale / std::pow(static_cast<double>(i), exponent);
  }
};

struct AscentOptions {
  std::size_t n_steps = 1000;
  std::size_t gibbs_cycles_per_step = 1;
  // Step scale a; when unset, 1 / max(diag(Sigma^-1)) for normal means and
  // 1 / ||X_M^T X_M||_2 for the lasso.
  std::optional<double> step_scale;
  double step_exponent = 0.51;
  std::size_t quantile_samples = 2000;
  std::size_t burn_in = 200;
  std::size_t thin = 2;
  double ci_level = 0.95;
  // Fraction of trailing iterates averaged into the returned estimate.
  double average_fraction = 0.2;
  // Newton corrections after the ascent: each draws polish_samples states
  // at the estimate and moves it by V^-1 times the Monte-Carlo score, V being
  // the sample covariance of the sufficient statistic (the score's Jacobian).
  std::size_t polish_rounds = 3;
  // Draws per polish round; larger than quantile_samples so the last
  // correction's own Monte-Carlo error stays well below the final one's.
  std::size_t polish_samples = 8000;
};

struct Intervals {
  std::vector<Index> coords;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
};

struct ConditionalFit {
  Selection selection;
  Eigen::VectorXd estimate;          // length p; equals y off the selection
  Eigen::VectorXd ci_lower;          // over the selection
  Eigen::VectorXd ci_upper;
  Eigen::MatrixXd samples;           // N x p post-convergence chain states
  Eigen::MatrixXd quantile_samples;  // N x |M| pivot draws
  Eigen::VectorXd score_residual;    // (Sigma^-1 (y - mean(samples)))_M
  Eigen::VectorXd score_stderr;      // MC standard error of the residual
  Eigen::MatrixXd trajectory;        // n_steps x |M| ascent iterates
  std::size_t steps = 0;
  std::size_t degenerate_count = 0;
};

namespace detail {

inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::SingularCovariance, "matrix is not positive definite");
  return llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

inline std::size_t averaging_start(std::size_t n_steps, double fraction) {
  const auto tail = static_cast<std::size_t>(
      std::ceil(std::clamp(fraction, 0.0, 1.0) * static_cast<double>(n_steps)));
  return n_steps - std::max<std::size_t>(tail, 1);
}

// Empirical pivot quantiles -> (estimate - q_hi, estimate - q_lo).
inline void pivot_intervals(const Eigen::MatrixXd& pivots, const Eigen::VectorXd& estimate,
                            double alpha, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
  const Index m = pivots.cols();
  lo.resize(m);
  hi.resize(m);
  for (Index k = 0; k < m; ++k) {
    const double q_lo = stats::quantile(pivots.col(k), alpha / 2.0);
    const double q_hi = stats::quantile(pivots.col(k), 1.0 - alpha / 2.0);
    lo(k) = estimate(k) - q_hi;
    hi(k) = estimate(k) - q_lo;
  }
}

inline void check_alpha(double alpha, std::size_t n_samples) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "alpha must lie in (0, 1]");
  if (static_cast<double>(n_samples) < 100.0 / alpha - 1e-9)
    throw Error(ErrorKind::InsufficientSamples, "need at least 100/alpha pivot samples");
}

}  // namespace detail

// Conditional-Wald intervals from the post-convergence samples stored in
// `fit`: pivots V^-1 (Sigma^-1 (y* - mean y*))_M with V the sample covariance
// of (Sigma^-1 y*)_M. Also stores the pivots in fit.quantile_samples.
inline Intervals conditional_ci(ConditionalFit& fit, const NormalMeansProblem& problem,
                                double alpha) {
  const auto n = static_cast<std::size_t>(fit.samples.rows());
  detail::check_alpha(alpha, n);
  const auto& sel = fit.selection.selected;
  const Index m = static_cast<Index>(sel.size());
  const Eigen::MatrixXd precision = detail::spd_inverse(problem.sigma);
  Eigen::MatrixXd prec_rows(m, problem.dim());
  for (Index k = 0; k < m; ++k) prec_rows.row(k) = precision.row(sel[static_cast<std::size_t>(k)]);
  const Eigen::MatrixXd stat = fit.samples * prec_rows.transpose();  // N x |M|
  const Eigen::MatrixXd v = stats::covariance(stat);
  const Eigen::RowVectorXd mean = stat.colwise().mean();
  const Eigen::MatrixXd centered = stat.rowwise() - mean;
  fit.quantile_samples = v.ldlt().solve(centered.transpose()).transpose();
  Eigen::VectorXd est(m);
  for (Index k = 0; k < m; ++k) est(k) = fit.estimate(sel[static_cast<std::size_t>(k)]);
  Intervals out;
  out.coords = sel;
  detail::pivot_intervals(fit.quantile_samples, est, alpha, out.lower, out.upper);
  fit.ci_lower = out.lower;
  fit.ci_upper = out.upper;
  return out;
}

// Plug-in conditional MLE by stochastic ascent. Unselected coordinates stay at
// their observed values; selected ones follow
//   mu_j <- mu_j + gamma_i (Sigma^-1 (y - y_i))_j
// with y_i from a warm-started Gibbs chain at the current mean.
template <class URBG>
ConditionalFit fit_conditional_mle(const NormalMeansProblem& problem, const AscentOptions& opts,
                                   URBG& rng) {
  problem.validate();
  ConditionalFit fit;
  fit.selection = select(problem);
  if (fit.selection.empty()) throw Error(ErrorKind::NoSelection, "no coordinate was selected");
  if (opts.n_steps == 0 || opts.thin == 0 || opts.gibbs_cycles_per_step == 0)
    throw Error(ErrorKind::InvalidArgument, "steps, thin and cycles per step must be positive");

  const Index p = problem.dim();
  const auto& sel = fit.selection.selected;
  const Index m = static_cast<Index>(sel.size());
  const Eigen::MatrixXd precision = detail::spd_inverse(problem.sigma);

  TmvnSpec spec;
  spec.mu = problem.y;
  spec.sigma = problem.sigma;
  for (Index j = 0; j < p; ++j) spec.regions.push_back(selection_region(problem, fit.selection, j));
  const ConditionalCoeffs coeffs = precompute_conditionals(problem.sigma);

  const StepSchedule gamma{opts.step_scale.value_or(1.0 / precision.diagonal().maxCoeff()),
                           opts.step_exponent};
  GibbsStats gstats;
  Eigen::VectorXd state = problem.y;
  Eigen::VectorXd mu = problem.y;
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(m);
  const std::size_t avg_from = detail::averaging_start(opts.n_steps, opts.average_fraction);
  fit.trajectory.resize(static_cast<Index>(opts.n_steps), m);

  for (std::size_t i = 1; i <= opts.n_steps; ++i) {
    spec.mu = mu;
    for (std::size_t t = 0; t < opts.gibbs_cycles_per_step; ++t)
      gibbs_cycle(state, spec, coeffs, rng, &gstats);
    const Eigen::VectorXd diff = problem.y - state;
    const double g = gamma(i);
    for (Index k = 0; k < m; ++k) {
      const Index j = sel[static_cast<std::size_t>(k)];
      mu(j) += g * precision.row(j).dot(diff);
      fit.trajectory(static_cast<Index>(i - 1), k) = mu(j);
    }
    if (i > avg_from)
      for (Index k = 0; k < m; ++k) avg(k) += mu(sel[static_cast<std::size_t>(k)]);
  }
  avg /= static_cast<double>(opts.n_steps - avg_from);

  fit.estimate = problem.y;
  for (Index k = 0; k < m; ++k) fit.estimate(sel[static_cast<std::size_t>(k)]) = avg(k);
  fit.steps = opts.n_steps;

  Eigen::MatrixXd prec_rows(m, p);
  for (Index k = 0; k < m; ++k) prec_rows.row(k) = precision.row(sel[static_cast<std::size_t>(k)]);
  const Eigen::VectorXd observed_stat = prec_rows * problem.y;

  auto collect = [&](std::size_t count) {
    spec.mu = fit.estimate;
    fit.samples.resize(static_cast<Index>(count), p);
    for (std::size_t t = 0; t < opts.burn_in; ++t) gibbs_cycle(state, spec, coeffs, rng, &gstats);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t t = 0; t < opts.thin; ++t) gibbs_cycle(state, spec, coeffs, rng, &gstats);
      fit.samples.row(static_cast<Index>(s)) = state.transpose();
    }
    return Eigen::MatrixXd(fit.samples * prec_rows.transpose());
  };

  if (opts.polish_samples > static_cast<std::size_t>(m) + 1) {
    for (std::size_t r = 0; r < opts.polish_rounds; ++r) {
      const Eigen::MatrixXd stat = collect(opts.polish_samples);
      const Eigen::VectorXd resid = observed_stat - stat.colwise().mean().transpose();
      const Eigen::VectorXd step = stats::covariance(stat).ldlt().solve(resid);
      for (Index k = 0; k < m; ++k) fit.estimate(sel[static_cast<std::size_t>(k)]) += step(k);
    }
  }
  const Eigen::MatrixXd stat = collect(opts.quantile_samples);
  fit.degenerate_count = gstats.degenerate;

  if (opts.quantile_samples >= 2) {
    fit.score_residual = observed_stat - stat.colwise().mean().transpose();
    fit.score_stderr = stats::mc_stderr_columns(stat);
    const double alpha = 1.0 - opts.ci_level;
    if (static_cast<double>(opts.quantile_samples) >= 100.0 / alpha - 1e-9)
      conditional_ci(fit, problem, alpha);
  }
  return fit;
}

// Unadjusted Wald intervals y_j +- z_{1-alpha/2} sqrt(Sigma_jj) over the selection.
inline Intervals naive_ci(const NormalMeansProblem& problem, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "alpha must lie in (0, 1]");
  const Selection sel = select(problem);
  const double z = normal::quantile(1.0 - alpha / 2.0);
  Intervals out;
  out.coords = sel.selected;
  const Index m = static_cast<Index>(sel.size());
  out.lower.resize(m);
  out.upper.resize(m);
  for (Index k = 0; k < m; ++k) {
    const Index j = sel.selected[static_cast<std::size_t>(k)];
    const double half = z * std::sqrt(problem.sigma(j, j));
    out.lower(k) = problem.y(j) - half;
    out.upper(k) = problem.y(j) + half;
  }
  return out;
}

enum class Sidedness { TwoSided, OneSided };

// Exact conditional MLE for y ~ N(mu, 1) selected by |y| > c (two-sided) or
// y > c (one-sided): the root of y - E_mu(y | selected). A one-sided root
// below -50 is reported as -infinity.
inline double univariate_conditional_mle(double y, double c, Sidedness side) {
  if (!(c > 0.0)) throw Error(ErrorKind::InvalidArgument, "threshold must be positive");
  const bool two = side == Sidedness::TwoSided;
  if (two ? !(std::abs(y) > c) : !(y > c))
    throw Error(ErrorKind::NotSelected, "observation does not satisfy the selection rule");
  const TruncRegion region = two ? TruncRegion::outside(-c, c) : TruncRegion::inside(c, normal::kInf);
  auto score = [&](double mu) { return y - trunc_moments(mu, 1.0, region).mean; };
  const double lo = -50.0, hi = y + 50.0;
  const double s_lo = score(lo), s_hi = score(hi);
  if (s_lo < 0.0) {
    if (!two) return -normal::kInf;
    throw Error(ErrorKind::BracketFailure, "root lies below -50");
  }
  if (s_hi > 0.0) throw Error(ErrorKind::BracketFailure, "root lies above y + 50");
  if (s_lo == 0.0) return lo;
  if (s_hi == 0.0) return hi;
  std::uintmax_t iters = 200;
  auto [a, b] = boost::math::tools::toms748_solve(
      score, lo, hi, s_lo, s_hi, boost::math::tools::eps_tolerance<double>(50), iters);
  return 0.5 * (a + b);
}

// ---------------------------------------------------------------------------
// Quadrature diagnostics for p <= 2.

// log P_mu(selection event) for p <= 2, by adaptive Gauss-Kronrod over the
// first coordinate's region with the second handled in closed form.
inline double selection_log_prob(const NormalMeansProblem& problem, const Selection& sel,
                                 const Eigen::VectorXd& mu) {
  const Index p = problem.dim();
  if (p > 2) throw Error(ErrorKind::DimensionTooLarge, "quadrature diagnostics need p <= 2");
  const TruncRegion r0 = selection_region(problem, sel, 0);
  if (p == 1) return region_log_mass(mu(0), problem.sigma(0, 0), r0);
  const TruncRegion r1 = selection_region(problem, sel, 1);
  const double s00 = problem.sigma(0, 0), s01 = problem.sigma(0, 1), s11 = problem.sigma(1, 1);
  const double sd0 = std::sqrt(s00);
  const double cvar = s11 - s01 * s01 / s00;
  auto integrand = [&](double x) {
    const double cmean = mu(1) + s01 / s00 * (x - mu(0));
    const double z = (x - mu(0)) / sd0;
    return std::exp(normal::log_pdf(z) + region_log_mass(cmean, cvar, r1)) / sd0;
  };
  using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
  auto piece = [&](double a, double b) { return GK::integrate(integrand, a, b, 15, 1e-12); };
  double total;
  if (r0.is_inside()) {
    total = piece(r0.lower(), r0.upper());
  } else {
    total = 0.0;
    if (std::isfinite(r0.lower())) total += piece(-normal::kInf, r0.lower());
    if (std::isfinite(r0.upper())) total += piece(r0.upper(), normal::kInf);
  }
  return std::log(total);
}

// Conditional log-likelihood log phi(y; mu, Sigma) - log P_mu(M), p <= 2.
inline double conditional_loglik(const NormalMeansProblem& problem, const Selection& sel,
                                  const Eigen::VectorXd& mu) {
  const Eigen::VectorXd d = problem.y - mu;
  const Eigen::LLT<Eigen::MatrixXd> llt(problem.sigma);
  const double quad = d.dot(llt.solve(d));
  const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * quad - 0.5 * logdet - static_cast<double>(problem.dim()) * normal::kLogSqrt2Pi -
         selection_log_prob(problem, sel, mu);
}

namespace detail {

// Coarse grid followed by pattern-search refinement over the coordinates in
// `free`; the rest stay at `start`.
template <class F>
Eigen::VectorXd grid_maximize(F&& f, Eigen::VectorXd start, const std::vector<Index>& free,
                              double half_width, double step, double tol) {
  Eigen::VectorXd best = start;
  double best_val = -normal::kInf;
  const auto n = static_cast<int>(std::round(half_width / step));
  Eigen::VectorXd x = start;
  if (free.size() == 1) {
    for (int a = -n; a <= n; ++a) {
      x(free[0]) = start(free[0]) + a * step;
      const double v = f(x);
      if (v > best_val) best_val = v, best = x;
    }
  } else {
    for (int a = -n; a <= n; ++a)
      for (int b = -n; b <= n; ++b) {
        x(free[0]) = start(free[0]) + a * step;
        x(free[1]) = start(free[1]) + b * step;
        const double v = f(x);
        if (v > best_val) best_val = v, best = x;
      }
  }
  for (double h = step / 2; h > tol; h /= 2) {
    bool moved = true;
    while (moved) {
      moved = false;
      for (Index j : free)
        for (double dir : {-1.0, 1.0}) {
          Eigen::VectorXd c = best;
          c(j) += dir * h;
          const double v = f(c);
          if (v > best_val) best_val = v, best = c, moved = true;
        }
    }
  }
  return best;
}

}  // namespace detail

// Full conditional MLE over all coordinates (p <= 2). Diagnostic only: it is
// not a plug-in estimator and can be far from the data.
inline Eigen::VectorXd full_conditional_mle_quadrature(const NormalMeansProblem& problem,
                                                       double half_width = 10.0) {
  problem.validate();
  if (problem.dim() > 2) throw Error(ErrorKind::DimensionTooLarge, "diagnostic needs p <= 2");
  const Selection sel = select(problem);
  std::vector<Index> free;
  for (Index j = 0; j < problem.dim(); ++j) free.push_back(j);
  auto f = [&](const Eigen::VectorXd& mu) { return conditional_loglik(problem, sel, mu); };
  return detail::grid_maximize(f, problem.y, free, half_width, 0.1, 1e-5);
}

// Plug-in conditional MLE (unselected coordinates fixed at y) by quadrature,
// p <= 2.
inline Eigen::VectorXd plugin_conditional_mle_quadrature(const NormalMeansProblem& problem,
                                                         double half_width = 10.0) {
  problem.validate();
  if (problem.dim() > 2) throw Error(ErrorKind::DimensionTooLarge, "diagnostic needs p <= 2");
  const Selection sel = select(problem);
  if (sel.empty()) throw Error(ErrorKind::NoSelection, "no coordinate was selected");
  auto f = [&](const Eigen::VectorXd& mu) { return conditional_loglik(problem, sel, mu); };
  return detail::grid_maximize(f, problem.y, sel.selected, half_width, 0.1, 1e-5);
}

}  // namespace postsel
