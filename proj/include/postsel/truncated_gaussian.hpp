#pragma once

// Univariate truncated normal primitives and a coordinate-wise Gibbs sampler
// for multivariate normals truncated to per-coordinate intervals or
// interval complements.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "postsel/error.hpp"
#include "postsel/normal.hpp"
#include "postsel/rng.hpp"

namespace postsel {

// Probability below which a region is treated as having no mass.
inline constexpr double kDegenerateMass = 1e-290;

class TruncRegion {
 public:
  enum class Kind { Inside, Outside };

  static TruncRegion inside(double lower, double upper) {
    return TruncRegion(Kind::Inside, lower, upper);
  }
  static TruncRegion outside(double lower, double upper) {
    return TruncRegion(Kind::Outside, lower, upper);
  }
  static TruncRegion unbounded() { return inside(-normal::kInf, normal::kInf); }

  Kind kind() const { return kind_; }
  double lower() const { return lower_; }
  double upper() const { return upper_; }
  bool is_inside() const { return kind_ == Kind::Inside; }

  bool contains(double x) const {
    if (kind_ == Kind::Inside) return x >= lower_ && x <= upper_;
    return x <= lower_ || x >= upper_;
  }

 private:
  TruncRegion(Kind kind, double lower, double upper) : kind_(kind), lower_(lower), upper_(upper) {
    if (std::isnan(lower) || std::isnan(upper) || !(lower < upper))
      throw Error(ErrorKind::InvalidRegion, "region requires lower < upper");
    if (kind == Kind::Outside && std::isinf(lower) && std::isinf(upper))
      throw Error(ErrorKind::InvalidRegion, "complement of the whole real line is empty");
  }

  Kind kind_;
  double lower_;
  double upper_;
};

namespace detail {

inline const double kLogDegenerate = std::log(kDegenerateMass);

inline void check_variance(double sigma2) {
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw Error(ErrorKind::InvalidArgument, "variance must be positive and finite");
}

inline double standardize(double x, double mu, double sd) {
  if (std::isinf(x)) return x;
  return (x - mu) / sd;
}

// Inverse-CDF draw from N(0,1) restricted to [a, b]; strictly increasing in u.
inline double std_inside(double u, double a, double b) {
  double z;
  if (a >= 0.0) {
    const double la = normal::log_sf(a);
    const double lb = normal::log_sf(b);
    z = normal::sf_inv_log(la + std::log1p(u * std::expm1(lb - la)));
  } else if (b <= 0.0) {
    return -std_inside(1.0 - u, -b, -a);
  } else {
    const double pa = normal::cdf(a);
    const double pb = normal::cdf(b);
    const double p = pa + u * (pb - pa);
    if (p < 0.5) {
      z = normal::quantile(p);
    } else {
      const double qa = normal::sf(a);
      const double qb = normal::sf(b);
      z = normal::sf_inv_log(std::log(qb + (1.0 - u) * (qa - qb)));
    }
  }
  return std::clamp(z, a, b);
}

}  // namespace detail

// CDF of N(mu, sigma2) truncated to [l, u], evaluated at x.
inline double trunc_cdf(double x, double mu, double sigma2, double l, double u) {
  if (std::isnan(l) || std::isnan(u) || !(l < u))
    throw Error(ErrorKind::InvalidRegion, "trunc_cdf requires l < u");
  detail::check_variance(sigma2);
  if (x <= l) return 0.0;
  if (x >= u) return 1.0;
  const double sd = std::sqrt(sigma2);
  const double a = detail::standardize(l, mu, sd);
  const double b = detail::standardize(u, mu, sd);
  const double z = detail::standardize(x, mu, sd);
  const double log_den = normal::log_interval_mass(a, b);
  if (log_den == -normal::kInf)
    throw Error(ErrorKind::DegenerateMass, "truncation interval has zero probability");
  return std::clamp(std::exp(normal::log_interval_mass(a, z) - log_den), 0.0, 1.0);
}

// log P(region) under N(mu, sigma2).
inline double region_log_mass(double mu, double sigma2, const TruncRegion& region) {
  const double sd = std::sqrt(sigma2);
  const double a = detail::standardize(region.lower(), mu, sd);
  const double b = detail::standardize(region.upper(), mu, sd);
  if (region.is_inside()) return normal::log_interval_mass(a, b);
  return normal::log_add(normal::log_cdf(a), normal::log_sf(b));
}

// Inverse-CDF draw from N(mu, sigma2) truncated to [l, u] using the supplied
// uniform. Returns nullopt when the interval mass is below kDegenerateMass.
inline std::optional<double> try_sample_inside(double u01, double mu, double sigma2, double l,
                                               double u) {
  const double sd = std::sqrt(sigma2);
  const double a = detail::standardize(l, mu, sd);
  const double b = detail::standardize(u, mu, sd);
  if (normal::log_interval_mass(a, b) < detail::kLogDegenerate) return std::nullopt;
  const double x = mu + sd * detail::std_inside(u01, a, b);
  return std::clamp(x, l, u);
}

inline double sample_inside(double u01, double mu, double sigma2, double l, double u) {
  if (std::isnan(l) || std::isnan(u) || !(l < u))
    throw Error(ErrorKind::InvalidRegion, "sample_inside requires l < u");
  detail::check_variance(sigma2);
  if (!(u01 > 0.0 && u01 < 1.0))
    throw Error(ErrorKind::InvalidArgument, "uniform draw must lie in (0, 1)");
  auto x = try_sample_inside(u01, mu, sigma2, l, u);
  if (!x) throw Error(ErrorKind::DegenerateMass, "interval probability below 1e-290");
  return *x;
}

// Draw from N(mu, sigma2) restricted to (-inf, l] U [u, inf): choose a tail
// in proportion to its mass, then invert within it.
template <class URBG>
std::optional<double> try_sample_outside(URBG& rng, double mu, double sigma2, double l, double u) {
  const double sd = std::sqrt(sigma2);
  const double a = detail::standardize(l, mu, sd);
  const double b = detail::standardize(u, mu, sd);
  const double log_left = normal::log_cdf(a);
  const double log_right = normal::log_sf(b);
  const double log_total = normal::log_add(log_left, log_right);
  if (log_total < detail::kLogDegenerate) return std::nullopt;
  const double p_left = std::exp(log_left - log_total);
  const bool go_left = uniform01(rng) < p_left;
  const double v = uniform01(rng);
  if (go_left) return std::min(mu + sd * detail::std_inside(v, -normal::kInf, a), l);
  return std::max(mu + sd * detail::std_inside(v, b, normal::kInf), u);
}

template <class URBG>
double sample_outside(URBG& rng, double mu, double sigma2, double l, double u) {
  if (std::isnan(l) || std::isnan(u) || !(l < u))
    throw Error(ErrorKind::InvalidRegion, "sample_outside requires l < u");
  detail::check_variance(sigma2);
  if (std::isinf(l) && std::isinf(u))
    throw Error(ErrorKind::InvalidRegion, "complement of the whole real line is empty");
  auto x = try_sample_outside(rng, mu, sigma2, l, u);
  if (!x) throw Error(ErrorKind::DegenerateMass, "tail probabilities below 1e-290");
  return *x;
}

template <class URBG>
std::optional<double> try_sample_region(URBG& rng, double mu, double sigma2,
                                        const TruncRegion& region) {
  if (region.is_inside())
    return try_sample_inside(uniform01(rng), mu, sigma2, region.lower(), region.upper());
  return try_sample_outside(rng, mu, sigma2, region.lower(), region.upper());
}

template <class URBG>
double sample_region(URBG& rng, double mu, double sigma2, const TruncRegion& region) {
  detail::check_variance(sigma2);
  auto x = try_sample_region(rng, mu, sigma2, region);
  if (!x) throw Error(ErrorKind::DegenerateMass, "region probability below 1e-290");
  return *x;
}

struct TruncMoments {
  double mean;
  double variance;
};

namespace detail {

// Moments of N(0,1) restricted to [a, b].
// Log-space ratios stay exact far below kDegenerateMass, so only a mass
// that is zero even in log space is rejected here.
inline TruncMoments std_interval_moments(double a, double b) {
  const double log_z = normal::log_interval_mass(a, b);
  if (!std::isfinite(log_z))
    throw Error(ErrorKind::DegenerateMass, "region has zero probability");
  const double ra = std::isinf(a) ? 0.0 : std::exp(normal::log_pdf(a) - log_z);
  const double rb = std::isinf(b) ? 0.0 : std::exp(normal::log_pdf(b) - log_z);
  const double mean = ra - rb;
  // One-sided tails: 1 - r(r - a) keeps the leading terms from cancelling.
  double var;
  if (std::isinf(b) && !std::isinf(a))
    var = 1.0 - ra * (ra - a);
  else if (std::isinf(a) && !std::isinf(b))
    var = 1.0 - rb * (rb + b);
  else
    var = 1.0 + (std::isinf(a) ? 0.0 : a * ra) - (std::isinf(b) ? 0.0 : b * rb) - mean * mean;
  return {mean, std::max(var, 0.0)};
}

}  // namespace detail

// Exact mean and variance of N(mu, sigma2) restricted to a region.
inline TruncMoments trunc_moments(double mu, double sigma2, const TruncRegion& region) {
  detail::check_variance(sigma2);
  const double sd = std::sqrt(sigma2);
  const double a = detail::standardize(region.lower(), mu, sd);
  const double b = detail::standardize(region.upper(), mu, sd);
  if (region.is_inside()) {
    const auto m = detail::std_interval_moments(a, b);
    return {mu + sd * m.mean, sigma2 * m.variance};
  }
  if (std::isinf(a)) {
    const auto m = detail::std_interval_moments(b, normal::kInf);
    return {mu + sd * m.mean, sigma2 * m.variance};
  }
  if (std::isinf(b)) {
    const auto m = detail::std_interval_moments(-normal::kInf, a);
    return {mu + sd * m.mean, sigma2 * m.variance};
  }
  const double log_left = normal::log_cdf(a);
  const double log_right = normal::log_sf(b);
  const double log_total = normal::log_add(log_left, log_right);
  if (!std::isfinite(log_total))
    throw Error(ErrorKind::DegenerateMass, "region has zero probability");
  const double w_left = std::exp(log_left - log_total);
  const double w_right = std::exp(log_right - log_total);
  TruncMoments left{0, 0}, right{0, 0};
  if (w_left > 0) left = detail::std_interval_moments(-normal::kInf, a);
  if (w_right > 0) right = detail::std_interval_moments(b, normal::kInf);
  const double mean = w_left * left.mean + w_right * right.mean;
  const double gap = left.mean - right.mean;
  const double var = w_left * left.variance + w_right * right.variance + w_left * w_right * gap * gap;
  return {mu + sd * mean, sigma2 * var};
}

// Full-conditional regression coefficients of a Gaussian. `weights` is p x p
// with a zero diagonal: row j holds Sigma_{j,-j} Sigma_{-j,-j}^{-1} scattered
// back to full coordinates, so E[x_j | x_-j] = mu_j + weights.row(j) (x - mu).
struct ConditionalCoeffs {
  Eigen::MatrixXd weights;
  Eigen::VectorXd cond_var;
};

inline constexpr double kMaxConditionNumber = 1e12;

inline void check_symmetric(const Eigen::MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols())
    throw Error(ErrorKind::InvalidArgument, "covariance must be square");
  const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw Error(ErrorKind::InvalidArgument, "covariance is not symmetric");
}

inline ConditionalCoeffs precompute_conditionals(const Eigen::MatrixXd& sigma) {
  check_symmetric(sigma);
  const Eigen::Index p = sigma.rows();
  ConditionalCoeffs out;
  if (p == 0) return out;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxConditionNumber)
    throw Error(ErrorKind::SingularCovariance,
                "covariance condition number exceeds 1e12 or matrix is not positive definite");
  // Precision-matrix route: weights_jk = -Q_jk / Q_jj, cond_var_j = 1 / Q_jj.
  const Eigen::MatrixXd precision =
      sigma.llt().solve(Eigen::MatrixXd::Identity(p, p));
  out.weights.resize(p, p);
  out.cond_var.resize(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double qjj = precision(j, j);
    out.weights.row(j) = -precision.row(j) / qjj;
    out.weights(j, j) = 0.0;
    out.cond_var(j) = std::min(1.0 / qjj, sigma(j, j));
  }
  return out;
}

struct TmvnSpec {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::vector<TruncRegion> regions;

  Eigen::Index dim() const { return mu.size(); }

  void validate() const {
    if (sigma.rows() != mu.size() || sigma.cols() != mu.size() ||
        static_cast<Eigen::Index>(regions.size()) != mu.size())
      throw Error(ErrorKind::InvalidArgument, "mu, sigma and regions must have matching dimension");
    check_symmetric(sigma);
    if (sigma.llt().info() != Eigen::Success)
      throw Error(ErrorKind::SingularCovariance, "Cholesky factorization failed");
  }

  bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    for (Eigen::Index j = 0; j < x.size(); ++j)
      if (!regions[static_cast<std::size_t>(j)].contains(x(j))) return false;
    return true;
  }
};

struct GibbsStats {
  std::size_t cycles = 0;
  std::size_t degenerate = 0;  // coordinate updates skipped for lack of mass
};

// One systematic sweep j = 0..p-1 of the coordinate-wise Gibbs sampler,
// updating `state` in place.
template <class URBG>
void gibbs_cycle(Eigen::VectorXd& state, const TmvnSpec& spec, const ConditionalCoeffs& coeffs,
                 URBG& rng, GibbsStats* stats = nullptr) {
  const Eigen::Index p = state.size();
  Eigen::VectorXd dev = state - spec.mu;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double cond_mean = spec.mu(j) + coeffs.weights.row(j).dot(dev);
    auto draw = try_sample_region(rng, cond_mean, coeffs.cond_var(j),
                                  spec.regions[static_cast<std::size_t>(j)]);
    if (!draw) {
      if (stats) ++stats->degenerate;
      continue;
    }
    state(j) = *draw;
    dev(j) = *draw - spec.mu(j);
  }
  if (stats) ++stats->cycles;
}

// Runs `burn_in` sweeps from `init`, then records every `thin`-th state.
template <class URBG>
Eigen::MatrixXd sample_tmvn(const TmvnSpec& spec, const Eigen::VectorXd& init,
                            std::size_t n_samples, std::size_t burn_in, std::size_t thin,
                            URBG& rng, GibbsStats* stats = nullptr) {
  spec.validate();
  if (init.size() != spec.dim())
    throw Error(ErrorKind::InvalidInit, "initial state has the wrong dimension");
  if (!spec.contains(init))
    throw Error(ErrorKind::InvalidInit, "initial state violates the truncation regions");
  if (thin == 0) throw Error(ErrorKind::InvalidArgument, "thin must be at least 1");
  const ConditionalCoeffs coeffs = precompute_conditionals(spec.sigma);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n_samples), spec.dim());
  if (n_samples == 0) return out;
  Eigen::VectorXd state = init;
  for (std::size_t t = 0; t < burn_in; ++t) gibbs_cycle(state, spec, coeffs, rng, stats);
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t t = 0; t < thin; ++t) gibbs_cycle(state, spec, coeffs, rng, stats);
    out.row(static_cast<Eigen::Index>(s)) = state.transpose();
  }
  return out;
}

}  // namespace postsel
