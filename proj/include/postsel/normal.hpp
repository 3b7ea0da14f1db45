#pragma once

// Tail-stable standard normal primitives. Everything that can underflow in
// linear space is offered in log space as well.

#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/erf.hpp>

namespace postsel::normal {

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))

inline double log_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

inline double pdf(double x) { return std::exp(log_pdf(x)); }

inline double cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Upper tail Q(x) = 1 - Phi(x).
inline double sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

// log Q(x). erfc is accurate until its result nears the subnormal range;
// beyond that the asymptotic Mills-ratio series takes over.
inline double log_sf(double x) {
  if (x == kInf) return -kInf;
  if (x == -kInf) return 0.0;
  if (x < 0.0) return std::log1p(-0.5 * std::erfc(-x / std::numbers::sqrt2));
  if (x < 30.0) return std::log(0.5 * std::erfc(x / std::numbers::sqrt2));
  const double z = 1.0 / (x * x);
  const double series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - z * (105.0 - z * 945.0))));
  return log_pdf(x) - std::log(x) + std::log(series);
}

inline double log_cdf(double x) { return log_sf(-x); }

// Inverse of the upper tail given log Q. Uses erfc_inv while Q is a normal
// double, then Newton steps on log Q for deeper tails.
inline double sf_inv_log(double log_q) {
  if (log_q >= 0.0) return -kInf;
  if (log_q == -kInf) return kInf;
  if (log_q > -0.6931471805599453) {
    // Q > 1/2: solve through the lower tail 1 - Q to keep precision near 0.
    const double p = -std::expm1(log_q);
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
  }
  if (log_q > -700.0) return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * std::exp(log_q));
  // Start from the leading-order asymptotic inverse.
  const double t = -2.0 * log_q;
  double x = std::sqrt(t - std::log(t) - 2.0 * kLogSqrt2Pi);
  for (int it = 0; it < 50; ++it) {
    const double f = log_sf(x) - log_q;
    const double slope = -std::exp(log_pdf(x) - log_sf(x));
    const double step = f / slope;
    x -= step;
    if (std::abs(step) <= 1e-15 * std::abs(x)) break;
  }
  return x;
}

inline double quantile(double p) {
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  if (p < 0.5) return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
  return std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * (1.0 - p));
}

// log(exp(a) + exp(b)).
inline double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

// log(Phi(b) - Phi(a)) for a < b, computed on whichever side keeps the
// difference away from cancellation.
inline double log_interval_mass(double a, double b) {
  if (!(a < b)) return -kInf;
  if (a >= 0.0) {
    const double la = log_sf(a);
    const double lb = log_sf(b);
    return la + std::log(-std::expm1(lb - la));
  }
  if (b <= 0.0) return log_interval_mass(-b, -a);
  return std::log1p(-(sf(b) + cdf(a)));
}

}  // namespace postsel::normal
