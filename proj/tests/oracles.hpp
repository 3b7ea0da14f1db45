#pragma once

// Reference computations used only by the tests. These deliberately avoid
// the library's samplers and tail-stable helpers: plain grid quadrature,
// direct densities and rejection sampling.

#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

inline double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double Phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Composite Simpson rule on [a, b] with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

struct Moments1d {
  double mass, mean, var;
};

// Moments of N(mu, s2) restricted to a union of intervals, by Simpson
// quadrature on each piece clipped to mu +- 12 sd.
inline Moments1d moments_1d(double mu, double s2,
                            const std::vector<std::pair<double, double>>& pieces) {
  const double sd = std::sqrt(s2);
  auto dens = [&](double x) { return phi((x - mu) / sd) / sd; };
  double m0 = 0, m1 = 0, m2 = 0;
  for (auto [lo, hi] : pieces) {
    const double a = std::max(lo, mu - 12 * sd), b = std::min(hi, mu + 12 * sd);
    if (!(a < b)) continue;
    m0 += simpson(dens, a, b, 200000);
    m1 += simpson([&](double x) { return x * dens(x); }, a, b, 200000);
    m2 += simpson([&](double x) { return x * x * dens(x); }, a, b, 200000);
  }
  const double mean = m1 / m0;
  return {m0, mean, m2 / m0 - mean * mean};
}

struct Moments2d {
  double mass;
  Eigen::Vector2d mean;
};

// Midpoint-rule quadrature of a bivariate normal restricted to `inside`,
// over mu +- 8 sd with the given step.
inline Moments2d moments_2d(const Eigen::Vector2d& mu, const Eigen::Matrix2d& sigma,
                            const std::function<bool(double, double)>& inside,
                            double step = 0.01) {
  const Eigen::Matrix2d prec = sigma.inverse();
  const double norm = 1.0 / (2.0 * std::numbers::pi * std::sqrt(sigma.determinant()));
  const double s0 = std::sqrt(sigma(0, 0)), s1 = std::sqrt(sigma(1, 1));
  double m0 = 0, m1x = 0, m1y = 0;
  for (double x = mu(0) - 8 * s0 + step / 2; x < mu(0) + 8 * s0; x += step) {
    for (double y = mu(1) - 8 * s1 + step / 2; y < mu(1) + 8 * s1; y += step) {
      if (!inside(x, y)) continue;
      const double dx = x - mu(0), dy = y - mu(1);
      const double q = prec(0, 0) * dx * dx + 2 * prec(0, 1) * dx * dy + prec(1, 1) * dy * dy;
      const double w = norm * std::exp(-0.5 * q);
      m0 += w;
      m1x += w * x;
      m1y += w * y;
    }
  }
  m0 *= step * step;
  m1x *= step * step;
  m1y *= step * step;
  return {m0, Eigen::Vector2d(m1x / m0, m1y / m0)};
}

}  // namespace oracle
