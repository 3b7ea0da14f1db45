#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>

namespace postsel {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-mode stream derivation: the same (base, id, label) triple always
// yields the same seed, and distinct labels give unrelated streams.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t id,
                                    std::string_view label = {}) {
  std::uint64_t s = detail::splitmix64(base);
  s = detail::splitmix64(s ^ detail::splitmix64(id + 0x632BE59BD9B4E019ULL));
  return detail::splitmix64(s ^ detail::fnv1a(label));
}

inline Rng make_rng(std::uint64_t base, std::uint64_t id = 0, std::string_view label = {}) {
  return Rng(derive_seed(base, id, label));
}

// Uniform on the open interval (0, 1) from the top 53 bits.
template <class URBG>
double uniform01(URBG& rng) {
  static_assert(URBG::max() - URBG::min() == std::numeric_limits<std::uint64_t>::max(),
                "uniform01 expects a 64-bit generator");
  const std::uint64_t bits = (rng() - URBG::min()) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

// Marsaglia polar method; portable across standard libraries, unlike
// std::normal_distribution.
template <class URBG>
double standard_normal(URBG& rng) {
  for (;;) {
    const double u = 2.0 * uniform01(rng) - 1.0;
    const double v = 2.0 * uniform01(rng) - 1.0;
    const double s = u * u + v * v;
    if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
  }
}

// Laplace(0, scale) by inversion.
template <class URBG>
double laplace(URBG& rng, double scale = 1.0) {
  const double u = uniform01(rng) - 0.5;
  return u < 0 ? scale * std::log1p(2.0 * u) : -scale * std::log1p(-2.0 * u);
}

}  // namespace postsel
