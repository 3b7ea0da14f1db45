#pragma once

// Small descriptive-statistics helpers shared by the samplers, the
// interval builders and the simulation harness.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "postsel/error.hpp"

namespace postsel::stats {

// Sample covariance of the rows of `samples` (divisor n - 1).
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& samples) {
  const Eigen::Index n = samples.rows();
  if (n < 2) throw Error(ErrorKind::InsufficientSamples, "covariance needs at least two rows");
  const Eigen::RowVectorXd mean = samples.colwise().mean();
  const Eigen::MatrixXd centered = samples.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(n - 1);
}

// Empirical quantile with linear interpolation between order statistics
// (the usual "type 7" definition).
inline double quantile(std::vector<double> values, double prob) {
  if (values.empty()) throw Error(ErrorKind::InsufficientSamples, "quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * std::clamp(prob, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  if (hi == lo || h == static_cast<double>(lo)) return values[lo];  // exact order statistic, safe with inf
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double quantile(const Eigen::Ref<const Eigen::VectorXd>& column, double prob) {
  return quantile(std::vector<double>(column.data(), column.data() + column.size()), prob);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

// Monte-Carlo standard error of the mean of a (possibly autocorrelated)
// chain via non-overlapping batch means with about sqrt(n) batches. Never
// smaller than the i.i.d. standard error.
inline double mc_stderr(const Eigen::Ref<const Eigen::VectorXd>& chain) {
  const Eigen::Index n = chain.size();
  if (n < 2) return std::numeric_limits<double>::infinity();
  const double mean = chain.mean();
  const double var = (chain.array() - mean).square().sum() / static_cast<double>(n - 1);
  const double iid = std::sqrt(var / static_cast<double>(n));
  const auto batches = static_cast<Eigen::Index>(std::floor(std::sqrt(static_cast<double>(n))));
  if (batches < 4) return iid;
  const Eigen::Index size = n / batches;
  Eigen::VectorXd means(batches);
  for (Eigen::Index b = 0; b < batches; ++b) means(b) = chain.segment(b * size, size).mean();
  const double bm = means.mean();
  const double bvar = (means.array() - bm).square().sum() / static_cast<double>(batches - 1);
  return std::max(iid, std::sqrt(bvar / static_cast<double>(batches)));
}

inline Eigen::VectorXd mc_stderr_columns(const Eigen::MatrixXd& samples) {
  Eigen::VectorXd out(samples.cols());
  for (Eigen::Index j = 0; j < samples.cols(); ++j) out(j) = mc_stderr(samples.col(j));
  return out;
}

}  // namespace postsel::stats
