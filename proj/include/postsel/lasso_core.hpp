#pragma once

// Lasso fitting by coordinate descent, cross-validated lambda, the residual
// variance estimate, and the polyhedral description of the lasso selection
// event in terms of the active statistic eta and the inactive statistic xi.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "postsel/error.hpp"
#include "postsel/rng.hpp"

namespace postsel {

using Index = Eigen::Index;

struct Dataset {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;

  Index n() const { return X.rows(); }
  Index p() const { return X.cols(); }

  void validate() const {
    if (X.rows() != y.size()) throw Error(ErrorKind::InvalidArgument, "X and y row counts differ");
    if (X.rows() < 2) throw Error(ErrorKind::InvalidArgument, "need at least two observations");
    if (!X.allFinite() || !y.allFinite())
      throw Error(ErrorKind::InvalidArgument, "X and y must be finite");
    for (Index j = 0; j < X.cols(); ++j)
      if (X.col(j).cwiseAbs().maxCoeff() == 0.0)
        throw Error(ErrorKind::InvalidArgument, "column " + std::to_string(j) + " of X is zero");
  }
};

struct LassoFit {
  Eigen::VectorXd beta;
  double lambda = 0.0;
  std::vector<Index> active;  // increasing column indices with beta != 0
  Eigen::VectorXd signs;      // +-1 over `active`
  double sigma2_hat = std::numeric_limits<double>::quiet_NaN();
  std::size_t sweeps = 0;
};

struct LassoOptions {
  std::size_t max_sweeps = 100000;
  double tol = 1e-9;
};

inline double kkt_tolerance(double lambda) { return lambda > 0.0 ? 1e-6 * lambda : 1e-8; }

namespace detail {

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

inline void finish_fit(LassoFit& fit) {
  fit.active.clear();
  for (Index j = 0; j < fit.beta.size(); ++j)
    if (fit.beta(j) != 0.0) fit.active.push_back(j);
  fit.signs.resize(static_cast<Index>(fit.active.size()));
  for (std::size_t k = 0; k < fit.active.size(); ++k)
    fit.signs(static_cast<Index>(k)) = fit.beta(fit.active[k]) > 0.0 ? 1.0 : -1.0;
}

inline Eigen::MatrixXd columns(const Eigen::MatrixXd& X, const std::vector<Index>& idx) {
  Eigen::MatrixXd out(X.rows(), static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Index>(k)) = X.col(idx[k]);
  return out;
}

inline std::vector<Index> complement(Index p, const std::vector<Index>& idx) {
  std::vector<char> in(static_cast<std::size_t>(p), 0);
  for (Index j : idx) in[static_cast<std::size_t>(j)] = 1;
  std::vector<Index> out;
  for (Index j = 0; j < p; ++j)
    if (!in[static_cast<std::size_t>(j)]) out.push_back(j);
  return out;
}

// Cyclic coordinate descent on 1/2 b'Gb - c'b + lambda |b|_1 given the Gram
// matrix G = X'X and c = X'y, warm-started from `beta`. Returns sweeps used;
// on hitting max_sweeps throws, or returns max_sweeps + 1 when `strict` is off.
inline std::size_t gram_descent(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty,
                                double lambda, Eigen::VectorXd& beta, const LassoOptions& opts,
                                bool strict = true) {
  const Index p = gram.rows();
  Eigen::VectorXd grad = xty - gram * beta;  // X'(y - X beta)
  for (std::size_t sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    double max_step = 0.0;
    for (Index j = 0; j < p; ++j) {
      const double old = beta(j);
      const double z = grad(j) + gram(j, j) * old;
      const double b = soft_threshold(z, lambda) / gram(j, j);
      const double delta = b - old;
      if (delta == 0.0) continue;
      beta(j) = b;
      grad.noalias() -= gram.col(j) * delta;
      max_step = std::max(max_step, std::abs(delta));
    }
    const double scale = 1.0 + (p > 0 ? beta.cwiseAbs().maxCoeff() : 0.0);
    if (max_step < opts.tol * scale) return sweep;
  }
  if (!strict) return opts.max_sweeps + 1;
  throw Error(ErrorKind::NonConvergence, "coordinate descent did not converge");
}

// Replaces the active block by the exact solution of the stationarity
// equations G_M b = X_M'y - lambda s when that keeps the signs and the
// inactive KKT conditions; removes the coordinate-descent round-off.
inline void refine_active(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty, double lambda,
                          Eigen::VectorXd& beta) {
  std::vector<Index> act;
  for (Index j = 0; j < beta.size(); ++j)
    if (beta(j) != 0.0) act.push_back(j);
  if (act.empty()) return;
  const auto m = static_cast<Index>(act.size());
  Eigen::MatrixXd gm(m, m);
  Eigen::VectorXd rhs(m);
  for (Index a = 0; a < m; ++a) {
    rhs(a) = xty(act[static_cast<std::size_t>(a)]) -
             lambda * (beta(act[static_cast<std::size_t>(a)]) > 0.0 ? 1.0 : -1.0);
    for (Index b = 0; b < m; ++b) gm(a, b) = gram(act[static_cast<std::size_t>(a)], act[static_cast<std::size_t>(b)]);
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gm);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) return;
  const Eigen::VectorXd b = ldlt.solve(rhs);
  if (!b.allFinite()) return;
  Eigen::VectorXd cand = Eigen::VectorXd::Zero(beta.size());
  for (Index a = 0; a < m; ++a) {
    const Index j = act[static_cast<std::size_t>(a)];
    if (b(a) * beta(j) <= 0.0) return;
    cand(j) = b(a);
  }
  const Eigen::VectorXd grad = xty - gram * cand;
  const double tol = kkt_tolerance(lambda);
  for (Index j = 0; j < beta.size(); ++j)
    if (cand(j) == 0.0 && std::abs(grad(j)) > lambda + tol) return;
  beta = cand;
}

inline LassoFit fit_from_gram(const Eigen::MatrixXd& gram, const Eigen::VectorXd& xty,
                              double lambda, Eigen::VectorXd warm, const LassoOptions& opts) {
  LassoFit fit;
  fit.lambda = lambda;
  fit.beta = std::move(warm);
  fit.sweeps = gram_descent(gram, xty, lambda, fit.beta, opts);
  refine_active(gram, xty, lambda, fit.beta);
  finish_fit(fit);
  return fit;
}

}  // namespace detail

// Minimizer of 1/2 ||y - X b||^2 + lambda ||b||_1. No intercept, no scaling.
inline LassoFit fit_lasso(const Dataset& data, double lambda, const LassoOptions& opts = {}) {
  data.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw Error(ErrorKind::InvalidArgument, "lambda must be finite and nonnegative");
  const Eigen::MatrixXd gram = data.X.transpose() * data.X;
  const Eigen::VectorXd xty = data.X.transpose() * data.y;
  LassoFit fit = detail::fit_from_gram(gram, xty, lambda, Eigen::VectorXd::Zero(data.p()), opts);
  const Index m = static_cast<Index>(fit.active.size());
  if (data.n() > m) fit.sigma2_hat = (data.y - data.X * fit.beta).squaredNorm() / static_cast<double>(data.n() - m);
  return fit;
}

// max_j |X_j' (y - X beta)| - lambda over inactive j, and max deviation from
// lambda * s_j over active j. Both should be <= kkt_tolerance(lambda).
struct KktReport {
  double inactive_excess = 0.0;
  double active_gap = 0.0;
  bool ok(double tol) const { return inactive_excess <= tol && active_gap <= tol; }
};

inline KktReport check_kkt(const Dataset& data, const LassoFit& fit) {
  const Eigen::VectorXd grad = data.X.transpose() * (data.y - data.X * fit.beta);
  KktReport r;
  for (Index j = 0; j < grad.size(); ++j) {
    if (fit.beta(j) == 0.0) {
      r.inactive_excess = std::max(r.inactive_excess, std::abs(grad(j)) - fit.lambda);
    } else {
      const double s = fit.beta(j) > 0.0 ? 1.0 : -1.0;
      r.active_gap = std::max(r.active_gap, std::abs(grad(j) - fit.lambda * s));
    }
  }
  if (r.inactive_excess < 0.0) r.inactive_excess = 0.0;
  return r;
}

// ||y - X beta||^2 / (n - |M|).
inline double sigma2_lasso(const Dataset& data, const LassoFit& fit) {
  const Index m = static_cast<Index>(fit.active.size());
  if (data.n() <= m)
    throw Error(ErrorKind::SaturatedModel, "n must exceed the number of selected variables");
  return (data.y - data.X * fit.beta).squaredNorm() / static_cast<double>(data.n() - m);
}

// ---------------------------------------------------------------------------
// Cross-validation.

enum class LambdaRule { Min, OneSe };

inline LambdaRule parse_lambda_rule(std::string_view s) {
  if (s == "min") return LambdaRule::Min;
  if (s == "1se") return LambdaRule::OneSe;
  throw Error(ErrorKind::Config, "lambda rule must be 'min' or '1se'");
}

inline const char* to_string(LambdaRule r) { return r == LambdaRule::Min ? "min" : "1se"; }

// `count` log-spaced values from ||X'y||_inf down to ratio * ||X'y||_inf.
inline std::vector<double> lambda_grid(const Dataset& data, std::size_t count = 100,
                                       double ratio = 1e-3) {
  if (count == 0) throw Error(ErrorKind::InvalidArgument, "grid needs at least one point");
  const double top = (data.X.transpose() * data.y).cwiseAbs().maxCoeff();
  std::vector<double> grid(count);
  if (count == 1) {
    grid[0] = top;
    return grid;
  }
  const double step = std::log(ratio) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) grid[i] = top * std::exp(step * static_cast<double>(i));
  return grid;
}

// Coordinate-descent budget per grid point inside cross-validation. Fits near
// the bottom of the grid can be close to interpolating when p >= n and need
// not be exact for a prediction-error estimate.
inline constexpr std::size_t kCvMaxSweeps = 2000;

struct CvResult {
  double lambda = 0.0;
  std::vector<double> grid;
  std::vector<double> mean_error;  // per grid point, mean held-out MSE over folds
  std::vector<double> std_error;
  std::size_t best = 0;            // index of the minimum
  std::size_t chosen = 0;          // index returned by the rule
};

// Fold labels 0..K-1: a seeded permutation dealt round-robin.
inline std::vector<int> fold_assignment(Index n, int folds, std::uint64_t seed) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed);
  for (std::size_t i = perm.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  std::vector<int> label(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < perm.size(); ++i)
    label[static_cast<std::size_t>(perm[i])] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return label;
}

// K-fold cross-validation over a descending grid. Each training fit uses
// lambda * n_train / n so that the penalty keeps its weight relative to the
// (unnormalized) squared-error loss.
inline CvResult cv_lambda(const Dataset& data, int folds, std::vector<double> grid,
                          LambdaRule rule, std::uint64_t seed, const LassoOptions& opts = {}) {
  data.validate();
  if (folds < 2) throw Error(ErrorKind::InvalidArgument, "need at least two folds");
  if (grid.empty()) throw Error(ErrorKind::InvalidArgument, "lambda grid is empty");
  if (data.n() < folds) throw Error(ErrorKind::EmptyFold, "fewer observations than folds");
  std::sort(grid.begin(), grid.end(), std::greater<>());
  CvResult out;
  out.grid = grid;
  const std::size_t g = grid.size();
  if (g == 1) {
    out.lambda = grid[0];
    out.mean_error.assign(1, std::numeric_limits<double>::quiet_NaN());
    out.std_error.assign(1, std::numeric_limits<double>::quiet_NaN());
    return out;
  }
  const std::vector<int> label = fold_assignment(data.n(), folds, seed);
  Eigen::MatrixXd err(folds, static_cast<Index>(g));
  const double n = static_cast<double>(data.n());
  for (int f = 0; f < folds; ++f) {
    std::vector<Index> train, test;
    for (Index i = 0; i < data.n(); ++i)
      (label[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    Eigen::MatrixXd xtr(static_cast<Index>(train.size()), data.p());
    Eigen::VectorXd ytr(static_cast<Index>(train.size()));
    for (std::size_t r = 0; r < train.size(); ++r) {
      xtr.row(static_cast<Index>(r)) = data.X.row(train[r]);
      ytr(static_cast<Index>(r)) = data.y(train[r]);
    }
    Eigen::MatrixXd xte(static_cast<Index>(test.size()), data.p());
    Eigen::VectorXd yte(static_cast<Index>(test.size()));
    for (std::size_t r = 0; r < test.size(); ++r) {
      xte.row(static_cast<Index>(r)) = data.X.row(test[r]);
      yte(static_cast<Index>(r)) = data.y(test[r]);
    }
    Eigen::MatrixXd gram = xtr.transpose() * xtr;
    const Eigen::VectorXd xty = xtr.transpose() * ytr;
    const double scale = static_cast<double>(train.size()) / n;
    // Columns that are all zero on the training rows stay at zero.
    for (Index j = 0; j < data.p(); ++j)
      if (gram(j, j) == 0.0) gram(j, j) = 1.0;
    LassoOptions o = opts;
    o.max_sweeps = std::min(opts.max_sweeps, kCvMaxSweeps);
    const double tss = ytr.squaredNorm();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(data.p());
    bool saturated = false;
    for (std::size_t i = 0; i < g; ++i) {
      // Once the training fit interpolates, smaller penalties change nothing
      // of interest; the last error is carried down the grid.
      if (!saturated) {
        detail::gram_descent(gram, xty, grid[i] * scale, beta, o, false);
        err(f, static_cast<Index>(i)) = (yte - xte * beta).squaredNorm() / static_cast<double>(test.size());
        saturated = (ytr - xtr * beta).squaredNorm() < 1e-5 * tss;
      } else {
        err(f, static_cast<Index>(i)) = err(f, static_cast<Index>(i) - 1);
      }
    }
  }
  out.mean_error.resize(g);
  out.std_error.resize(g);
  for (std::size_t i = 0; i < g; ++i) {
    const Eigen::VectorXd col = err.col(static_cast<Index>(i));
    const double mean = col.mean();
    const double var = (col.array() - mean).square().sum() / static_cast<double>(folds - 1);
    out.mean_error[i] = mean;
    out.std_error[i] = std::sqrt(var / static_cast<double>(folds));
  }
  out.best = static_cast<std::size_t>(
      std::min_element(out.mean_error.begin(), out.mean_error.end()) - out.mean_error.begin());
  out.chosen = out.best;
  if (rule == LambdaRule::OneSe) {
    const double bound = out.mean_error[out.best] + out.std_error[out.best];
    for (std::size_t i = 0; i <= out.best; ++i)
      if (out.mean_error[i] <= bound) {
        out.chosen = i;
        break;
      }
  }
  out.lambda = grid[out.chosen];
  return out;
}

// ---------------------------------------------------------------------------
// Selection event algebra. With G = X_M'X_M and W = X_-M' X_M G^-1 the lasso
// selects (M, s) at y exactly when
//   A1 y < u1(s):        s_k (eta_k - lambda (G^-1 s)_k) > 0,
//   l0(s) < A0 y < u0(s): -1 - W s < xi < 1 - W s.

struct SelectionEvent {
  std::vector<Index> active;
  std::vector<Index> inactive;
  Eigen::VectorXd signs;
  double lambda = 0.0;
  Eigen::MatrixXd A1;          // |M| x n, for `signs`
  Eigen::VectorXd u1;
  Eigen::MatrixXd A0;          // (p - |M|) x n
  Eigen::VectorXd l0;
  Eigen::VectorXd u0;
  Eigen::MatrixXd XtX_M_inv;   // G^-1
  Eigen::MatrixXd W;           // X_-M' X_M G^-1

  Index m() const { return static_cast<Index>(active.size()); }

  // lambda G^-1 s: the active coordinates of eta must exceed it in sign.
  Eigen::VectorXd shift(const Eigen::VectorXd& s) const { return lambda * (XtX_M_inv * s); }
  Eigen::VectorXd u1_for(const Eigen::VectorXd& s) const {
    return -(s.array() * shift(s).array()).matrix();
  }
  Eigen::VectorXd l0_for(const Eigen::VectorXd& s) const {
    return (-1.0 - (W * s).array()).matrix();
  }
  Eigen::VectorXd u0_for(const Eigen::VectorXd& s) const {
    return (1.0 - (W * s).array()).matrix();
  }
};

inline constexpr double kMaxGramCondition = 1e12;

inline Eigen::MatrixXd gram_inverse(const Eigen::MatrixXd& xm) {
  const Index m = xm.cols();
  if (m == 0) return Eigen::MatrixXd(0, 0);
  const Eigen::MatrixXd g = xm.transpose() * xm;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxGramCondition)
    throw Error(ErrorKind::RankDeficient, "selected columns are (numerically) rank deficient");
  return g.llt().solve(Eigen::MatrixXd::Identity(m, m));
}

inline SelectionEvent selection_event(const Eigen::MatrixXd& X, const std::vector<Index>& active,
                                      const Eigen::VectorXd& signs, double lambda) {
  if (!(lambda > 0.0)) throw Error(ErrorKind::InvalidArgument, "lambda must be positive");
  if (static_cast<Index>(active.size()) != signs.size())
    throw Error(ErrorKind::InvalidArgument, "one sign per active variable");
  SelectionEvent ev;
  ev.active = active;
  ev.inactive = detail::complement(X.cols(), active);
  ev.signs = signs;
  ev.lambda = lambda;
  const Eigen::MatrixXd xm = detail::columns(X, ev.active);
  const Eigen::MatrixXd xo = detail::columns(X, ev.inactive);
  ev.XtX_M_inv = gram_inverse(xm);
  const Index m = ev.m();
  ev.W = xo.transpose() * xm * ev.XtX_M_inv;
  const Eigen::MatrixXd ols = ev.XtX_M_inv * xm.transpose();  // |M| x n
  ev.A1 = -(signs.asDiagonal() * ols);
  ev.u1 = m > 0 ? ev.u1_for(signs) : Eigen::VectorXd(0);
  ev.A0 = (xo.transpose() - ev.W * xm.transpose()) / lambda;
  ev.l0 = ev.l0_for(signs);
  ev.u0 = ev.u0_for(signs);
  return ev;
}

inline SelectionEvent selection_event(const Eigen::MatrixXd& X, const LassoFit& fit) {
  return selection_event(X, fit.active, fit.signs, fit.lambda);
}

struct EventCheck {
  bool active_ok = false;
  bool inactive_ok = false;
  bool both() const { return active_ok && inactive_ok; }
};

// Membership of (eta, xi) in the event for sign vector s. `slack` relaxes the
// strict inequalities: active coefficients may be as low as -slack in sign,
// inactive correlations |xi + W s| up to 1 + slack.
inline EventCheck in_event(const SelectionEvent& ev, const Eigen::VectorXd& eta,
                           const Eigen::VectorXd& xi, const Eigen::VectorXd& s, double slack = 0.0) {
  if (eta.size() != ev.m() || s.size() != ev.m() ||
      xi.size() != static_cast<Index>(ev.inactive.size()))
    throw Error(ErrorKind::InvalidArgument, "eta, xi and s dimensions do not match the event");
  EventCheck out;
  out.active_ok = true;
  if (ev.m() > 0) {
    const Eigen::VectorXd b = eta - ev.shift(s);
    for (Index k = 0; k < b.size(); ++k)
      if (!(s(k) * b(k) > -slack)) out.active_ok = false;
  }
  out.inactive_ok = true;
  const Eigen::VectorXd ws = ev.m() > 0 ? Eigen::VectorXd(ev.W * s)
                                        : Eigen::VectorXd::Zero(xi.size());
  for (Index i = 0; i < xi.size(); ++i)
    if (!(std::abs(xi(i) + ws(i)) < 1.0 + slack)) out.inactive_ok = false;
  return out;
}

struct EtaXi {
  Eigen::VectorXd eta;      // G^-1 X_M'y
  Eigen::VectorXd xi;       // A0 y
  Eigen::MatrixXd cov_eta;  // sigma2 G^-1
  Eigen::MatrixXd cov_xi;   // sigma2 A0 A0'
};

inline EtaXi eta_xi(const Dataset& data, const std::vector<Index>& active, double lambda,
                    double sigma2 = 1.0) {
  if (!(lambda > 0.0)) throw Error(ErrorKind::InvalidArgument, "lambda must be positive");
  const std::vector<Index> inactive = detail::complement(data.p(), active);
  const Eigen::MatrixXd xm = detail::columns(data.X, active);
  const Eigen::MatrixXd xo = detail::columns(data.X, inactive);
  const Eigen::MatrixXd ginv = gram_inverse(xm);
  EtaXi out;
  out.eta = ginv * (xm.transpose() * data.y);
  const Eigen::VectorXd resid = data.y - xm * out.eta;  // (I - P_M) y
  out.xi = xo.transpose() * resid / lambda;
  out.cov_eta = sigma2 * ginv;
  // A0 A0' = X_-M'(I - P_M) X_-M / lambda^2
  const Eigen::MatrixXd xo_perp = xo - xm * (ginv * (xm.transpose() * xo));
  out.cov_xi = sigma2 * (xo.transpose() * xo_perp) / (lambda * lambda);
  out.cov_xi = 0.5 * (out.cov_xi + out.cov_xi.transpose()).eval();
  return out;
}

// Refitted least squares on the columns in `active`.
inline Eigen::VectorXd refit_least_squares(const Dataset& data, const std::vector<Index>& active) {
  const Eigen::MatrixXd xm = detail::columns(data.X, active);
  return gram_inverse(xm) * (xm.transpose() * data.y);
}

}  // namespace postsel
