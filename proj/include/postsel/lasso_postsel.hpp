#pragma once

// Post-selection inference for the lasso: a delayed-rejection
// Metropolis-Hastings sampler over (eta, xi, s) restricted to the selection
// event, the stochastic-ascent conditional MLE with sign constraints,
// conditional-Wald intervals, and imputation strategies for E(A0 y).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "postsel/error.hpp"
#include "postsel/lasso_core.hpp"
#include "postsel/normal.hpp"
#include "postsel/normal_means.hpp"
#include "postsel/rng.hpp"
#include "postsel/stats.hpp"
#include "postsel/truncated_gaussian.hpp"

namespace postsel {

// How the unknown mean of xi = A0 y is filled in: zero, the observed value
// (plugin), ignored altogether (none: xi is not truncated and the inactive
// constraints are dropped), or a supplied vector (truth).
struct ImputationStrategy {
  enum class Kind { Zero, Plugin, None, Truth };
  Kind kind = Kind::Zero;
  Eigen::VectorXd truth;

  static ImputationStrategy zero() { return {Kind::Zero, {}}; }
  static ImputationStrategy plugin() { return {Kind::Plugin, {}}; }
  static ImputationStrategy none() { return {Kind::None, {}}; }
  static ImputationStrategy with_truth(Eigen::VectorXd v) { return {Kind::Truth, std::move(v)}; }

  bool truncates() const { return kind != Kind::None; }
};

inline const char* to_string(ImputationStrategy::Kind k) {
  switch (k) {
    case ImputationStrategy::Kind::Zero: return "zero";
    case ImputationStrategy::Kind::Plugin: return "plugin";
    case ImputationStrategy::Kind::None: return "none";
    case ImputationStrategy::Kind::Truth: return "truth";
  }
  return "unknown";
}

inline ImputationStrategy::Kind parse_imputation(std::string_view s) {
  if (s == "zero") return ImputationStrategy::Kind::Zero;
  if (s == "plugin") return ImputationStrategy::Kind::Plugin;
  if (s == "none") return ImputationStrategy::Kind::None;
  if (s == "truth") return ImputationStrategy::Kind::Truth;
  throw Error(ErrorKind::Config, "imputation must be one of zero, plugin, none, truth");
}

namespace detail {

// Lower Cholesky factor of cov with the coordinates reordered so that each
// step takes the one with the smallest conditional interval mass, the earlier
// ones being set to their truncated means. Permutes lo and hi to match.
inline Eigen::MatrixXd ghk_prioritize(const Eigen::MatrixXd& cov, Eigen::VectorXd& lo,
                                      Eigen::VectorXd& hi) {
  const Index d = cov.rows();
  Eigen::MatrixXd c = cov;
  Eigen::MatrixXd factor = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(d);
  const double floor = 1e-14 * cov.diagonal().maxCoeff();
  for (Index i = 0; i < d; ++i) {
    Index best = i;
    double best_mass = normal::kInf;
    for (Index j = i; j < d; ++j) {
      const double sd = std::sqrt(std::max(c(j, j) - factor.row(j).head(i).squaredNorm(), floor));
      const double shift = factor.row(j).head(i).dot(y.head(i));
      const double lm = normal::log_interval_mass((lo(j) - shift) / sd, (hi(j) - shift) / sd);
      if (lm < best_mass) best_mass = lm, best = j;
    }
    if (best != i) {
      c.row(i).swap(c.row(best));
      c.col(i).swap(c.col(best));
      factor.row(i).swap(factor.row(best));
      std::swap(lo(i), lo(best));
      std::swap(hi(i), hi(best));
    }
    const double lii = std::sqrt(std::max(c(i, i) - factor.row(i).head(i).squaredNorm(), floor));
    factor(i, i) = lii;
    for (Index j = i + 1; j < d; ++j)
      factor(j, i) = (c(j, i) - factor.row(j).head(i).dot(factor.row(i).head(i))) / lii;
    const double shift = factor.row(i).head(i).dot(y.head(i));
    const double a = (lo(i) - shift) / lii, b = (hi(i) - shift) / lii;
    const double lm = normal::log_interval_mass(a, b);
    y(i) = lm > -normal::kInf ? (normal::pdf(a) - normal::pdf(b)) / std::exp(lm) : 0.0;
  }
  return factor;
}

// log P(lo < x < hi) for x ~ N(mean, cov) by the GHK simulator over the
// prioritized ordering: coordinates are drawn in turn from their conditional
// truncated laws and the product of the conditional interval masses is
// averaged.
template <class URBG>
double ghk_log_box_probability(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov,
                               const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                               std::size_t draws, URBG& rng) {
  const Index d = mean.size();
  if (d == 0 || draws == 0) return 0.0;
  Eigen::VectorXd l = lo - mean, h = hi - mean;
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = ghk_prioritize(cov, l, h);
  std::vector<double> logw(draws);
  Eigen::VectorXd z(d);
  for (std::size_t t = 0; t < draws; ++t) {
    double lw = 0.0;
    for (Index i = 0; i < d; ++i) {
      const double shift = rows.row(i).head(i).dot(z.head(i));
      const double a = (l(i) - shift) / rows(i, i);
      const double b = (h(i) - shift) / rows(i, i);
      const double lm = normal::log_interval_mass(a, b);
      lw += lm;
      if (!(lm > -normal::kInf)) break;
      z(i) = std_inside(uniform01(rng), a, b);
    }
    logw[t] = lw;
  }
  const double top = *std::max_element(logw.begin(), logw.end());
  if (!(top > -normal::kInf)) return -normal::kInf;
  double acc = 0.0;
  for (double lw : logw) acc += std::exp(lw - top);
  return top + std::log(acc / static_cast<double>(draws));
}

}  // namespace detail

// Sampler state. `signs` is the lasso sign vector of the state: s_k = +1
// exactly when eta_k lies above its upper threshold.
struct MhState {
  Eigen::VectorXd eta;
  Eigen::VectorXd xi;
  Eigen::VectorXd signs;
};

struct MhStats {
  std::size_t sweeps = 0;
  std::size_t proposals = 0;
  std::size_t same_sign = 0;           // first-stage moves keeping the signs
  std::size_t first_stage_flips = 0;   // sign changes accepted at stage one
  std::size_t weight_rejects = 0;      // sign changes refused on the box-mass ratio
  std::size_t second_stage = 0;
  std::size_t second_stage_accepted = 0;
  std::size_t reverse_rejects = 0;     // reverse first stage would have accepted
  std::size_t numerical_rejects = 0;
  std::size_t degenerate = 0;
  std::size_t global_proposals = 0;
  std::size_t global_accepted = 0;
  std::size_t shift_proposals = 0;
  std::size_t shift_accepted = 0;
  std::size_t pair_proposals = 0;
  std::size_t pair_accepted = 0;

  double first_stage_rate() const {
    return proposals ? static_cast<double>(same_sign + first_stage_flips) / static_cast<double>(proposals) : 0.0;
  }
  double second_stage_rate() const {
    return second_stage ? static_cast<double>(second_stage_accepted) / static_cast<double>(second_stage) : 0.0;
  }
};

// Box masses w(s) = P(-1 - W s < xi < 1 - W s) for xi ~ N(mean, cov),
// estimated by GHK on first use with a seed derived from s, so that each is a
// fixed function of s. With a zero mean w(s) = w(-s) holds exactly, and both
// share one estimate.
class BoxWeights {
 public:
  BoxWeights(Eigen::VectorXd mean, Eigen::MatrixXd cov, Eigen::MatrixXd w, std::size_t draws,
             std::uint64_t seed)
      : mean_(std::move(mean)), cov_(std::move(cov)), w_(std::move(w)), draws_(draws),
        seed_(seed), symmetric_(mean_.isZero(0.0)) {}

  const Eigen::VectorXd& mean() const { return mean_; }
  std::size_t size() const { return cache_.size(); }

  double log_weight(const Eigen::VectorXd& signs) {
    const double flip = symmetric_ && signs.size() > 0 && signs(0) < 0.0 ? -1.0 : 1.0;
    std::string key(static_cast<std::size_t>(signs.size()), '+');
    for (Index k = 0; k < signs.size(); ++k)
      if (flip * signs(k) < 0.0) key[static_cast<std::size_t>(k)] = '-';
    if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
    const Eigen::VectorXd lo = (-1.0 - (flip * (w_ * signs)).array()).matrix();
    const Eigen::VectorXd hi = (lo.array() + 2.0).matrix();
    Rng rng = make_rng(seed_, 0, key);
    const double lw = detail::ghk_log_box_probability(mean_, cov_, lo, hi, draws_, rng);
    cache_.emplace(std::move(key), lw);
    return lw;
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd w_;
  std::size_t draws_;
  std::uint64_t seed_;
  bool symmetric_;
  std::map<std::string, double> cache_;
};

struct MhSpec {
  SelectionEvent event;
  Eigen::VectorXd beta;      // mean of eta before truncation
  double sigma2 = 1.0;
  Eigen::VectorXd xi_mean;
  bool truncate_xi = true;
  Eigen::MatrixXd cov_eta;
  Eigen::MatrixXd prec_eta;
  Eigen::MatrixXd eta_factor;  // lower Cholesky factor of cov_eta
  Eigen::MatrixXd gram;        // X_M' X_M
  ConditionalCoeffs eta_coeffs;
  Eigen::MatrixXd cov_xi;
  Eigen::MatrixXd xi_factor;  // lower Cholesky factor of cov_xi (+ ridge)
  ConditionalCoeffs xi_coeffs;
  double xi_ridge = 0.0;
  std::size_t xi_cycles = 2;
  // Independence proposals per sweep: eta' ~ N(beta, cov_eta) with the sign
  // vector it implies, accepted on the box-mass ratio w(s') / w(s).
  std::size_t global_moves = 1;
  // Moves of the same kind redrawing eta_j, and then (eta_j, eta_partner[j]),
  // from the untruncated conditional law given the other coordinates.
  bool shift_moves = true;
  std::vector<Index> partner;  // largest partial correlation with coordinate j
  // GHK draws and seed for the box masses w(s) = P(l0(s) < xi < u0(s)).
  std::size_t box_draws = 500;
  std::uint64_t box_seed = 0x5EED0B0CULL;
  // Shared by copies and filled lazily; rebuilt when xi_mean changes.
  mutable std::shared_ptr<BoxWeights> box;
};

// log w(s); 0 when xi is not truncated. The sign changes of every move are
// accepted on w(s') / w(s), which is what xi contributes once integrated out.
inline double log_box_weight(const MhSpec& spec, const Eigen::VectorXd& signs) {
  if (!spec.truncate_xi || spec.xi_mean.size() == 0 || spec.event.m() == 0) return 0.0;
  if (!spec.box || spec.box->mean() != spec.xi_mean)
    spec.box = std::make_shared<BoxWeights>(spec.xi_mean, spec.cov_xi, spec.event.W,
                                            spec.box_draws, spec.box_seed);
  return spec.box->log_weight(signs);
}

namespace detail {

// Adds a growing multiple of the mean variance to the diagonal until the
// conditional coefficients can be formed. Needed when p - |M| > n - |M|.
inline double regularize_covariance(Eigen::MatrixXd& cov, ConditionalCoeffs& coeffs) {
  const Index d = cov.rows();
  if (d == 0) return 0.0;
  const double scale = cov.trace() / static_cast<double>(d);
  double ridge = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    try {
      coeffs = precompute_conditionals(cov);
      return ridge;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::SingularCovariance) throw;
    }
    const double next = scale * std::pow(10.0, -8.0 + attempt);
    cov.diagonal().array() += next - ridge;
    ridge = next;
  }
  throw Error(ErrorKind::SingularCovariance, "inactive covariance could not be regularized");
}

}  // namespace detail

inline MhSpec make_mh_spec(const Dataset& data, const SelectionEvent& event, double sigma2,
                           const ImputationStrategy& strategy) {
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw Error(ErrorKind::InvalidArgument, "sigma2 must be positive and finite");
  const EtaXi ex = eta_xi(data, event.active, event.lambda, sigma2);
  MhSpec spec;
  spec.event = event;
  spec.beta = ex.eta;
  spec.sigma2 = sigma2;
  spec.cov_eta = ex.cov_eta;
  const Index m = event.m();
  spec.prec_eta = m > 0 ? Eigen::MatrixXd(detail::spd_inverse(spec.cov_eta)) : Eigen::MatrixXd(0, 0);
  spec.eta_coeffs = precompute_conditionals(spec.cov_eta);
  spec.eta_factor = m > 0 ? Eigen::MatrixXd(spec.cov_eta.llt().matrixL()) : Eigen::MatrixXd(0, 0);
  if (m >= 2) {
    spec.partner.resize(static_cast<std::size_t>(m));
    for (Index j = 0; j < m; ++j) {
      Index best = j == 0 ? 1 : 0;
      double best_r = -1.0;
      for (Index k = 0; k < m; ++k) {
        if (k == j) continue;
        const double r = std::abs(spec.prec_eta(j, k)) / std::sqrt(spec.prec_eta(j, j) * spec.prec_eta(k, k));
        if (r > best_r) best_r = r, best = k;
      }
      spec.partner[static_cast<std::size_t>(j)] = best;
    }
  }
  const Eigen::MatrixXd xm = detail::columns(data.X, event.active);
  spec.gram = xm.transpose() * xm;
  const Index d = ex.xi.size();
  switch (strategy.kind) {
    case ImputationStrategy::Kind::Zero:
    case ImputationStrategy::Kind::None: spec.xi_mean = Eigen::VectorXd::Zero(d); break;
    case ImputationStrategy::Kind::Plugin: spec.xi_mean = ex.xi; break;
    case ImputationStrategy::Kind::Truth:
      if (strategy.truth.size() != d)
        throw Error(ErrorKind::InvalidArgument, "truth imputation needs a vector of length p - |M|");
      spec.xi_mean = strategy.truth;
      break;
  }
  spec.truncate_xi = strategy.truncates();
  spec.cov_xi = ex.cov_xi;
  spec.xi_ridge = detail::regularize_covariance(spec.cov_xi, spec.xi_coeffs);
  if (d > 0) spec.xi_factor = spec.cov_xi.llt().matrixL();
  return spec;
}

// Eta-thresholds of coordinate j given the other signs: eta_j must lie
// outside (l_j, u_j), with s_j = +1 above u_j and -1 below l_j.
inline std::pair<double, double> sign_thresholds(Index j, const Eigen::VectorXd& signs,
                                                 const SelectionEvent& event) {
  const double own = event.lambda * event.XtX_M_inv(j, j);
  const double base = event.lambda * event.XtX_M_inv.row(j).dot(signs) - own * signs(j);
  return {base - own, base + own};
}

inline MhState initial_state(const MhSpec& spec, const Dataset& data) {
  const EtaXi ex = eta_xi(data, spec.event.active, spec.event.lambda, spec.sigma2);
  return {ex.eta, ex.xi, spec.event.signs};
}

// Draw of xi from N(xi_mean, cov_xi) restricted to l0(s) < xi < u0(s) by a
// few Gibbs cycles started at `xi`; an exact untruncated draw when the
// strategy ignores the inactive constraints.
template <class URBG>
Eigen::VectorXd sample_xi(const MhSpec& spec, const Eigen::VectorXd& signs, Eigen::VectorXd xi,
                          URBG& rng, MhStats* stats = nullptr) {
  const Index d = spec.xi_mean.size();
  if (d == 0) return xi;
  if (!spec.truncate_xi) {
    Eigen::VectorXd z(d);
    for (Index i = 0; i < d; ++i) z(i) = standard_normal(rng);
    return spec.xi_mean + spec.xi_factor * z;
  }
  const Eigen::VectorXd lo = spec.event.m() > 0 ? spec.event.l0_for(signs) : Eigen::VectorXd::Constant(d, -1.0);
  TmvnSpec box;
  box.mu = spec.xi_mean;
  box.regions.reserve(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) box.regions.push_back(TruncRegion::inside(lo(i), lo(i) + 2.0));
  GibbsStats g;
  for (std::size_t c = 0; c < spec.xi_cycles; ++c) gibbs_cycle(xi, box, spec.xi_coeffs, rng, &g);
  if (stats) stats->degenerate += g.degenerate;
  return xi;
}

namespace detail {

inline double log_gauss_kernel(const MhSpec& spec, const Eigen::VectorXd& eta) {
  const Eigen::VectorXd dv = eta - spec.beta;
  return -0.5 * dv.dot(spec.prec_eta * dv);
}

// log density at x of N(mean, var) truncated to the tail s (x - cut) > 0.
inline double log_tail_density(double x, double mean, double var, double sign, double cut) {
  const double sd = std::sqrt(var);
  const double z = (x - mean) / sd;
  const double c = (cut - mean) / sd;
  const double log_mass = sign > 0 ? normal::log_sf(c) : normal::log_cdf(c);
  return normal::log_pdf(z) - std::log(sd) - log_mass;
}

// First-stage proposal density of eta_j = x given the rest of `eta`.
inline double log_first_stage(const MhSpec& spec, const Eigen::VectorXd& eta, Index j, double x,
                              double l, double u) {
  const double mean = spec.beta(j) + spec.eta_coeffs.weights.row(j).dot(eta - spec.beta);
  const double var = spec.eta_coeffs.cond_var(j);
  const double sd = std::sqrt(var);
  return normal::log_pdf((x - mean) / sd) - std::log(sd) -
         region_log_mass(mean, var, TruncRegion::outside(l, u));
}

// log of the delayed-rejection ratio for the move x -> y that changes the
// sign of coordinate j, box masses included; cx / cy are lambda G^-1 s under
// each sign vector.
inline double log_accept_ratio(const MhSpec& spec, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& sx, const Eigen::VectorXd& cx,
                               const Eigen::VectorXd& y, const Eigen::VectorXd& sy,
                               const Eigen::VectorXd& cy, Index j) {
  const double own = spec.event.lambda * spec.event.XtX_M_inv(j, j);
  const double base = cx(j) - own * sx(j);
  const double l = base - own, u = base + own;
  double num = log_gauss_kernel(spec, y) + log_first_stage(spec, y, j, x(j), l, u);
  double den = log_gauss_kernel(spec, x) + log_first_stage(spec, x, j, y(j), l, u);
  for (Index k = 0; k < x.size(); ++k) {
    if (k == j) continue;
    const double v = spec.eta_coeffs.cond_var(k);
    num += log_tail_density(x(k), y(k), v, sx(k), cx(k));
    den += log_tail_density(y(k), x(k), v, sy(k), cy(k));
  }
  return num - den + log_box_weight(spec, sy) - log_box_weight(spec, sx);
}

// Sign vector under which eta satisfies the active constraints, found as the
// signs of argmin_b 1/2 (b - eta)' G (b - eta) + lambda |b|_1; empty when that
// minimizer has a zero coordinate or the constraints fail numerically.
inline std::optional<Eigen::VectorXd> implied_signs(const MhSpec& spec, const Eigen::VectorXd& eta,
                                                    Eigen::VectorXd warm) {
  const SelectionEvent& ev = spec.event;
  LassoOptions o;
  o.max_sweeps = 10000;
  try {
    gram_descent(spec.gram, spec.gram * eta, ev.lambda, warm, o);
  } catch (const Error&) {
    return std::nullopt;
  }
  Eigen::VectorXd s(warm.size());
  for (Index k = 0; k < warm.size(); ++k) {
    if (warm(k) == 0.0) return std::nullopt;
    s(k) = warm(k) > 0.0 ? 1.0 : -1.0;
  }
  const Eigen::VectorXd c = ev.shift(s);
  for (Index k = 0; k < s.size(); ++k)
    if (!(s(k) * (eta(k) - c(k)) > 0.0)) return std::nullopt;
  return s;
}

}  // namespace detail

// Acceptance probability of the second-stage move from `current` to the
// full proposal (`proposal_eta`, `proposal_signs`) that changed coordinate j,
// evaluated in log space; 0 when the log ratio is not finite.
inline double acceptance_log_ratio(const MhSpec& spec, const MhState& current,
                                   const Eigen::VectorXd& proposal_eta,
                                   const Eigen::VectorXd& proposal_signs, Index j) {
  const Eigen::VectorXd cx = spec.event.shift(current.signs);
  const Eigen::VectorXd cy = spec.event.shift(proposal_signs);
  return detail::log_accept_ratio(spec, current.eta, current.signs, cx, proposal_eta,
                                  proposal_signs, cy, j);
}

inline double acceptance_prob(const MhSpec& spec, const MhState& current,
                              const Eigen::VectorXd& proposal_eta,
                              const Eigen::VectorXd& proposal_signs, Index j) {
  const double r = acceptance_log_ratio(spec, current, proposal_eta, proposal_signs, j);
  if (!std::isfinite(r)) return 0.0;
  return r >= 0.0 ? 1.0 : std::exp(r);
}

// One outer iteration over (eta, s) with xi integrated out: each active
// coordinate of eta gets a full-conditional proposal outside its sign
// thresholds, falling back to a second-stage proposal when a sign change
// breaks another coordinate, then a Gibbs move within its tail, and the
// sign-shift moves follow. Sign changes carry the box-mass ratio w(s') / w(s).
// Finally xi is redrawn in the box of the current signs.
template <class URBG>
void mh_sweep(MhState& st, const MhSpec& spec, URBG& rng, MhStats* stats = nullptr) {
  MhStats local;
  MhStats& s = stats ? *stats : local;
  const SelectionEvent& ev = spec.event;
  const Index m = ev.m();
  ++s.sweeps;
  if (m == 0) {
    st.xi = sample_xi(spec, st.signs, std::move(st.xi), rng, &s);
    return;
  }
  const double lam = ev.lambda;
  double log_w = log_box_weight(spec, st.signs);

  // Metropolis step on the box masses for a move to (eta, signs) whose
  // proposal is otherwise exact for the Gaussian part.
  auto translate = [&](const Eigen::VectorXd& eta, const Eigen::VectorXd& signs) {
    double log_w_new = log_w;
    if (signs != st.signs) {
      log_w_new = log_box_weight(spec, signs);
      const double log_r = log_w_new - log_w;
      if (!(log_r >= 0.0 || std::log(uniform01(rng)) < log_r)) return false;
    }
    st.eta = eta;
    st.signs = signs;
    log_w = log_w_new;
    return true;
  };

  Eigen::VectorXd prop(m);
  for (std::size_t g = 0; g < spec.global_moves; ++g) {
    ++s.global_proposals;
    for (Index k = 0; k < m; ++k) prop(k) = standard_normal(rng);
    prop = spec.beta + spec.eta_factor * prop;
    auto sp = detail::implied_signs(spec, prop, prop - ev.shift(st.signs));
    if (sp && translate(prop, *sp)) ++s.global_accepted;
  }

  Eigen::VectorXd c = ev.shift(st.signs);
  Eigen::VectorXd c_new(m), eta2(m);

  for (Index j = 0; j < m; ++j) {
    ++s.proposals;
    const double own = lam * ev.XtX_M_inv(j, j);
    const double base = c(j) - own * st.signs(j);
    const double l = base - own, u = base + own;
    const double cmean = spec.beta(j) + spec.eta_coeffs.weights.row(j).dot(st.eta - spec.beta);
    const auto r = try_sample_outside(rng, cmean, spec.eta_coeffs.cond_var(j), l, u);
    if (!r) {
      ++s.degenerate;
      continue;
    }
    const double sj = *r >= u ? 1.0 : -1.0;
    if (sj == st.signs(j)) {
      st.eta(j) = *r;
      ++s.same_sign;
      continue;
    }
    const double delta = sj - st.signs(j);
    c_new = c + (lam * delta) * ev.XtX_M_inv.col(j);
    Eigen::VectorXd s_new = st.signs;
    s_new(j) = sj;
    bool first_ok = true;
    for (Index k = 0; k < m && first_ok; ++k)
      if (k != j && !(st.signs(k) * (st.eta(k) - c_new(k)) > 0.0)) first_ok = false;
    if (first_ok) {
      const double log_w_new = log_box_weight(spec, s_new);
      const double log_r = log_w_new - log_w;
      if (!(log_r >= 0.0 || std::log(uniform01(rng)) < log_r)) {
        ++s.weight_rejects;
        continue;
      }
      st.eta(j) = *r;
      st.signs = s_new;
      c = c_new;
      log_w = log_w_new;
      ++s.first_stage_flips;
      continue;
    }
    // Second stage: move the other coordinates into their same-sign tails
    // under the thresholds implied by the new sign vector.
    ++s.second_stage;
    eta2 = st.eta;
    eta2(j) = *r;
    bool drawn = true;
    for (Index k = 0; k < m && drawn; ++k) {
      if (k == j) continue;
      const double v = spec.eta_coeffs.cond_var(k);
      const auto z = s_new(k) > 0 ? try_sample_inside(uniform01(rng), st.eta(k), v, c_new(k), normal::kInf)
                                  : try_sample_inside(uniform01(rng), st.eta(k), v, -normal::kInf, c_new(k));
      if (!z) drawn = false;
      else eta2(k) = *z;
    }
    if (!drawn) {
      ++s.degenerate;
      continue;
    }
    bool reverse_ok = true;
    for (Index k = 0; k < m && reverse_ok; ++k)
      if (k != j && !(st.signs(k) * (eta2(k) - c(k)) > 0.0)) reverse_ok = false;
    if (reverse_ok) {
      ++s.reverse_rejects;
      continue;
    }
    const double log_r = detail::log_accept_ratio(spec, st.eta, st.signs, c, eta2, s_new, c_new, j);
    if (!std::isfinite(log_r)) {
      ++s.numerical_rejects;
      continue;
    }
    if (log_r >= 0.0 || std::log(uniform01(rng)) < log_r) {
      st.eta = eta2;
      st.signs = s_new;
      c = c_new;
      log_w = log_box_weight(spec, s_new);
      ++s.second_stage_accepted;
    }
  }

  // Gibbs update of each eta_j within its current tail: given the signs, the
  // other constraints and the xi box do not involve eta_j.
  for (Index j = 0; j < m; ++j) {
    const double cmean = spec.beta(j) + spec.eta_coeffs.weights.row(j).dot(st.eta - spec.beta);
    const double v_j = spec.eta_coeffs.cond_var(j);
    const auto z = st.signs(j) > 0 ? try_sample_inside(uniform01(rng), cmean, v_j, c(j), normal::kInf)
                                   : try_sample_inside(uniform01(rng), cmean, v_j, -normal::kInf, c(j));
    if (z) st.eta(j) = *z;
    else ++s.degenerate;
  }

  if (spec.shift_moves) {
    for (Index j = 0; j < m; ++j) {
      ++s.shift_proposals;
      const double cmean = spec.beta(j) + spec.eta_coeffs.weights.row(j).dot(st.eta - spec.beta);
      prop = st.eta;
      prop(j) = cmean + std::sqrt(spec.eta_coeffs.cond_var(j)) * standard_normal(rng);
      auto sp = detail::implied_signs(spec, prop, prop - c);
      if (sp && translate(prop, *sp)) {
        c = ev.shift(st.signs);
        ++s.shift_accepted;
      }
    }
    // Pair version: conditional precision P_JJ and mean
    // beta_J - P_JJ^-1 P_J,-J (eta_-J - beta_-J) for J = {j, k}.
    const Eigen::MatrixXd& P = spec.prec_eta;
    for (Index j = 0; j < m && !spec.partner.empty(); ++j) {
      const Index k = spec.partner[static_cast<std::size_t>(j)];
      ++s.pair_proposals;
      const Eigen::VectorXd dev = st.eta - spec.beta;
      const double rj = P.row(j).dot(dev) - P(j, j) * dev(j) - P(j, k) * dev(k);
      const double rk = P.row(k).dot(dev) - P(k, j) * dev(j) - P(k, k) * dev(k);
      Eigen::Matrix2d pjj;
      pjj << P(j, j), P(j, k), P(k, j), P(k, k);
      const Eigen::Matrix2d cov2 = pjj.inverse();
      const Eigen::Vector2d mean2 = Eigen::Vector2d(spec.beta(j), spec.beta(k)) - cov2 * Eigen::Vector2d(rj, rk);
      const Eigen::Matrix2d l2 = cov2.llt().matrixL();
      const Eigen::Vector2d draw = mean2 + l2 * Eigen::Vector2d(standard_normal(rng), standard_normal(rng));
      prop = st.eta;
      prop(j) = draw(0);
      prop(k) = draw(1);
      auto sp = detail::implied_signs(spec, prop, prop - c);
      if (sp && translate(prop, *sp)) {
        c = ev.shift(st.signs);
        ++s.pair_accepted;
      }
    }
  }
  st.xi = sample_xi(spec, st.signs, std::move(st.xi), rng, &s);
}

// ---------------------------------------------------------------------------
// Conditional MLE.

struct LassoConditionalFit {
  std::vector<Index> active;
  Eigen::VectorXd signs;            // lasso signs at the observed data
  double lambda = 0.0;
  double sigma2 = 0.0;
  ImputationStrategy::Kind strategy = ImputationStrategy::Kind::Zero;
  Eigen::VectorXd beta_lasso;       // over M
  Eigen::VectorXd beta_init;        // refitted least squares eta
  Eigen::VectorXd beta_hat;
  Eigen::VectorXd ci_lower;
  Eigen::VectorXd ci_upper;
  Eigen::MatrixXd gram;             // X_M' X_M
  Eigen::VectorXd xty;              // X_M' y
  Eigen::MatrixXd samples;          // N x |M| eta draws at beta_hat
  Eigen::MatrixXd pivot_samples;    // N x |M|
  Eigen::VectorXd score_residual;   // X_M'y - mean(G eta*)
  Eigen::VectorXd score_stderr;
  Eigen::MatrixXd trajectory;       // n_steps x |M|
  std::size_t sign_projection_count = 0;
  MhStats acceptance_stats;
};

namespace detail {

inline void project_signs(Eigen::VectorXd& b, const Eigen::VectorXd& ref, std::size_t& count) {
  for (Index k = 0; k < b.size(); ++k) {
    const double s = ref(k) >= 0.0 ? 1.0 : -1.0;
    if (s * b(k) < 0.0) {
      b(k) = 0.0;
      ++count;
    }
  }
}

// Newton move beta += sigma2 V^-1 resid kept in the sign orthant of `ref`:
// minimizes 1/2 d'V d - sigma2 resid'd over d with beta + d in the orthant,
// by a primal active-set method started from the (feasible) current beta.
inline void constrained_newton(Eigen::VectorXd& beta, const Eigen::VectorXd& resid,
                               const Eigen::MatrixXd& v, double sigma2, const Eigen::VectorXd& ref,
                               std::size_t& count) {
  const Index m = beta.size();
  Eigen::VectorXd s(m);
  for (Index k = 0; k < m; ++k) s(k) = ref(k) >= 0.0 ? 1.0 : -1.0;
  const Eigen::VectorXd rhs_full = sigma2 * resid + v * beta;
  Eigen::VectorXd b = beta;
  std::vector<bool> pinned(static_cast<std::size_t>(m));
  for (Index k = 0; k < m; ++k) pinned[static_cast<std::size_t>(k)] = s(k) * b(k) <= 0.0;
  for (Index k = 0; k < m; ++k)
    if (pinned[static_cast<std::size_t>(k)]) b(k) = 0.0;

  Eigen::VectorXd target(m);
  for (Index iter = 0; iter < 20 * m + 20; ++iter) {
    std::vector<Index> free;
    for (Index k = 0; k < m; ++k)
      if (!pinned[static_cast<std::size_t>(k)]) free.push_back(k);
    const Index nf = static_cast<Index>(free.size());
    target.setZero();
    if (nf > 0) {
      Eigen::MatrixXd vff(nf, nf);
      Eigen::VectorXd rhs(nf);
      for (Index i = 0; i < nf; ++i) {
        rhs(i) = rhs_full(free[static_cast<std::size_t>(i)]);
        for (Index j = 0; j < nf; ++j)
          vff(i, j) = v(free[static_cast<std::size_t>(i)], free[static_cast<std::size_t>(j)]);
      }
      const Eigen::VectorXd x = vff.ldlt().solve(rhs);
      for (Index i = 0; i < nf; ++i) target(free[static_cast<std::size_t>(i)]) = x(i);
    }
    // Largest step toward the target that stays in the orthant.
    double step = 1.0;
    Index blocking = -1;
    for (Index k : free) {
      if (s(k) * target(k) < 0.0) {
        const double t = b(k) / (b(k) - target(k));
        if (t < step) step = t, blocking = k;
      }
    }
    if (blocking >= 0) {
      b += step * (target - b);
      b(blocking) = 0.0;
      pinned[static_cast<std::size_t>(blocking)] = true;
      continue;
    }
    b = target;
    // Release the pinned coordinate whose multiplier has the wrong sign.
    const Eigen::VectorXd grad = v * b - rhs_full;
    Index release = -1;
    double worst = 0.0;
    for (Index k = 0; k < m; ++k) {
      if (!pinned[static_cast<std::size_t>(k)]) continue;
      const double slope = s(k) * grad(k);  // derivative moving into the orthant
      if (slope < worst) worst = slope, release = k;
    }
    if (release < 0) break;
    pinned[static_cast<std::size_t>(release)] = false;
  }
  for (Index k = 0; k < m; ++k)
    if (pinned[static_cast<std::size_t>(k)]) ++count;
  beta = b;
}

}  // namespace detail

// Conditional-Wald intervals from the stored samples: pivots
// sigma2 V^-1 (G eta* - mean), V the sample covariance of G eta*.
inline void lasso_conditional_ci(LassoConditionalFit& fit, double alpha) {
  detail::check_alpha(alpha, static_cast<std::size_t>(fit.samples.rows()));
  const Eigen::MatrixXd stat = fit.samples * fit.gram;  // rows are (G eta*)'
  const Eigen::MatrixXd v = stats::covariance(stat);
  const Eigen::MatrixXd centered = stat.rowwise() - stat.colwise().mean();
  fit.pivot_samples = fit.sigma2 * v.ldlt().solve(centered.transpose()).transpose();
  detail::pivot_intervals(fit.pivot_samples, fit.beta_hat, alpha, fit.ci_lower, fit.ci_upper);
}

// Stochastic ascent
//   beta <- beta + gamma_i (X_M'y - G eta_i),  eta_i from one sampler sweep at beta,
// with the signs of beta held to those of the refitted estimate, iterate
// averaging, Newton polish rounds, and a final batch of samples.
template <class URBG>
LassoConditionalFit fit_lasso_mle(const Dataset& data, const LassoFit& lasso, double sigma2,
                                  const ImputationStrategy& strategy, const AscentOptions& opts,
                                  URBG& rng) {
  if (lasso.active.empty()) throw Error(ErrorKind::NoSelection, "the lasso selected no variables");
  if (opts.n_steps == 0 || opts.thin == 0 || opts.gibbs_cycles_per_step == 0)
    throw Error(ErrorKind::InvalidArgument, "steps, thin and sweeps per step must be positive");
  const SelectionEvent event = selection_event(data.X, lasso);
  MhSpec spec = make_mh_spec(data, event, sigma2, strategy);
  MhState state = initial_state(spec, data);
  const Index m = event.m();

  LassoConditionalFit fit;
  fit.active = lasso.active;
  fit.signs = lasso.signs;
  fit.lambda = lasso.lambda;
  fit.sigma2 = sigma2;
  fit.strategy = strategy.kind;
  fit.beta_lasso.resize(m);
  for (Index k = 0; k < m; ++k) fit.beta_lasso(k) = lasso.beta(lasso.active[static_cast<std::size_t>(k)]);
  fit.beta_init = state.eta;
  const Eigen::MatrixXd xm = detail::columns(data.X, lasso.active);
  fit.gram = xm.transpose() * xm;
  fit.xty = xm.transpose() * data.y;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(fit.gram, Eigen::EigenvaluesOnly);
  const StepSchedule gamma{opts.step_scale.value_or(1.0 / eig.eigenvalues().maxCoeff()),
                           opts.step_exponent};
  Eigen::VectorXd beta = fit.beta_init;
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(m);
  const std::size_t avg_from = detail::averaging_start(opts.n_steps, opts.average_fraction);
  fit.trajectory.resize(static_cast<Index>(opts.n_steps), m);
  MhStats& ms = fit.acceptance_stats;

  for (std::size_t i = 1; i <= opts.n_steps; ++i) {
    spec.beta = beta;
    for (std::size_t t = 0; t < opts.gibbs_cycles_per_step; ++t) mh_sweep(state, spec, rng, &ms);
    beta += gamma(i) * (fit.xty - fit.gram * state.eta);
    detail::project_signs(beta, fit.beta_init, fit.sign_projection_count);
    fit.trajectory.row(static_cast<Index>(i - 1)) = beta.transpose();
    if (i > avg_from) avg += beta;
  }
  fit.beta_hat = avg / static_cast<double>(opts.n_steps - avg_from);

  auto collect = [&](std::size_t count) {
    spec.beta = fit.beta_hat;
    fit.samples.resize(static_cast<Index>(count), m);
    for (std::size_t t = 0; t < opts.burn_in; ++t) mh_sweep(state, spec, rng, &ms);
    for (std::size_t r = 0; r < count; ++r) {
      for (std::size_t t = 0; t < opts.thin; ++t) mh_sweep(state, spec, rng, &ms);
      fit.samples.row(static_cast<Index>(r)) = state.eta.transpose();
    }
    return Eigen::MatrixXd(fit.samples * fit.gram);
  };

  if (opts.polish_samples > static_cast<std::size_t>(m) + 1) {
    for (std::size_t r = 0; r < opts.polish_rounds; ++r) {
      const Eigen::MatrixXd stat = collect(opts.polish_samples);
      const Eigen::VectorXd resid = fit.xty - stat.colwise().mean().transpose();
      detail::constrained_newton(fit.beta_hat, resid, stats::covariance(stat), sigma2,
                                 fit.beta_init, fit.sign_projection_count);
    }
  }
  const Eigen::MatrixXd stat = collect(opts.quantile_samples);
  if (opts.quantile_samples >= 2) {
    fit.score_residual = fit.xty - stat.colwise().mean().transpose();
    fit.score_stderr = stats::mc_stderr_columns(stat);
    const double alpha = 1.0 - opts.ci_level;
    if (static_cast<double>(opts.quantile_samples) >= 100.0 / alpha - 1e-9)
      lasso_conditional_ci(fit, alpha);
  }
  return fit;
}

template <class URBG>
LassoConditionalFit fit_lasso_mle(const Dataset& data, double lambda, double sigma2,
                                  const ImputationStrategy& strategy, const AscentOptions& opts,
                                  URBG& rng) {
  return fit_lasso_mle(data, fit_lasso(data, lambda), sigma2, strategy, opts, rng);
}

// Refitted least-squares Wald intervals eta_j -+ z sqrt(sigma2 (G^-1)_jj).
inline Intervals refitted_wald_ci(const Dataset& data, const std::vector<Index>& active,
                                  double sigma2, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw Error(ErrorKind::InvalidArgument, "alpha must lie in (0, 1]");
  const Eigen::MatrixXd xm = detail::columns(data.X, active);
  const Eigen::MatrixXd ginv = gram_inverse(xm);
  const Eigen::VectorXd eta = ginv * (xm.transpose() * data.y);
  const double z = normal::quantile(1.0 - alpha / 2.0);
  Intervals out;
  out.coords = active;
  out.lower = eta - z * (sigma2 * ginv.diagonal()).cwiseSqrt();
  out.upper = eta + z * (sigma2 * ginv.diagonal()).cwiseSqrt();
  return out;
}

// ---------------------------------------------------------------------------
// Imputation comparison and the exact conditional likelihood for |M| <= 2.

// Conditional log-likelihood of eta under beta, up to a constant:
//   log phi(eta; beta, sigma2 G^-1) - log sum_s w_s P_beta(A1(s)),
// with w_s = P(l0(s) < xi < u0(s)) under the imputed mean (1 for `none`),
// estimated once with a fixed seed since it does not depend on beta.
class LassoLikelihood {
 public:
  LassoLikelihood(const MhSpec& spec, const Eigen::VectorXd& eta_obs, std::size_t weight_draws,
                  std::uint64_t seed)
      : spec_(spec), eta_(eta_obs) {
    const Index m = spec.event.m();
    if (m > 2) throw Error(ErrorKind::DimensionTooLarge, "likelihood surface needs |M| <= 2");
    const int count = 1 << m;
    const Index d = spec.xi_mean.size();
    std::vector<double> logw;
    for (int code = 0; code < count; ++code) {
      Eigen::VectorXd s(m);
      for (Index k = 0; k < m; ++k) s(k) = (code >> k) & 1 ? 1.0 : -1.0;
      double lw = 0.0;
      if (spec.truncate_xi && d > 0) {
        Rng rng = make_rng(seed, static_cast<std::uint64_t>(code), "box-weights");
        const Eigen::VectorXd lo = spec.event.l0_for(s);
        const Eigen::VectorXd hi = (lo.array() + 2.0).matrix();
        lw = detail::ghk_log_box_probability(spec.xi_mean, spec.cov_xi, lo, hi, weight_draws, rng);
      }
      signs_.push_back(s);
      cuts_.push_back(spec.event.shift(s));
      logw.push_back(lw);
    }
    // Only ratios of the weights matter; keep them relative to the largest.
    const double top = *std::max_element(logw.begin(), logw.end());
    for (double lw : logw) {
      weights_.push_back(std::isfinite(top) ? std::exp(lw - top) : 1.0);
      log_weights_.push_back(lw);
    }
  }

  // log w_s per sign vector, sign codes in binary order (bit k set: s_k = +1).
  const std::vector<double>& log_weights() const { return log_weights_; }
  double operator()(const Eigen::VectorXd& beta) const {
    const Eigen::VectorXd d = eta_ - beta;
    double prob = 0.0;
    for (std::size_t i = 0; i < signs_.size(); ++i)
      if (weights_[i] > 0.0) prob += weights_[i] * orthant(beta, signs_[i], cuts_[i]);
    return -0.5 * d.dot(spec_.prec_eta * d) - std::log(prob);
  }

 private:
  // P_beta(s_k (eta_k - c_k) > 0 for all k).
  double orthant(const Eigen::VectorXd& beta, const Eigen::VectorXd& s,
                 const Eigen::VectorXd& c) const {
    const Eigen::MatrixXd& cov = spec_.cov_eta;
    auto tail = [](double sign, double mean, double sd, double cut) {
      const double z = (cut - mean) / sd;
      return sign > 0 ? normal::sf(z) : normal::cdf(z);
    };
    if (beta.size() == 1) return tail(s(0), beta(0), std::sqrt(cov(0, 0)), c(0));
    const double sd0 = std::sqrt(cov(0, 0));
    const double slope = cov(0, 1) / cov(0, 0);
    const double csd = std::sqrt(cov(1, 1) - cov(0, 1) * slope);
    auto f = [&](double x) {
      return normal::pdf((x - beta(0)) / sd0) / sd0 *
             tail(s(1), beta(1) + slope * (x - beta(0)), csd, c(1));
    };
    using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
    return s(0) > 0 ? GK::integrate(f, c(0), normal::kInf, 10, 1e-10)
                    : GK::integrate(f, -normal::kInf, c(0), 10, 1e-10);
  }

  const MhSpec& spec_;
  Eigen::VectorXd eta_;
  std::vector<Eigen::VectorXd> signs_;
  std::vector<Eigen::VectorXd> cuts_;
  std::vector<double> weights_;
  std::vector<double> log_weights_;
};

struct ImputationResult {
  ImputationStrategy::Kind strategy;
  Eigen::VectorXd ascent_estimate;
  std::optional<Eigen::VectorXd> grid_argmax;  // |M| <= 2 only
  std::optional<double> grid_max_loglik;
  std::vector<double> log_sign_weights;
};

// Grid-plus-pattern-search maximizer of the exact conditional likelihood.
inline std::pair<Eigen::VectorXd, double> maximize_lasso_likelihood(const LassoLikelihood& f,
                                                                    const MhSpec& spec,
                                                                    const Eigen::VectorXd& start) {
  const double sd = spec.cov_eta.diagonal().cwiseSqrt().minCoeff();
  std::vector<Index> free;
  for (Index k = 0; k < start.size(); ++k) free.push_back(k);
  const Eigen::VectorXd best = detail::grid_maximize(f, start, free, 6.0 * sd, 0.25 * sd, 1e-5 * sd);
  return {best, f(best)};
}

// Runs the ascent estimator under each strategy with a common seed and, when
// |M| <= 2, maximizes the exact conditional likelihood as well.
inline std::vector<ImputationResult> compare_imputations(
    const Dataset& data, const LassoFit& lasso, double sigma2,
    const std::vector<ImputationStrategy>& strategies, const AscentOptions& opts,
    std::uint64_t seed, std::size_t weight_draws = 2000) {
  if (lasso.active.empty()) throw Error(ErrorKind::NoSelection, "the lasso selected no variables");
  if (lasso.active.size() > 4)
    throw Error(ErrorKind::DimensionTooLarge, "imputation comparison needs |M| <= 4");
  const SelectionEvent event = selection_event(data.X, lasso);
  std::vector<ImputationResult> out;
  for (const auto& st : strategies) {
    ImputationResult r;
    r.strategy = st.kind;
    Rng rng = make_rng(seed, 0, "imputation-ascent");
    r.ascent_estimate = fit_lasso_mle(data, lasso, sigma2, st, opts, rng).beta_hat;
    if (event.m() <= 2) {
      const MhSpec spec = make_mh_spec(data, event, sigma2, st);
      const LassoLikelihood f(spec, spec.beta, weight_draws, derive_seed(seed, 0, "imputation-weights"));
      auto [arg, val] = maximize_lasso_likelihood(f, spec, spec.beta);
      r.grid_argmax = arg;
      r.grid_max_loglik = val;
      r.log_sign_weights = f.log_weights();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace postsel
