#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "postsel/lasso_core.hpp"

using namespace postsel;

namespace {

// AR(1)-correlated Gaussian design and sparse response, written independently
// of the simulation harness.
Dataset random_instance(std::uint64_t seed, int n, int p, double rho, int k, double noise) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  Dataset d;
  d.X.resize(n, p);
  for (int i = 0; i < n; ++i) {
    double prev = z(gen);
    d.X(i, 0) = prev;
    for (int j = 1; j < p; ++j) {
      prev = rho * prev + std::sqrt(1 - rho * rho) * z(gen);
      d.X(i, j) = prev;
    }
  }
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int j = 0; j < std::min(k, p); ++j) beta(j * (p / std::max(k, 1))) = (j % 2 ? -1.0 : 1.0) * (1.0 + j);
  d.y = d.X * beta;
  for (int i = 0; i < n; ++i) d.y(i) += noise * z(gen);
  return d;
}

double lambda_max(const Dataset& d) { return (d.X.transpose() * d.y).cwiseAbs().maxCoeff(); }

// Subgradient optimality checked directly from the objective's gradient.
bool subgradient_ok(const Dataset& d, const Eigen::VectorXd& beta, double lambda, double tol) {
  const Eigen::VectorXd g = d.X.transpose() * (d.y - d.X * beta);
  for (Index j = 0; j < beta.size(); ++j) {
    if (beta(j) == 0.0) {
      if (std::abs(g(j)) > lambda + tol) return false;
    } else if (std::abs(g(j) - lambda * (beta(j) > 0 ? 1.0 : -1.0)) > tol) {
      return false;
    }
  }
  return true;
}

bool same_model(const LassoFit& a, const LassoFit& b) {
  return a.active == b.active && a.signs == b.signs;
}

}  // namespace

TEST(FitLasso, HugeLambdaGivesZero) {
  const Dataset d = random_instance(1, 40, 8, 0.3, 2, 1.0);
  const LassoFit f = fit_lasso(d, lambda_max(d) * 1.0000001);
  EXPECT_TRUE(f.active.empty());
  EXPECT_EQ(f.beta.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NEAR(sigma2_lasso(d, f), d.y.squaredNorm() / d.n(), 1e-12);
}

TEST(FitLasso, ZeroLambdaIsLeastSquares) {
  const Dataset d = random_instance(2, 50, 6, 0.5, 3, 1.0);
  const LassoFit f = fit_lasso(d, 0.0);
  const Eigen::VectorXd ls = d.X.colPivHouseholderQr().solve(d.y);
  EXPECT_LT((f.beta - ls).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(FitLasso, SubgradientConditionsRandomInstance) {
  const Dataset d = random_instance(3, 50, 10, 0.5, 3, 1.5);
  for (double frac : {0.05, 0.2, 0.5, 0.9}) {
    const double lam = frac * lambda_max(d);
    const LassoFit f = fit_lasso(d, lam);
    EXPECT_TRUE(subgradient_ok(d, f.beta, lam, kkt_tolerance(lam))) << frac;
    EXPECT_TRUE(check_kkt(d, f).ok(kkt_tolerance(lam)));
    for (std::size_t k = 0; k < f.active.size(); ++k)
      EXPECT_EQ(f.signs(static_cast<Index>(k)), f.beta(f.active[k]) > 0 ? 1.0 : -1.0);
  }
}

TEST(FitLasso, OrthonormalDesignIsSoftThresholding) {
  const Dataset raw = random_instance(4, 60, 7, 0.0, 3, 1.0);
  Dataset d;
  d.X = Eigen::HouseholderQR<Eigen::MatrixXd>(raw.X).householderQ() * Eigen::MatrixXd::Identity(60, 7);
  d.y = raw.y;
  const Eigen::VectorXd c = d.X.transpose() * d.y;
  const double lam = 0.5 * c.cwiseAbs().maxCoeff();
  const LassoFit f = fit_lasso(d, lam);
  for (Index j = 0; j < 7; ++j) {
    const double st = std::copysign(std::max(std::abs(c(j)) - lam, 0.0), c(j));
    EXPECT_NEAR(f.beta(j), st, 1e-9);
  }
}

TEST(FitLasso, RejectsBadInput) {
  Dataset d = random_instance(5, 10, 3, 0.0, 1, 1.0);
  EXPECT_THROW(fit_lasso(d, -1.0), Error);
  d.X.col(1).setZero();
  EXPECT_THROW(fit_lasso(d, 1.0), Error);
}

TEST(Sigma2Lasso, ExactFitIsZeroAndSaturatedThrows) {
  Dataset d = random_instance(6, 12, 3, 0.0, 2, 0.0);
  LassoFit f = fit_lasso(d, 0.0);
  EXPECT_NEAR(sigma2_lasso(d, f), 0.0, 1e-20);
  Dataset tiny = random_instance(7, 3, 5, 0.0, 3, 1.0);
  LassoFit h;
  h.beta = Eigen::VectorXd::Ones(5);
  h.active = {0, 1, 2, 3, 4};
  EXPECT_THROW(sigma2_lasso(tiny, h), Error);
}

TEST(Sigma2Lasso, RowPermutationInvariant) {
  const Dataset d = random_instance(8, 40, 8, 0.4, 2, 1.0);
  const double lam = 0.3 * lambda_max(d);
  const double s = sigma2_lasso(d, fit_lasso(d, lam));
  std::vector<int> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  Dataset q = d;
  for (int i = 0; i < 40; ++i) {
    q.X.row(i) = d.X.row(perm[static_cast<std::size_t>(i)]);
    q.y(i) = d.y(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(sigma2_lasso(q, fit_lasso(q, lam)), s, 1e-10 * s);
}

TEST(Sigma2Lasso, RecoversKnownVarianceOnAverage) {
  double total = 0;
  const int reps = 100;
  for (int r = 0; r < reps; ++r) {
    const Dataset d = random_instance(100 + r, 100, 20, 0.3, 3, std::sqrt(5.0));
    const CvResult cv = cv_lambda(d, 5, lambda_grid(d, 30), LambdaRule::Min, 1000 + r);
    total += sigma2_lasso(d, fit_lasso(d, cv.lambda));
  }
  EXPECT_NEAR(total / reps, 5.0, 0.3 * 5.0);
}

TEST(CvLambda, SinglePointGridAndFoldErrors) {
  const Dataset d = random_instance(10, 20, 4, 0.0, 1, 1.0);
  EXPECT_EQ(cv_lambda(d, 5, {0.7}, LambdaRule::Min, 1).lambda, 0.7);
  EXPECT_THROW(cv_lambda(d, 21, {1.0, 0.5}, LambdaRule::Min, 1), Error);
  EXPECT_THROW(cv_lambda(d, 1, {1.0, 0.5}, LambdaRule::Min, 1), Error);
}

TEST(CvLambda, DeterministicFoldsAndRuleOrdering) {
  const Dataset d = random_instance(11, 80, 15, 0.5, 3, 2.0);
  const auto grid = lambda_grid(d);
  ASSERT_EQ(grid.size(), 100u);
  EXPECT_NEAR(grid.back() / grid.front(), 1e-3, 1e-12);
  const CvResult a = cv_lambda(d, 10, grid, LambdaRule::Min, 42);
  const CvResult b = cv_lambda(d, 10, grid, LambdaRule::Min, 42);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.mean_error, b.mean_error);
  const CvResult c = cv_lambda(d, 10, grid, LambdaRule::OneSe, 42);
  EXPECT_GE(c.lambda, a.lambda);
  EXPECT_LE(c.mean_error[c.chosen], a.mean_error[a.best] + a.std_error[a.best]);
}

TEST(CvLambda, PureNoisePicksLargeLambda) {
  int large = 0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    const Dataset d = random_instance(200 + r, 60, 10, 0.0, 0, 1.0);
    const CvResult cv = cv_lambda(d, 10, lambda_grid(d), LambdaRule::Min, 300 + r);
    if (cv.chosen < 25) ++large;
  }
  EXPECT_GE(large, static_cast<int>(0.8 * reps));
}

TEST(CvLambda, StrongSignalKeepsTrueSupport) {
  int hits = 0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    // k = 2 with signal variance about 5 and unit noise.
    Dataset d = random_instance(400 + r, 100, 20, 0.3, 0, 1.0);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(20);
    beta(3) = 1.6;
    beta(11) = -1.6;
    d.y += d.X * beta;
    const CvResult cv = cv_lambda(d, 10, lambda_grid(d), LambdaRule::Min, 500 + r);
    const LassoFit f = fit_lasso(d, cv.lambda);
    const std::set<Index> act(f.active.begin(), f.active.end());
    if (act.count(3) && act.count(11)) ++hits;
  }
  EXPECT_GE(hits, static_cast<int>(0.8 * reps));
}

TEST(SelectionEvent, OrthonormalReduction) {
  const Dataset raw = random_instance(12, 30, 4, 0.0, 2, 1.0);
  Dataset d;
  d.X = Eigen::HouseholderQR<Eigen::MatrixXd>(raw.X).householderQ() * Eigen::MatrixXd::Identity(30, 4);
  d.y = raw.y;
  const double lam = 0.8;
  const std::vector<Index> act{0, 2};
  const Eigen::VectorXd s = Eigen::VectorXd::Ones(2);
  const SelectionEvent ev = selection_event(d.X, act, s, lam);
  EXPECT_LT((ev.u1 + lam * Eigen::VectorXd::Ones(2)).cwiseAbs().maxCoeff(), 1e-12);
  const EtaXi ex = eta_xi(d, act, lam);
  EXPECT_LT((ev.A1 * d.y + ex.eta).cwiseAbs().maxCoeff(), 1e-12);
  // W = 0, so the inactive box is (-1, 1).
  EXPECT_LT((ev.l0 + Eigen::VectorXd::Ones(2)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SelectionEvent, EmptyModel) {
  const Dataset d = random_instance(13, 30, 5, 0.2, 1, 1.0);
  const SelectionEvent ev = selection_event(d.X, {}, Eigen::VectorXd(0), 2.0);
  EXPECT_EQ(ev.A1.rows(), 0);
  EXPECT_EQ(ev.u1.size(), 0);
  EXPECT_LT((ev.A0 - d.X.transpose() / 2.0).cwiseAbs().maxCoeff(), 1e-14);
  const EtaXi ex = eta_xi(d, {}, 2.0);
  EXPECT_EQ(ex.eta.size(), 0);
  EXPECT_LT((ex.xi - d.X.transpose() * d.y / 2.0).cwiseAbs().maxCoeff(), 1e-12);
  const double lam = lambda_max(d) * 1.01;
  const SelectionEvent e2 = selection_event(d.X, {}, Eigen::VectorXd(0), lam);
  EXPECT_TRUE(in_event(e2, Eigen::VectorXd(0), e2.A0 * d.y, Eigen::VectorXd(0)).both());
}

TEST(SelectionEvent, InactiveStatisticOrthogonalToActiveColumns) {
  const Dataset d = random_instance(14, 50, 12, 0.5, 3, 1.0);
  const std::vector<Index> act{1, 4, 9};
  const SelectionEvent ev = selection_event(d.X, act, Eigen::Vector3d(1, -1, 1), 1.3);
  Eigen::MatrixXd xm(50, 3);
  for (int k = 0; k < 3; ++k) xm.col(k) = d.X.col(act[static_cast<std::size_t>(k)]);
  EXPECT_LT((ev.A0 * xm).cwiseAbs().maxCoeff(), 1e-10);
  // Cov(A1 y, A0 y) = sigma^2 A1 A0' = 0 analytically.
  EXPECT_LT((ev.A1 * ev.A0.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SelectionEvent, RankDeficientThrows) {
  Dataset d = random_instance(15, 20, 4, 0.0, 1, 1.0);
  d.X.col(2) = 2.0 * d.X.col(0);
  EXPECT_THROW(selection_event(d.X, {0, 2}, Eigen::Vector2d(1, 1), 1.0), Error);
  EXPECT_THROW(eta_xi(d, {0, 2}, 1.0), Error);
}

TEST(InEvent, TrivialCases) {
  const Dataset d = random_instance(16, 40, 6, 0.3, 2, 1.0);
  const std::vector<Index> act{0, 3};
  const Eigen::Vector2d s(1, -1);
  const SelectionEvent ev = selection_event(d.X, act, s, 1.0);
  const Eigen::VectorXd big = Eigen::Vector2d(1e6, -1e6);
  const Eigen::VectorXd xi0 = Eigen::VectorXd::Zero(4);
  EXPECT_TRUE(in_event(ev, big, xi0, s).active_ok);
  EXPECT_FALSE(in_event(ev, Eigen::Vector2d(-1e6, -1e6), xi0, s).active_ok);
  if ((ev.W * s).cwiseAbs().maxCoeff() < 1.0) EXPECT_TRUE(in_event(ev, big, xi0, s).inactive_ok);
}

TEST(EtaXi, NormalEquationsAndCovariances) {
  const Dataset d = random_instance(17, 60, 10, 0.5, 3, 1.0);
  const std::vector<Index> act{0, 5, 7};
  const EtaXi ex = eta_xi(d, act, 2.0, 3.0);
  Eigen::MatrixXd xm(60, 3);
  for (int k = 0; k < 3; ++k) xm.col(k) = d.X.col(act[static_cast<std::size_t>(k)]);
  EXPECT_LT((xm.transpose() * d.y - xm.transpose() * xm * ex.eta).cwiseAbs().maxCoeff(), 1e-10);
  const Eigen::MatrixXd g = xm.transpose() * xm;
  EXPECT_LT((ex.cov_eta * g - 3.0 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
  const SelectionEvent ev = selection_event(d.X, act, Eigen::Vector3d(1, 1, 1), 2.0);
  EXPECT_LT((ev.A0 * d.y - ex.xi).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((3.0 * ev.A0 * ev.A0.transpose() - ex.cov_xi).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(EtaXi, OrthonormalFullModel) {
  const Dataset raw = random_instance(18, 25, 4, 0.0, 2, 1.0);
  Dataset d;
  d.X = Eigen::HouseholderQR<Eigen::MatrixXd>(raw.X).householderQ() * Eigen::MatrixXd::Identity(25, 4);
  d.y = raw.y;
  const EtaXi ex = eta_xi(d, {0, 1, 2, 3}, 1.0, 2.0);
  EXPECT_LT((ex.eta - d.X.transpose() * d.y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((ex.cov_eta - 2.0 * Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(ex.xi.size(), 0);
}

// The (M, s) returned by the solver lies in its own selection event, and
// moving y across the event boundary changes the solver's (M, s).
TEST(KktEvent, HundredFitsSatisfyMembership) {
  int count = 0;
  for (int n : {30, 100})
    for (int p : {10, 60})
      for (double rho : {0.0, 0.5})
        for (int r = 0; r < 13 && count < 100; ++r, ++count) {
          const auto seed = static_cast<std::uint64_t>(1000 * n + 10 * p + r + (rho > 0 ? 7 : 0));
          const Dataset d = random_instance(seed, n, p, rho, 3, 1.0);
          const double lam = (0.15 + 0.05 * (r % 8)) * lambda_max(d);
          const LassoFit f = fit_lasso(d, lam);
          const double tol = kkt_tolerance(lam);
          ASSERT_TRUE(subgradient_ok(d, f.beta, lam, tol));
          if (f.active.empty()) continue;
          const SelectionEvent ev = selection_event(d.X, f);
          const EtaXi ex = eta_xi(d, f.active, lam);
          EXPECT_TRUE(in_event(ev, ex.eta, ex.xi, f.signs, tol).both()) << seed;
          // Same statement in the raw A1 / A0 form.
          EXPECT_LT((ev.A1 * d.y - ev.u1).maxCoeff(), tol);
          EXPECT_LT((ev.l0 - ev.A0 * d.y).maxCoeff(), tol / lam);
          EXPECT_LT((ev.A0 * d.y - ev.u0).maxCoeff(), tol / lam);
        }
  EXPECT_EQ(count, 100);
}

TEST(KktEvent, BoundaryCrossingsFlipModelAndMembership) {
  int crossings = 0;
  for (std::uint64_t seed = 1; crossings < 10 && seed < 200; ++seed) {
    const Dataset d = random_instance(seed, 40, 8, 0.4, 2, 1.0);
    const double lam = 0.3 * lambda_max(d);
    const LassoFit f = fit_lasso(d, lam);
    if (f.active.empty()) continue;
    const SelectionEvent ev = selection_event(d.X, f);
    std::mt19937_64 gen(seed + 77);
    std::normal_distribution<double> z;
    Eigen::VectorXd dir(d.n());
    for (Index i = 0; i < d.n(); ++i) dir(i) = z(gen);
    auto member = [&](double t) {
      Dataset q = d;
      q.y = d.y + t * dir;
      const EtaXi ex = eta_xi(q, f.active, lam);
      return in_event(ev, ex.eta, ex.xi, f.signs).both();
    };
    double lo = 0.0, hi = 0.5;
    while (member(hi) && hi < 100) hi *= 2;
    if (member(hi)) continue;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (member(mid) ? lo : hi) = mid;
    }
    const double eps = 1e-6 * (1 + hi);
    Dataset inside = d, outside = d;
    inside.y = d.y + (lo - eps) * dir;
    outside.y = d.y + (hi + eps) * dir;
    ASSERT_TRUE(member(lo - eps));
    ASSERT_FALSE(member(hi + eps));
    EXPECT_TRUE(same_model(fit_lasso(inside, lam), f)) << seed;
    EXPECT_FALSE(same_model(fit_lasso(outside, lam), f)) << seed;
    ++crossings;
  }
  EXPECT_EQ(crossings, 10);
}
