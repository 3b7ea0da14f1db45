#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "postsel/normal_means.hpp"

using namespace postsel;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

NormalMeansProblem figure2_problem() {
  NormalMeansProblem pr;
  pr.y = (VectorXd(2) << 1.45, 1.8).finished();
  pr.sigma.resize(2, 2);
  pr.sigma << 1.0, 0.5, 0.5, 1.0;
  pr.lower = VectorXd::Constant(2, -1.65);
  pr.upper = VectorXd::Constant(2, 1.65);
  return pr;
}

NormalMeansProblem vacuous_problem(int p, double rho) {
  NormalMeansProblem pr;
  pr.y = VectorXd::LinSpaced(p, -1.0, 2.0);
  pr.sigma = MatrixXd::Constant(p, p, rho);
  pr.sigma.diagonal().setOnes();
  pr.lower = VectorXd::Zero(p);
  pr.upper = VectorXd::Zero(p);
  return pr;
}

}  // namespace

TEST(Select, ThresholdRule) {
  EXPECT_EQ(select(figure2_problem()).selected, std::vector<Index>{1});

  NormalMeansProblem pr = figure2_problem();
  pr.y(0) = 1.65;  // boundary counts as selected
  EXPECT_EQ(select(pr).selected, (std::vector<Index>{0, 1}));

  pr.lower.setConstant(-kInf);
  pr.upper.setConstant(kInf);
  EXPECT_TRUE(select(pr).empty());
}

TEST(FitConditionalMle, NoSelectionIsAnError) {
  NormalMeansProblem pr = figure2_problem();
  pr.lower.setConstant(-kInf);
  pr.upper.setConstant(kInf);
  Rng rng(1);
  try {
    fit_conditional_mle(pr, AscentOptions{}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoSelection);
  }
}

TEST(FitConditionalMle, VacuousTruncationReturnsObservation) {
  const auto pr = vacuous_problem(3, 0.3);
  Rng rng(2);
  const auto fit = fit_conditional_mle(pr, AscentOptions{}, rng);
  ASSERT_EQ(fit.selection.size(), 3u);
  // Unconditional law: the score root is mu = y. The estimate's MC error is
  // Sigma times the score's.
  const VectorXd est_se = pr.sigma.cwiseAbs() * fit.score_stderr;
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(fit.estimate(j), pr.y(j), 3 * est_se(j)) << j;
  for (int j = 0; j < 3; ++j) EXPECT_LT(std::abs(fit.score_residual(j)), 4 * fit.score_stderr(j));
}

TEST(FitConditionalMle, Figure2PlugInEstimate) {
  const auto pr = figure2_problem();
  Rng rng(3);
  const auto fit = fit_conditional_mle(pr, AscentOptions{}, rng);
  EXPECT_EQ(fit.estimate(0), 1.45);  // bit-exact plug-in
  EXPECT_NEAR(fit.estimate(1), 0.8, 0.15);
  EXPECT_LT(std::abs(fit.score_residual(0)), 4 * fit.score_stderr(0));
  EXPECT_EQ(fit.trajectory.rows(), 1000);
  EXPECT_EQ(fit.quantile_samples.rows(), 2000);
  EXPECT_LT(fit.ci_lower(0), fit.ci_upper(0));
}

TEST(FitConditionalMle, Figure2AgreesWithGridOracle) {
  // Independent oracle: maximize log phi(y; mu, Sigma) - log P_mu(M) over
  // mu_2 with P from midpoint-rule 2-D quadrature.
  const auto pr = figure2_problem();
  const Eigen::Matrix2d sig = pr.sigma;
  const Eigen::Matrix2d prec = sig.inverse();
  auto loglik = [&](double mu2) {
    const Eigen::Vector2d mu(1.45, mu2);
    const Eigen::Vector2d d = pr.y - mu;
    const auto q = oracle::moments_2d(
        mu, sig, [](double a, double b) { return std::abs(a) < 1.65 && std::abs(b) >= 1.65; },
        0.01);
    return -0.5 * d.dot(prec * d) - std::log(q.mass);
  };
  double best = 0, best_v = -kInf;
  for (double m = 0.0; m <= 1.6; m += 0.02) {
    const double v = loglik(m);
    if (v > best_v) best_v = v, best = m;
  }
  Rng rng(4);
  const auto fit = fit_conditional_mle(pr, AscentOptions{}, rng);
  EXPECT_NEAR(fit.estimate(1), best, 0.1);
  // The library's own quadrature diagnostic agrees with the oracle too.
  EXPECT_NEAR(plugin_conditional_mle_quadrature(pr)(1), best, 0.03);
}

TEST(FitConditionalMle, UnselectedCoordinatesAreBitExact) {
  NormalMeansProblem pr;
  const int p = 6;
  pr.y = (VectorXd(p) << 0.3, -2.4, 1.1, 2.9, -0.2, 0.7).finished();
  pr.sigma = MatrixXd::Constant(p, p, 0.2);
  pr.sigma.diagonal().setOnes();
  pr.lower = VectorXd::Constant(p, -1.65);
  pr.upper = VectorXd::Constant(p, 1.65);
  AscentOptions opts;
  opts.n_steps = 300;
  Rng rng(5);
  const auto fit = fit_conditional_mle(pr, opts, rng);
  EXPECT_EQ(fit.selection.selected, (std::vector<Index>{1, 3}));
  for (int j : {0, 2, 4, 5}) EXPECT_EQ(fit.estimate(j), pr.y(j));
  for (Index r = 0; r < fit.samples.rows(); ++r) {
    for (int j = 0; j < p; ++j) {
      const bool sel = j == 1 || j == 3;
      const double v = fit.samples(r, j);
      ASSERT_EQ(sel, v <= -1.65 || v >= 1.65);
    }
  }
}

TEST(ConditionalCi, InsufficientSamples) {
  const auto pr = figure2_problem();
  AscentOptions opts;
  opts.n_steps = 50;
  opts.quantile_samples = 500;
  Rng rng(6);
  auto fit = fit_conditional_mle(pr, opts, rng);
  EXPECT_EQ(fit.ci_lower.size(), 0);  // 500 < 100 / 0.05
  try {
    conditional_ci(fit, pr, 0.05);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientSamples);
  }
  EXPECT_NO_THROW(conditional_ci(fit, pr, 0.2));
}

TEST(ConditionalCi, UntruncatedMatchesNaiveLength) {
  const auto pr = vacuous_problem(2, 0.4);
  Rng rng(7);
  auto fit = fit_conditional_mle(pr, AscentOptions{}, rng);
  const auto ci = conditional_ci(fit, pr, 0.05);
  const auto naive = naive_ci(pr, 0.05);
  for (int k = 0; k < 2; ++k) {
    const double len = ci.upper(k) - ci.lower(k);
    const double nlen = naive.upper(k) - naive.lower(k);
    EXPECT_NEAR(len / nlen, 1.0, 0.10);
    // Symmetric pivot: roughly centred on the estimate.
    const double mid = 0.5 * (ci.upper(k) + ci.lower(k));
    EXPECT_NEAR(mid, fit.estimate(k), 0.1 * nlen);
  }
}

TEST(NaiveCi, WaldIntervals) {
  NormalMeansProblem pr = figure2_problem();
  auto ci = naive_ci(pr, 0.05);
  ASSERT_EQ(ci.coords, std::vector<Index>{1});
  EXPECT_NEAR(ci.lower(0), 1.8 - 1.959963984540054, 1e-12);
  EXPECT_NEAR(ci.upper(0), 1.8 + 1.959963984540054, 1e-12);

  ci = naive_ci(pr, 1.0);
  EXPECT_DOUBLE_EQ(ci.lower(0), 1.8);
  EXPECT_DOUBLE_EQ(ci.upper(0), 1.8);

  pr.sigma(1, 1) = 4.0;
  ci = naive_ci(pr, 0.05);
  EXPECT_NEAR(ci.upper(0) - 1.8, 3.919927969080108, 1e-12);
}

TEST(UnivariateMle, TwoSidedShape) {
  EXPECT_NEAR(univariate_conditional_mle(6.0, 1.96, Sidedness::TwoSided), 6.0, 0.05);
  const double near = univariate_conditional_mle(1.97, 1.96, Sidedness::TwoSided);
  EXPECT_GT(near, 0.0);
  EXPECT_LT(near, 1.97);
  for (double y = 1.97; y < 1.96 + 3.0; y += 0.05)
    EXPECT_LT(univariate_conditional_mle(y, 1.96, Sidedness::TwoSided), y);
  for (double y = 1.96 + 4.01; y < 12.0; y += 0.25)
    EXPECT_LT(std::abs(univariate_conditional_mle(y, 1.96, Sidedness::TwoSided) - y), 0.1);
  // Odd symmetry.
  EXPECT_NEAR(univariate_conditional_mle(-2.5, 1.96, Sidedness::TwoSided),
              -univariate_conditional_mle(2.5, 1.96, Sidedness::TwoSided), 1e-9);
}

TEST(UnivariateMle, RootSolvesScoreEquation) {
  for (double y : {2.0, 2.5, 3.5}) {
    const double mu = univariate_conditional_mle(y, 1.96, Sidedness::TwoSided);
    // Quadrature oracle for E_mu(y | |y| > c).
    const auto m = oracle::moments_1d(mu, 1.0, {{-kInf, -1.96}, {1.96, kInf}});
    EXPECT_NEAR(m.mean, y, 1e-7);
  }
}

TEST(UnivariateMle, OneSidedDivergesNearThreshold) {
  EXPECT_LT(univariate_conditional_mle(1.97, 1.96, Sidedness::OneSided), -5.0);
  double prev = -kInf;
  for (int i = 1; i <= 200; ++i) {
    const double y = 1.96 + 0.02 * i;
    const double est = univariate_conditional_mle(y, 1.96, Sidedness::OneSided);
    EXPECT_GE(est, prev);
    if (std::isfinite(prev)) EXPECT_GT(est, prev);
    prev = est;
  }
}

TEST(UnivariateMle, PreconditionErrors) {
  try {
    univariate_conditional_mle(1.0, 1.96, Sidedness::TwoSided);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotSelected);
  }
  EXPECT_THROW(univariate_conditional_mle(-3.0, 1.96, Sidedness::OneSided), Error);
}

TEST(StepSchedule, RobbinsMonroConditions) {
  const StepSchedule g{0.7, 0.51};
  // Sum of gamma grows without bound: partial sums exceed any level.
  double s = 0, s2 = 0;
  std::size_t i = 1;
  for (; i <= 2000000; ++i) {
    s += g(i);
    s2 += g(i) * g(i);
  }
  EXPECT_GT(s, 1000.0);
  // Sum of squares is bounded by a^2 * zeta(1.02) ~ 0.49 * 50.6.
  EXPECT_LT(s2, 0.49 * 50.6);
  // Tail of squares after 2e6 terms is below a^2 / (0.02 * (2e6)^0.02).
  EXPECT_LT(0.49 / (0.02 * std::pow(2e6, 0.02)), 0.49 * 50.6);
  EXPECT_DOUBLE_EQ(g(1), 0.7);
  EXPECT_LT(g(100), g(99));
}

TEST(FullConditionalMle, Figure2QuadratureDiagnostic) {
  const VectorXd full = full_conditional_mle_quadrature(figure2_problem());
  EXPECT_NEAR(full(0), 5.4, 0.3);
  EXPECT_NEAR(full(1), 2.5, 0.3);
}

TEST(FullConditionalMle, SelectionProbabilityMatchesOracle) {
  const auto pr = figure2_problem();
  const auto sel = select(pr);
  for (const Eigen::Vector2d mu : {Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(1.45, 0.8),
                                   Eigen::Vector2d(5.4, 2.5)}) {
    const auto q = oracle::moments_2d(
        mu, pr.sigma, [](double a, double b) { return std::abs(a) < 1.65 && std::abs(b) >= 1.65; },
        0.005);
    EXPECT_NEAR(std::exp(selection_log_prob(pr, sel, mu)), q.mass, 1e-4);
  }
}

TEST(Figure4, ConditionalCoverageAtLeastNaive) {
  const int p = 100, reps = 60;
  MatrixXd sigma = MatrixXd::Constant(p, p, 0.3);
  sigma.diagonal().setOnes();
  const Eigen::LLT<MatrixXd> llt(sigma);
  const MatrixXd L = llt.matrixL();
  AscentOptions opts;
  opts.polish_samples = 2000;
  double cond_cov = 0, naive_cov = 0;
  int counted = 0;
  for (int r = 0; r < reps; ++r) {
    Rng rng = make_rng(2024, static_cast<std::uint64_t>(r), "figure4");
    VectorXd mu = VectorXd::Zero(p);
    for (int j = 0; j < 20; ++j) mu(j) = 2.0 * standard_normal(rng);
    VectorXd z(p);
    for (int j = 0; j < p; ++j) z(j) = standard_normal(rng);
    NormalMeansProblem pr;
    pr.y = mu + L * z;
    pr.sigma = sigma;
    pr.lower = VectorXd::Constant(p, -1.65);
    pr.upper = VectorXd::Constant(p, 1.65);
    if (select(pr).empty()) continue;
    const auto fit = fit_conditional_mle(pr, opts, rng);
    const auto naive = naive_ci(pr, 0.05);
    double c = 0, n = 0;
    for (std::size_t k = 0; k < fit.selection.size(); ++k) {
      const double truth = mu(fit.selection.selected[k]);
      const auto kk = static_cast<Index>(k);
      c += fit.ci_lower(kk) <= truth && truth <= fit.ci_upper(kk);
      n += naive.lower(kk) <= truth && truth <= naive.upper(kk);
    }
    cond_cov += c / static_cast<double>(fit.selection.size());
    naive_cov += n / static_cast<double>(fit.selection.size());
    ++counted;
  }
  cond_cov /= counted;
  naive_cov /= counted;
  RecordProperty("conditional_coverage", std::to_string(cond_cov));
  RecordProperty("naive_coverage", std::to_string(naive_cov));
  EXPECT_GE(cond_cov, naive_cov);
}
