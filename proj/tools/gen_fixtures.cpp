// Regenerates the seeded data fixtures under data/.
// Usage: postsel_gen_fixtures <data-dir>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "cli.hpp"

using namespace postsel;
namespace fs = std::filesystem;

namespace {

void write_dataset(const fs::path& path, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  std::ofstream out(path);
  out << 'y';
  for (Index j = 0; j < X.cols(); ++j) out << ",x" << j + 1;
  out << '\n';
  for (Index i = 0; i < X.rows(); ++i) {
    out << cli::fmt(y(i));
    for (Index j = 0; j < X.cols(); ++j) out << ',' << cli::fmt(X(i, j));
    out << '\n';
  }
}

// Thresholded normal means: 100 equicorrelated coordinates, 20 signals.
void figure4(const fs::path& dir) {
  const int p = 100;
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Constant(p, p, 0.3);
  sigma.diagonal().setOnes();
  const Eigen::MatrixXd L = sigma.llt().matrixL();
  Rng rng = make_rng(4, 0, "figure4-fixture");
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(p), z(p);
  for (int j = 0; j < 20; ++j) mu(j) = 2.0 * standard_normal(rng);
  for (int j = 0; j < p; ++j) z(j) = standard_normal(rng);
  const Eigen::VectorXd y = mu + L * z;
  std::ofstream out(dir / "figure4_y.csv");
  out << "y,mu\n";
  for (int j = 0; j < p; ++j) out << cli::fmt(y(j)) << ',' << cli::fmt(mu(j)) << '\n';
}

// Lasso data from the simulation generators; returns mu.
Eigen::VectorXd lasso_data(const fs::path& path, int n, int p, int k, double rho, double snr, std::uint64_t seed) {
  Rng d = make_rng(seed, 0, "design"), c = make_rng(seed, 0, "coefs"), e = make_rng(seed, 0, "noise");
  const Eigen::MatrixXd X = gen_design(n, p, rho, d);
  const Response r = gen_response(X, gen_coefs(p, k, c), snr, e);
  write_dataset(path, X, r.y);
  return r.mu;
}

// Imputation comparison instance: the first seed whose cross-validated lasso
// keeps exactly two variables.
void appendix(const fs::path& dir) {
  for (std::uint64_t seed = 1;; ++seed) {
    Rng d = make_rng(seed, 0, "design"), c = make_rng(seed, 0, "coefs"), e = make_rng(seed, 0, "noise");
    Dataset data;
    data.X = gen_design(100, 100, 0.5, d);
    const Response r = gen_response(data.X, gen_coefs(100, 3, c), 0.5, e);
    data.y = r.y;
    const double lambda = cv_lambda(data, 10, lambda_grid(data), LambdaRule::Min, seed).lambda;
    const LassoFit fit = fit_lasso(data, lambda);
    if (fit.active.size() != 2) continue;
    write_dataset(dir / "appendix_b.csv", data.X, data.y);
    nlohmann::json mu = nlohmann::json::array();
    for (Index i = 0; i < r.mu.size(); ++i) mu.push_back(r.mu(i));
    std::ofstream(dir / "appendix_b.json")
        << nlohmann::json{{"schema_version", 1}, {"seed", seed}, {"lambda", lambda}, {"mu", mu}}.dump(2) << '\n';
    std::cout << "appendix_b: seed " << seed << ", lambda " << lambda << '\n';
    return;
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: postsel_gen_fixtures <data-dir>\n";
    return 4;
  }
  const fs::path dir = argv[1];
  fs::create_directories(dir);
  figure4(dir);
  lasso_data(dir / "example4.csv", 200, 100, 5, 0.5, 0.2, 4);
  appendix(dir);
  return 0;
}
