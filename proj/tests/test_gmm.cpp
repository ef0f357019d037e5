#include "mergesim/gmm.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace mergesim;

namespace {

Eigen::MatrixXd single_gaussian(int n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::VectorXd mean(3);
  mean << 2.0, -1.0, 4.0;
  Eigen::MatrixXd a(3, 3);
  a << 1.0, 0.0, 0.0, 0.4, 0.8, 0.0, -0.2, 0.3, 0.6;
  Eigen::MatrixXd x(n, 3);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d z(g(rng), g(rng), g(rng));
    x.row(i) = (mean + a * z).transpose();
  }
  return x;
}

Eigen::MatrixXd two_clusters(int n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.3);
  Eigen::MatrixXd x(2 * n, 2);
  for (int i = 0; i < n; ++i) {
    x(i, 0) = -5.0 + g(rng);
    x(i, 1) = -2.0 + g(rng);
    x(n + i, 0) = 5.0 + g(rng);
    x(n + i, 1) = 3.0 + g(rng);
  }
  return x;
}

} // namespace

TEST_CASE("K=1 recovers the sample mean of a single Gaussian") {
  const Eigen::MatrixXd x = single_gaussian(2000, 1);
  GmmTrainConfig cfg;
  cfg.components = 1;
  const Gmm model = train_gmm(x, cfg, 1, Gmm::Output::kLateral);
  REQUIRE(model.components.size() == 1);
  const Eigen::VectorXd sample_mean = x.colwise().mean();
  // Model parameters live in standardized space; map back.
  const Eigen::VectorXd recovered =
      model.dim_mean + model.components[0].mean.cwiseProduct(model.dim_std);
  for (int i = 0; i < 3; ++i) {
    const double se = std::sqrt(x.col(i).squaredNorm() / x.rows()) / std::sqrt(x.rows());
    CHECK(std::abs(recovered[i] - sample_mean[i]) < 3.0 * se + 1e-9);
  }
}

TEST_CASE("EM mean log-likelihood is monotone non-decreasing") {
  const Eigen::MatrixXd x = two_clusters(600, 2);
  GmmTrainConfig cfg;
  cfg.components = 4;
  cfg.max_iterations = 40;
  const Gmm model = train_gmm(x, cfg, 7, Gmm::Output::kLateral);
  REQUIRE(model.train_ll_history.size() >= 2);
  for (std::size_t i = 1; i < model.train_ll_history.size(); ++i) {
    CHECK(model.train_ll_history[i] >= model.train_ll_history[i - 1] - 1e-9);
  }
}

TEST_CASE("component weights sum to one after training") {
  const Eigen::MatrixXd x = two_clusters(400, 3);
  GmmTrainConfig cfg;
  cfg.components = 3;
  const Gmm model = train_gmm(x, cfg, 3, Gmm::Output::kLongitudinal);
  double sum = 0.0;
  for (const auto& c : model.components) sum += c.weight;
  CHECK(sum == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("gmr with K=1 equals the closed-form conditional Gaussian") {
  const Eigen::MatrixXd x = single_gaussian(3000, 4);
  GmmTrainConfig cfg;
  cfg.components = 1;
  const Gmm model = train_gmm(x, cfg, 2, Gmm::Output::kLateral);

  // Closed form from the raw sample moments.
  const Eigen::VectorXd mu = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  Eigen::MatrixXd sigma = (centered.transpose() * centered) / x.rows();

  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd input(2);
    input << mu[0] + g(rng), mu[1] + g(rng);
    const Mixture1d cond = gmr_condition(model, input);
    REQUIRE(cond.weights.size() == 1);

    const Eigen::MatrixXd sigma_ii = sigma.topLeftCorner(2, 2);
    const Eigen::VectorXd sigma_io = sigma.topRightCorner(2, 1);
    const Eigen::VectorXd solve = sigma_ii.ldlt().solve(input - mu.head(2));
    const double expected_mean = mu[2] + sigma_io.dot(solve);
    const double expected_var =
        sigma(2, 2) - sigma_io.dot(sigma_ii.ldlt().solve(sigma_io));

    // The model carries the floored covariance of the standardized space;
    // tolerances reflect the 1e-6 diagonal floor.
    CHECK(cond.mean() == Catch::Approx(expected_mean).margin(1e-6));
    CHECK(cond.variance() == Catch::Approx(expected_var).epsilon(1e-4));
  }
}

TEST_CASE("posterior weights sum to one and pick the right cluster") {
  const Eigen::MatrixXd x = two_clusters(800, 5);
  GmmTrainConfig cfg;
  cfg.components = 2;
  const Gmm model = train_gmm(x, cfg, 11, Gmm::Output::kLateral);

  Eigen::VectorXd at_left(1), at_right(1);
  at_left << -5.0;
  at_right << 5.0;
  const Mixture1d left = gmr_condition(model, at_left);
  const Mixture1d right = gmr_condition(model, at_right);
  CHECK(left.weight_sum() == Catch::Approx(1.0).margin(1e-9));
  CHECK(right.weight_sum() == Catch::Approx(1.0).margin(1e-9));
  // Conditioning at a cluster center concentrates the posterior there.
  CHECK(left.weights.maxCoeff() > 0.99);
  CHECK(right.weights.maxCoeff() > 0.99);
  CHECK(left.mean() == Catch::Approx(-2.0).margin(0.2));
  CHECK(right.mean() == Catch::Approx(3.0).margin(0.2));
}

TEST_CASE("insufficient samples per component are rejected") {
  const Eigen::MatrixXd x = two_clusters(10, 6); // 20 rows
  GmmTrainConfig cfg;
  cfg.components = 3; // needs 30
  CHECK_THROWS_AS(train_gmm(x, cfg, 1, Gmm::Output::kLateral), std::invalid_argument);
}

TEST_CASE("training is deterministic per seed") {
  const Eigen::MatrixXd x = two_clusters(300, 7);
  GmmTrainConfig cfg;
  cfg.components = 2;
  const Gmm a = train_gmm(x, cfg, 21, Gmm::Output::kLateral);
  const Gmm b = train_gmm(x, cfg, 21, Gmm::Output::kLateral);
  REQUIRE(a.components.size() == b.components.size());
  for (std::size_t c = 0; c < a.components.size(); ++c) {
    CHECK(a.components[c].weight == b.components[c].weight);
    CHECK(a.components[c].mean == b.components[c].mean);
    CHECK(a.components[c].cov == b.components[c].cov);
  }
}
