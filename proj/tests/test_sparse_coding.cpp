#include "ddl/sparse_coding.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ddl;
using namespace ddl::sparse;

namespace {

Vec vec(std::initializer_list<double> v) {
  Vec out(Index(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Mat scalar_dict() { return Mat::Constant(1, 1, 1.0); }

}  // namespace

TEST(ProxNonnegL1, ClosedFormExamples) {
  EXPECT_TRUE(prox_nonneg_l1(vec({1.0, -0.5, 0.2}), 0.3).isApprox(vec({0.7, 0.0, 0.0})));
  const Vec v = vec({-2.0, 0.0, 3.5});
  EXPECT_EQ(prox_nonneg_l1(v, 0.0), v.cwiseMax(0.0));
  EXPECT_EQ(prox_nonneg_l1(vec({0.3}), 0.3)[0], 0.0);
}

TEST(ProxNonnegL1, OutputNeverNegative) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Vec v = oracle::random_matrix(20, 1, rng).col(0);
    EXPECT_GE(prox_nonneg_l1(v, 0.1 * t).minCoeff(), 0.0);
  }
}

TEST(ReconstructionObjective, ScalarExamples) {
  ElasticNetParams p;
  p.lambda = 0.1;
  p.lambda_prime = 0.1;
  EXPECT_DOUBLE_EQ(reconstruction_objective(scalar_dict(), vec({1.0}), vec({0.0}), p), 0.5);
  EXPECT_DOUBLE_EQ(reconstruction_objective(scalar_dict(), vec({1.0}), vec({1.0}), p), 0.15);
}

TEST(ReconstructionObjective, MatchesDirectEvaluation) {
  std::mt19937_64 rng(11);
  ElasticNetParams p;
  p.lambda = 0.3;
  p.lambda_prime = 0.2;
  const Mat D = oracle::random_matrix(8, 12, rng);
  const Vec x = oracle::random_matrix(8, 1, rng).col(0);
  const Vec a = oracle::random_matrix(12, 1, rng).col(0).cwiseAbs();
  EXPECT_NEAR(reconstruction_objective(D, x, a, p), oracle::enet_objective(D, x, a, 0.3, 0.2),
              1e-12);
}

TEST(ReconstructionObjective, DimensionMismatchThrows) {
  ElasticNetParams p;
  EXPECT_THROW(reconstruction_objective(Mat::Ones(3, 2), Vec::Ones(4), Vec::Ones(2), p), Error);
}

TEST(FistaEncode, ScalarSoftThreshold) {
  ElasticNetParams p;
  p.lambda = 0.1;
  p.lambda_prime = 1e-300;
  const auto code = fista_encode(scalar_dict(), vec({1.0}), p);
  EXPECT_NEAR(code.coeffs[0], 0.9, 1e-12);
}

TEST(FistaEncode, ScalarElasticNet) {
  ElasticNetParams p;
  p.lambda = 0.1;
  p.lambda_prime = 0.1;
  const auto code = fista_encode(scalar_dict(), vec({1.0}), p);
  EXPECT_NEAR(code.coeffs[0], 0.9 / 1.1, 1e-12);
  EXPECT_NEAR(code.coeffs[0], 0.8182, 1e-4);
  EXPECT_TRUE(kkt_check(scalar_dict(), vec({1.0}), code, p, 10 * p.tol));
  ASSERT_EQ(code.active_set.size(), 1u);
}

TEST(FistaEncode, MatchesCoordinateDescentOracle) {
  std::mt19937_64 rng(2024);
  ElasticNetParams p;
  p.lambda = 0.2;
  p.lambda_prime = 0.1;
  const Mat D = oracle::unit_columns(oracle::random_matrix(20, 50, rng));
  const Vec x = oracle::random_matrix(20, 1, rng).col(0);
  const auto code = fista_encode(D, x, p);
  const Vec ref = oracle::coordinate_descent(D, x, p.lambda, p.lambda_prime);
  EXPECT_NEAR(oracle::enet_objective(D, x, code.coeffs, p.lambda, p.lambda_prime),
              oracle::enet_objective(D, x, ref, p.lambda, p.lambda_prime), 1e-8);
}

TEST(FistaEncode, NonFiniteInputThrows) {
  ElasticNetParams p;
  Vec x = Vec::Ones(3);
  x[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(fista_encode(Mat::Identity(3, 3), x, p), Error);
}

TEST(FistaEncode, BudgetExhaustedIsFlagged) {
  std::mt19937_64 rng(5);
  ElasticNetParams p;
  p.lambda = 0.01;
  p.lambda_prime = 1e-6;
  p.max_iters = 1;
  const Mat D = oracle::unit_columns(oracle::random_matrix(10, 40, rng));
  const Vec x = oracle::random_matrix(10, 1, rng).col(0);
  const auto code = fista_encode(D, x, p);
  EXPECT_FALSE(code.converged);
  EXPECT_EQ(code.iterations, 1);
  EXPECT_GE(code.coeffs.minCoeff(), 0.0);
}

TEST(KktCheck, Examples) {
  ElasticNetParams p;
  p.lambda = 0.1;
  p.lambda_prime = 0.1;
  const auto code = fista_encode(scalar_dict(), vec({1.0}), p);
  EXPECT_TRUE(kkt_check(scalar_dict(), vec({1.0}), code, p, 1e-7));

  SparseCode zero;
  zero.coeffs = Vec::Zero(3);
  EXPECT_TRUE(kkt_check(Mat::Identity(3, 3), Vec::Zero(3), zero, p, 1e-9));

  SparseCode bumped = code;
  bumped.coeffs[0] += 0.1;
  EXPECT_FALSE(kkt_check(scalar_dict(), vec({1.0}), bumped, p, 10 * p.tol));
}

TEST(ActiveSet, Examples) {
  EXPECT_EQ(active_set(vec({0.0, 0.5, 0.0}), 1e-10), std::vector<Index>{1});
  EXPECT_TRUE(active_set(Vec::Zero(4), 1e-10).empty());
  EXPECT_EQ(active_set(vec({1e-12, 0.3}), 1e-10), std::vector<Index>{1});
}

TEST(FistaProperties, RandomInstances) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> md(10, 30), kd(20, 60);
  std::uniform_real_distribution<double> lam(0.01, 0.5), lamp(0.01, 0.5);
  for (int t = 0; t < 120; ++t) {
    const Index m = md(rng), k = kd(rng);
    ElasticNetParams p;
    p.lambda = lam(rng);
    p.lambda_prime = lamp(rng);
    const Mat D = oracle::unit_columns(oracle::random_matrix(m, k, rng));
    const Vec x = oracle::random_matrix(m, 1, rng).col(0);
    std::vector<double> trace;
    const Mat gram = D.transpose() * D;
    const auto code = fista_solve(gram, D.transpose() * x, x.squaredNorm(),
                                  lipschitz_constant(gram, p.lambda_prime), p,
                                  SignConstraint::nonnegative, &trace);
    ASSERT_TRUE(code.converged) << "instance " << t;
    EXPECT_TRUE(kkt_check(D, x, code, p, 10 * p.tol)) << "instance " << t;
    EXPECT_GE(code.coeffs.minCoeff(), 0.0);
    EXPECT_LE(reconstruction_objective(D, x, code.coeffs, p), 0.5 * x.squaredNorm() + 1e-12);
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_LE(trace[i], trace[i - 1]);
    // Active set is exactly the entries above the (relative) threshold.
    const double thr = p.activation_eps * code.coeffs.maxCoeff();
    for (Index j = 0; j < k; ++j) {
      const bool in = std::binary_search(code.active_set.begin(), code.active_set.end(), j);
      EXPECT_EQ(in, code.coeffs[j] > thr);
    }
  }
}

TEST(FistaProperties, SignedVariantMatchesOracle) {
  std::mt19937_64 rng(91);
  for (int t = 0; t < 20; ++t) {
    ElasticNetParams p;
    p.lambda = 0.3;
    p.lambda_prime = 0.05;
    const Mat D = oracle::unit_columns(oracle::random_matrix(15, 30, rng));
    const Vec x = oracle::random_matrix(15, 1, rng).col(0);
    const auto code = fista_encode(D, x, p, SignConstraint::free);
    const Vec ref = oracle::coordinate_descent(D, x, p.lambda, p.lambda_prime, false);
    EXPECT_NEAR(oracle::enet_objective(D, x, code.coeffs, p.lambda, p.lambda_prime),
                oracle::enet_objective(D, x, ref, p.lambda, p.lambda_prime), 1e-8);
    EXPECT_TRUE(kkt_check(D, x, code, p, 10 * p.tol, SignConstraint::free));
  }
}
