#include <gtest/gtest.h>

#include <filesystem>

#include "basinproj/cma.hpp"
#include "testing.hpp"

using namespace basinproj;
using basinproj::testing::rastrigin_race;
using basinproj::testing::sphere;

namespace {

double run_sphere(std::uint64_t seed, int dim, int population, int generations) {
  Rng init(seed);
  Eigen::VectorXd x0(dim);
  for (int i = 0; i < dim; ++i) x0[i] = init.uniform(-3, 3);
  auto s = cma_init(dim, x0, Eigen::MatrixXd::Identity(dim, dim), population);
  const Rng rng(seed + 99);
  double best = sphere(x0);
  for (int g = 0; g < generations && best >= 1e-10; ++g) {
    const auto xs = cma_sample(s, rng);
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(sphere(x)), best = std::min(best, f.back());
    s = cma_update(std::move(s), xs, f);
  }
  return best;
}

void expect_valid(const CmaState& s) {
  EXPECT_GT(s.sigma, 0.0);
  EXPECT_TRUE(s.mean.allFinite());
  EXPECT_LT((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GE(s.min_eigenvalue_before_regularization, -1e-10);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.cov);
  EXPECT_GE(eig.eigenvalues().minCoeff(), 0.0);
}

}  // namespace

TEST(CmaInit, LatentSpaceDefaults) {
  const auto s = cma_init(Eigen::VectorXd::Zero(16), 1.0, 18);
  EXPECT_EQ(s.dim, 16);
  EXPECT_EQ(s.population, 18);
  EXPECT_EQ(s.mu_sel, 9);
  EXPECT_TRUE(s.mean.isZero());
  EXPECT_TRUE(s.cov.isIdentity());
  EXPECT_EQ(s.sigma, 1.0);
}

TEST(CmaInit, TransformSpaceCovariance) {
  Eigen::VectorXd phi0(5);
  phi0 << 1.2, 1.2, 0.1, -0.1, 0.0;
  const auto s = cma_init(phi0, 0.1, 18);
  EXPECT_EQ(s.mean, phi0);
  EXPECT_TRUE(s.cov.isApprox(0.1 * Eigen::MatrixXd::Identity(5, 5)));
}

TEST(CmaInit, Weights) {
  const auto s = cma_init(Eigen::VectorXd::Zero(8), 1.0, 18);
  EXPECT_NEAR(s.weights.sum(), 1.0, 1e-12);
  for (int i = 0; i < s.mu_sel; ++i) {
    EXPECT_GT(s.weights[i], 0.0);
    if (i > 0) {
      EXPECT_LT(s.weights[i], s.weights[i - 1]);
    }
  }
}

TEST(CmaInit, Errors) {
  Eigen::MatrixXd not_psd = Eigen::MatrixXd::Identity(3, 3);
  not_psd(2, 2) = -1.0;
  EXPECT_THROW(cma_init(3, Eigen::VectorXd::Zero(3), not_psd, 10), DomainError);
  Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(3, 3);
  asym(0, 1) = 0.5;
  EXPECT_THROW(cma_init(3, Eigen::VectorXd::Zero(3), asym, 10), DomainError);
  EXPECT_THROW(cma_init(3, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(3, 3), 10), ShapeError);
  EXPECT_THROW(cma_init(Eigen::VectorXd::Zero(3), 1.0, 1), DomainError);
}

TEST(CmaSample, TinySigmaCollapsesToMean) {
  Eigen::VectorXd mu(4);
  mu << 1, -2, 3, 0.5;
  const auto s = cma_init(4, mu, Eigen::MatrixXd::Identity(4, 4), 10, 1e-11);
  for (const auto& x : cma_sample(s, Rng(1))) EXPECT_LT((x - mu).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(CmaSample, MomentsMatchDistribution) {
  const int dim = 4, draws = 100000;
  Eigen::VectorXd mu(dim);
  mu << 0.5, -1.0, 2.0, 0.0;
  Eigen::MatrixXd A(dim, dim);
  A << 1, 0, 0, 0, 0.5, 1, 0, 0, -0.3, 0.2, 0.8, 0, 0.1, 0.1, 0.1, 0.5;
  const Eigen::MatrixXd cov = A * A.transpose();
  const double sigma = 0.7;
  auto s = cma_init(dim, mu, cov, draws, sigma);
  const auto xs = cma_sample(s, Rng(2));
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& x : xs) mean += x;
  mean /= draws;
  for (int i = 0; i < dim; ++i) EXPECT_LT(std::abs(mean[i] - mu[i]), 3.0 * sigma * std::sqrt(cov(i, i)) / std::sqrt(draws));
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& x : xs) c += (x - mean) * (x - mean).transpose();
  c /= draws - 1;
  const Eigen::MatrixXd expected = sigma * sigma * cov;
  EXPECT_LT((c - expected).norm() / expected.norm(), 0.05);
}

TEST(CmaSample, DeterministicGivenRng) {
  const auto s = cma_init(Eigen::VectorXd::Zero(6), 1.0, 12);
  const auto a = cma_sample(s, Rng(5)), b = cma_sample(s, Rng(5)), c = cma_sample(s, Rng(6));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_NE(a[0], c[0]);
}

TEST(CmaUpdate, SphereConverges) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LT(run_sphere(seed, 8, 16, 300), 1e-10) << "seed " << seed;
}

TEST(CmaUpdate, BeatsAdamOnRastrigin) {
  int cma_ok = 0, adam_ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = rastrigin_race(seed);
    cma_ok += r.cma_best < 1.0;
    adam_ok += r.adam_final < 1.0;
  }
  EXPECT_GE(cma_ok, 6);
  EXPECT_LE(adam_ok, 2);
}

TEST(CmaUpdate, StaysSymmetricPsd) {
  auto s = cma_init(Eigen::VectorXd::Constant(6, 2.0), 1.0, 12);
  const Rng rng(8);
  for (int g = 0; g < 200; ++g) {
    const auto xs = cma_sample(s, rng);
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(basinproj::testing::rastrigin(x));
    s = cma_update(std::move(s), xs, f);
    expect_valid(s);
  }
}

TEST(CmaUpdate, RankInvariance) {
  auto s = cma_init(Eigen::VectorXd::Constant(5, 1.0), 1.0, 10);
  const Rng rng(9);
  auto t = s, u = s;
  for (int g = 0; g < 30; ++g) {
    const auto xs = cma_sample(s, rng);
    std::vector<double> f, shifted, warped;
    for (const auto& x : xs) {
      const double v = sphere(x);
      f.push_back(v);
      shifted.push_back(v + 123.0);
      warped.push_back(std::exp(3.0 * v) - 7.0);
    }
    s = cma_update(std::move(s), xs, f);
    t = cma_update(std::move(t), cma_sample(t, rng), shifted);
    u = cma_update(std::move(u), cma_sample(u, rng), warped);
    ASSERT_EQ(s.mean, t.mean);
    ASSERT_EQ(s.cov, t.cov);
    ASSERT_EQ(s.sigma, t.sigma);
    ASSERT_EQ(s.mean, u.mean);
    ASSERT_EQ(s.cov, u.cov);
    ASSERT_EQ(s.sigma, u.sigma);
  }
}

TEST(CmaUpdate, EqualLossesKeepInvariants) {
  auto s = cma_init(Eigen::VectorXd::Zero(4), 1.0, 8);
  const Rng rng(10);
  for (int g = 0; g < 20; ++g) {
    const auto xs = cma_sample(s, rng);
    s = cma_update(std::move(s), xs, std::vector<double>(8, 1.0));
    expect_valid(s);
  }
}

TEST(CmaUpdate, FailedCandidatesRankLast) {
  auto s = cma_init(Eigen::VectorXd::Zero(3), 1.0, 6);
  const auto xs = cma_sample(s, Rng(3));
  std::vector<double> f{1.0, std::numeric_limits<double>::infinity(), 2.0, std::nan(""), 0.5, 3.0};
  const auto next = cma_update(s, xs, f);
  // mu_sel = 3: candidates 4, 0, 2.
  const Eigen::VectorXd expected = s.weights[0] * xs[4] + s.weights[1] * xs[0] + s.weights[2] * xs[2];
  EXPECT_TRUE(next.mean.isApprox(expected, 1e-12));
}

TEST(CmaUpdate, AllFailedThrows) {
  auto s = cma_init(Eigen::VectorXd::Zero(3), 1.0, 4);
  const auto xs = cma_sample(s, Rng(3));
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cma_update(s, xs, std::vector<double>{inf, inf, std::nan(""), inf}), NumericError);
  EXPECT_THROW(cma_update(s, xs, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST(CmaUpdate, Deterministic) {
  auto run = [] {
    auto s = cma_init(Eigen::VectorXd::Constant(6, 1.5), 1.0, 12);
    const Rng rng(21);
    for (int g = 0; g < 40; ++g) {
      const auto xs = cma_sample(s, rng);
      std::vector<double> f;
      for (const auto& x : xs) f.push_back(basinproj::testing::rastrigin(x));
      s = cma_update(std::move(s), xs, f);
    }
    return s;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.cov, b.cov);
  EXPECT_EQ(a.sigma, b.sigma);
}

TEST(CmaCheckpoint, RoundTripResumesIdentically) {
  auto s = cma_init(Eigen::VectorXd::Constant(5, 1.0), 1.0, 10);
  const Rng rng(4);
  for (int g = 0; g < 10; ++g) {
    const auto xs = cma_sample(s, rng);
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(sphere(x));
    s = cma_update(std::move(s), xs, f);
  }
  const auto path = std::filesystem::temp_directory_path() / "basinproj_cma_checkpoint.bin";
  save_cma(s, path);
  auto r = load_cma(path);
  std::filesystem::remove(path);
  EXPECT_EQ(r.iteration, s.iteration);
  EXPECT_EQ(r.mean, s.mean);
  EXPECT_EQ(r.cov, s.cov);
  EXPECT_EQ(r.sigma, s.sigma);
  for (int g = 0; g < 5; ++g) {
    const auto xs = cma_sample(s, rng), ys = cma_sample(r, rng);
    std::vector<double> f;
    for (const auto& x : xs) f.push_back(sphere(x));
    s = cma_update(std::move(s), xs, f);
    r = cma_update(std::move(r), ys, f);
  }
  EXPECT_EQ(r.mean, s.mean);
  EXPECT_EQ(r.sigma, s.sigma);
}

TEST(CmaCheckpoint, TruncatedPayloadThrows) {
  const auto bytes = encode_cma(cma_init(Eigen::VectorXd::Zero(3), 1.0, 4));
  const std::vector<unsigned char> cut(bytes.begin(), bytes.end() - 8);
  EXPECT_THROW(decode_cma(cut), ParseError);
}
