#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "basinproj/blend.hpp"
#include "testing.hpp"

using namespace basinproj;
using basinproj::testing::random_image;
using basinproj::testing::smooth_image;

namespace {

Region interior_region(int h, int w, int margin) {
  Region r{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) r.inside[static_cast<std::size_t>(y) * w + x] = 1;
  return r;
}

// Dense solve of the same 5-point system for one channel.
std::vector<double> dense_solve(const ImageBuffer& src, const ImageBuffer& dst, const Region& R, int c) {
  const int H = dst.height(), W = dst.width();
  std::vector<int> index(static_cast<std::size_t>(H) * W, -1);
  int n = 0;
  for (int p = 0; p < H * W; ++p)
    if (R.inside[p]) index[p] = n++;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int p = y * W + x;
      if (index[p] < 0) continue;
      const int i = index[p];
      A(i, i) = 4.0;
      const int nb[4] = {p - W, p + W, p - 1, p + 1};
      for (const int q : nb) {
        b[i] += src.data()[3 * p + c] - src.data()[3 * q + c];
        if (index[q] >= 0)
          A(i, index[q]) = -1.0;
        else
          b[i] += dst.data()[3 * q + c];
      }
    }
  const Eigen::VectorXd u = A.partialPivLu().solve(b);
  std::vector<double> out(static_cast<std::size_t>(H) * W);
  for (int p = 0; p < H * W; ++p) out[p] = index[p] >= 0 ? u[index[p]] : dst.data()[3 * p + c];
  return out;
}

}  // namespace

TEST(Blend, SourceEqualsTargetIsFixpoint) {
  const auto img = random_image(32, 32, 1);
  const auto res = poisson_blend({img, img, interior_region(32, 32, 4)});
  EXPECT_TRUE(res.converged);
  for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(res.image.data()[i], img.data()[i], 1e-6);
}

TEST(Blend, ConstantOffsetIsAbsorbed) {
  const auto target = random_image(8, 8, 2, 0.2, 0.8);
  auto shifted = std::vector<float>(target.data().begin(), target.data().end());
  for (auto& v : shifted) v += 0.3f;
  const ImageBuffer source(8, 8, shifted);
  const auto R = interior_region(8, 8, 1);
  BlendOptions opt;
  opt.tol = 1e-7;
  const auto res = poisson_blend({source, target, R}, opt);
  ASSERT_TRUE(res.converged);
  for (int c = 0; c < 3; ++c) {
    const auto oracle = dense_solve(source, target, R, c);
    for (int p = 0; p < 64; ++p) {
      EXPECT_NEAR(oracle[p], target.data()[3 * p + c], 1e-3);
      EXPECT_NEAR(res.image.data()[3 * p + c], oracle[p], 1e-5);
      EXPECT_NEAR(res.image.data()[3 * p + c], target.data()[3 * p + c], 1e-3);
    }
  }
}

TEST(Blend, MatchesDenseSolveOnGeneralInput) {
  const auto source = random_image(8, 8, 3), target = random_image(8, 8, 4);
  Region R = interior_region(8, 8, 1);
  R.inside[2 * 8 + 3] = 0;  // non-convex region
  BlendOptions opt;
  opt.tol = 1e-8;
  const auto res = poisson_blend({source, target, R}, opt);
  for (int c = 0; c < 3; ++c) {
    const auto oracle = dense_solve(source, target, R, c);
    for (int p = 0; p < 64; ++p) EXPECT_NEAR(res.image.data()[3 * p + c], oracle[p], 1e-5);
  }
}

TEST(Blend, ResidualBelowTolAndOutsideUntouched) {
  const auto source = smooth_image(32, 32, 1.0), target = random_image(32, 32, 5);
  const auto R = region_from_mask(make_box_mask(32, 32, Box{6, 8, 18, 14}));
  const auto res = poisson_blend({source, target, R});
  EXPECT_TRUE(res.converged);
  EXPECT_LT(res.residual, 1e-5);
  for (int p = 0; p < 32 * 32; ++p)
    if (!R.inside[p])
      for (int c = 0; c < 3; ++c) ASSERT_EQ(res.image.data()[3 * p + c], target.data()[3 * p + c]);
}

TEST(Blend, CorrectionObeysMaximumPrinciple) {
  const auto source = smooth_image(32, 32, 2.0), target = random_image(32, 32, 6);
  const auto R = interior_region(32, 32, 6);
  BlendOptions opt;
  opt.tol = 1e-7;
  const auto res = poisson_blend({source, target, R}, opt);
  for (int c = 0; c < 3; ++c) {
    double lo = 1e9, hi = -1e9, blo = 1e9, bhi = -1e9;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int p = y * 32 + x;
        const double corr = double(res.image.data()[3 * p + c]) - source.data()[3 * p + c];
        const bool in = R.inside[p];
        const bool boundary = !in && ((y > 0 && R.inside[p - 32]) || (y < 31 && R.inside[p + 32]) ||
                                      (x > 0 && R.inside[p - 1]) || (x < 31 && R.inside[p + 1]));
        if (in) lo = std::min(lo, corr), hi = std::max(hi, corr);
        if (boundary) blo = std::min(blo, corr), bhi = std::max(bhi, corr);
      }
    EXPECT_GE(lo, blo - 1e-4);
    EXPECT_LE(hi, bhi + 1e-4);
  }
}

TEST(Blend, InteriorLaplacianFollowsSource) {
  const auto source = smooth_image(32, 32, 0.5), target = smooth_image(32, 32, 2.5);
  const auto R = interior_region(32, 32, 5);
  BlendOptions opt;
  const auto res = poisson_blend({source, target, R}, opt);
  auto lap = [](const ImageBuffer& img, int y, int x, int c) {
    return 4.0 * img.at(y, x, c) - img.at(y - 1, x, c) - img.at(y + 1, x, c) - img.at(y, x - 1, c) -
           img.at(y, x + 1, c);
  };
  double dev = 0.0;
  int n = 0;
  for (int y = 5; y < 27; ++y)
    for (int x = 5; x < 27; ++x)
      for (int c = 0; c < 3; ++c) dev += std::abs(lap(res.image, y, x, c) - lap(source, y, x, c)), ++n;
  EXPECT_LT(dev / n, 5 * opt.tol);
}

TEST(Blend, NonConvergenceIsFlagged) {
  const auto source = random_image(32, 32, 7), target = random_image(32, 32, 8);
  BlendOptions opt;
  opt.max_iters = 3;
  const auto res = poisson_blend({source, target, interior_region(32, 32, 2)}, opt);
  EXPECT_FALSE(res.converged);
  EXPECT_EQ(res.iterations, 3);
  EXPECT_GT(res.residual, opt.tol);
}

TEST(Blend, Errors) {
  const auto a = random_image(8, 8, 1), b = random_image(8, 9, 1);
  EXPECT_THROW(poisson_blend({a, b, interior_region(8, 8, 1)}), ShapeError);
  EXPECT_THROW(poisson_blend({a, a, interior_region(8, 9, 1)}), ShapeError);
  EXPECT_THROW(poisson_blend({a, a, interior_region(8, 8, 0)}), DomainError);  // touches border
  EXPECT_THROW(poisson_blend({a, a, interior_region(8, 8, 4)}), DomainError);  // empty
  BlendOptions bad;
  bad.tol = 0.0;
  EXPECT_THROW(poisson_blend({a, a, interior_region(8, 8, 1)}, bad), DomainError);
}

TEST(Blend, RegionFromMaskErodesAndKeepsMargin) {
  const auto r = region_from_mask(make_box_mask(16, 16, Box{0, 4, 10, 8}));
  EXPECT_FALSE(r.at(0, 6));
  EXPECT_FALSE(r.at(9, 6));   // eroded bottom row
  EXPECT_TRUE(r.at(5, 6));
  EXPECT_FALSE(r.at(5, 4));   // eroded left column
  EXPECT_EQ(r.count(), static_cast<std::size_t>(8 * 6));  // rows 1..8, cols 5..10
}
