#pragma once

// Poisson (seamless-clone) blending with an SOR solver.

#include <cmath>
#include <cstdint>
#include <vector>

#include "basinproj/core.hpp"

namespace basinproj {

/// Binary region on an H x W grid.
struct Region {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> inside;

  bool at(int y, int x) const { return inside[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : inside) n += v != 0;
    return n;
  }
};

/// Foreground (weight == max weight) of a mask, eroded by `erode` pixels
/// (4-neighborhood) and kept off the 1-pixel image border.
template <typename T>
Region region_from_mask(const Mask<T>& m, int erode = 1) {
  T top = T(0);
  for (const T v : m.data()) top = std::max(top, v);
  Region r{m.height(), m.width(), std::vector<std::uint8_t>(m.size(), 0)};
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) r.inside[static_cast<std::size_t>(y) * m.width() + x] = top > T(0) && m.at(y, x) == top;
  for (int k = 0; k < erode; ++k) {
    Region next = r;
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) {
        if (!r.at(y, x)) continue;
        const bool edge = y == 0 || x == 0 || y == r.height - 1 || x == r.width - 1 || !r.at(y - 1, x) ||
                          !r.at(y + 1, x) || !r.at(y, x - 1) || !r.at(y, x + 1);
        if (edge) next.inside[static_cast<std::size_t>(y) * r.width + x] = 0;
      }
    r = std::move(next);
  }
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      if (y == 0 || x == 0 || y == r.height - 1 || x == r.width - 1) r.inside[static_cast<std::size_t>(y) * r.width + x] = 0;
  return r;
}

struct BlendRequest {
  ImageBuffer source;  // supplies the guidance gradients
  ImageBuffer target;  // supplies the boundary values and everything outside
  Region region;
};

struct BlendOptions {
  double tol = 1e-5;
  int max_iters = 10000;
  double omega = 1.9;
};

struct BlendResult {
  ImageBuffer image;
  double residual = 0.0;  // max |Laplacian equation residual| over region and channels
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline constexpr int kDy[4] = {-1, 1, 0, 0};
inline constexpr int kDx[4] = {0, 0, -1, 1};

// Residual of 4u_p - sum_q u_q = sum_q (s_p - s_q) at an interior pixel.
inline double poisson_residual(const std::vector<double>& u, const std::vector<double>& s, int w, int y, int x) {
  const std::size_t p = static_cast<std::size_t>(y) * w + x;
  double lhs = 4.0 * u[p], rhs = 0.0;
  for (int k = 0; k < 4; ++k) {
    const std::size_t q = static_cast<std::size_t>(y + kDy[k]) * w + x + kDx[k];
    lhs -= u[q];
    rhs += s[p] - s[q];
  }
  return rhs - lhs;
}

}  // namespace detail

/// Solves the discrete Poisson equation inside the region with Dirichlet
/// boundary values from the target; pixels outside the region are copied
/// from the target unchanged. Channels are solved independently.
inline BlendResult poisson_blend(const BlendRequest& req, const BlendOptions& opt = {}) {
  const auto& src = req.source;
  const auto& dst = req.target;
  const auto& R = req.region;
  if (!src.same_shape(dst)) throw ShapeError("poisson_blend: source/target size mismatch");
  if (R.height != dst.height() || R.width != dst.width() || R.inside.size() != dst.pixel_count())
    throw ShapeError("poisson_blend: region size mismatch");
  if (!(opt.tol > 0.0)) throw DomainError("poisson_blend: tol must be positive");
  if (opt.max_iters < 0) throw DomainError("poisson_blend: max_iters must be non-negative");
  if (R.count() == 0) throw DomainError("poisson_blend: empty region");
  const int H = dst.height(), W = dst.width();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (R.at(y, x) && (y == 0 || x == 0 || y == H - 1 || x == W - 1))
        throw DomainError("poisson_blend: region touches the image border");

  std::vector<std::size_t> cells;
  for (int y = 1; y < H - 1; ++y)
    for (int x = 1; x < W - 1; ++x)
      if (R.at(y, x)) cells.push_back(static_cast<std::size_t>(y) * W + x);

  BlendResult result;
  std::vector<float> out(dst.data().begin(), dst.data().end());
  for (int c = 0; c < 3; ++c) {
    std::vector<double> u(dst.pixel_count()), s(dst.pixel_count());
    for (std::size_t p = 0; p < u.size(); ++p) {
      s[p] = src.data()[3 * p + c];
      u[p] = R.inside[p] ? s[p] : dst.data()[3 * p + c];
    }
    // Laplacian of the guidance field is constant per cell; precompute it.
    std::vector<double> rhs(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const int y = static_cast<int>(cells[i] / W), x = static_cast<int>(cells[i] % W);
      double b = 0.0;
      for (int k = 0; k < 4; ++k) b += s[cells[i]] - s[static_cast<std::size_t>(y + detail::kDy[k]) * W + x + detail::kDx[k]];
      rhs[i] = b;
    }
    auto max_residual = [&] {
      double r = 0.0;
      for (const auto p : cells)
        r = std::max(r, std::abs(detail::poisson_residual(u, s, W, static_cast<int>(p / W), static_cast<int>(p % W))));
      return r;
    };
    double res = max_residual();
    int it = 0;
    while (res >= opt.tol && it < opt.max_iters) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        const std::size_t p = cells[i];
        const double nb = u[p - W] + u[p + W] + u[p - 1] + u[p + 1];
        const double gs = (rhs[i] + nb) / 4.0;
        u[p] += opt.omega * (gs - u[p]);
      }
      ++it;
      res = max_residual();
    }
    result.iterations = std::max(result.iterations, it);
    result.residual = std::max(result.residual, res);
    for (const auto p : cells) out[3 * p + c] = static_cast<float>(u[p]);
  }
  result.converged = result.residual < opt.tol;
  result.image = ImageBuffer(H, W, std::move(out));
  return result;
}

}  // namespace basinproj
