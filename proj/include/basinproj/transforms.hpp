#pragma once

// Scale/translate grid sampling and additive brightness.
//
// Coordinates are normalized to [-1,1] across the image with pixel centers at
// (2i+1)/N - 1. The spatial transform with parameters [sx, sy, tx, ty] fills
// output location u with the source value at A(u) = (sx*u_x + tx, sy*u_y + ty),
// so sx > 1 shrinks the content and the inverse parameters are
// [1/sx, 1/sy, -tx/sx, -ty/sy].

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "basinproj/core.hpp"

namespace basinproj {

inline constexpr double kMinScale = 1e-3;

struct SpatialParams {
  double sx = 1.0;
  double sy = 1.0;
  double tx = 0.0;
  double ty = 0.0;
  friend bool operator==(const SpatialParams&, const SpatialParams&) = default;
};

struct ColorParams {
  double gamma = 0.0;
  friend bool operator==(const ColorParams&, const ColorParams&) = default;
};

struct TransformParams {
  SpatialParams spatial;
  ColorParams color;

  static TransformParams identity() { return {}; }

  /// Flat order used by the search: sx, sy, tx, ty, gamma.
  std::array<double, 5> to_array() const {
    return {spatial.sx, spatial.sy, spatial.tx, spatial.ty, color.gamma};
  }
  static TransformParams from_array(std::span<const double> v) {
    if (v.size() != 5) throw ShapeError("TransformParams: expected 5 values");
    return {{v[0], v[1], v[2], v[3]}, {v[4]}};
  }
  friend bool operator==(const TransformParams&, const TransformParams&) = default;
};

inline SpatialParams invert_params(const SpatialParams& p) {
  if (!(p.sx > kMinScale) || !(p.sy > kMinScale)) throw DomainError("invert_params: scale must exceed 1e-3");
  return {1.0 / p.sx, 1.0 / p.sy, -p.tx / p.sx, -p.ty / p.sy};
}

inline ColorParams invert_params(const ColorParams& p) { return {-p.gamma}; }

inline TransformParams invert_params(const TransformParams& p) {
  return {invert_params(p.spatial), invert_params(p.color)};
}

enum class Padding { border, zeros };

/// Precomputed bilinear taps for one (size, params, padding) combination.
/// Index -1 marks a zero-padded neighbor.
class SamplingGrid {
 public:
  struct Tap {
    std::array<int, 4> index;
    std::array<double, 4> weight;
  };

  SamplingGrid(int height, int width, const SpatialParams& p, Padding padding)
      : height_(height), width_(width), taps_(static_cast<std::size_t>(height) * width) {
    if (!(p.sx > kMinScale) || !(p.sy > kMinScale)) throw DomainError("grid_sample: scale must exceed 1e-3");
    const auto xs = axis(width, p.sx, p.tx, padding);
    const auto ys = axis(height, p.sy, p.ty, padding);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const auto& ay = ys[y];
        const auto& ax = xs[x];
        Tap& t = taps_[static_cast<std::size_t>(y) * width + x];
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const int k = 2 * a + b;
            const bool valid = ay.index[a] >= 0 && ax.index[b] >= 0;
            t.index[k] = valid ? ay.index[a] * width + ax.index[b] : -1;
            t.weight[k] = valid ? ay.weight[a] * ax.weight[b] : 0.0;
          }
      }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  const Tap& tap(std::size_t pixel) const { return taps_[pixel]; }
  std::size_t size() const noexcept { return taps_.size(); }

 private:
  struct AxisTap {
    std::array<int, 2> index;
    std::array<double, 2> weight;
  };

  // Source pixel coordinate for output index i:
  //   ((s*((2i+1)/n - 1) + t + 1) * n - 1) / 2, rearranged so that integer
  //   pixel shifts at unit scale are exact.
  static std::vector<AxisTap> axis(int n, double s, double t, Padding padding) {
    std::vector<AxisTap> out(n);
    for (int i = 0; i < n; ++i) {
      const double src = 0.5 * (s * (2.0 * i + 1.0 - n) + t * n + n - 1.0);
      const double f = std::floor(src);
      const double frac = src - f;
      const int i0 = static_cast<int>(f);
      AxisTap& a = out[i];
      a.index = {i0, i0 + 1};
      a.weight = {1.0 - frac, frac};
      for (int k = 0; k < 2; ++k) {
        if (padding == Padding::border) {
          a.index[k] = std::clamp(a.index[k], 0, n - 1);
        } else if (a.index[k] < 0 || a.index[k] >= n) {
          a.index[k] = -1;
          a.weight[k] = 0.0;
        }
      }
    }
    return out;
  }

  int height_;
  int width_;
  std::vector<Tap> taps_;
};

namespace detail {

template <typename T>
std::vector<T> sample_channels(std::span<const T> src, int channels, const SamplingGrid& grid) {
  std::vector<T> out(grid.size() * channels, T(0));
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const auto& t = grid.tap(p);
    for (int c = 0; c < channels; ++c) {
      T s = T(0);
      for (int k = 0; k < 4; ++k)
        if (t.index[k] >= 0 && t.weight[k] != 0.0)
          s += static_cast<T>(t.weight[k]) * src[static_cast<std::size_t>(t.index[k]) * channels + c];
      out[p * channels + c] = s;
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Image<T> grid_sample(const Image<T>& img, const SpatialParams& p, Padding padding = Padding::border) {
  if (p == SpatialParams{}) return img;
  const SamplingGrid grid(img.height(), img.width(), p, padding);
  return Image<T>(img.height(), img.width(), detail::sample_channels<T>(img.data(), 3, grid));
}

/// Mask resampling; results are clamped back to [0,1].
template <typename T>
Mask<T> grid_sample(const Mask<T>& m, const SpatialParams& p, Padding padding = Padding::zeros) {
  if (p == SpatialParams{}) return m;
  const SamplingGrid grid(m.height(), m.width(), p, padding);
  auto out = detail::sample_channels<T>(m.data(), 1, grid);
  for (auto& v : out) v = std::clamp(v, T(0), T(1));
  return Mask<T>(m.height(), m.width(), std::move(out));
}

/// Adjoint of grid_sample: d(loss)/d(img) given d(loss)/d(grid_sample(img)).
template <typename T>
Image<T> grid_sample_backward(int height, int width, const SpatialParams& p, const Image<T>& upstream,
                              Padding padding = Padding::border) {
  if (upstream.height() != height || upstream.width() != width)
    throw ShapeError("grid_sample_backward: upstream shape mismatch");
  if (p == SpatialParams{}) return upstream;
  const SamplingGrid grid(height, width, p, padding);
  std::vector<T> g(upstream.size(), T(0));
  const auto up = upstream.data();
  for (std::size_t px = 0; px < grid.size(); ++px) {
    const auto& t = grid.tap(px);
    for (int k = 0; k < 4; ++k) {
      if (t.index[k] < 0 || t.weight[k] == 0.0) continue;
      const T w = static_cast<T>(t.weight[k]);
      for (int c = 0; c < 3; ++c) g[static_cast<std::size_t>(t.index[k]) * 3 + c] += w * up[px * 3 + c];
    }
  }
  return Image<T>(height, width, std::move(g));
}

template <typename T>
Image<T> grid_sample_backward(const Image<T>& img, const SpatialParams& p, const Image<T>& upstream,
                              Padding padding = Padding::border) {
  return grid_sample_backward(img.height(), img.width(), p, upstream, padding);
}

/// Additive brightness, no clamping.
template <typename T>
Image<T> apply_color(const Image<T>& img, double gamma) {
  if (gamma == 0.0) return img;
  std::vector<T> out(img.data().begin(), img.data().end());
  const T g = static_cast<T>(gamma);
  for (auto& v : out) v += g;
  return Image<T>(img.height(), img.width(), std::move(out));
}

template <typename T>
struct TransformedTarget {
  Image<T> image;
  Mask<T> mask;
};

/// (T_phi(y), T_phi(m)): brightness then spatial resampling for the image,
/// spatial only (zero padding) for the mask.
template <typename T>
TransformedTarget<T> transform_target(const Image<T>& y, const Mask<T>& m, const TransformParams& phi) {
  if (y.height() != m.height() || y.width() != m.width()) throw ShapeError("transform_target: image/mask size mismatch");
  return {grid_sample(apply_color(y, phi.color.gamma), phi.spatial, Padding::border),
          grid_sample(m, phi.spatial, Padding::zeros)};
}

/// T_phi^{-1}(img): maps a generated image back into the target frame.
template <typename T>
Image<T> inverse_transform(const Image<T>& img, const TransformParams& phi) {
  const TransformParams inv = invert_params(phi);
  return apply_color(grid_sample(img, inv.spatial, Padding::border), inv.color.gamma);
}

/// Gradient of inverse_transform w.r.t. its input image.
template <typename T>
Image<T> inverse_transform_backward(const Image<T>& upstream, const TransformParams& phi) {
  return grid_sample_backward(upstream.height(), upstream.width(), invert_params(phi).spatial, upstream,
                              Padding::border);
}

/// Bilinear resize (half-pixel centers, no antialiasing).
template <typename T>
Mask<T> resize_bilinear(const Mask<T>& m, int height, int width) {
  if (height == m.height() && width == m.width()) return m;
  auto axis = [](int n_out, int n_in, int i) {
    const double src = std::max(0.0, (i + 0.5) * n_in / n_out - 0.5);
    const int i0 = std::min(static_cast<int>(src), n_in - 1);
    const int i1 = std::min(i0 + 1, n_in - 1);
    return std::tuple{i0, i1, src - i0};
  };
  std::vector<T> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const auto [y0, y1, fy] = axis(height, m.height(), y);
    for (int x = 0; x < width; ++x) {
      const auto [x0, x1, fx] = axis(width, m.width(), x);
      const double v = (1 - fy) * ((1 - fx) * m.at(y0, x0) + fx * m.at(y0, x1)) +
                       fy * ((1 - fx) * m.at(y1, x0) + fx * m.at(y1, x1));
      out[static_cast<std::size_t>(y) * width + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
  return Mask<T>(height, width, std::move(out));
}

}  // namespace basinproj
