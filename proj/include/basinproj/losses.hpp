#pragma once

// Masked per-pixel and masked multi-scale perceptual losses.
//
// The perceptual term uses a frozen random convolutional pyramid as feature
// extractor: three levels of 3x3 conv + tanh with 2x2 average pooling in
// between, giving 32, 16 and 8 pixel feature maps for a 32x32 input. For
// level l with features F^l, channel weights w_l and mask m^l (the mask
// bilinearly resized to that level),
//
//   L_perc = sum_l 1/M^l * sum_{h,w} m^l_hw * || w_l (.) (F^l_hw(y) - F^l_hw(yhat)) ||^2,
//   M^l = sum m^l.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "basinproj/core.hpp"
#include "basinproj/serialize.hpp"
#include "basinproj/toygen.hpp"
#include "basinproj/transforms.hpp"

namespace basinproj {

/// H x W x C feature map, channel-last.
template <typename T>
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  T at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

template <typename T>
struct FeaturePyramid {
  std::vector<FeatureMap<T>> levels;         // fine -> coarse
  std::vector<std::vector<T>> channel_weights;  // w_l, one per level
};

/// Frozen conv weights. Kernel layout per level: [ky][kx][c_in][c_out].
template <typename T>
struct FeatureExtractor {
  struct Level {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<T> kernel;
    std::vector<T> bias;
    std::vector<T> channel_weights;
  };
  std::uint64_t seed = 0;
  std::vector<Level> levels;

  template <typename U>
  FeatureExtractor<U> cast() const {
    FeatureExtractor<U> out;
    out.seed = seed;
    for (const auto& l : levels)
      out.levels.push_back({l.in_channels, l.out_channels, {l.kernel.begin(), l.kernel.end()},
                            {l.bias.begin(), l.bias.end()}, {l.channel_weights.begin(), l.channel_weights.end()}});
    return out;
  }
};

inline constexpr std::uint64_t kDefaultFeatureSeed = 0x1f0c0de5ULL;

inline FeatureExtractor<float> make_feature_extractor(std::uint64_t seed = kDefaultFeatureSeed, int channels = 8,
                                                      int level_count = 3) {
  FeatureExtractor<float> fx;
  fx.seed = seed;
  Rng rng(seed);
  int in = 3;
  for (int l = 0; l < level_count; ++l) {
    typename FeatureExtractor<float>::Level level;
    level.in_channels = in;
    level.out_channels = channels;
    level.kernel.resize(static_cast<std::size_t>(9) * in * channels);
    const double sd = 1.5 / std::sqrt(9.0 * in);
    Rng r = rng.substream(static_cast<std::uint64_t>(l));
    for (auto& w : level.kernel) w = static_cast<float>(sd * r.normal());
    level.bias.assign(channels, 0.0f);
    level.channel_weights.assign(channels, static_cast<float>(1.0 / std::sqrt(static_cast<double>(channels))));
    fx.levels.push_back(std::move(level));
    in = channels;
  }
  return fx;
}

/// Process-wide frozen extractor shared read-only by the free loss functions.
template <typename T>
const FeatureExtractor<T>& default_feature_extractor() {
  static const FeatureExtractor<T> fx = make_feature_extractor().template cast<T>();
  return fx;
}

namespace detail {

template <typename T>
FeatureMap<T> conv3x3(const FeatureMap<T>& in, const typename FeatureExtractor<T>::Level& L) {
  const int H = in.height, W = in.width, CI = L.in_channels, CO = L.out_channels;
  FeatureMap<T> out{H, W, CO, std::vector<T>(static_cast<std::size_t>(H) * W * CO)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      T* o = &out.data[(static_cast<std::size_t>(y) * W + x) * CO];
      for (int co = 0; co < CO; ++co) o[co] = L.bias[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= W) continue;
          const T* src = &in.data[(static_cast<std::size_t>(sy) * W + sx) * CI];
          const T* k = &L.kernel[static_cast<std::size_t>(ky * 3 + kx) * CI * CO];
          for (int ci = 0; ci < CI; ++ci) {
            const T v = src[ci];
            const T* kr = k + static_cast<std::size_t>(ci) * CO;
            for (int co = 0; co < CO; ++co) o[co] += v * kr[co];
          }
        }
      }
    }
  return out;
}

/// Gradient w.r.t. the conv input.
template <typename T>
FeatureMap<T> conv3x3_backward(const FeatureMap<T>& g_out, const typename FeatureExtractor<T>::Level& L) {
  const int H = g_out.height, W = g_out.width, CI = L.in_channels, CO = L.out_channels;
  FeatureMap<T> g_in{H, W, CI, std::vector<T>(static_cast<std::size_t>(H) * W * CI, T(0))};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const T* g = &g_out.data[(static_cast<std::size_t>(y) * W + x) * CO];
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        if (sy < 0 || sy >= H) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = x + kx - 1;
          if (sx < 0 || sx >= W) continue;
          T* dst = &g_in.data[(static_cast<std::size_t>(sy) * W + sx) * CI];
          const T* k = &L.kernel[static_cast<std::size_t>(ky * 3 + kx) * CI * CO];
          for (int ci = 0; ci < CI; ++ci) {
            const T* kr = k + static_cast<std::size_t>(ci) * CO;
            T s = T(0);
            for (int co = 0; co < CO; ++co) s += kr[co] * g[co];
            dst[ci] += s;
          }
        }
      }
    }
  return g_in;
}

template <typename T>
FeatureMap<T> avg_pool2(const FeatureMap<T>& in) {
  const int H = in.height / 2, W = in.width / 2, C = in.channels;
  FeatureMap<T> out{H, W, C, std::vector<T>(static_cast<std::size_t>(H) * W * C)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        out.data[(static_cast<std::size_t>(y) * W + x) * C + c] =
            T(0.25) * (in.at(2 * y, 2 * x, c) + in.at(2 * y, 2 * x + 1, c) + in.at(2 * y + 1, 2 * x, c) +
                       in.at(2 * y + 1, 2 * x + 1, c));
  return out;
}

template <typename T>
void avg_pool2_backward_add(const FeatureMap<T>& g_out, FeatureMap<T>& g_in) {
  const int C = g_out.channels;
  for (int y = 0; y < g_out.height; ++y)
    for (int x = 0; x < g_out.width; ++x)
      for (int c = 0; c < C; ++c) {
        const T g = T(0.25) * g_out.data[(static_cast<std::size_t>(y) * g_out.width + x) * C + c];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            g_in.data[(static_cast<std::size_t>(2 * y + dy) * g_in.width + 2 * x + dx) * C + c] += g;
      }
}

}  // namespace detail

template <typename T>
FeaturePyramid<T> surrogate_features(const Image<T>& img, const FeatureExtractor<T>& fx) {
  FeaturePyramid<T> pyr;
  FeatureMap<T> input{img.height(), img.width(), 3, img.vector()};
  for (std::size_t l = 0; l < fx.levels.size(); ++l) {
    if (l > 0) {
      if (input.height % 2 || input.width % 2) throw ShapeError("surrogate_features: odd feature size");
      input = detail::avg_pool2(pyr.levels.back());
    }
    FeatureMap<T> f = detail::conv3x3(input, fx.levels[l]);
    for (auto& v : f.data) v = std::tanh(v);
    pyr.levels.push_back(std::move(f));
    pyr.channel_weights.push_back(fx.levels[l].channel_weights);
  }
  return pyr;
}

template <typename T>
FeaturePyramid<T> surrogate_features(const Image<T>& img) {
  return surrogate_features(img, default_feature_extractor<T>());
}

struct LossReport {
  double total = 0.0;
  double l1_term = 0.0;
  double perceptual_term = 0.0;
  double beta = 0.0;
};

/// L_mask against a fixed (target, mask): caches target features and the
/// per-level resized masks so repeated evaluations only pay for yhat.
template <typename T>
class MaskedLoss {
 public:
  MaskedLoss(Image<T> target, Mask<T> mask, double beta = 10.0,
             const FeatureExtractor<T>& fx = default_feature_extractor<T>())
      : target_(std::move(target)), mask_(std::move(mask)), beta_(beta), fx_(&fx) {
    if (target_.height() != mask_.height() || target_.width() != mask_.width())
      throw ShapeError("MaskedLoss: target/mask size mismatch");
    mass_ = mask_.mass();
    if (!(mass_ > 0.0)) throw DomainError("MaskedLoss: mask has zero mass");
    if (beta_ != 0.0) {
      target_features_ = surrogate_features(target_, *fx_);
      for (const auto& f : target_features_.levels) {
        level_masks_.push_back(resize_bilinear(mask_, f.height, f.width));
        const double m = level_masks_.back().mass();
        if (!(m > 0.0)) throw DomainError("MaskedLoss: mask vanishes at a feature level");
        level_mass_.push_back(m);
      }
    }
  }

  const Image<T>& target() const noexcept { return target_; }
  const Mask<T>& mask() const noexcept { return mask_; }
  double beta() const noexcept { return beta_; }
  double mask_mass() const noexcept { return mass_; }

  double l1(const Image<T>& yhat) const {
    check(yhat);
    const auto a = yhat.data(), b = target_.data(), m = mask_.data();
    double s = 0.0;
    for (std::size_t p = 0; p < m.size(); ++p) {
      double px = 0.0;
      for (int c = 0; c < 3; ++c) px += std::abs(static_cast<double>(a[3 * p + c]) - static_cast<double>(b[3 * p + c]));
      s += static_cast<double>(m[p]) * px;
    }
    return s / mass_;
  }

  double perceptual(const Image<T>& yhat) const {
    check(yhat);
    if (beta_ == 0.0) return perceptual_uncached(yhat);
    return perceptual_from(surrogate_features(yhat, *fx_));
  }

  LossReport evaluate(const Image<T>& yhat) const {
    LossReport r;
    r.beta = beta_;
    r.l1_term = l1(yhat);
    r.perceptual_term = beta_ == 0.0 ? 0.0 : perceptual(yhat);
    r.total = r.l1_term + beta_ * r.perceptual_term;
    return r;
  }

  struct WithGradient {
    LossReport report;
    Image<T> gradient;
  };

  /// Loss and d(total)/d(yhat). The L1 subgradient at zero difference is 0.
  WithGradient evaluate_with_gradient(const Image<T>& yhat) const {
    check(yhat);
    WithGradient out{{}, Image<T>(yhat.height(), yhat.width())};
    out.report.beta = beta_;
    out.report.l1_term = l1(yhat);
    auto g = out.gradient.mutable_data();
    {
      const auto a = yhat.data(), b = target_.data(), m = mask_.data();
      const double inv = 1.0 / mass_;
      for (std::size_t p = 0; p < m.size(); ++p) {
        const T w = static_cast<T>(m[p] * inv);
        for (int c = 0; c < 3; ++c) {
          const T d = a[3 * p + c] - b[3 * p + c];
          g[3 * p + c] = d > T(0) ? w : (d < T(0) ? -w : T(0));
        }
      }
    }
    if (beta_ != 0.0) {
      const FeaturePyramid<T> pyr = surrogate_features(yhat, *fx_);
      out.report.perceptual_term = perceptual_from(pyr);
      add_perceptual_gradient(pyr, static_cast<T>(beta_), g);
    }
    out.report.total = out.report.l1_term + beta_ * out.report.perceptual_term;
    return out;
  }

 private:
  void check(const Image<T>& yhat) const {
    if (!yhat.same_shape(target_)) throw ShapeError("MaskedLoss: image size mismatch");
  }

  double perceptual_from(const FeaturePyramid<T>& pyr) const {
    double total = 0.0;
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
      const auto& f = pyr.levels[l];
      const auto& t = target_features_.levels[l];
      const auto& w = pyr.channel_weights[l];
      const auto mw = level_masks_[l].data();
      double s = 0.0;
      for (std::size_t p = 0; p < mw.size(); ++p) {
        if (mw[p] == T(0)) continue;
        double px = 0.0;
        for (int c = 0; c < f.channels; ++c) {
          const double d = static_cast<double>(w[c]) * (static_cast<double>(t.data[p * f.channels + c]) -
                                                         static_cast<double>(f.data[p * f.channels + c]));
          px += d * d;
        }
        s += static_cast<double>(mw[p]) * px;
      }
      total += s / level_mass_[l];
    }
    return total;
  }

  double perceptual_uncached(const Image<T>& yhat) const {
    MaskedLoss with_features(target_, mask_, 1.0, *fx_);
    return with_features.perceptual(yhat);
  }

  void add_perceptual_gradient(const FeaturePyramid<T>& pyr, T scale, std::span<T> g_img) const {
    const std::size_t n = pyr.levels.size();
    FeatureMap<T> carry;  // gradient w.r.t. level l output flowing in from level l+1
    for (std::size_t li = n; li-- > 0;) {
      const auto& f = pyr.levels[li];
      const auto& t = target_features_.levels[li];
      const auto& w = pyr.channel_weights[li];
      const auto mw = level_masks_[li].data();
      FeatureMap<T> g{f.height, f.width, f.channels, std::vector<T>(f.data.size(), T(0))};
      if (li + 1 < n) g = carry;
      const T k = scale * T(2.0 / level_mass_[li]);
      for (std::size_t p = 0; p < mw.size(); ++p) {
        if (mw[p] == T(0)) continue;
        for (int c = 0; c < f.channels; ++c) {
          const std::size_t i = p * f.channels + c;
          g.data[i] += k * mw[p] * w[c] * w[c] * (f.data[i] - t.data[i]);
        }
      }
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= T(1) - f.data[i] * f.data[i];
      FeatureMap<T> g_in = detail::conv3x3_backward(g, fx_->levels[li]);
      if (li == 0) {
        for (std::size_t i = 0; i < g_in.data.size(); ++i) g_img[i] += g_in.data[i];
      } else {
        const auto& prev = pyr.levels[li - 1];
        carry = FeatureMap<T>{prev.height, prev.width, prev.channels, std::vector<T>(prev.data.size(), T(0))};
        detail::avg_pool2_backward_add(g_in, carry);
      }
    }
  }

  Image<T> target_;
  Mask<T> mask_;
  double beta_;
  const FeatureExtractor<T>* fx_;
  double mass_ = 0.0;
  FeaturePyramid<T> target_features_;
  std::vector<Mask<T>> level_masks_;
  std::vector<double> level_mass_;
};

// Free-function forms. Argument order is (yhat, y, m).

template <typename T>
double masked_l1(const Image<T>& yhat, const Image<T>& y, const Mask<T>& m) {
  return MaskedLoss<T>(y, m, 0.0).l1(yhat);
}

template <typename T>
double masked_perceptual(const Image<T>& yhat, const Image<T>& y, const Mask<T>& m,
                         const FeatureExtractor<T>& fx = default_feature_extractor<T>()) {
  return MaskedLoss<T>(y, m, 1.0, fx).perceptual(yhat);
}

template <typename T>
LossReport mask_loss(const Image<T>& yhat, const Image<T>& y, const Mask<T>& m, double beta = 10.0) {
  return MaskedLoss<T>(y, m, beta).evaluate(yhat);
}

template <typename T>
Image<T> mask_loss_backward(const Image<T>& yhat, const Image<T>& y, const Mask<T>& m, double beta = 10.0) {
  return MaskedLoss<T>(y, m, beta).evaluate_with_gradient(yhat).gradient;
}

/// (1/HW) * ||yhat - y||_1, the per-pixel term of the basic loss.
template <typename T>
double plain_l1(const Image<T>& yhat, const Image<T>& y) {
  if (!yhat.same_shape(y)) throw ShapeError("plain_l1: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    s += std::abs(static_cast<double>(yhat.data()[i]) - static_cast<double>(y.data()[i]));
  return s / static_cast<double>(y.pixel_count());
}

/// Unmasked perceptual distance: per-level mean over positions.
template <typename T>
double plain_perceptual(const Image<T>& yhat, const Image<T>& y,
                        const FeatureExtractor<T>& fx = default_feature_extractor<T>()) {
  const auto a = surrogate_features(yhat, fx);
  const auto b = surrogate_features(y, fx);
  double total = 0.0;
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    const auto& fa = a.levels[l];
    const auto& fb = b.levels[l];
    double s = 0.0;
    for (std::size_t i = 0; i < fa.data.size(); ++i) {
      const double w = a.channel_weights[l][i % fa.channels];
      const double d = w * (static_cast<double>(fb.data[i]) - static_cast<double>(fa.data[i]));
      s += d * d;
    }
    total += s / (static_cast<double>(fa.height) * fa.width);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Serialization: JSON header line, then float32 LE kernel/bias/weights per level.

inline std::string encode_features(const FeatureExtractor<float>& fx) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : fx.levels) levels.push_back({{"in", l.in_channels}, {"out", l.out_channels}});
  nlohmann::json header = {{"format", "basinproj-features"}, {"version", 1}, {"seed", fx.seed}, {"levels", levels}};
  std::string out = header.dump() + "\n";
  for (const auto& l : fx.levels) {
    detail::append_le_floats(out, l.kernel);
    detail::append_le_floats(out, l.bias);
    detail::append_le_floats(out, l.channel_weights);
  }
  return out;
}

inline FeatureExtractor<float> decode_features(std::span<const unsigned char> bytes) {
  const auto [header, start] = detail::read_json_header(bytes);
  if (header.value("format", "") != "basinproj-features") throw ParseError("not a feature file", 0);
  FeatureExtractor<float> fx;
  fx.seed = header.at("seed");
  std::size_t off = start;
  for (const auto& j : header.at("levels")) {
    FeatureExtractor<float>::Level l;
    l.in_channels = j.at("in");
    l.out_channels = j.at("out");
    const std::size_t nk = static_cast<std::size_t>(9) * l.in_channels * l.out_channels;
    l.kernel = detail::read_le_floats(bytes, off, nk);
    off += 4 * nk;
    l.bias = detail::read_le_floats(bytes, off, l.out_channels);
    off += 4 * static_cast<std::size_t>(l.out_channels);
    l.channel_weights = detail::read_le_floats(bytes, off, l.out_channels);
    off += 4 * static_cast<std::size_t>(l.out_channels);
    fx.levels.push_back(std::move(l));
  }
  if (off != bytes.size()) throw ParseError("trailing bytes", off);
  return fx;
}

inline void save_features(const FeatureExtractor<float>& fx, const std::filesystem::path& path) {
  const std::string bytes = encode_features(fx);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw Error("cannot write " + path.string());
}

inline FeatureExtractor<float> load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_features(bytes);
}

}  // namespace basinproj
