#pragma once

// Shared numeric containers, errors, RNG and a tiny worker pool.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace basinproj {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input shapes do not agree (image sizes, vector lengths, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a value was violated (out-of-range index, bad box, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf or a degenerate numerical situation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. Carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

template <typename T>
void require_finite(std::span<const T> values, const char* what) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Images and masks

/// H x W x 3 image, row-major with interleaved channels. Values are nominally
/// in [0,1]; intermediate results may leave that range, clamping happens at I/O.
template <typename T>
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, T fill = T(0))
      : height_(checked_dim(height)), width_(checked_dim(width)),
        data_(static_cast<std::size_t>(height) * width * kChannels, fill) {
    if (!std::isfinite(fill)) throw NumericError("Image: non-finite fill value");
  }
  Image(int height, int width, std::vector<T> data)
      : height_(checked_dim(height)), width_(checked_dim(width)), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(height_) * width_ * kChannels)
      throw ShapeError("Image: data length != H*W*3");
    detail::require_finite<T>(data_, "Image");
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return kChannels; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> mutable_data() noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  T at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  T& at(int y, int x, int c) { return data_[index(y, x, c)]; }

  bool same_shape(const Image& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }

  template <typename U>
  Image<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Image<U>(height_, width_, std::move(out));
  }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  static int checked_dim(int d) {
    if (d <= 0) throw ShapeError("Image: dimensions must be positive");
    return d;
  }
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

/// H x W single-channel weight map with values in [0,1].
template <typename T>
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, T fill)
      : Mask(height, width, std::vector<T>(static_cast<std::size_t>(std::max(height, 0)) *
                                               std::max(width, 0),
                                           fill)) {}
  Mask(int height, int width, std::vector<T> data) : height_(height), width_(width), data_(std::move(data)) {
    if (height <= 0 || width <= 0) throw ShapeError("Mask: dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width) throw ShapeError("Mask: data length != H*W");
    detail::require_finite<T>(data_, "Mask");
    for (const T v : data_) {
      if (v < T(0) || v > T(1)) throw DomainError("Mask: weights must lie in [0,1]");
    }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const T> data() const noexcept { return data_; }
  T at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  /// Sum of weights, accumulated in double.
  double mass() const noexcept {
    double s = 0.0;
    for (const T v : data_) s += v;
    return s;
  }
  bool has_foreground() const noexcept {
    return std::any_of(data_.begin(), data_.end(), [](T v) { return v == T(1); });
  }
  /// Throws unless at least one weight equals 1.
  const Mask& require_foreground() const {
    if (!has_foreground()) throw DomainError("Mask: no foreground (no weight equal to 1)");
    return *this;
  }

  template <typename U>
  Mask<U> cast() const {
    return Mask<U>(height_, width_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Mask& a, const Mask& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using ImageBuffer = Image<float>;
using MaskBuffer = Mask<float>;

/// Half-open pixel rectangle [y0, y0+h) x [x0, x0+w).
struct Box {
  int y0 = 0;
  int x0 = 0;
  int h = 0;
  int w = 0;

  double center_y() const noexcept { return y0 + 0.5 * (h - 1); }
  double center_x() const noexcept { return x0 + 0.5 * (w - 1); }
  bool contains(int y, int x) const noexcept { return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; }
  friend bool operator==(const Box&, const Box&) = default;
};

inline MaskBuffer make_box_mask(int height, int width, const Box& box, float fg = 1.0f, float bg = 0.3f) {
  if (height <= 0 || width <= 0) throw ShapeError("make_box_mask: dimensions must be positive");
  if (box.h <= 0 || box.w <= 0 || box.y0 < 0 || box.x0 < 0 || box.y0 + box.h > height || box.x0 + box.w > width)
    throw DomainError("make_box_mask: box out of bounds");
  if (!(bg >= 0.0f && bg <= fg && fg <= 1.0f)) throw DomainError("make_box_mask: need 0 <= bg <= fg <= 1");
  std::vector<float> data(static_cast<std::size_t>(height) * width, bg);
  for (int y = box.y0; y < box.y0 + box.h; ++y)
    for (int x = box.x0; x < box.x0 + box.w; ++x) data[static_cast<std::size_t>(y) * width + x] = fg;
  return MaskBuffer(height, width, std::move(data));
}

/// Bounding box of pixels whose weight equals the maximum weight of the mask.
template <typename T>
Box foreground_box(const Mask<T>& m) {
  T top = T(0);
  for (const T v : m.data()) top = std::max(top, v);
  if (top <= T(0)) throw DomainError("foreground_box: empty mask");
  int y_min = m.height(), y_max = -1, x_min = m.width(), x_max = -1;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m.at(y, x) == top) {
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
        x_min = std::min(x_min, x);
        x_max = std::max(x_max, x);
      }
  return Box{y_min, x_min, y_max - y_min + 1, x_max - x_min + 1};
}

// ---------------------------------------------------------------------------
// RNG

/// Seeded generator with splittable substreams. A substream depends only on
/// (seed, index), so candidate i draws the same values however much any other
/// candidate consumes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }

  Rng substream(std::uint64_t index) const { return Rng(mix(seed_ ^ mix(index + 0x632be59bd9b4e019ULL))); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  int integer(int lo, int hi_inclusive) { return std::uniform_int_distribution<int>(lo, hi_inclusive)(engine_); }

  std::vector<double> normal_vector(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal();
    return v;
  }

  static std::uint64_t mix(std::uint64_t x) noexcept {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Parallelism

/// Worker count from BASINPROJ_THREADS, falling back to the hardware count.
inline unsigned worker_count() {
  if (const char* env = std::getenv("BASINPROJ_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

namespace detail {
inline thread_local bool in_parallel_region = false;
}

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots;
/// the first exception thrown by any task is rethrown after all workers join.
/// Nested calls from inside a worker run serially on that worker.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned workers = worker_count()) {
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1 || detail::in_parallel_region) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto body = [&] {
    const bool outer = detail::in_parallel_region;
    detail::in_parallel_region = true;
    struct Reset {
      bool v;
      ~Reset() { detail::in_parallel_region = v; }
    } reset{outer};
    for (std::size_t i = next++; i < n; i = next++) {
      if (failed.load()) return;
      try {
        fn(i);
      } catch (...) {
        bool expected = false;
        if (failed.compare_exchange_strong(expected, true)) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned t = 1; t < workers; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace basinproj
