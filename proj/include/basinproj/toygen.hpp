#pragma once

// A small class-conditional MLP generator with a hand-written reverse pass.
//
//   x  = [z ; c]
//   h1 = tanh(W1 x + b1)
//   h2 = tanh(W2 h1 + b2)
//   y  = sigmoid(W3 h2 + b3)          (reshaped to H x W x 3)
//
// c is a continuous class vector, normally a column of the embedding matrix.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "basinproj/core.hpp"
#include "basinproj/serialize.hpp"

namespace basinproj {

struct GeneratorArch {
  int z_dim = 16;
  int embed_dim = 16;
  int class_count = 10;
  int hidden1 = 64;
  int hidden2 = 64;
  int height = 32;
  int width = 32;

  int input_dim() const noexcept { return z_dim + embed_dim; }
  int output_dim() const noexcept { return height * width * 3; }

  struct Layout {
    std::size_t w1, b1, w2, b2, w3, b3, total;
  };
  Layout layout() const noexcept {
    Layout l{};
    std::size_t off = 0;
    l.w1 = off, off += static_cast<std::size_t>(hidden1) * input_dim();
    l.b1 = off, off += hidden1;
    l.w2 = off, off += static_cast<std::size_t>(hidden2) * hidden1;
    l.b2 = off, off += hidden2;
    l.w3 = off, off += static_cast<std::size_t>(output_dim()) * hidden2;
    l.b3 = off, off += output_dim();
    l.total = off;
    return l;
  }
  std::size_t param_count() const noexcept { return layout().total; }
  std::size_t embedding_count() const noexcept { return static_cast<std::size_t>(embed_dim) * class_count; }

  friend bool operator==(const GeneratorArch&, const GeneratorArch&) = default;
};

/// Generator weights theta plus the class-embedding matrix (column k of the
/// embedding is stored contiguously at [k*embed_dim, (k+1)*embed_dim)).
template <typename T>
struct GeneratorModel {
  GeneratorArch arch;
  std::uint64_t seed = 0;
  std::vector<T> theta;
  std::vector<T> embedding;

  template <typename U>
  GeneratorModel<U> cast() const {
    return GeneratorModel<U>{arch, seed, std::vector<U>(theta.begin(), theta.end()),
                             std::vector<U>(embedding.begin(), embedding.end())};
  }

  void validate() const {
    if (theta.size() != arch.param_count()) throw ShapeError("GeneratorModel: theta size does not match arch");
    if (embedding.size() != arch.embedding_count())
      throw ShapeError("GeneratorModel: embedding size does not match arch");
  }
};

template <typename T>
struct LatentState {
  std::vector<T> z;
  std::vector<T> c;

  friend bool operator==(const LatentState&, const LatentState&) = default;
};

template <typename T>
struct GradientBundle {
  std::vector<T> d_z;
  std::vector<T> d_c;
  std::vector<T> d_theta;  // empty unless requested
};

/// Knobs for the seeded initialization. The output layer is drawn from the
/// same Gaussian, then smoothed and windowed so samples look like a centered
/// object on a flat background.
struct GeneratorInit {
  double weight_sigma = 0.4;
  double latent_gain = 4.0;   // multiplies the first-layer weights that read z
  double bias_sigma = 4.0;    // first-layer bias spread
  double output_gain = 0.012; // scale of the output-layer fields
  double embed_sigma = 0.4;
  double blur_sigma = 2.0;      // pixels
  double envelope_sigma = 6.0;  // pixels
  double background_lo = 0.15;  // background intensity range per channel
  double background_hi = 0.45;
  double object_gain = 1.5;     // logit lift of the fixed centered object
  double object_sigma = 5.0;    // pixels
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

/// Separable blur with edge clamping on a single H x W plane.
inline void blur_plane(std::vector<double>& plane, int h, int w, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * plane[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      plane[y * w + x] = s;
    }
}

template <typename T>
T sigmoid(T a) {
  return T(1) / (T(1) + std::exp(-a));
}

}  // namespace detail

inline GeneratorModel<float> make_generator(std::uint64_t seed, const GeneratorArch& arch = {},
                                            const GeneratorInit& init = {}) {
  GeneratorModel<float> m{arch, seed, std::vector<float>(arch.param_count(), 0.0f),
                          std::vector<float>(arch.embedding_count(), 0.0f)};
  const auto L = arch.layout();
  Rng rng(seed);
  Rng dense = rng.substream(1);
  const int in = arch.input_dim();
  for (std::size_t i = L.w1; i < L.b1; ++i) {
    const bool reads_z = static_cast<int>((i - L.w1) % in) < arch.z_dim;
    m.theta[i] = static_cast<float>((reads_z ? init.latent_gain : 1.0) * init.weight_sigma * dense.normal());
  }
  for (std::size_t i = L.b1; i < L.w2; ++i) m.theta[i] = static_cast<float>(init.bias_sigma * dense.normal());
  for (std::size_t i = L.w2; i < L.b2; ++i) m.theta[i] = static_cast<float>(init.weight_sigma * dense.normal());

  Rng emb = rng.substream(2);
  for (auto& v : m.embedding) v = static_cast<float>(init.embed_sigma * emb.normal());

  // Output layer: one smooth random field per (hidden unit, channel), unit
  // variance after blurring, windowed by a centered Gaussian envelope.
  const int H = arch.height, W = arch.width;
  const double cy = 0.5 * (H - 1), cx = 0.5 * (W - 1);
  std::vector<double> envelope(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      envelope[y * W + x] = std::exp(-0.5 * r2 / (init.envelope_sigma * init.envelope_sigma));
    }
  Rng out = rng.substream(3);
  std::vector<double> plane(envelope.size());
  for (int j = 0; j < arch.hidden2; ++j)
    for (int ch = 0; ch < 3; ++ch) {
      for (auto& v : plane) v = out.normal();
      detail::blur_plane(plane, H, W, init.blur_sigma);
      double mean = 0.0, sq = 0.0;
      for (const double v : plane) mean += v;
      mean /= plane.size();
      for (const double v : plane) sq += (v - mean) * (v - mean);
      const double sd = std::sqrt(sq / plane.size());
      for (std::size_t p = 0; p < plane.size(); ++p) {
        const double w3 = init.output_gain * envelope[p] * (plane[p] - mean) / sd;
        m.theta[L.w3 + (p * 3 + ch) * arch.hidden2 + j] = static_cast<float>(w3);
      }
    }
  Rng bg = rng.substream(4);
  for (int ch = 0; ch < 3; ++ch) {
    const double level = bg.uniform(init.background_lo, init.background_hi);
    const double logit = std::log(level / (1.0 - level));
    const double lift = init.object_gain * bg.uniform(0.6, 1.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double blob = std::exp(-0.5 * r2 / (init.object_sigma * init.object_sigma));
        m.theta[L.b3 + (static_cast<std::size_t>(y) * W + x) * 3 + ch] = static_cast<float>(logit + lift * blob);
      }
  }
  return m;
}

template <typename T>
std::vector<T> embed_class(const GeneratorModel<T>& model, int class_index) {
  if (class_index < 0 || class_index >= model.arch.class_count)
    throw DomainError("embed_class: class index out of range");
  const auto E = static_cast<std::size_t>(model.arch.embed_dim);
  const auto first = model.embedding.begin() + static_cast<std::ptrdiff_t>(class_index * E);
  return std::vector<T>(first, first + static_cast<std::ptrdiff_t>(E));
}

/// W * c_tilde for an arbitrary (e.g. soft one-hot) class weighting.
template <typename T>
std::vector<T> embed_mixture(const GeneratorModel<T>& model, std::span<const T> class_weights) {
  if (class_weights.size() != static_cast<std::size_t>(model.arch.class_count))
    throw ShapeError("embed_mixture: weight vector length != class count");
  const auto E = static_cast<std::size_t>(model.arch.embed_dim);
  std::vector<T> c(E, T(0));
  for (std::size_t k = 0; k < class_weights.size(); ++k)
    for (std::size_t e = 0; e < E; ++e) c[e] += class_weights[k] * model.embedding[k * E + e];
  return c;
}

/// Coordinate-wise projection of z onto [-c_max, c_max]; c is untouched.
template <typename T>
LatentState<T> clamp_latent(LatentState<T> state, T c_max = T(2)) {
  for (auto& v : state.z) v = std::clamp(v, -c_max, c_max);
  return state;
}

template <typename T>
void clamp_in_place(std::span<T> z, T c_max = T(2)) {
  for (auto& v : z) v = std::clamp(v, -c_max, c_max);
}

/// Intermediate activations of one forward pass.
template <typename T>
struct GeneratorTape {
  std::vector<T> x, h1, h2;
  Image<T> image;
};

namespace detail {

template <typename T>
void check_state(const GeneratorModel<T>& model, const LatentState<T>& s) {
  if (s.z.size() != static_cast<std::size_t>(model.arch.z_dim) ||
      s.c.size() != static_cast<std::size_t>(model.arch.embed_dim))
    throw ShapeError("generator: latent dimensions do not match arch");
}

// out[r] = b[r] + sum_k W[r, k] in[k]; W row-major rows x cols.
template <typename T>
void dense(const T* W, const T* b, const T* in, int rows, int cols, T* out) {
  for (int r = 0; r < rows; ++r) {
    const T* wr = W + static_cast<std::size_t>(r) * cols;
    T s = b[r];
    for (int k = 0; k < cols; ++k) s += wr[k] * in[k];
    out[r] = s;
  }
}

}  // namespace detail

template <typename T>
GeneratorTape<T> forward_tape(const GeneratorModel<T>& model, const LatentState<T>& state) {
  detail::check_state(model, state);
  const auto& A = model.arch;
  const auto L = A.layout();
  const T* th = model.theta.data();
  GeneratorTape<T> tape;
  tape.x.reserve(A.input_dim());
  tape.x.insert(tape.x.end(), state.z.begin(), state.z.end());
  tape.x.insert(tape.x.end(), state.c.begin(), state.c.end());
  tape.h1.resize(A.hidden1);
  tape.h2.resize(A.hidden2);
  detail::dense(th + L.w1, th + L.b1, tape.x.data(), A.hidden1, A.input_dim(), tape.h1.data());
  for (auto& v : tape.h1) v = std::tanh(v);
  detail::dense(th + L.w2, th + L.b2, tape.h1.data(), A.hidden2, A.hidden1, tape.h2.data());
  for (auto& v : tape.h2) v = std::tanh(v);
  std::vector<T> out(A.output_dim());
  detail::dense(th + L.w3, th + L.b3, tape.h2.data(), A.output_dim(), A.hidden2, out.data());
  for (auto& v : out) v = detail::sigmoid(v);
  tape.image = Image<T>(A.height, A.width, std::move(out));
  return tape;
}

template <typename T>
Image<T> forward(const GeneratorModel<T>& model, const LatentState<T>& state) {
  return forward_tape(model, state).image;
}

/// Reverse pass for a recorded forward. `upstream` is dLoss/dImage.
template <typename T>
GradientBundle<T> backward(const GeneratorModel<T>& model, const GeneratorTape<T>& tape, const Image<T>& upstream,
                           bool want_theta = false) {
  const auto& A = model.arch;
  if (upstream.height() != A.height || upstream.width() != A.width)
    throw ShapeError("generator backward: upstream shape != output shape");
  const auto L = A.layout();
  const T* th = model.theta.data();
  const int n_out = A.output_dim(), n_h2 = A.hidden2, n_h1 = A.hidden1, n_in = A.input_dim();

  GradientBundle<T> g;
  if (want_theta) g.d_theta.assign(L.total, T(0));

  std::vector<T> g_a3(n_out);
  const auto up = upstream.data();
  const auto img = tape.image.data();
  for (int p = 0; p < n_out; ++p) g_a3[p] = up[p] * img[p] * (T(1) - img[p]);

  std::vector<T> g_h2(n_h2, T(0));
  for (int p = 0; p < n_out; ++p) {
    const T gp = g_a3[p];
    if (gp == T(0)) continue;
    const T* wr = th + L.w3 + static_cast<std::size_t>(p) * n_h2;
    for (int j = 0; j < n_h2; ++j) g_h2[j] += wr[j] * gp;
  }
  if (want_theta) {
    for (int p = 0; p < n_out; ++p) {
      T* dw = g.d_theta.data() + L.w3 + static_cast<std::size_t>(p) * n_h2;
      for (int j = 0; j < n_h2; ++j) dw[j] = g_a3[p] * tape.h2[j];
      g.d_theta[L.b3 + p] = g_a3[p];
    }
  }

  std::vector<T> g_a2(n_h2);
  for (int j = 0; j < n_h2; ++j) g_a2[j] = g_h2[j] * (T(1) - tape.h2[j] * tape.h2[j]);
  std::vector<T> g_h1(n_h1, T(0));
  for (int j = 0; j < n_h2; ++j) {
    const T* wr = th + L.w2 + static_cast<std::size_t>(j) * n_h1;
    for (int k = 0; k < n_h1; ++k) g_h1[k] += wr[k] * g_a2[j];
  }
  if (want_theta) {
    for (int j = 0; j < n_h2; ++j) {
      T* dw = g.d_theta.data() + L.w2 + static_cast<std::size_t>(j) * n_h1;
      for (int k = 0; k < n_h1; ++k) dw[k] = g_a2[j] * tape.h1[k];
      g.d_theta[L.b2 + j] = g_a2[j];
    }
  }

  std::vector<T> g_a1(n_h1);
  for (int k = 0; k < n_h1; ++k) g_a1[k] = g_h1[k] * (T(1) - tape.h1[k] * tape.h1[k]);
  std::vector<T> g_x(n_in, T(0));
  for (int k = 0; k < n_h1; ++k) {
    const T* wr = th + L.w1 + static_cast<std::size_t>(k) * n_in;
    for (int i = 0; i < n_in; ++i) g_x[i] += wr[i] * g_a1[k];
  }
  if (want_theta) {
    for (int k = 0; k < n_h1; ++k) {
      T* dw = g.d_theta.data() + L.w1 + static_cast<std::size_t>(k) * n_in;
      for (int i = 0; i < n_in; ++i) dw[i] = g_a1[k] * tape.x[i];
      g.d_theta[L.b1 + k] = g_a1[k];
    }
  }
  g.d_z.assign(g_x.begin(), g_x.begin() + A.z_dim);
  g.d_c.assign(g_x.begin() + A.z_dim, g_x.end());
  return g;
}

template <typename T>
GradientBundle<T> backward(const GeneratorModel<T>& model, const LatentState<T>& state, const Image<T>& upstream,
                           bool want_theta = false) {
  return backward(model, forward_tape(model, state), upstream, want_theta);
}

// ---------------------------------------------------------------------------
// Serialization: one JSON header line, then little-endian float32 theta
// followed by the embedding matrix.

inline nlohmann::json arch_to_json(const GeneratorArch& a) {
  return {{"z_dim", a.z_dim},     {"embed_dim", a.embed_dim}, {"class_count", a.class_count},
          {"hidden1", a.hidden1}, {"hidden2", a.hidden2},     {"height", a.height},
          {"width", a.width}};
}

inline GeneratorArch arch_from_json(const nlohmann::json& j) {
  GeneratorArch a;
  a.z_dim = j.at("z_dim");
  a.embed_dim = j.at("embed_dim");
  a.class_count = j.at("class_count");
  a.hidden1 = j.at("hidden1");
  a.hidden2 = j.at("hidden2");
  a.height = j.at("height");
  a.width = j.at("width");
  return a;
}


inline std::string encode_generator(const GeneratorModel<float>& m) {
  m.validate();
  nlohmann::json header = {{"format", "basinproj-generator"},
                           {"version", 1},
                           {"arch", arch_to_json(m.arch)},
                           {"seed", m.seed},
                           {"param_count", m.theta.size()},
                           {"embedding_count", m.embedding.size()}};
  std::string out = header.dump() + "\n";
  detail::append_le_floats(out, m.theta);
  detail::append_le_floats(out, m.embedding);
  return out;
}

inline GeneratorModel<float> decode_generator(std::span<const unsigned char> bytes) {
  const auto [header, offset] = detail::read_json_header(bytes);
  if (header.value("format", "") != "basinproj-generator") throw ParseError("not a generator file", 0);
  GeneratorModel<float> m;
  m.arch = arch_from_json(header.at("arch"));
  m.seed = header.at("seed");
  const std::size_t n_theta = header.at("param_count");
  const std::size_t n_embed = header.at("embedding_count");
  if (n_theta != m.arch.param_count() || n_embed != m.arch.embedding_count())
    throw ParseError("parameter counts do not match arch", 0);
  m.theta = detail::read_le_floats(bytes, offset, n_theta);
  m.embedding = detail::read_le_floats(bytes, offset + 4 * n_theta, n_embed);
  if (bytes.size() != offset + 4 * (n_theta + n_embed)) throw ParseError("trailing bytes", offset + 4 * (n_theta + n_embed));
  detail::require_finite<float>(m.theta, "generator theta");
  detail::require_finite<float>(m.embedding, "generator embedding");
  return m;
}

inline void save_generator(const GeneratorModel<float>& m, const std::filesystem::path& path) {
  const std::string bytes = encode_generator(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw Error("cannot write " + path.string());
}

inline GeneratorModel<float> load_generator(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_generator(bytes);
}

}  // namespace basinproj
