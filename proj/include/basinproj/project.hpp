#pragma once

// Transformation-aware projection of a target image into the generator.
//
// Stage 1 searches the transform phi with CMA-ES. Every sampled phi is scored
// by briefly fitting (z, c) with ADAM against the transformed target
// (T_phi(y), T_phi(m)) and then measuring the loss in the original frame,
// L_mask(T_phi^-1(G(z,c)), y, m). Stage 2 fixes phi* and runs BasinCMA on z:
// each CMA sample is refined with ADAM, and the refined point with its loss is
// handed back to CMA, so the search distribution ranks basins instead of raw
// points.
//
// Gradient steps always use the transformed-target form of the loss so that
// no gradient flows through the sampler applied to the generated image; every
// loss that ranks candidates or is reported uses the original frame.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "basinproj/adam.hpp"
#include "basinproj/cma.hpp"
#include "basinproj/core.hpp"
#include "basinproj/losses.hpp"
#include "basinproj/toygen.hpp"
#include "basinproj/transforms.hpp"

namespace basinproj {

// ---------------------------------------------------------------------------
// Model statistics and initialization

/// Typical object placement of generated images, in pixels.
struct ModelStats {
  double center_y = 0.0;
  double center_x = 0.0;
  double size_h = 0.0;  // modal height
  double size_w = 0.0;  // modal width
  int valid_detections = 0;
  int samples = 0;
};

struct DetectionOptions {
  double min_threshold = 0.05;  // luminance units
  double noise_multiplier = 3.0;
  int min_pixels = 4;
};

namespace detail {

inline double luminance(const ImageBuffer& img, int y, int x) {
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

}  // namespace detail

/// Bounding box of pixels whose luminance departs from `background` by more
/// than `threshold`; nullopt if fewer than min_pixels qualify.
inline std::optional<Box> detect_object(const ImageBuffer& img, double background, double threshold,
                                        int min_pixels = 4) {
  int y0 = img.height(), y1 = -1, x0 = img.width(), x1 = -1, count = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (std::abs(detail::luminance(img, y, x) - background) > threshold) {
        ++count;
        y0 = std::min(y0, y), y1 = std::max(y1, y);
        x0 = std::min(x0, x), x1 = std::max(x1, x);
      }
  if (count < min_pixels) return std::nullopt;
  return Box{y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

/// Samples n images from z ~ N(0, I) with random classes and summarizes the
/// detected object boxes: mean center and modal height/width. The background
/// level is the mean luminance of the one-pixel border over all samples; the
/// detection threshold is max(min_threshold, noise_multiplier * border std).
inline ModelStats compute_model_stats(const GeneratorModel<float>& model, const Rng& rng, int n_samples,
                                      const DetectionOptions& opt = {}) {
  if (n_samples < 100) throw DomainError("compute_model_stats: need at least 100 samples");
  const auto& A = model.arch;
  std::vector<ImageBuffer> images(n_samples);
  parallel_for(static_cast<std::size_t>(n_samples), [&](std::size_t i) {
    Rng r = rng.substream(i);
    LatentState<float> s;
    s.z.resize(A.z_dim);
    for (auto& v : s.z) v = static_cast<float>(r.normal());
    s.c = embed_class(model, r.integer(0, A.class_count - 1));
    images[i] = forward(model, s);
  });

  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& img : images)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) {
        if (y != 0 && x != 0 && y != img.height() - 1 && x != img.width() - 1) continue;
        const double l = detail::luminance(img, y, x);
        sum += l, sq += l * l, ++n;
      }
  const double background = sum / n;
  const double noise = std::sqrt(std::max(0.0, sq / n - background * background));
  const double threshold = std::max(opt.min_threshold, opt.noise_multiplier * noise);

  ModelStats st;
  st.samples = n_samples;
  std::map<int, int> heights, widths;
  double cy = 0.0, cx = 0.0;
  for (const auto& img : images) {
    const auto box = detect_object(img, background, threshold, opt.min_pixels);
    if (!box) continue;
    ++st.valid_detections;
    cy += box->center_y();
    cx += box->center_x();
    ++heights[box->h];
    ++widths[box->w];
  }
  if (st.valid_detections * 10 < n_samples)
    throw NumericError("compute_model_stats: fewer than 10% of samples produced a detection");
  st.center_y = cy / st.valid_detections;
  st.center_x = cx / st.valid_detections;
  auto mode = [](const std::map<int, int>& hist) {
    return std::max_element(hist.begin(), hist.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
  };
  st.size_h = mode(heights);
  st.size_w = mode(widths);
  return st;
}

/// Initial transform from the mask box and the model statistics:
///   s = max(h_m / h_bar, w_m / w_bar),  t = (center_bar - center_m) / 2,
/// with t computed in pixels and then normalized by half the image size.
/// Brightness starts at its additive identity.
inline TransformParams init_transform(const MaskBuffer& mask, const ModelStats& stats) {
  const Box box = foreground_box(mask);
  if (!(stats.size_h > 0.0) || !(stats.size_w > 0.0)) throw DomainError("init_transform: degenerate model stats");
  const double s = std::max(box.h / stats.size_h, box.w / stats.size_w);
  const double ty_px = (stats.center_y - box.center_y()) / 2.0;
  const double tx_px = (stats.center_x - box.center_x()) / 2.0;
  TransformParams phi;
  phi.spatial = {s, s, tx_px / (0.5 * mask.width()), ty_px / (0.5 * mask.height())};
  phi.color.gamma = 0.0;
  return phi;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Optimizer { adam, cma, cma_adam, basincma };

struct Variant {
  Optimizer optimizer = Optimizer::basincma;
  bool with_transform = false;
  friend bool operator==(const Variant&, const Variant&) = default;
};

inline std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::adam: return "adam";
    case Optimizer::cma: return "cma";
    case Optimizer::cma_adam: return "cma_adam";
    case Optimizer::basincma: return "basincma";
  }
  return "?";
}

inline std::string to_string(const Variant& v) {
  return to_string(v.optimizer) + (v.with_transform ? "+transform" : "");
}

/// Accepts "adam", "cma", "cma_adam", "basincma", each optionally suffixed
/// with "+transform".
inline Variant parse_variant(std::string name) {
  Variant v;
  const std::string suffix = "+transform";
  if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    v.with_transform = true;
    name.resize(name.size() - suffix.size());
  }
  if (name == "adam") v.optimizer = Optimizer::adam;
  else if (name == "cma") v.optimizer = Optimizer::cma;
  else if (name == "cma_adam") v.optimizer = Optimizer::cma_adam;
  else if (name == "basincma") v.optimizer = Optimizer::basincma;
  else throw DomainError("unknown variant: " + name);
  return v;
}

/// Which transform coordinates stage 1 searches; the rest stay at phi0.
struct TransformSearchSpace {
  bool scale = true;
  bool translation = true;
  bool brightness = true;

  std::vector<int> active() const {
    std::vector<int> a;
    if (scale) a.insert(a.end(), {0, 1});
    if (translation) a.insert(a.end(), {2, 3});
    if (brightness) a.push_back(4);
    return a;
  }
};

struct ProjectionConfig {
  // Stage 1 (transform search).
  int n_transform_iters = 30;
  int m_inner_grad = 30;
  double transform_cov = 0.1;
  TransformSearchSpace search;
  // Stage 2 (BasinCMA on z).
  int p_latent_iters = 30;
  int q_inner_grad = 30;
  int final_grad_steps = 300;
  // Baseline schedules.
  int adam_steps = 500;
  int cma_iters = 300;
  int cma_adam_cma_iters = 100;
  int cma_adam_grad_steps = 500;

  int population = 18;
  double beta = 10.0;
  double c_max = 2.0;
  LearningRates lrs = default_learning_rates();
  double warm_restart_variance = 0.5;

  std::optional<ModelStats> stats;    // computed on demand when a transform is searched
  std::optional<int> class_index;     // otherwise chosen by exhaustive evaluation
  std::optional<TransformParams> fixed_transform;  // skips stage 1 when set

  void validate() const {
    for (int v : {n_transform_iters, m_inner_grad, p_latent_iters, q_inner_grad, final_grad_steps, adam_steps,
                  cma_iters, cma_adam_cma_iters, cma_adam_grad_steps})
      if (v < 1) throw DomainError("ProjectionConfig: iteration counts must be >= 1");
    if (population < 2) throw DomainError("ProjectionConfig: population must be >= 2");
    if (!(c_max > 0.0)) throw DomainError("ProjectionConfig: c_max must be positive");
    if (!(beta >= 0.0)) throw DomainError("ProjectionConfig: beta must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Results

struct CandidateTrace {
  std::vector<double> losses;  // per gradient step, optimization frame
  double final_loss = std::numeric_limits<double>::infinity();  // original frame
  bool failed = false;
};

struct StageTiming {
  std::string stage;
  double seconds = 0.0;
};

struct ProjectionResult {
  Variant variant;
  LatentState<float> best;
  TransformParams phi;
  TransformParams phi_init;
  int class_index = -1;
  LossReport final_report;
  std::vector<CandidateTrace> candidates;  // last stage that produced the answer
  std::vector<double> stage1_generation_best;
  std::vector<double> stage2_generation_best;
  std::uint64_t forward_calls = 0;
  std::vector<StageTiming> timings;

  double best_loss() const { return final_report.total; }
};

/// Generator forward-call instrumentation. Every forward pass made by the
/// projection code goes through exactly one increment.
class ForwardCounter {
 public:
  void add(std::uint64_t k = 1) noexcept { n_.fetch_add(k, std::memory_order_relaxed); }
  std::uint64_t value() const noexcept { return n_.load(); }
  void reset() noexcept { n_ = 0; }

 private:
  std::atomic<std::uint64_t> n_{0};
};

// ---------------------------------------------------------------------------
// Inner loops

struct ProjectionContext {
  const GeneratorModel<float>& model;
  const ProjectionConfig& cfg;
  ForwardCounter& counter;
};

/// L_mask(T_phi^-1(G(z,c)), y, m).
inline LossReport evaluate_original_frame(const ProjectionContext& ctx, const MaskedLoss<float>& original,
                                          const TransformParams& phi, const LatentState<float>& state) {
  ctx.counter.add();
  return original.evaluate(inverse_transform(forward(ctx.model, state), phi));
}

struct RefineResult {
  LatentState<float> state;
  CandidateTrace trace;
};

/// `steps` ADAM updates on (z, c) against `optimize` (clamping z after every
/// update), then one original-frame evaluation. Fresh moment estimates per
/// call. A non-finite gradient marks the candidate failed (+inf loss).
inline RefineResult refine_latent(const ProjectionContext& ctx, const MaskedLoss<float>& optimize,
                                  const MaskedLoss<float>& original, const TransformParams& phi,
                                  LatentState<float> state, int steps, bool keep_trace) {
  const auto c_max = static_cast<float>(ctx.cfg.c_max);
  AdamState adam_z(state.z.size(), ctx.cfg.lrs.z);
  AdamState adam_c(state.c.size(), ctx.cfg.lrs.c);
  RefineResult out;
  if (keep_trace) out.trace.losses.reserve(steps);
  try {
    for (int k = 0; k < steps; ++k) {
      ctx.counter.add();
      const auto tape = forward_tape(ctx.model, state);
      const auto lg = optimize.evaluate_with_gradient(tape.image);
      if (keep_trace) out.trace.losses.push_back(lg.report.total);
      const auto g = backward(ctx.model, tape, lg.gradient);
      adam_step(adam_z, state.z, g.d_z);
      clamp_in_place<float>(state.z, c_max);
      adam_step(adam_c, state.c, g.d_c);
    }
    out.trace.final_loss = evaluate_original_frame(ctx, original, phi, state).total;
    if (!std::isfinite(out.trace.final_loss)) throw NumericError("non-finite loss");
  } catch (const NumericError&) {
    out.trace.failed = true;
    out.trace.final_loss = std::numeric_limits<double>::infinity();
  }
  out.state = std::move(state);
  return out;
}

/// z ~ N(mean(prev), variance * I), clamped to the box. With no previous
/// latents the draw is zero-centered with unit variance.
inline std::vector<std::vector<float>> warm_restart_latents(const std::vector<std::vector<float>>& prev, int count,
                                                            int z_dim, double variance, const Rng& rng,
                                                            double c_max = 2.0) {
  std::vector<double> mean(z_dim, 0.0);
  double sd = 1.0;
  if (!prev.empty()) {
    for (const auto& z : prev) {
      if (static_cast<int>(z.size()) != z_dim) throw ShapeError("warm_restart_latents: latent size mismatch");
      for (int k = 0; k < z_dim; ++k) mean[k] += z[k];
    }
    for (auto& v : mean) v /= static_cast<double>(prev.size());
    sd = std::sqrt(variance);
  }
  std::vector<std::vector<float>> out(count, std::vector<float>(z_dim));
  for (int i = 0; i < count; ++i) {
    Rng r = rng.substream(static_cast<std::uint64_t>(i));
    for (int k = 0; k < z_dim; ++k)
      out[i][k] = static_cast<float>(std::clamp(mean[k] + sd * r.normal(), -c_max, c_max));
  }
  return out;
}

/// Class vector c0: the configured class, otherwise the class whose embedding
/// at z = 0 has the lowest basic (unmasked) loss against the target.
inline std::pair<int, std::vector<float>> init_class(const ProjectionContext& ctx, const ImageBuffer& target) {
  if (ctx.cfg.class_index) return {*ctx.cfg.class_index, embed_class(ctx.model, *ctx.cfg.class_index)};
  const MaskBuffer ones(target.height(), target.width(), 1.0f);
  const MaskedLoss<float> basic(target, ones, ctx.cfg.beta);
  int best = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (int k = 0; k < ctx.model.arch.class_count; ++k) {
    LatentState<float> s{std::vector<float>(ctx.model.arch.z_dim, 0.0f), embed_class(ctx.model, k)};
    ctx.counter.add();
    const double l = basic.evaluate(forward(ctx.model, s)).total;
    if (l < best_loss) best_loss = l, best = k;
  }
  return {best, embed_class(ctx.model, best)};
}

// ---------------------------------------------------------------------------
// Stage 1: transform search

struct Stage1Result {
  TransformParams phi;
  TransformParams phi_init;
  std::vector<double> generation_best;
  std::vector<double> generation_mean_loss_at_mean;
};

namespace detail {

inline TransformParams sanitize(TransformParams p) {
  p.spatial.sx = std::max(p.spatial.sx, 10.0 * kMinScale);
  p.spatial.sy = std::max(p.spatial.sy, 10.0 * kMinScale);
  return p;
}

inline TransformParams expand(const std::array<double, 5>& base, const std::vector<int>& active,
                              const Eigen::VectorXd& x) {
  std::array<double, 5> full = base;
  for (std::size_t k = 0; k < active.size(); ++k) full[active[k]] = x[static_cast<Eigen::Index>(k)];
  return sanitize(TransformParams::from_array(full));
}

}  // namespace detail

inline Stage1Result stage1_search_transform(const ProjectionContext& ctx, const ImageBuffer& y, const MaskBuffer& m,
                                            const TransformParams& phi0, const std::vector<float>& c0,
                                            const Rng& rng) {
  const auto& cfg = ctx.cfg;
  const int N = cfg.population;
  const int Z = ctx.model.arch.z_dim;
  const auto active = cfg.search.active();
  const auto base = phi0.to_array();
  const MaskedLoss<float> original(y, m, cfg.beta);

  Stage1Result res;
  res.phi_init = phi0;
  if (active.empty()) {
    res.phi = phi0;
    return res;
  }
  Eigen::VectorXd mean0(static_cast<Eigen::Index>(active.size()));
  for (std::size_t k = 0; k < active.size(); ++k) mean0[static_cast<Eigen::Index>(k)] = base[active[k]];
  CmaState cma = cma_init(mean0, cfg.transform_cov, N);
  const Rng cma_rng = rng.substream(1);
  const Rng z_rng = rng.substream(2);

  std::vector<std::vector<float>> prev_z;
  for (int g = 0; g < cfg.n_transform_iters; ++g) {
    const auto xs = cma_sample(cma, cma_rng);
    const auto z0 = warm_restart_latents(prev_z, N, Z, cfg.warm_restart_variance, z_rng.substream(g), cfg.c_max);
    std::vector<RefineResult> runs(N);
    parallel_for(static_cast<std::size_t>(N), [&](std::size_t i) {
      const TransformParams phi = detail::expand(base, active, xs[i]);
      const auto tt = transform_target(y, m, phi);
      LatentState<float> start{z0[i], c0};
      std::optional<MaskedLoss<float>> optimize;
      try {
        optimize.emplace(tt.image, tt.mask, cfg.beta);
      } catch (const DomainError&) {  // transformed mask left the frame
        runs[i].state = std::move(start);
        runs[i].trace.failed = true;
        return;
      }
      runs[i] = refine_latent(ctx, *optimize, original, phi, std::move(start), cfg.m_inner_grad, false);
    });
    std::vector<double> losses(N);
    prev_z.clear();
    for (int i = 0; i < N; ++i) {
      losses[i] = runs[i].trace.final_loss;
      if (!runs[i].trace.failed) prev_z.push_back(runs[i].state.z);
    }
    res.generation_best.push_back(*std::min_element(losses.begin(), losses.end()));
    cma = cma_update(std::move(cma), xs, losses);
  }
  res.phi = detail::expand(base, active, cma.mean);
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2 and the baselines. All share this result shape.

struct LatentSearchResult {
  LatentState<float> best;
  std::vector<CandidateTrace> candidates;
  std::vector<double> generation_best;
};

namespace detail {

inline LatentSearchResult finish(std::vector<RefineResult> runs, std::vector<double> generation_best) {
  LatentSearchResult out;
  out.generation_best = std::move(generation_best);
  std::size_t best = 0;
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (runs[i].trace.final_loss < runs[best].trace.final_loss) best = i;
  if (!std::isfinite(runs[best].trace.final_loss)) throw NumericError("projection: every candidate failed");
  out.best = runs[best].state;
  for (auto& r : runs) out.candidates.push_back(std::move(r.trace));
  return out;
}

inline std::vector<RefineResult> refine_all(const ProjectionContext& ctx, const MaskedLoss<float>& optimize,
                                            const MaskedLoss<float>& original, const TransformParams& phi,
                                            const std::vector<std::vector<float>>& zs, const std::vector<float>& c0,
                                            int steps, bool keep_trace) {
  std::vector<RefineResult> runs(zs.size());
  parallel_for(zs.size(), [&](std::size_t i) {
    runs[i] = refine_latent(ctx, optimize, original, phi, LatentState<float>{zs[i], c0}, steps, keep_trace);
  });
  return runs;
}

inline std::vector<std::vector<float>> clamp_samples(const std::vector<Eigen::VectorXd>& xs, double c_max) {
  std::vector<std::vector<float>> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    std::vector<float> z(static_cast<std::size_t>(x.size()));
    for (Eigen::Index k = 0; k < x.size(); ++k) z[k] = static_cast<float>(std::clamp(x[k], -c_max, c_max));
    out.push_back(std::move(z));
  }
  return out;
}

}  // namespace detail

/// BasinCMA over z with phi fixed: p generations of (sample, q ADAM steps,
/// CMA update from the refined points and their losses), then one last generation refined for
/// final_grad_steps; the best of that generation is returned.
inline LatentSearchResult stage2_basincma(const ProjectionContext& ctx, const ImageBuffer& y, const MaskBuffer& m,
                                          const TransformParams& phi, const std::vector<float>& c0, const Rng& rng) {
  const auto& cfg = ctx.cfg;
  const int Z = ctx.model.arch.z_dim;
  const auto tt = transform_target(y, m, phi);
  const MaskedLoss<float> optimize(tt.image, tt.mask, cfg.beta);
  const MaskedLoss<float> original(y, m, cfg.beta);
  CmaState cma = cma_init(Eigen::VectorXd::Zero(Z), 1.0, cfg.population);
  std::vector<double> gen_best;
  for (int g = 0; g < cfg.p_latent_iters; ++g) {
    const auto xs = cma_sample(cma, rng);
    const auto runs = detail::refine_all(ctx, optimize, original, phi, detail::clamp_samples(xs, cfg.c_max), c0,
                                         cfg.q_inner_grad, false);
    std::vector<double> losses(runs.size());
    for (std::size_t i = 0; i < runs.size(); ++i) losses[i] = runs[i].trace.final_loss;
    gen_best.push_back(*std::min_element(losses.begin(), losses.end()));
    std::vector<Eigen::VectorXd> refined;
    for (const auto& r : runs) refined.push_back(Eigen::Map<const Eigen::VectorXf>(r.state.z.data(), Z).cast<double>());
    cma = cma_update(std::move(cma), refined, losses);
  }
  const auto xs = cma_sample(cma, rng);
  auto runs = detail::refine_all(ctx, optimize, original, phi, detail::clamp_samples(xs, cfg.c_max), c0,
                                 cfg.final_grad_steps, true);
  return detail::finish(std::move(runs), std::move(gen_best));
}

/// Multi-seed ADAM: z ~ N(0, I) per seed, independent moment estimates.
inline LatentSearchResult search_adam(const ProjectionContext& ctx, const ImageBuffer& y, const MaskBuffer& m,
                                      const TransformParams& phi, const std::vector<float>& c0, const Rng& rng,
                                      int steps) {
  const auto& cfg = ctx.cfg;
  const auto tt = transform_target(y, m, phi);
  const MaskedLoss<float> optimize(tt.image, tt.mask, cfg.beta);
  const MaskedLoss<float> original(y, m, cfg.beta);
  const auto zs = warm_restart_latents({}, cfg.population, ctx.model.arch.z_dim, 1.0, rng, cfg.c_max);
  return detail::finish(detail::refine_all(ctx, optimize, original, phi, zs, c0, steps, true), {});
}

/// Plain CMA-ES on z, scored in the original frame; returns the best point
/// ever evaluated.
inline LatentSearchResult search_cma(const ProjectionContext& ctx, const ImageBuffer& y, const MaskBuffer& m,
                                     const TransformParams& phi, const std::vector<float>& c0, const Rng& rng,
                                     int generations, CmaState* final_state = nullptr) {
  const auto& cfg = ctx.cfg;
  const int Z = ctx.model.arch.z_dim;
  const MaskedLoss<float> original(y, m, cfg.beta);
  CmaState cma = cma_init(Eigen::VectorXd::Zero(Z), 1.0, cfg.population);
  LatentSearchResult out;
  CandidateTrace best_trace;
  for (int g = 0; g < generations; ++g) {
    const auto xs = cma_sample(cma, rng);
    const auto zs = detail::clamp_samples(xs, cfg.c_max);
    std::vector<double> losses(xs.size());
    parallel_for(xs.size(), [&](std::size_t i) {
      try {
        losses[i] = evaluate_original_frame(ctx, original, phi, LatentState<float>{zs[i], c0}).total;
      } catch (const NumericError&) {
        losses[i] = std::numeric_limits<double>::infinity();
      }
    });
    const auto it = std::min_element(losses.begin(), losses.end());
    out.generation_best.push_back(*it);
    if (*it < best_trace.final_loss) {
      best_trace.final_loss = *it;
      out.best = LatentState<float>{zs[static_cast<std::size_t>(it - losses.begin())], c0};
    }
    best_trace.losses.push_back(best_trace.final_loss);
    cma = cma_update(std::move(cma), xs, losses);
  }
  if (!std::isfinite(best_trace.final_loss)) throw NumericError("projection: every candidate failed");
  out.candidates.push_back(std::move(best_trace));
  if (final_state) *final_state = std::move(cma);
  return out;
}

/// CMA-ES for a number of generations, then ADAM from one final CMA draw per seed.
inline LatentSearchResult search_cma_adam(const ProjectionContext& ctx, const ImageBuffer& y, const MaskBuffer& m,
                                          const TransformParams& phi, const std::vector<float>& c0, const Rng& rng) {
  const auto& cfg = ctx.cfg;
  CmaState cma;
  auto head = search_cma(ctx, y, m, phi, c0, rng.substream(1), cfg.cma_adam_cma_iters, &cma);
  const auto tt = transform_target(y, m, phi);
  const MaskedLoss<float> optimize(tt.image, tt.mask, cfg.beta);
  const MaskedLoss<float> original(y, m, cfg.beta);
  const auto xs = cma_sample(cma, rng.substream(2));
  auto tail = detail::finish(detail::refine_all(ctx, optimize, original, phi, detail::clamp_samples(xs, cfg.c_max),
                                                c0, cfg.cma_adam_grad_steps, true),
                             std::move(head.generation_best));
  return tail;
}

// ---------------------------------------------------------------------------
// Budget accounting

/// Generator forward calls made by project() for this configuration.
inline std::uint64_t expected_forward_calls(const ProjectionConfig& cfg, const Variant& v, int class_count) {
  const std::uint64_t N = cfg.population;
  std::uint64_t calls = cfg.class_index ? 0 : static_cast<std::uint64_t>(class_count);
  if (v.with_transform && !cfg.fixed_transform && !cfg.search.active().empty())
    calls += N * cfg.n_transform_iters * (cfg.m_inner_grad + 1ULL);
  switch (v.optimizer) {
    case Optimizer::adam: calls += N * (cfg.adam_steps + 1ULL); break;
    case Optimizer::cma: calls += N * cfg.cma_iters; break;
    case Optimizer::cma_adam: calls += N * cfg.cma_adam_cma_iters + N * (cfg.cma_adam_grad_steps + 1ULL); break;
    case Optimizer::basincma:
      calls += N * cfg.p_latent_iters * (cfg.q_inner_grad + 1ULL) + N * (cfg.final_grad_steps + 1ULL);
      break;
  }
  return calls + 1;  // final report
}

/// Rescales the optimizer-specific schedule so that the variant spends
/// approximately `budget` forward calls (stage 1 and class init unchanged).
inline ProjectionConfig equalize_budget(ProjectionConfig cfg, const Variant& v, std::uint64_t budget,
                                        int class_count) {
  ProjectionConfig probe = cfg;
  auto fixed_part = [&](ProjectionConfig c) {
    // Calls that do not depend on the optimizer schedule.
    c.adam_steps = 1;
    const Variant adam{Optimizer::adam, v.with_transform};
    return expected_forward_calls(c, adam, class_count) - static_cast<std::uint64_t>(c.population) * 2ULL;
  };
  const double N = cfg.population;
  const double avail = static_cast<double>(budget) - static_cast<double>(fixed_part(probe));
  if (avail < 4 * N) throw DomainError("equalize_budget: budget too small for this variant");
  switch (v.optimizer) {
    case Optimizer::adam: cfg.adam_steps = std::max(1, static_cast<int>(std::lround(avail / N)) - 1); break;
    case Optimizer::cma: cfg.cma_iters = std::max(1, static_cast<int>(std::lround(avail / N))); break;
    case Optimizer::cma_adam: {
      const double rest = avail - N * cfg.cma_adam_cma_iters;
      if (rest < 2 * N) throw DomainError("equalize_budget: budget too small for cma_adam");
      cfg.cma_adam_grad_steps = std::max(1, static_cast<int>(std::lround(rest / N)) - 1);
      break;
    }
    case Optimizer::basincma: {
      double rest = avail - N * cfg.p_latent_iters * (cfg.q_inner_grad + 1.0);
      while (rest < 2 * N && cfg.p_latent_iters > 1) {
        --cfg.p_latent_iters;
        rest = avail - N * cfg.p_latent_iters * (cfg.q_inner_grad + 1.0);
      }
      if (rest < 2 * N) throw DomainError("equalize_budget: budget too small for basincma");
      cfg.final_grad_steps = std::max(1, static_cast<int>(std::lround(rest / N)) - 1);
      break;
    }
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Full pipeline

namespace detail {

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

}  // namespace detail

/// Stats used for transform initialization when none are configured.
inline ModelStats default_model_stats(const GeneratorModel<float>& model) {
  return compute_model_stats(model, Rng(model.seed).substream(0x57a75), 500);
}

inline ProjectionResult project(const GeneratorModel<float>& model, const ImageBuffer& y, const MaskBuffer& m,
                                const ProjectionConfig& cfg, const Rng& rng, const Variant& variant,
                                ForwardCounter* counter = nullptr) {
  cfg.validate();
  model.validate();
  if (y.height() != model.arch.height || y.width() != model.arch.width)
    throw ShapeError("project: target size != generator output size");
  if (m.height() != y.height() || m.width() != y.width()) throw ShapeError("project: mask size != target size");
  ForwardCounter local;
  ForwardCounter& calls = counter ? *counter : local;
  const std::uint64_t calls_before = calls.value();
  const ProjectionContext ctx{model, cfg, calls};

  ProjectionResult res;
  res.variant = variant;
  detail::Stopwatch total;

  detail::Stopwatch t_class;
  const auto [class_index, c0] = init_class(ctx, y);
  res.class_index = class_index;
  res.timings.push_back({"class_init", t_class.seconds()});

  TransformParams phi = TransformParams::identity();
  if (variant.with_transform) {
    if (cfg.fixed_transform) {
      phi = *cfg.fixed_transform;
      res.phi_init = phi;
    } else {
      detail::Stopwatch t1;
      const ModelStats stats = cfg.stats ? *cfg.stats : default_model_stats(model);
      const auto s1 = stage1_search_transform(ctx, y, m, init_transform(m, stats), c0, rng.substream(10));
      phi = s1.phi;
      res.phi_init = s1.phi_init;
      res.stage1_generation_best = s1.generation_best;
      res.timings.push_back({"stage1_transform", t1.seconds()});
    }
  }
  res.phi = phi;

  detail::Stopwatch t2;
  LatentSearchResult search;
  const Rng r2 = rng.substream(20);
  switch (variant.optimizer) {
    case Optimizer::adam: search = search_adam(ctx, y, m, phi, c0, r2, cfg.adam_steps); break;
    case Optimizer::cma: search = search_cma(ctx, y, m, phi, c0, r2, cfg.cma_iters); break;
    case Optimizer::cma_adam: search = search_cma_adam(ctx, y, m, phi, c0, r2); break;
    case Optimizer::basincma: search = stage2_basincma(ctx, y, m, phi, c0, r2); break;
  }
  res.timings.push_back({"latent_search", t2.seconds()});
  res.best = std::move(search.best);
  res.candidates = std::move(search.candidates);
  res.stage2_generation_best = std::move(search.generation_best);

  const MaskedLoss<float> original(y, m, cfg.beta);
  res.final_report = evaluate_original_frame(ctx, original, phi, res.best);
  res.forward_calls = calls.value() - calls_before;
  res.timings.push_back({"total", total.seconds()});
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneOptions {
  double lambda = 1e3;
  double lr_theta = 1e-4;
  double lr_latent = 1e-4;
  double threshold = 0.1;  // stop once the masked reconstruction loss is below this
  int max_steps = 2000;
  double beta = 10.0;
  double c_max = 2.0;
  int monotone_window = 50;
};

struct FinetuneResult {
  GeneratorModel<float> model;
  LatentState<float> latent;
  int steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // reconstruction term only
  double theta_distance = 0.0;  // ||theta - theta0||_2
  bool reached_threshold = false;
  bool cap_warning = false;       // step cap hit before the threshold
  bool monotone_warning = false;  // windowed median of the loss went up
  std::vector<double> trace;      // reconstruction loss before each step, then the final value
};

/// Median-filtered loss over consecutive windows must not increase.
inline bool windowed_median_nonincreasing(const std::vector<double>& trace, int window) {
  if (window < 1 || static_cast<int>(trace.size()) < 2 * window) return true;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s + window <= trace.size(); s += window) {
    std::vector<double> w(trace.begin() + static_cast<std::ptrdiff_t>(s),
                          trace.begin() + static_cast<std::ptrdiff_t>(s + window));
    std::nth_element(w.begin(), w.begin() + window / 2, w.end());
    const double med = w[window / 2];
    if (med > prev) return false;
    prev = med;
  }
  return true;
}

/// Jointly updates (z, c, theta) with ADAM on
///   L_mask(T_phi^-1(G_theta(z,c)), y, m) + lambda * mean((theta - theta0)^2)
/// until the reconstruction term drops below the threshold or the step cap.
inline FinetuneResult finetune(const GeneratorModel<float>& model0, const ImageBuffer& y, const MaskBuffer& m,
                               LatentState<float> latent, const TransformParams& phi, const FinetuneOptions& opt = {}) {
  model0.validate();
  FinetuneResult out;
  out.model = model0;
  const MaskedLoss<float> original(y, m, opt.beta);
  const auto n_theta = model0.theta.size();
  AdamState adam_theta(n_theta, opt.lr_theta);
  AdamState adam_z(latent.z.size(), opt.lr_latent);
  AdamState adam_c(latent.c.size(), opt.lr_latent);
  const double reg_scale = 2.0 * opt.lambda / static_cast<double>(n_theta);
  std::vector<double> grad_theta(n_theta);

  for (int k = 0;; ++k) {
    const auto tape = forward_tape(out.model, latent);
    const auto lg = original.evaluate_with_gradient(inverse_transform(tape.image, phi));
    const double recon = lg.report.total;
    out.trace.push_back(recon);
    if (k == 0) out.initial_loss = recon;
    out.final_loss = recon;
    if (recon < opt.threshold) {
      out.reached_threshold = true;
      break;
    }
    if (k == opt.max_steps) {
      out.cap_warning = true;
      break;
    }
    const auto g = backward(out.model, tape, inverse_transform_backward(lg.gradient, phi), true);
    for (std::size_t i = 0; i < n_theta; ++i)
      grad_theta[i] = static_cast<double>(g.d_theta[i]) +
                      reg_scale * (static_cast<double>(out.model.theta[i]) - static_cast<double>(model0.theta[i]));
    adam_step(adam_theta, std::span<float>(out.model.theta), std::span<const double>(grad_theta));
    adam_step(adam_z, latent.z, g.d_z);
    clamp_in_place<float>(latent.z, static_cast<float>(opt.c_max));
    adam_step(adam_c, latent.c, g.d_c);
    ++out.steps;
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < n_theta; ++i) {
    const double d = static_cast<double>(out.model.theta[i]) - static_cast<double>(model0.theta[i]);
    d2 += d * d;
  }
  out.theta_distance = std::sqrt(d2);
  out.monotone_warning = !windowed_median_nonincreasing(out.trace, opt.monotone_window);
  out.latent = std::move(latent);
  return out;
}

}  // namespace basinproj
