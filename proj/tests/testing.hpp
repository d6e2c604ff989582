#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "basinproj/adam.hpp"
#include "basinproj/cma.hpp"
#include "basinproj/core.hpp"

namespace basinproj::testing {

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// derivative is essentially zero from dominating the statistic.
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradStats {
  double max_rel = 0.0;
  double frac_ok = 0.0;  // fraction with rel < 1e-3
};

inline GradStats summarize(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor) {
  GradStats s;
  int ok = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double r = relative_error(analytic[i], numeric[i], floor);
    s.max_rel = std::max(s.max_rel, r);
    ok += r < 1e-3;
  }
  s.frac_ok = analytic.empty() ? 1.0 : static_cast<double>(ok) / analytic.size();
  return s;
}

inline ImageBuffer smooth_image(int h, int w, double phase = 0.0) {
  ImageBuffer img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<float>(0.5 + 0.3 * std::sin(0.21 * x + 0.13 * y + phase + c) *
                                                       std::cos(0.17 * y - 0.05 * x + 0.4 * c));
  return img;
}

inline ImageBuffer random_image(int h, int w, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng r(seed);
  ImageBuffer img(h, w);
  for (auto& v : img.mutable_data()) v = static_cast<float>(r.uniform(lo, hi));
  return img;
}

inline double sphere(const Eigen::VectorXd& x) { return x.squaredNorm(); }

inline double rastrigin(const Eigen::VectorXd& x) {
  double s = 10.0 * static_cast<double>(x.size());
  for (int i = 0; i < x.size(); ++i) s += x[i] * x[i] - 10.0 * std::cos(2.0 * M_PI * x[i]);
  return s;
}

struct RastriginOutcome {
  double cma_best = 0.0;
  double adam_final = 0.0;
};

/// CMA-ES and ADAM on 10-D Rastrigin from the same start in [-4,4]^10.
inline RastriginOutcome rastrigin_race(std::uint64_t seed, int population = 100, double sigma0 = 3.0,
                                       int generations = 1000, int adam_steps = 5000) {
  constexpr int n = 10;
  Rng init(1000 + seed);
  Eigen::VectorXd x0(n);
  for (int i = 0; i < n; ++i) x0[i] = init.uniform(-4, 4);

  RastriginOutcome out;
  auto s = cma_init(n, x0, Eigen::MatrixXd::Identity(n, n), population, sigma0);
  const Rng rng(seed);
  out.cma_best = rastrigin(x0);
  for (int g = 0; g < generations && out.cma_best >= 1.0; ++g) {
    const auto xs = cma_sample(s, rng);
    std::vector<double> f;
    for (const auto& x : xs) {
      f.push_back(rastrigin(x));
      out.cma_best = std::min(out.cma_best, f.back());
    }
    s = cma_update(std::move(s), xs, f);
  }

  std::vector<double> x(x0.data(), x0.data() + n), g(n);
  AdamState a(n, 0.05);
  for (int k = 0; k < adam_steps; ++k) {
    for (int i = 0; i < n; ++i) g[i] = 2.0 * x[i] + 20.0 * M_PI * std::sin(2.0 * M_PI * x[i]);
    adam_step(a, x, g);
  }
  out.adam_final = rastrigin(Eigen::Map<const Eigen::VectorXd>(x.data(), n));
  return out;
}

}  // namespace basinproj::testing
