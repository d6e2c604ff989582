#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "basinproj/core.hpp"

namespace basinproj {

/// Moment estimates for one variable group of one candidate. Never shared
/// between candidates.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<double> m1;
  std::vector<double> m2;

  AdamState() = default;
  AdamState(std::size_t n, double learning_rate) : lr(learning_rate), m1(n, 0.0), m2(n, 0.0) {}
};

struct LearningRates {
  double z = 0.05;
  double c = 0.0001;
  double theta = 0.0001;
};

inline LearningRates default_learning_rates() { return {}; }

/// One bias-corrected ADAM update of `params` in place. A non-finite gradient
/// throws NumericError and leaves params and state untouched.
template <typename T, typename G>
void adam_step(AdamState& s, std::span<T> params, std::span<const G> grad) {
  if (params.size() != grad.size() || s.m1.size() != params.size()) throw ShapeError("adam_step: size mismatch");
  if (!(s.lr > 0.0)) throw DomainError("adam_step: learning rate must be positive");
  for (const G g : grad)
    if (!std::isfinite(static_cast<double>(g))) throw NumericError("adam_step: non-finite gradient");
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    s.m1[i] = s.beta1 * s.m1[i] + (1.0 - s.beta1) * g;
    s.m2[i] = s.beta2 * s.m2[i] + (1.0 - s.beta2) * g * g;
    const double mhat = s.m1[i] / bc1;
    const double vhat = s.m2[i] / bc2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - s.lr * mhat / (std::sqrt(vhat) + s.eps));
  }
}

template <typename T, typename G>
void adam_step(AdamState& s, std::vector<T>& params, const std::vector<G>& grad) {
  adam_step(s, std::span<T>(params), std::span<const G>(grad));
}

}  // namespace basinproj
