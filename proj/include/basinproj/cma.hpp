#pragma once

// CMA-ES (rank-mu + rank-one covariance update, cumulative step-size
// adaptation) with the usual default strategy constants.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "basinproj/core.hpp"
#include "basinproj/serialize.hpp"

namespace basinproj {

struct CmaState {
  int dim = 0;
  int population = 0;
  int mu_sel = 0;
  long iteration = 0;

  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  double sigma = 1.0;
  Eigen::VectorXd p_sigma;
  Eigen::VectorXd p_c;
  Eigen::VectorXd weights;  // length mu_sel, positive, decreasing, sum 1

  double mu_eff = 0, c_sigma = 0, d_sigma = 0, c_c = 0, c1 = 0, c_mu = 0, chi_n = 0;

  // Eigendecomposition of cov: cov = B diag(D^2) B^T.
  Eigen::MatrixXd B;
  Eigen::VectorXd D;
  double min_eigenvalue_before_regularization = 0.0;
};

inline constexpr double kCmaMinEigenvalue = 1e-12;
inline constexpr double kCmaMinSigma = 1e-12;
inline constexpr double kCmaMaxSigma = 1e6;

namespace detail {

inline void cma_strategy_constants(CmaState& s) {
  const double n = s.dim;
  s.mu_sel = std::max(1, s.population / 2);
  s.weights.resize(s.mu_sel);
  for (int i = 0; i < s.mu_sel; ++i) s.weights[i] = std::log(s.mu_sel + 0.5) - std::log(i + 1.0);
  s.weights /= s.weights.sum();
  s.mu_eff = 1.0 / s.weights.squaredNorm();
  s.c_sigma = (s.mu_eff + 2.0) / (n + s.mu_eff + 5.0);
  s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (n + 1.0)) - 1.0) + s.c_sigma;
  s.c_c = (4.0 + s.mu_eff / n) / (n + 4.0 + 2.0 * s.mu_eff / n);
  s.c1 = 2.0 / ((n + 1.3) * (n + 1.3) + s.mu_eff);
  s.c_mu = std::min(1.0 - s.c1, 2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) / ((n + 2.0) * (n + 2.0) + s.mu_eff));
  s.chi_n = std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
}

/// Symmetrizes cov, refreshes B/D and floors eigenvalues at 1e-12.
inline void cma_decompose(CmaState& s) {
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.cov);
  if (eig.info() != Eigen::Success) throw NumericError("cma: eigendecomposition failed");
  Eigen::VectorXd ev = eig.eigenvalues();
  s.min_eigenvalue_before_regularization = ev.minCoeff();
  bool clipped = false;
  for (int i = 0; i < ev.size(); ++i)
    if (ev[i] < kCmaMinEigenvalue) ev[i] = kCmaMinEigenvalue, clipped = true;
  s.B = eig.eigenvectors();
  s.D = ev.cwiseSqrt();
  if (clipped) s.cov = s.B * ev.asDiagonal() * s.B.transpose();
}

}  // namespace detail

/// New search distribution N(mean0, sigma0^2 * cov0) with population N.
inline CmaState cma_init(int dim, const Eigen::VectorXd& mean0, const Eigen::MatrixXd& cov0, int population,
                         double sigma0 = 1.0) {
  if (dim <= 0) throw DomainError("cma_init: dim must be positive");
  if (population < 2) throw DomainError("cma_init: population must be at least 2");
  if (mean0.size() != dim || cov0.rows() != dim || cov0.cols() != dim) throw ShapeError("cma_init: shape mismatch");
  if (!mean0.allFinite() || !cov0.allFinite()) throw NumericError("cma_init: non-finite input");
  if (!(sigma0 > kCmaMinSigma && sigma0 < kCmaMaxSigma)) throw DomainError("cma_init: sigma out of range");
  if ((cov0 - cov0.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, cov0.cwiseAbs().maxCoeff()))
    throw DomainError("cma_init: covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov0, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() < 0.0) throw DomainError("cma_init: covariance is not positive semidefinite");

  CmaState s;
  s.dim = dim;
  s.population = population;
  s.mean = mean0;
  s.cov = cov0;
  s.sigma = sigma0;
  s.p_sigma = Eigen::VectorXd::Zero(dim);
  s.p_c = Eigen::VectorXd::Zero(dim);
  detail::cma_strategy_constants(s);
  detail::cma_decompose(s);
  return s;
}

inline CmaState cma_init(const Eigen::VectorXd& mean0, double cov_scale, int population) {
  const auto n = static_cast<int>(mean0.size());
  return cma_init(n, mean0, cov_scale * Eigen::MatrixXd::Identity(n, n), population);
}

/// x_i = mean + sigma * B * D * n_i. Candidate i of generation g draws from
/// substream (g, i) of `rng`, so sampling is a pure function of (state, rng).
inline std::vector<Eigen::VectorXd> cma_sample(const CmaState& s, const Rng& rng) {
  std::vector<Eigen::VectorXd> xs;
  xs.reserve(s.population);
  const Rng gen = rng.substream(static_cast<std::uint64_t>(s.iteration));
  const Eigen::MatrixXd BD = s.B * s.D.asDiagonal();
  for (int i = 0; i < s.population; ++i) {
    Rng r = gen.substream(static_cast<std::uint64_t>(i));
    Eigen::VectorXd n(s.dim);
    for (int k = 0; k < s.dim; ++k) n[k] = r.normal();
    xs.push_back(s.mean + s.sigma * (BD * n));
  }
  return xs;
}

/// Rank-based update. Non-finite losses count as +inf and rank last.
inline CmaState cma_update(CmaState s, const std::vector<Eigen::VectorXd>& xs, std::span<const double> losses) {
  if (static_cast<int>(xs.size()) != s.population || static_cast<int>(losses.size()) != s.population)
    throw ShapeError("cma_update: expected one loss per candidate");
  std::vector<double> f(losses.begin(), losses.end());
  for (auto& v : f)
    if (std::isnan(v)) v = std::numeric_limits<double>::infinity();
  if (std::all_of(f.begin(), f.end(), [](double v) { return std::isinf(v) && v > 0; }))
    throw NumericError("cma_update: every candidate failed");
  std::vector<int> order(s.population);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return f[a] < f[b]; });

  const int n = s.dim;
  const Eigen::VectorXd old_mean = s.mean;
  Eigen::VectorXd new_mean = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < s.mu_sel; ++i) new_mean += s.weights[i] * xs[order[i]];
  const Eigen::VectorXd step = (new_mean - old_mean) / s.sigma;

  const Eigen::MatrixXd inv_sqrt_c = s.B * s.D.cwiseInverse().asDiagonal() * s.B.transpose();
  s.p_sigma = (1.0 - s.c_sigma) * s.p_sigma + std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff) * (inv_sqrt_c * step);
  const double ps_norm = s.p_sigma.norm();
  const double decay = 1.0 - std::pow(1.0 - s.c_sigma, 2.0 * static_cast<double>(s.iteration + 1));
  const bool h_sigma = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (n + 1.0)) * s.chi_n;
  s.p_c = (1.0 - s.c_c) * s.p_c + (h_sigma ? std::sqrt(s.c_c * (2.0 - s.c_c) * s.mu_eff) : 0.0) * step;

  Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < s.mu_sel; ++i) {
    const Eigen::VectorXd y = (xs[order[i]] - old_mean) / s.sigma;
    rank_mu.noalias() += s.weights[i] * (y * y.transpose());
  }
  const double delta_h = h_sigma ? 0.0 : s.c_c * (2.0 - s.c_c);
  s.cov = (1.0 - s.c1 - s.c_mu) * s.cov + s.c1 * (s.p_c * s.p_c.transpose() + delta_h * s.cov) + s.c_mu * rank_mu;

  s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1.0));
  s.sigma = std::clamp(s.sigma, kCmaMinSigma * 10.0, kCmaMaxSigma / 10.0);
  s.mean = new_mean;
  ++s.iteration;
  detail::cma_decompose(s);
  return s;
}

inline CmaState cma_update(CmaState s, const std::vector<Eigen::VectorXd>& xs, const std::vector<double>& losses) {
  return cma_update(std::move(s), xs, std::span<const double>(losses));
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON header line {dim, population, iteration}, then float64 LE
// mean, sigma, cov (row-major), p_sigma, p_c.

inline std::string encode_cma(const CmaState& s) {
  nlohmann::json header = {{"format", "basinproj-cma"},
                           {"dim", s.dim},
                           {"population", s.population},
                           {"iteration", s.iteration}};
  std::string out = header.dump() + "\n";
  auto put = [&out](double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
  };
  for (int i = 0; i < s.dim; ++i) put(s.mean[i]);
  put(s.sigma);
  for (int r = 0; r < s.dim; ++r)
    for (int c = 0; c < s.dim; ++c) put(s.cov(r, c));
  for (int i = 0; i < s.dim; ++i) put(s.p_sigma[i]);
  for (int i = 0; i < s.dim; ++i) put(s.p_c[i]);
  return out;
}

inline CmaState decode_cma(std::span<const unsigned char> bytes) {
  const auto [header, start] = detail::read_json_header(bytes);
  if (header.value("format", "") != "basinproj-cma") throw ParseError("not a CMA checkpoint", 0);
  const int dim = header.at("dim");
  const int population = header.at("population");
  const std::size_t need = static_cast<std::size_t>(8) * (3 * dim + 1 + dim * dim);
  if (bytes.size() - start != need) throw ParseError("CMA checkpoint has wrong payload length", bytes.size());
  std::size_t off = start;
  auto get = [&]() {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[off + b]) << (8 * b);
    off += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  };
  CmaState s;
  s.dim = dim;
  s.population = population;
  s.iteration = header.at("iteration");
  s.mean.resize(dim);
  for (int i = 0; i < dim; ++i) s.mean[i] = get();
  s.sigma = get();
  s.cov.resize(dim, dim);
  for (int r = 0; r < dim; ++r)
    for (int c = 0; c < dim; ++c) s.cov(r, c) = get();
  s.p_sigma.resize(dim);
  for (int i = 0; i < dim; ++i) s.p_sigma[i] = get();
  s.p_c.resize(dim);
  for (int i = 0; i < dim; ++i) s.p_c[i] = get();
  detail::cma_strategy_constants(s);
  detail::cma_decompose(s);
  return s;
}

inline void save_cma(const CmaState& s, const std::filesystem::path& path) {
  const std::string bytes = encode_cma(s);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw Error("cannot write " + path.string());
}

inline CmaState load_cma(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_cma(bytes);
}

}  // namespace basinproj
