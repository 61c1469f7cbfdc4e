#pragma once

// Learning metrics over weight spectra: effective rank (entropy of the
// l1-normalized singular values, in nats), model-level Q_ER, stable rank,
// condition number, and an optional VBMF spectral denoiser.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feder/error.hpp"
#include "feder/linalg.hpp"
#include "feder/params.hpp"

namespace feder::metrics {

using linalg::Matrix;
using linalg::SingularSpectrum;

enum class NoiseMode { off, analytic };

inline std::vector<double> normalize_spectrum(const SingularSpectrum& s) {
  const double total = std::accumulate(s.sigma.begin(), s.sigma.end(), 0.0);
  if (!(total > 0.0)) throw ZeroSpectrumError("spectrum has no positive singular value");
  std::vector<double> p(s.sigma.size());
  std::transform(s.sigma.begin(), s.sigma.end(), p.begin(), [total](double x) { return x / total; });
  return p;
}

// Shannon entropy -sum p ln p of the normalized spectrum, with 0 ln 0 = 0.
inline double effective_rank(const SingularSpectrum& s) {
  double h = 0.0;
  for (double p : normalize_spectrum(s)) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

// Q_ER = ln( sqrt(sum er_i^2) / d ).
inline double model_effective_rank(std::span<const double> layer_ers, std::size_t d) {
  if (d == 0 || layer_ers.size() != d) {
    throw InvalidArgumentError("model_effective_rank expects d == number of layer effective ranks >= 1");
  }
  double sq = 0.0;
  for (double er : layer_ers) {
    if (er < 0.0 || !std::isfinite(er)) throw InvalidArgumentError("layer effective ranks must be finite and >= 0");
    sq += er * er;
  }
  if (sq == 0.0) throw NegativeInfinityError("Q_ER of all-zero effective ranks is -infinity");
  return std::log(std::sqrt(sq) / static_cast<double>(d));
}

inline double stable_rank(const SingularSpectrum& s) {
  const double top = s.sigma.empty() ? 0.0 : *std::max_element(s.sigma.begin(), s.sigma.end());
  if (!(top > 0.0)) throw ZeroSpectrumError("stable rank of a zero spectrum");
  double sq = 0.0;
  for (double x : s.sigma) sq += (x / top) * (x / top);
  return sq;
}

// sigma_max / sigma_min; +infinity when any singular value is (clamped) zero.
inline double condition_number(const SingularSpectrum& s) {
  if (s.sigma.empty()) throw ZeroSpectrumError("condition number of an empty spectrum");
  const auto [lo, hi] = std::minmax_element(s.sigma.begin(), s.sigma.end());
  if (!(*hi > 0.0)) throw ZeroSpectrumError("condition number of a zero spectrum");
  if (*lo <= linalg::kSingularValueClamp * *hi) return std::numeric_limits<double>::infinity();
  return *hi / *lo;
}

namespace detail {

// Global analytic empirical VB matrix factorization: estimates the noise
// variance from the spectrum, then shrinks singular values above the
// detection threshold and zeros the rest. L <= M are the matrix dimensions.
class AnalyticVbmf {
public:
  AnalyticVbmf(std::vector<double> s, std::size_t L, std::size_t M)
      : s_(std::move(s)), L_(static_cast<double>(L)), M_(static_cast<double>(M)), alpha_(L_ / M_),
        tau_bar_(2.5129 * std::sqrt(alpha_)), x_bar_((1.0 + tau_bar_) * (1.0 + alpha_ / tau_bar_)) {}

  std::vector<double> shrink() const {
    std::vector<double> out(s_.size(), 0.0);
    double energy = 0.0;
    for (double x : s_) energy += x * x;
    if (energy == 0.0) return out;

    const double sigma2 = estimate_noise_variance(energy);
    const double threshold = std::sqrt(M_ * sigma2 * x_bar_);
    const double lm = L_ + M_;
    for (std::size_t i = 0; i < s_.size(); ++i) {
      const double s = s_[i];
      if (!(s > threshold)) continue;
      const double a = 1.0 - lm * sigma2 / (s * s);
      const double disc = a * a - 4.0 * L_ * M_ * sigma2 * sigma2 / (s * s * s * s);
      const double d = 0.5 * s * (a + std::sqrt(std::max(disc, 0.0)));
      out[i] = std::clamp(d, 0.0, s);
    }
    return out;
  }

private:
  double tau(double x) const {
    const double b = x - (1.0 + alpha_);
    return 0.5 * (b + std::sqrt(std::max(b * b - 4.0 * alpha_, 0.0)));
  }

  // Negative free energy as a function of the noise variance, up to
  // sigma2-independent constants. Exactly-zero singular values contribute
  // only their ln(sigma2) term.
  double objective(double sigma2) const {
    double obj = 0.0;
    for (double s : s_) {
      if (s == 0.0) {
        obj += std::log(sigma2);
        continue;
      }
      const double x = s * s / (M_ * sigma2);
      if (x > x_bar_) {
        const double t = tau(x);
        obj += x - t + std::log((t + 1.0) / x) + alpha_ * std::log(t / alpha_ + 1.0);
      } else {
        obj += x - std::log(x);
      }
    }
    return obj;
  }

  double estimate_noise_variance(double energy) const {
    const auto H = s_.size();
    auto e = static_cast<std::size_t>(std::max(0.0, std::ceil(L_ / (1.0 + alpha_)) - 1.0));
    e = std::min({e, H, H - 1});
    double tail = 0.0;
    for (std::size_t i = e; i < H; ++i) tail += s_[i] * s_[i];
    tail /= static_cast<double>(H - e);
    const double upper = energy / (L_ * M_);
    double lower = std::max(s_[e] * s_[e] / (M_ * x_bar_), tail / M_);
    lower = std::min(lower, upper);
    if (!(lower > 0.0)) lower = upper * 1e-12;
    if (lower >= upper) return upper;

    // Golden-section search over log(sigma2).
    constexpr double phi = 0.6180339887498949;
    double a = std::log(lower), b = std::log(upper);
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = objective(std::exp(c)), fd = objective(std::exp(d));
    for (int it = 0; it < 200 && (b - a) > 1e-12; ++it) {
      if (fc < fd) {
        b = d, d = c, fd = fc;
        c = b - phi * (b - a);
        fc = objective(std::exp(c));
      } else {
        a = c, c = d, fc = fd;
        d = a + phi * (b - a);
        fd = objective(std::exp(d));
      }
    }
    return std::exp(0.5 * (a + b));
  }

  std::vector<double> s_;
  double L_, M_, alpha_, tau_bar_, x_bar_;
};

}  // namespace detail

inline SingularSpectrum denoise_spectrum(const Matrix& m, NoiseMode mode) {
  SingularSpectrum raw = linalg::svd_values(m);
  if (mode == NoiseMode::off) return raw;
  const std::size_t L = std::min(m.rows(), m.cols());
  const std::size_t M = std::max(m.rows(), m.cols());
  return SingularSpectrum{detail::AnalyticVbmf(raw.sigma, L, M).shrink()};
}

// Spectrum of a layer: 4-D tensors are unfolded along `unfold_mode`, 2-D
// tensors are used directly. Empty for 1-D layers.
inline std::optional<SingularSpectrum> layer_spectrum(const Layer& layer, int unfold_mode, NoiseMode noise) {
  if (layer.rank() == 4) return denoise_spectrum(linalg::unfold(layer.as_tensor4(), unfold_mode), noise);
  if (layer.rank() == 2) return denoise_spectrum(layer.as_matrix(), noise);
  return std::nullopt;
}

// Effective rank of a layer; an all-zero layer has effective rank 0.
inline std::optional<double> layer_effective_rank(const Layer& layer, int unfold_mode, NoiseMode noise) {
  auto s = layer_spectrum(layer, unfold_mode, noise);
  if (!s) return std::nullopt;
  if (!(s->max() > 0.0)) return 0.0;
  return effective_rank(*s);
}

struct MetricReport {
  std::map<std::string, double> per_layer_effective_rank;
  double model_q_er = -std::numeric_limits<double>::infinity();
  std::map<std::string, double> per_layer_stable_rank;
  std::map<std::string, double> per_layer_condition_number;
};

// Q_ER counts only layers that carry an effective rank. All-zero layers are
// omitted from stable rank and condition number, and an all-zero model
// reports Q_ER = -infinity.
inline MetricReport compute_metric_report(const ModelParams& params, int unfold_mode = linalg::kDefaultUnfoldMode,
                                          NoiseMode noise = NoiseMode::off) {
  MetricReport r;
  std::vector<double> ers;
  for (const auto& layer : params.layers) {
    auto s = layer_spectrum(layer, unfold_mode, noise);
    if (!s) continue;
    if (s->max() > 0.0) {
      const double er = effective_rank(*s);
      r.per_layer_effective_rank[layer.name] = er;
      ers.push_back(er);
      r.per_layer_stable_rank[layer.name] = stable_rank(*s);
      r.per_layer_condition_number[layer.name] = condition_number(*s);
    } else {
      r.per_layer_effective_rank[layer.name] = 0.0;
      ers.push_back(0.0);
    }
  }
  if (!ers.empty()) {
    try {
      r.model_q_er = model_effective_rank(ers, ers.size());
    } catch (const NegativeInfinityError&) {
      r.model_q_er = -std::numeric_limits<double>::infinity();
    }
  }
  return r;
}

}  // namespace feder::metrics
