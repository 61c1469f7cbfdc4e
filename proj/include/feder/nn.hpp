#pragma once

// Minimal trainable network stack: valid-padding stride-1 convolution, dense
// layers, ReLU, global average pooling, softmax cross-entropy with exact
// backprop, SGD / Adam and a StepLR schedule.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "feder/data.hpp"
#include "feder/error.hpp"
#include "feder/params.hpp"

namespace feder::nn {

using data::Dataset;

// ---------------------------------------------------------------------------
// Layer primitives. Feature maps are CHW; conv weights are (k, k, cin, cout)
// in the Tensor4 index order.

struct ConvShape {
  std::size_t in_channels, height, width, out_channels, kernel;
  std::size_t out_height() const noexcept { return height - kernel + 1; }
  std::size_t out_width() const noexcept { return width - kernel + 1; }
};

inline std::vector<double> conv2d_forward(std::span<const double> in, const ConvShape& s, std::span<const double> weight,
                                          std::span<const double> bias) {
  const std::size_t oh = s.out_height(), ow = s.out_width(), k = s.kernel, co_n = s.out_channels;
  std::vector<double> out(co_n * oh * ow);
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = bias[co];
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
              acc += in[(ci * s.height + y + ky) * s.width + x + kx] * weight[((ky * k + kx) * s.in_channels + ci) * co_n + co];
            }
          }
        }
        out[(co * oh + y) * ow + x] = acc;
      }
    }
  }
  return out;
}

// Accumulates into grad_weight / grad_bias; returns the input gradient.
inline std::vector<double> conv2d_backward(std::span<const double> in, const ConvShape& s, std::span<const double> weight,
                                           std::span<const double> grad_out, std::span<double> grad_weight,
                                           std::span<double> grad_bias) {
  const std::size_t oh = s.out_height(), ow = s.out_width(), k = s.kernel, co_n = s.out_channels;
  std::vector<double> grad_in(in.size(), 0.0);
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const double g = grad_out[(co * oh + y) * ow + x];
        if (g == 0.0) continue;
        grad_bias[co] += g;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
              const std::size_t wi = ((ky * k + kx) * s.in_channels + ci) * co_n + co;
              const std::size_t ii = (ci * s.height + y + ky) * s.width + x + kx;
              grad_weight[wi] += g * in[ii];
              grad_in[ii] += g * weight[wi];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// weight is (out, in) row-major.
inline std::vector<double> dense_forward(std::span<const double> in, std::span<const double> weight,
                                         std::span<const double> bias) {
  const std::size_t n_out = bias.size(), n_in = in.size();
  std::vector<double> out(bias.begin(), bias.end());
  for (std::size_t o = 0; o < n_out; ++o) {
    for (std::size_t i = 0; i < n_in; ++i) out[o] += weight[o * n_in + i] * in[i];
  }
  return out;
}

inline std::vector<double> dense_backward(std::span<const double> in, std::span<const double> weight,
                                          std::span<const double> grad_out, std::span<double> grad_weight,
                                          std::span<double> grad_bias) {
  const std::size_t n_out = grad_out.size(), n_in = in.size();
  std::vector<double> grad_in(n_in, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) {
    grad_bias[o] += grad_out[o];
    for (std::size_t i = 0; i < n_in; ++i) {
      grad_weight[o * n_in + i] += grad_out[o] * in[i];
      grad_in[i] += grad_out[o] * weight[o * n_in + i];
    }
  }
  return grad_in;
}

inline void relu_inplace(std::vector<double>& v) {
  for (double& x : v) x = std::max(x, 0.0);
}

inline std::vector<double> softmax(std::span<const double> scores) {
  const double top = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += (p[i] = std::exp(scores[i] - top));
  for (double& x : p) x /= z;
  return p;
}

// Cross-entropy of one sample; writes d loss / d scores into grad_scores.
inline double cross_entropy(std::span<const double> scores, std::size_t label, std::span<double> grad_scores) {
  if (label >= scores.size()) {
    throw LabelOutOfRangeError("label " + std::to_string(label) + " outside " + std::to_string(scores.size()) +
                               " classes");
  }
  const double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - top);
  const double log_z = top + std::log(z);
  for (std::size_t i = 0; i < scores.size(); ++i) grad_scores[i] = std::exp(scores[i] - log_z);
  grad_scores[label] -= 1.0;
  return std::max(log_z - scores[label], 0.0);
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Models

struct LossAndGradient {
  double loss = 0.0;
  Gradient grad;
  std::size_t correct = 0;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

template <class M>
concept Model = requires(const M& m, const ModelParams& p, const Dataset& d, std::span<const std::size_t> idx,
                         std::uint64_t seed) {
  { m.init(seed) } -> std::same_as<ModelParams>;
  { m.loss_and_gradient(p, d, idx) } -> std::same_as<LossAndGradient>;
  { m.evaluate(p, d, idx) } -> std::same_as<Evaluation>;
};

namespace detail {

// Glorot-uniform draw in +-sqrt(6 / (fan_in + fan_out)).
inline void glorot_fill(Layer& l, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (double& v : l.values) v = u(rng);
}

template <class Forward>
Evaluation evaluate_with(const Dataset& d, std::span<const std::size_t> idx, Forward&& scores_of) {
  Evaluation e;
  if (idx.empty()) return e;
  std::vector<double> scratch;
  std::size_t correct = 0;
  for (auto i : idx) {
    const auto scores = scores_of(d.sample(i));
    scratch.resize(scores.size());
    e.loss += cross_entropy(scores, d.labels[i], scratch);
    if (argmax(scores) == d.labels[i]) ++correct;
  }
  e.count = idx.size();
  e.loss /= static_cast<double>(idx.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return e;
}

}  // namespace detail

struct MicroConvNetConfig {
  std::size_t in_channels = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t classes = 10;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t kernel = 3;
};

// conv(in -> c1, k x k) -> ReLU -> conv(c1 -> c2, k x k) -> ReLU
//   -> global average pool -> dense(c2 -> classes)
class MicroConvNet {
public:
  struct Cache {
    std::vector<double> act1;  // post-ReLU conv1 output
    std::vector<double> act2;  // post-ReLU conv2 output
    std::vector<double> pooled;
    std::vector<double> scores;
  };

  explicit MicroConvNet(MicroConvNetConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.in_channels == 0 || cfg_.classes == 0 || cfg_.conv1_channels == 0 || cfg_.conv2_channels == 0 ||
        cfg_.kernel == 0) {
      throw InvalidArgumentError("MicroConvNet sizes must be positive");
    }
    if (cfg_.height < 2 * cfg_.kernel - 1 || cfg_.width < 2 * cfg_.kernel - 1) {
      throw InvalidArgumentError("MicroConvNet input is smaller than two stacked kernels");
    }
  }

  const MicroConvNetConfig& config() const noexcept { return cfg_; }

  ConvShape conv1_shape() const noexcept {
    return {cfg_.in_channels, cfg_.height, cfg_.width, cfg_.conv1_channels, cfg_.kernel};
  }
  ConvShape conv2_shape() const noexcept {
    const auto c1 = conv1_shape();
    return {cfg_.conv1_channels, c1.out_height(), c1.out_width(), cfg_.conv2_channels, cfg_.kernel};
  }

  ModelParams init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const std::size_t k = cfg_.kernel;
    ModelParams p;
    p.layers.emplace_back("conv1.weight", std::vector<std::size_t>{k, k, cfg_.in_channels, cfg_.conv1_channels});
    p.layers.emplace_back("conv1.bias", std::vector<std::size_t>{cfg_.conv1_channels});
    p.layers.emplace_back("conv2.weight", std::vector<std::size_t>{k, k, cfg_.conv1_channels, cfg_.conv2_channels});
    p.layers.emplace_back("conv2.bias", std::vector<std::size_t>{cfg_.conv2_channels});
    p.layers.emplace_back("fc.weight", std::vector<std::size_t>{cfg_.classes, cfg_.conv2_channels});
    p.layers.emplace_back("fc.bias", std::vector<std::size_t>{cfg_.classes});
    detail::glorot_fill(p.layers[0], k * k * cfg_.in_channels, k * k * cfg_.conv1_channels, rng);
    detail::glorot_fill(p.layers[2], k * k * cfg_.conv1_channels, k * k * cfg_.conv2_channels, rng);
    detail::glorot_fill(p.layers[4], cfg_.conv2_channels, cfg_.classes, rng);
    return p;
  }

  void check(const ModelParams& p) const {
    static const char* names[] = {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"};
    const std::size_t k = cfg_.kernel;
    const std::vector<std::vector<std::size_t>> shapes = {
        {k, k, cfg_.in_channels, cfg_.conv1_channels}, {cfg_.conv1_channels},
        {k, k, cfg_.conv1_channels, cfg_.conv2_channels}, {cfg_.conv2_channels},
        {cfg_.classes, cfg_.conv2_channels}, {cfg_.classes}};
    if (p.size() != 6) throw ShapeMismatchError("MicroConvNet expects 6 parameter tensors");
    for (std::size_t i = 0; i < 6; ++i) {
      if (p.layers[i].name != names[i] || p.layers[i].shape != shapes[i]) {
        throw ShapeMismatchError("MicroConvNet parameter '" + p.layers[i].name + "' has unexpected name or shape");
      }
    }
  }

  void check_input(std::span<const double> x) const {
    if (x.size() != cfg_.in_channels * cfg_.height * cfg_.width) {
      throw ShapeMismatchError("input has " + std::to_string(x.size()) + " values, network expects " +
                               std::to_string(cfg_.in_channels * cfg_.height * cfg_.width));
    }
  }

  Cache forward(const ModelParams& p, std::span<const double> x) const {
    check_input(x);
    Cache c;
    c.act1 = conv2d_forward(x, conv1_shape(), p.layers[0].values, p.layers[1].values);
    relu_inplace(c.act1);
    c.act2 = conv2d_forward(c.act1, conv2_shape(), p.layers[2].values, p.layers[3].values);
    relu_inplace(c.act2);
    const auto s2 = conv2_shape();
    const std::size_t area = s2.out_height() * s2.out_width();
    c.pooled.assign(cfg_.conv2_channels, 0.0);
    for (std::size_t ch = 0; ch < cfg_.conv2_channels; ++ch) {
      double sum = 0.0;
      for (std::size_t i = 0; i < area; ++i) sum += c.act2[ch * area + i];
      c.pooled[ch] = sum / static_cast<double>(area);
    }
    c.scores = dense_forward(c.pooled, p.layers[4].values, p.layers[5].values);
    return c;
  }

  // Class scores for every sample of a batch.
  std::vector<std::vector<double>> predict(const ModelParams& p, const Dataset& d,
                                           std::span<const std::size_t> idx) const {
    check(p);
    std::vector<std::vector<double>> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(forward(p, d.sample(i)).scores);
    return out;
  }

  LossAndGradient loss_and_gradient(const ModelParams& p, const Dataset& d, std::span<const std::size_t> idx) const {
    check(p);
    if (idx.empty()) throw InvalidArgumentError("loss_and_gradient on an empty batch");
    LossAndGradient r{0.0, zeros_like(p), 0};
    auto& g = r.grad.layers;
    const double inv_b = 1.0 / static_cast<double>(idx.size());
    const auto s1 = conv1_shape();
    const auto s2 = conv2_shape();
    const std::size_t area = s2.out_height() * s2.out_width();
    std::vector<double> d_scores(cfg_.classes);
    for (auto i : idx) {
      const auto x = d.sample(i);
      const Cache c = forward(p, x);
      r.loss += cross_entropy(c.scores, d.labels.at(i), d_scores);
      if (argmax(c.scores) == d.labels[i]) ++r.correct;
      for (double& v : d_scores) v *= inv_b;

      const auto d_pooled = dense_backward(c.pooled, p.layers[4].values, d_scores, g[4].values, g[5].values);
      std::vector<double> d_act2(c.act2.size());
      for (std::size_t ch = 0; ch < cfg_.conv2_channels; ++ch) {
        for (std::size_t j = 0; j < area; ++j) {
          const std::size_t at = ch * area + j;
          d_act2[at] = c.act2[at] > 0.0 ? d_pooled[ch] / static_cast<double>(area) : 0.0;
        }
      }
      auto d_act1 = conv2d_backward(c.act1, s2, p.layers[2].values, d_act2, g[2].values, g[3].values);
      for (std::size_t j = 0; j < d_act1.size(); ++j) {
        if (!(c.act1[j] > 0.0)) d_act1[j] = 0.0;
      }
      conv2d_backward(x, s1, p.layers[0].values, d_act1, g[0].values, g[1].values);
    }
    r.loss *= inv_b;
    return r;
  }

  Evaluation evaluate(const ModelParams& p, const Dataset& d, std::span<const std::size_t> idx) const {
    check(p);
    return detail::evaluate_with(d, idx, [&](std::span<const double> x) { return forward(p, x).scores; });
  }

private:
  MicroConvNetConfig cfg_;
};

// Multinomial logistic regression on the flattened input: one dense layer.
class LinearSoftmax {
public:
  LinearSoftmax(std::size_t features, std::size_t classes) : features_(features), classes_(classes) {
    if (features == 0 || classes == 0) throw InvalidArgumentError("LinearSoftmax sizes must be positive");
  }

  ModelParams init(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    ModelParams p;
    p.layers.emplace_back("fc.weight", std::vector<std::size_t>{classes_, features_});
    p.layers.emplace_back("fc.bias", std::vector<std::size_t>{classes_});
    detail::glorot_fill(p.layers[0], features_, classes_, rng);
    return p;
  }

  void check(const ModelParams& p) const {
    if (p.size() != 2 || p.layers[0].shape != std::vector<std::size_t>{classes_, features_} ||
        p.layers[1].shape != std::vector<std::size_t>{classes_}) {
      throw ShapeMismatchError("LinearSoftmax parameters have unexpected shapes");
    }
  }

  LossAndGradient loss_and_gradient(const ModelParams& p, const Dataset& d, std::span<const std::size_t> idx) const {
    check(p);
    if (idx.empty()) throw InvalidArgumentError("loss_and_gradient on an empty batch");
    LossAndGradient r{0.0, zeros_like(p), 0};
    const double inv_b = 1.0 / static_cast<double>(idx.size());
    std::vector<double> d_scores(classes_);
    for (auto i : idx) {
      const auto x = d.sample(i);
      if (x.size() != features_) throw ShapeMismatchError("LinearSoftmax input width mismatch");
      const auto scores = dense_forward(x, p.layers[0].values, p.layers[1].values);
      r.loss += cross_entropy(scores, d.labels.at(i), d_scores);
      if (argmax(scores) == d.labels[i]) ++r.correct;
      for (double& v : d_scores) v *= inv_b;
      dense_backward(x, p.layers[0].values, d_scores, r.grad.layers[0].values, r.grad.layers[1].values);
    }
    r.loss *= inv_b;
    return r;
  }

  Evaluation evaluate(const ModelParams& p, const Dataset& d, std::span<const std::size_t> idx) const {
    check(p);
    return detail::evaluate_with(
        d, idx, [&](std::span<const double> x) { return dense_forward(x, p.layers[0].values, p.layers[1].values); });
  }

private:
  std::size_t features_, classes_;
};

static_assert(Model<MicroConvNet>);
static_assert(Model<LinearSoftmax>);

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidArgumentError("learning rate must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw InvalidArgumentError("Adam betas must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw InvalidArgumentError("Adam epsilon must be positive");
    if (!(weight_decay >= 0.0)) throw InvalidArgumentError("weight decay must be >= 0");
  }
};

struct OptimizerState {
  OptimizerConfig config;
  double learning_rate = 0.0;  // effective rate for the next step
  std::uint64_t step_count = 0;
  Gradient first_moment;   // Adam only
  Gradient second_moment;  // Adam only
};

inline OptimizerState make_optimizer(const OptimizerConfig& cfg, const ModelParams& shape_like) {
  cfg.validate();
  OptimizerState s{cfg, cfg.learning_rate, 0, {}, {}};
  if (cfg.kind == OptimizerKind::adam) {
    s.first_moment = zeros_like(shape_like);
    s.second_moment = zeros_like(shape_like);
  }
  return s;
}

// SGD:  w <- w - lr * (g + wd * w)
// Adam: g' = g + wd * w, bias-corrected first/second moments of g'.
inline void optimizer_step(OptimizerState& state, ModelParams& params, const Gradient& grad) {
  require_congruent(params, grad, "optimizer_step");
  const auto& c = state.config;
  const double lr = state.learning_rate;
  ++state.step_count;
  if (c.kind == OptimizerKind::sgd) {
    for (std::size_t l = 0; l < params.size(); ++l) {
      auto& w = params.layers[l].values;
      const auto& g = grad.layers[l].values;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + c.weight_decay * w[i]);
    }
    return;
  }
  require_congruent(params, state.first_moment, "optimizer_step (Adam state)");
  const auto t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& w = params.layers[l].values;
    const auto& g = grad.layers[l].values;
    auto& m = state.first_moment.layers[l].values;
    auto& v = state.second_moment.layers[l].values;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + c.weight_decay * w[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
    }
  }
}

struct LrSchedule {
  enum class Kind { none, step } kind = Kind::none;
  std::size_t step_size = 25;
  double decay = 0.5;

  static LrSchedule step_lr(std::size_t step_size, double decay) { return {Kind::step, step_size, decay}; }

  void validate() const {
    if (step_size < 1) throw InvalidArgumentError("StepLR step size must be >= 1");
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidArgumentError("StepLR decay must lie in (0, 1]");
  }
};

inline double schedule_lr(const LrSchedule& s, std::size_t epoch, double base_lr) {
  if (s.kind == LrSchedule::Kind::none) return base_lr;
  s.validate();
  return base_lr * std::pow(s.decay, static_cast<double>(epoch / s.step_size));
}

}  // namespace feder::nn
