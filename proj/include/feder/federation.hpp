#pragma once

// Federated rounds: local client training (plain and proximal), the server
// aggregation strategies, and the round orchestrator.
//
// Aggregation strategies:
//   FedAvg         w = sum_k n_k / n * w_k
//   FedERNaive     conv layers weighted by raw effective-rank share,
//                  every other layer by 1/K
//   FedERImproved  conv layers weighted by floored effective-rank share;
//                  every other layer reuses the most recent conv layer's
//                  weights (1/K before the first conv layer)
//   Precision      per-layer inverse gradient second moment
//   FedProx        proximal local objective, FedAvg on the server

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "feder/data.hpp"
#include "feder/error.hpp"
#include "feder/metrics.hpp"
#include "feder/nn.hpp"
#include "feder/params.hpp"

namespace feder::fl {

enum class Strategy { fed_avg, fed_er_naive, fed_er_improved, precision, fed_prox };

inline constexpr std::string_view to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::fed_avg: return "FedAvg";
    case Strategy::fed_er_naive: return "FedERNaive";
    case Strategy::fed_er_improved: return "FedERImproved";
    case Strategy::precision: return "Precision";
    case Strategy::fed_prox: return "FedProx";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view name) noexcept {
  for (auto s : {Strategy::fed_avg, Strategy::fed_er_naive, Strategy::fed_er_improved, Strategy::precision,
                 Strategy::fed_prox}) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

// How FedAvg (and FedProx's server step) weights clients.
enum class SampleWeighting { samples, uniform };

struct FederationConfig {
  std::size_t clients = 4;
  std::size_t rounds = 20;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  Strategy strategy = Strategy::fed_avg;
  double er_floor = 1e-3;
  double prox_mu = 0.0;
  int unfold_mode = linalg::kDefaultUnfoldMode;
  metrics::NoiseMode noise_mode = metrics::NoiseMode::off;
  std::uint64_t seed = 0;
  SampleWeighting fedavg_weighting = SampleWeighting::samples;
  // FedERImproved: 2-D layers use their own effective rank instead of
  // inheriting the last conv layer's weights.
  bool dense_own_er = false;
  // Diagnostic: report this value as every layer's effective rank.
  std::optional<double> er_override;
  std::size_t workers = 1;
  nn::OptimizerConfig optimizer;
  nn::LrSchedule schedule;

  void validate() const {
    if (clients == 0) throw InvalidArgumentError("clients must be >= 1");
    if (rounds == 0) throw InvalidArgumentError("rounds must be >= 1");
    if (batch_size == 0) throw InvalidArgumentError("batch_size must be >= 1");
    if (!(er_floor > 0.0)) throw InvalidArgumentError("er_floor must be > 0");
    if (!(prox_mu >= 0.0)) throw InvalidArgumentError("prox_mu must be >= 0");
    if (strategy == Strategy::fed_prox && !(prox_mu > 0.0)) throw InvalidArgumentError("FedProx requires prox_mu > 0");
    if (unfold_mode < 1 || unfold_mode > 4) throw InvalidArgumentError("unfold_mode must be in 1..4");
    if (er_override && !(*er_override >= 0.0)) throw InvalidArgumentError("er_override must be >= 0");
    if (workers == 0) throw InvalidArgumentError("workers must be >= 1");
    optimizer.validate();
    if (schedule.kind != nn::LrSchedule::Kind::none) schedule.validate();
  }
};

struct ClientState {
  std::size_t id = 0;
  ModelParams params;
  std::vector<std::size_t> shard;  // indices into the training dataset
  nn::OptimizerState optimizer;
  // Per layer: mean over the last round's local steps of ||g_l||^2 / |l|.
  std::vector<double> grad_second_moment;
  std::size_t epochs_completed = 0;
};

inline ClientState make_client(std::size_t id, std::vector<std::size_t> shard, const ModelParams& init,
                               const FederationConfig& cfg) {
  ClientState c;
  c.id = id;
  c.params = init;
  c.shard = std::move(shard);
  c.optimizer = nn::make_optimizer(cfg.optimizer, init);
  c.grad_second_moment.assign(init.size(), 0.0);
  return c;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

// Gradient of the proximal objective: grad F(w) + mu (w - anchor).
inline void add_proximal(Gradient& g, double mu, const ModelParams& w, const ModelParams& anchor) {
  for (std::size_t l = 0; l < g.size(); ++l) {
    auto& gv = g.layers[l].values;
    const auto& wv = w.layers[l].values;
    const auto& av = anchor.layers[l].values;
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += mu * (wv[i] - av[i]);
  }
}

template <nn::Model M>
void local_training(const M& model, ClientState& state, const ModelParams& global, const data::Dataset& train,
                    const FederationConfig& cfg, double mu) {
  require_congruent(global, state.params, "client_update");
  if (state.shard.empty()) throw InvalidArgumentError("client " + std::to_string(state.id) + " has an empty shard");
  state.params = global;
  std::vector<double> second(global.size(), 0.0);
  std::size_t steps = 0;
  std::vector<std::size_t> order = state.shard;
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    state.optimizer.learning_rate = nn::schedule_lr(cfg.schedule, state.epochs_completed, cfg.optimizer.learning_rate);
    std::mt19937_64 rng(mix_seed(cfg.seed, state.id, state.epochs_completed));
    order = state.shard;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      auto lg = model.loss_and_gradient(state.params, train, std::span<const std::size_t>(order).subspan(start, len));
      for (std::size_t l = 0; l < lg.grad.size(); ++l) {
        second[l] += squared_norm(lg.grad.layers[l]) / static_cast<double>(lg.grad.layers[l].size());
      }
      ++steps;
      if (mu > 0.0) add_proximal(lg.grad, mu, state.params, global);
      nn::optimizer_step(state.optimizer, state.params, lg.grad);
    }
    ++state.epochs_completed;
  }
  if (steps > 0) {
    for (double& s : second) s /= static_cast<double>(steps);
  }
  state.grad_second_moment = std::move(second);
}

}  // namespace detail

// Sets the client to the global parameters, then runs E local epochs of
// mini-batch steps over its shard in a seeded shuffled order.
template <nn::Model M>
void client_update(const M& model, ClientState& state, const ModelParams& global, const data::Dataset& train,
                   const FederationConfig& cfg) {
  detail::local_training(model, state, global, train, cfg, 0.0);
}

// Local training on h_k(w; w_t) = F_k(w) + mu/2 ||w - w_t||^2. Returns the
// inexactness gamma = ||grad h_k(w_end)|| / ||grad h_k(w_t)||, with gradients
// of F_k taken over the full shard; 0 when the denominator is below 1e-12.
template <nn::Model M>
double client_update_prox(const M& model, ClientState& state, const ModelParams& global, const data::Dataset& train,
                          const FederationConfig& cfg) {
  if (!(cfg.prox_mu > 0.0)) throw InvalidArgumentError("client_update_prox requires prox_mu > 0");
  if (state.shard.empty()) throw InvalidArgumentError("client " + std::to_string(state.id) + " has an empty shard");
  const double start_norm = l2_norm(model.loss_and_gradient(global, train, state.shard).grad);
  detail::local_training(model, state, global, train, cfg, cfg.prox_mu);
  if (start_norm < 1e-12) return 0.0;
  if (state.params == global) return 1.0;
  auto end_grad = model.loss_and_gradient(state.params, train, state.shard).grad;
  detail::add_proximal(end_grad, cfg.prox_mu, state.params, global);
  return l2_norm(end_grad) / start_norm;
}

// ---------------------------------------------------------------------------
// Aggregation

// alpha[l][k]: weight of client k on layer l, for every layer of the model.
struct AggregationWeights {
  std::vector<std::string> layers;
  std::vector<std::vector<double>> alpha;

  double at(std::size_t layer, std::size_t client) const { return alpha.at(layer).at(client); }
};

struct Aggregate {
  ModelParams params;
  AggregationWeights weights;
  std::vector<std::string> flags;
};

// Raw (unfloored) effective ranks; values[l] is empty for layers without a
// spectrum, else one entry per client.
struct ErTable {
  std::vector<std::string> layers;
  std::vector<std::optional<std::vector<double>>> values;
};

namespace detail {

inline void require_clients(std::span<const ModelParams> clients) {
  if (clients.empty()) throw InvalidArgumentError("aggregation needs at least one client");
  for (const auto& c : clients) require_congruent(clients.front(), c, "aggregation");
}

inline std::vector<double> uniform(std::size_t k) { return std::vector<double>(k, 1.0 / static_cast<double>(k)); }

inline std::vector<double> normalized(std::span<const double> w) {
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<double> out(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) out[k] = w[k] / total;
  return out;
}

}  // namespace detail

// Every layer l becomes sum_k alpha[l][k] * client_k[l], accumulated in
// client order.
inline ModelParams weighted_average(std::span<const ModelParams> clients, const AggregationWeights& w) {
  detail::require_clients(clients);
  ModelParams out = zeros_like(clients.front());
  if (w.alpha.size() != out.size()) throw ShapeMismatchError("aggregation weights do not cover every layer");
  for (std::size_t l = 0; l < out.size(); ++l) {
    if (w.alpha[l].size() != clients.size()) throw ShapeMismatchError("aggregation weights do not cover every client");
    auto& acc = out.layers[l].values;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      const double a = w.alpha[l][k];
      const auto& v = clients[k].layers[l].values;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a * v[i];
    }
  }
  return out;
}

inline ErTable compute_layer_ers(std::span<const ModelParams> clients, int unfold_mode, metrics::NoiseMode noise,
                                 std::optional<double> override_value = std::nullopt) {
  detail::require_clients(clients);
  ErTable t;
  for (std::size_t l = 0; l < clients.front().size(); ++l) {
    const auto& ref = clients.front().layers[l];
    t.layers.push_back(ref.name);
    if (!ref.has_spectrum()) {
      t.values.emplace_back();
      continue;
    }
    std::vector<double> ers;
    for (const auto& c : clients) {
      ers.push_back(override_value ? *override_value
                                   : *metrics::layer_effective_rank(c.layers[l], unfold_mode, noise));
    }
    t.values.emplace_back(std::move(ers));
  }
  return t;
}

inline ErTable compute_layer_ers(std::span<const ModelParams> clients, const FederationConfig& cfg) {
  return compute_layer_ers(clients, cfg.unfold_mode, cfg.noise_mode, cfg.er_override);
}

// alpha_k = max(floor, er_k) / sum_j max(floor, er_j).
inline std::vector<double> floored_alphas(std::span<const double> ers, double er_floor) {
  std::vector<double> floored(ers.size());
  for (std::size_t k = 0; k < ers.size(); ++k) floored[k] = std::max(er_floor, ers[k]);
  return detail::normalized(floored);
}

// Floored effective-rank shares for every layer that has a spectrum.
inline AggregationWeights compute_layer_alphas(const ErTable& ers, double er_floor) {
  AggregationWeights w;
  for (std::size_t l = 0; l < ers.layers.size(); ++l) {
    if (!ers.values[l]) continue;
    w.layers.push_back(ers.layers[l]);
    w.alpha.push_back(floored_alphas(*ers.values[l], er_floor));
  }
  return w;
}

inline AggregationWeights compute_layer_alphas(std::span<const ModelParams> clients, const FederationConfig& cfg) {
  return compute_layer_alphas(compute_layer_ers(clients, cfg), cfg.er_floor);
}

inline Aggregate aggregate_fedavg(std::span<const ModelParams> clients, std::span<const std::size_t> samples) {
  detail::require_clients(clients);
  if (samples.size() != clients.size()) throw InvalidArgumentError("one sample count per client required");
  const std::size_t n = std::accumulate(samples.begin(), samples.end(), std::size_t{0});
  if (n == 0) throw InvalidArgumentError("FedAvg: total sample count is zero");
  std::vector<double> share(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) share[k] = static_cast<double>(samples[k]) / static_cast<double>(n);
  Aggregate out;
  for (const auto& l : clients.front().layers) {
    out.weights.layers.push_back(l.name);
    out.weights.alpha.push_back(share);
  }
  out.params = weighted_average(clients, out.weights);
  return out;
}

// Raw effective-rank shares on 4-D layers, 1/K elsewhere. Throws
// DegenerateLayerError when a conv layer's effective ranks sum to zero.
inline Aggregate aggregate_feder_naive(std::span<const ModelParams> clients, const ErTable& ers) {
  detail::require_clients(clients);
  Aggregate out;
  for (std::size_t l = 0; l < clients.front().size(); ++l) {
    const auto& layer = clients.front().layers[l];
    out.weights.layers.push_back(layer.name);
    if (!layer.is_conv()) {
      out.weights.alpha.push_back(detail::uniform(clients.size()));
      continue;
    }
    const auto& er = ers.values.at(l).value();
    if (!(std::accumulate(er.begin(), er.end(), 0.0) > 0.0)) throw DegenerateLayerError(layer.name);
    out.weights.alpha.push_back(detail::normalized(er));
  }
  out.params = weighted_average(clients, out.weights);
  return out;
}

inline Aggregate aggregate_feder_naive(std::span<const ModelParams> clients, const FederationConfig& cfg) {
  return aggregate_feder_naive(clients, compute_layer_ers(clients, cfg));
}

// Walks layers in model order. Conv layers (and, with dense_own_er, 2-D
// layers) use their floored effective-rank shares and become the inherited
// weights; all other layers use the inherited weights, which start at 1/K.
inline Aggregate aggregate_feder_improved(std::span<const ModelParams> clients, const ErTable& ers, double er_floor,
                                          bool dense_own_er = false) {
  detail::require_clients(clients);
  Aggregate out;
  std::vector<double> previous = detail::uniform(clients.size());
  for (std::size_t l = 0; l < clients.front().size(); ++l) {
    const auto& layer = clients.front().layers[l];
    out.weights.layers.push_back(layer.name);
    if (layer.is_conv() || (dense_own_er && layer.rank() == 2)) {
      previous = floored_alphas(ers.values.at(l).value(), er_floor);
    }
    out.weights.alpha.push_back(previous);
  }
  out.params = weighted_average(clients, out.weights);
  return out;
}

inline Aggregate aggregate_feder_improved(std::span<const ModelParams> clients, const FederationConfig& cfg) {
  return aggregate_feder_improved(clients, compute_layer_ers(clients, cfg), cfg.er_floor, cfg.dense_own_er);
}

// variances[k][l]: client k's gradient second moment on layer l. Layers where
// any client's value is not positive fall back to 1/K and are flagged.
inline Aggregate aggregate_precision(std::span<const ModelParams> clients,
                                     std::span<const std::vector<double>> variances) {
  detail::require_clients(clients);
  if (variances.size() != clients.size()) throw InvalidArgumentError("one variance vector per client required");
  Aggregate out;
  for (std::size_t l = 0; l < clients.front().size(); ++l) {
    const auto& name = clients.front().layers[l].name;
    out.weights.layers.push_back(name);
    std::vector<double> inv(clients.size());
    bool ok = true;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      const double v = variances[k].at(l);
      if (!(v > 0.0) || !std::isfinite(1.0 / v)) {
        ok = false;
        break;
      }
      inv[k] = 1.0 / v;
    }
    if (ok) {
      out.weights.alpha.push_back(detail::normalized(inv));
    } else {
      out.weights.alpha.push_back(detail::uniform(clients.size()));
      out.flags.push_back("precision_uniform:" + name);
    }
  }
  out.params = weighted_average(clients, out.weights);
  return out;
}

// ---------------------------------------------------------------------------
// Rounds

struct ClientRoundStats {
  std::size_t client = 0;
  std::size_t samples = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> gamma;  // FedProx only
  std::vector<std::pair<std::string, double>> effective_ranks;  // raw, per spectrum-bearing layer
  std::vector<std::pair<std::string, double>> alphas;           // per layer
};

struct RoundReport {
  std::string strategy;
  std::size_t round = 0;
  std::vector<ClientRoundStats> clients;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double q_er = 0.0;  // Q_ER of the aggregated model; -inf if it has no rank
  std::vector<std::string> flags;
  double wall_time_ms = 0.0;

  double mean_train_loss() const {
    if (clients.empty()) return 0.0;
    double s = 0.0;
    for (const auto& c : clients) s += c.train_loss;
    return s / static_cast<double>(clients.size());
  }
};

struct RoundResult {
  ModelParams params;
  RoundReport report;
};

namespace detail {

// Runs fn(k) for every client, on up to `workers` threads. Exceptions are
// rethrown in client order.
template <class F>
void for_each_client(std::size_t count, std::size_t workers, F&& fn) {
  std::vector<std::exception_ptr> errors(count);
  if (workers <= 1 || count <= 1) {
    for (std::size_t k = 0; k < count; ++k) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, count); ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < count; k = next++) {
          try {
            fn(k);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline double q_er_of(const ModelParams& p, const FederationConfig& cfg) {
  std::vector<double> ers;
  for (const auto& l : p.layers) {
    if (!l.has_spectrum()) continue;
    ers.push_back(cfg.er_override ? *cfg.er_override : *metrics::layer_effective_rank(l, cfg.unfold_mode, cfg.noise_mode));
  }
  if (ers.empty()) return -std::numeric_limits<double>::infinity();
  try {
    return metrics::model_effective_rank(ers, ers.size());
  } catch (const NegativeInfinityError&) {
    return -std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

// One synchronous round: local updates for every client, aggregation by the
// configured strategy, evaluation of the new server model on `test`.
template <nn::Model M>
RoundResult run_round(const M& model, const ModelParams& server, std::vector<ClientState>& clients,
                      const data::Dataset& train, const data::Dataset& test, const FederationConfig& cfg,
                      std::size_t round) {
  cfg.validate();
  if (clients.empty()) throw InvalidArgumentError("run_round needs at least one client");
  const auto started = std::chrono::steady_clock::now();
  const bool prox = cfg.strategy == Strategy::fed_prox;

  std::vector<std::optional<double>> gammas(clients.size());
  std::vector<nn::Evaluation> train_eval(clients.size());
  detail::for_each_client(clients.size(), cfg.workers, [&](std::size_t k) {
    if (prox) {
      gammas[k] = client_update_prox(model, clients[k], server, train, cfg);
    } else {
      client_update(model, clients[k], server, train, cfg);
    }
    train_eval[k] = model.evaluate(clients[k].params, train, clients[k].shard);
  });

  std::vector<ModelParams> params;
  std::vector<std::size_t> samples;
  for (const auto& c : clients) {
    params.push_back(c.params);
    samples.push_back(cfg.fedavg_weighting == SampleWeighting::samples ? c.shard.size() : 1);
  }
  const ErTable ers = compute_layer_ers(params, cfg);

  Aggregate agg;
  switch (cfg.strategy) {
    case Strategy::fed_avg:
    case Strategy::fed_prox: agg = aggregate_fedavg(params, samples); break;
    case Strategy::fed_er_naive: agg = aggregate_feder_naive(params, ers); break;
    case Strategy::fed_er_improved: agg = aggregate_feder_improved(params, ers, cfg.er_floor, cfg.dense_own_er); break;
    case Strategy::precision: {
      std::vector<std::vector<double>> v;
      for (const auto& c : clients) v.push_back(c.grad_second_moment);
      agg = aggregate_precision(params, v);
      break;
    }
  }

  RoundReport r;
  r.strategy = std::string(to_string(cfg.strategy));
  r.round = round;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    ClientRoundStats s;
    s.client = clients[k].id;
    s.samples = clients[k].shard.size();
    s.train_loss = train_eval[k].loss;
    s.train_accuracy = train_eval[k].accuracy;
    s.gamma = gammas[k];
    for (std::size_t l = 0; l < ers.layers.size(); ++l) {
      if (ers.values[l]) s.effective_ranks.emplace_back(ers.layers[l], (*ers.values[l])[k]);
    }
    for (std::size_t l = 0; l < agg.weights.layers.size(); ++l) {
      s.alphas.emplace_back(agg.weights.layers[l], agg.weights.alpha[l][k]);
    }
    r.clients.push_back(std::move(s));
  }
  std::vector<std::size_t> all(test.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto ev = model.evaluate(agg.params, test, all);
  r.test_loss = ev.loss;
  r.test_accuracy = ev.accuracy;
  r.q_er = detail::q_er_of(agg.params, cfg);
  r.flags = std::move(agg.flags);
  r.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return {std::move(agg.params), std::move(r)};
}

}  // namespace feder::fl
