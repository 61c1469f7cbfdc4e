#pragma once

// Synthetic image-like classification data and client partitioning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feder/error.hpp"
#include "feder/params.hpp"

namespace feder::data {

struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t class_count = 0;
  std::vector<double> inputs;  // n x (channels * height * width), CHW per sample
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return channels * height * width; }
  std::span<const double> sample(std::size_t i) const {
    return std::span<const double>(inputs).subspan(i * sample_size(), sample_size());
  }

  void validate() const {
    if (labels.empty()) throw InvalidArgumentError("dataset must contain at least one sample");
    if (class_count == 0) throw InvalidArgumentError("dataset class_count must be positive");
    if (inputs.size() != labels.size() * sample_size()) throw ShapeMismatchError("dataset inputs/labels size mismatch");
    for (auto y : labels) {
      if (y >= class_count) throw LabelOutOfRangeError("label " + std::to_string(y) + " >= class_count");
    }
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{channels, height, width, class_count, {}, {}};
    out.inputs.reserve(idx.size() * sample_size());
    out.labels.reserve(idx.size());
    for (auto i : idx) {
      auto s = sample(i);
      out.inputs.insert(out.inputs.end(), s.begin(), s.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

struct BlobOptions {
  // Each class template is offset_scale * (per-channel offset) +
  // pattern_scale * (per-pixel pattern), both standard normal draws.
  // Inputs are deliberately left unnormalized (std around 8): at this scale
  // plain SGD with lr 1e-3 trains MicroConvNet within a 20-round budget.
  double offset_scale = 8.0;
  double pattern_scale = 8.0;
  double noise_std = 8.0;
};

// Sample i has label i % class_count; deterministic per seed.
inline Dataset generate_blobs(std::uint64_t seed, std::size_t class_count, std::size_t channels, std::size_t height,
                              std::size_t width, std::size_t samples_per_class, const BlobOptions& opt = {}) {
  if (class_count == 0 || channels == 0 || height == 0 || width == 0 || samples_per_class == 0) {
    throw InvalidArgumentError("generate_blobs: all counts must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t hw = height * width;
  const std::size_t sz = channels * hw;

  std::vector<std::vector<double>> templates(class_count, std::vector<double>(sz));
  for (auto& t : templates) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double offset = opt.offset_scale * normal(rng);
      for (std::size_t p = 0; p < hw; ++p) t[c * hw + p] = offset + opt.pattern_scale * normal(rng);
    }
  }

  Dataset d{channels, height, width, class_count, {}, {}};
  const std::size_t n = class_count * samples_per_class;
  d.inputs.reserve(n * sz);
  d.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i % class_count;
    for (std::size_t j = 0; j < sz; ++j) d.inputs.push_back(templates[y][j] + opt.noise_std * normal(rng));
    d.labels.push_back(y);
  }
  return d;
}

// Holds out round(fraction * class size) samples of every class, taking each
// class's last samples in dataset order.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& d, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw InvalidArgumentError("holdout fraction must be in [0, 1)");
  std::vector<std::vector<std::size_t>> by_class(d.class_count);
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
  std::vector<char> is_test(d.size(), 0);
  for (const auto& idx : by_class) {
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    for (std::size_t j = idx.size() - std::min(k, idx.size()); j < idx.size(); ++j) is_test[idx[j]] = 1;
  }
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < d.size(); ++i) (is_test[i] ? test : train).push_back(i);
  return {d.subset(train), d.subset(test)};
}

struct PartitionMode {
  enum class Kind { iid, dirichlet } kind = Kind::iid;
  double beta = 0.5;

  static PartitionMode iid() { return {Kind::iid, 0.5}; }
  static PartitionMode dirichlet(double beta) { return {Kind::dirichlet, beta}; }
};

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> client_indices;

  std::size_t clients() const noexcept { return client_indices.size(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> n;
    for (const auto& c : client_indices) n.push_back(c.size());
    return n;
  }
};

namespace detail {

inline std::vector<std::size_t> shuffled_range(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline PartitionPlan split_iid(std::size_t n, std::size_t clients, std::mt19937_64& rng) {
  const auto idx = shuffled_range(n, rng);
  PartitionPlan plan;
  plan.client_indices.resize(clients);
  const std::size_t base = n / clients, extra = n % clients;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < clients; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    plan.client_indices[k].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                  idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return plan;
}

inline PartitionPlan split_dirichlet(const Dataset& d, std::size_t clients, double beta, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(beta, 1.0);
  PartitionPlan plan;
  plan.client_indices.resize(clients);
  for (std::size_t c = 0; c < d.class_count; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.labels[i] == c) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<double> p(clients);
    for (auto& x : p) x = gamma(rng);
    double total = std::accumulate(p.begin(), p.end(), 0.0);
    if (!(total > 0.0)) {
      std::fill(p.begin(), p.end(), 1.0);
      total = static_cast<double>(clients);
    }
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t k = 0; k < clients; ++k) {
      cum += p[k];
      const std::size_t end = (k + 1 == clients)
                                  ? members.size()
                                  : std::min(members.size(), static_cast<std::size_t>(std::llround(
                                                                 cum / total * static_cast<double>(members.size()))));
      for (std::size_t j = start; j < std::max(start, end); ++j) plan.client_indices[k].push_back(members[j]);
      start = std::max(start, end);
    }
  }
  for (auto& c : plan.client_indices) std::sort(c.begin(), c.end());
  return plan;
}

}  // namespace detail

// Disjoint client shards. Dirichlet draws are retried until every client
// receives at least one sample.
inline PartitionPlan partition(const Dataset& d, std::size_t clients, PartitionMode mode, std::uint64_t seed) {
  if (clients == 0) throw InvalidArgumentError("partition needs at least one client");
  if (clients > d.size()) {
    throw InvalidArgumentError("partition: " + std::to_string(clients) + " clients exceed dataset size " +
                               std::to_string(d.size()));
  }
  std::mt19937_64 rng(seed);
  if (mode.kind == PartitionMode::Kind::iid || clients == 1) return detail::split_iid(d.size(), clients, rng);
  if (!(mode.beta > 0.0)) throw InvalidArgumentError("dirichlet beta must be positive");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto plan = detail::split_dirichlet(d, clients, mode.beta, rng);
    if (std::none_of(plan.client_indices.begin(), plan.client_indices.end(),
                     [](const auto& c) { return c.empty(); })) {
      return plan;
    }
  }
  throw InvalidArgumentError("dirichlet partition could not give every client a sample");
}

// Export through the ModelParams container: layers "inputs" [n, c, h, w],
// "labels" [n] and "class_count" [1].
inline ModelParams to_params(const Dataset& d) {
  ModelParams p;
  p.layers.emplace_back("inputs", std::vector<std::size_t>{d.size(), d.channels, d.height, d.width}, d.inputs);
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  p.layers.emplace_back("labels", std::vector<std::size_t>{d.size()}, std::move(labels));
  p.layers.emplace_back("class_count", std::vector<std::size_t>{1},
                        std::vector<double>{static_cast<double>(d.class_count)});
  return p;
}

inline Dataset from_params(const ModelParams& p) {
  const auto& in = p.find("inputs");
  const auto& lab = p.find("labels");
  const auto& cc = p.find("class_count");
  if (in.rank() != 4 || lab.rank() != 1 || cc.size() != 1 || in.shape[0] != lab.size()) {
    throw ShapeMismatchError("dataset container has unexpected shapes");
  }
  Dataset d{in.shape[1], in.shape[2], in.shape[3], static_cast<std::size_t>(cc.values[0]), in.values, {}};
  for (double y : lab.values) {
    if (y < 0.0 || y != std::floor(y)) throw InvalidArgumentError("dataset labels must be non-negative integers");
    d.labels.push_back(static_cast<std::size_t>(y));
  }
  d.validate();
  return d;
}

}  // namespace feder::data
