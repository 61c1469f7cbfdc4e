#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "feder/data.hpp"
#include "feder/nn.hpp"

using namespace feder;
using namespace feder::data;

TEST(GenerateBlobs, DeterministicPerSeed) {
  EXPECT_EQ(generate_blobs(7, 3, 2, 4, 4, 5), generate_blobs(7, 3, 2, 4, 4, 5));
  EXPECT_NE(generate_blobs(7, 3, 2, 4, 4, 5), generate_blobs(8, 3, 2, 4, 4, 5));
}

TEST(GenerateBlobs, Counting) {
  const auto d = generate_blobs(1, 3, 1, 2, 2, 10);
  EXPECT_EQ(d.size(), 30u);
  std::map<std::size_t, int> counts;
  for (auto y : d.labels) ++counts[y];
  EXPECT_EQ(counts, (std::map<std::size_t, int>{{0, 10}, {1, 10}, {2, 10}}));
  EXPECT_NO_THROW(d.validate());
  EXPECT_THROW(generate_blobs(1, 0, 1, 2, 2, 10), InvalidArgumentError);
}

TEST(GenerateBlobs, DefaultDatasetIsLinearlySeparable) {
  // Oracle: a multinomial logistic-regression probe trained on the default
  // desk-scale dataset.
  const auto d = generate_blobs(0, 10, 3, 8, 8, 200);
  const nn::LinearSoftmax probe(d.sample_size(), d.class_count);
  auto p = probe.init(0);
  auto opt = nn::make_optimizer({nn::OptimizerKind::adam, 1e-2, 0.9, 0.999, 1e-8, 0.0}, p);
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int epoch = 0; epoch < 5; ++epoch) {
    for (std::size_t s = 0; s < idx.size(); s += 50) {
      const auto batch = std::span<const std::size_t>(idx).subspan(s, std::min<std::size_t>(50, idx.size() - s));
      nn::optimizer_step(opt, p, probe.loss_and_gradient(p, d, batch).grad);
    }
  }
  EXPECT_GT(probe.evaluate(p, d, idx).accuracy, 0.9);
}

TEST(SplitHoldout, PerClassFraction) {
  const auto d = generate_blobs(2, 4, 1, 3, 3, 10);
  const auto [train, test] = split_holdout(d, 0.2);
  EXPECT_EQ(train.size(), 32u);
  EXPECT_EQ(test.size(), 8u);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(std::count(test.labels.begin(), test.labels.end(), c), 2);
}

TEST(Partition, IidEqualShares) {
  const auto d = generate_blobs(3, 4, 1, 2, 2, 25);
  const auto plan = partition(d, 4, PartitionMode::iid(), 0);
  EXPECT_EQ(plan.sizes(), (std::vector<std::size_t>{25, 25, 25, 25}));
}

TEST(Partition, SingleClientGetsEverything) {
  const auto d = generate_blobs(3, 3, 1, 2, 2, 7);
  for (auto mode : {PartitionMode::iid(), PartitionMode::dirichlet(0.1)}) {
    auto plan = partition(d, 1, mode, 9);
    ASSERT_EQ(plan.clients(), 1u);
    auto idx = plan.client_indices[0];
    std::sort(idx.begin(), idx.end());
    std::vector<std::size_t> all(d.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    EXPECT_EQ(idx, all);
  }
}

TEST(Partition, DisjointNonEmptyAndDeterministic) {
  const auto d = generate_blobs(4, 5, 1, 2, 2, 20);
  for (auto mode : {PartitionMode::iid(), PartitionMode::dirichlet(0.5), PartitionMode::dirichlet(0.1)}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto plan = partition(d, 4, mode, seed);
      std::set<std::size_t> seen;
      std::size_t total = 0;
      for (const auto& c : plan.client_indices) {
        EXPECT_FALSE(c.empty());
        total += c.size();
        seen.insert(c.begin(), c.end());
      }
      EXPECT_EQ(seen.size(), total);
      EXPECT_LE(total, d.size());
      EXPECT_EQ(plan.client_indices, partition(d, 4, mode, seed).client_indices);
    }
  }
}

TEST(Partition, SmallBetaSkewsLabels) {
  const auto d = generate_blobs(5, 3, 1, 2, 2, 100);
  int skewed_trials = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto plan = partition(d, 4, PartitionMode::dirichlet(0.1), seed);
    bool skewed = false;
    for (const auto& c : plan.client_indices) {
      std::map<std::size_t, std::size_t> counts;
      for (auto i : c) ++counts[d.labels[i]];
      std::size_t top = 0;
      for (const auto& [_, n] : counts) top = std::max(top, n);
      if (static_cast<double>(top) > 0.6 * static_cast<double>(c.size())) skewed = true;
    }
    if (skewed) ++skewed_trials;
  }
  EXPECT_GE(skewed_trials, 8);
}

TEST(Partition, Errors) {
  const auto d = generate_blobs(6, 2, 1, 1, 1, 2);
  EXPECT_THROW(partition(d, 5, PartitionMode::iid(), 0), InvalidArgumentError);
  EXPECT_THROW(partition(d, 0, PartitionMode::iid(), 0), InvalidArgumentError);
  EXPECT_THROW(partition(d, 2, PartitionMode::dirichlet(0.0), 0), InvalidArgumentError);
}

TEST(DatasetExport, RoundTripsThroughParamsSerialization) {
  const auto d = generate_blobs(8, 3, 2, 3, 3, 4);
  EXPECT_EQ(from_params(deserialize(serialize(to_params(d)))), d);
}
