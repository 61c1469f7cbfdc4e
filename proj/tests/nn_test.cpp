#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "feder/nn.hpp"
#include "test_util.hpp"

using namespace feder;
using namespace feder::nn;
using data::Dataset;

namespace {

Dataset random_dataset(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t classes,
                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  std::uniform_int_distribution<std::size_t> y(0, classes - 1);
  Dataset d{c, h, w, classes, std::vector<double>(n * c * h * w), {}};
  for (double& x : d.inputs) x = u(rng);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(y(rng));
  return d;
}

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// Direct evaluation of a valid cross-correlation, one output at a time.
double brute_conv_at(const std::vector<double>& in, std::size_t h, std::size_t w, std::size_t cin,
                     const std::vector<double>& weight, std::size_t k, std::size_t cout, std::size_t co,
                     std::size_t y, std::size_t x) {
  double s = 0.0;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const linalg::Tensor4 t({k, k, cin, cout}, weight);
        s += in[ci * h * w + (y + ky) * w + (x + kx)] * t(ky, kx, ci, co);
      }
    }
  }
  return s;
}

}  // namespace

TEST(Conv2d, HandSetTwoByTwo) {
  // 1-channel 2x2 input, 2x2 kernel, valid padding: a single dot product.
  const std::vector<double> in = {1, 2, 3, 4};
  const std::vector<double> w = {0.5, -1, 2, 0.25};
  const auto out = conv2d_forward(in, {1, 2, 2, 1, 2}, w, std::vector<double>{0.0});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0], 1 * 0.5 + 2 * -1 + 3 * 2 + 4 * 0.25);
}

TEST(Conv2d, IdentityOneByOne) {
  const std::vector<double> in = {1, -2, 3, 4, 5, -6};
  const auto out = conv2d_forward(in, {1, 2, 3, 1, 1}, std::vector<double>{1.0}, std::vector<double>{0.0});
  EXPECT_EQ(out, in);
}

TEST(Conv2d, MatchesBruteForceMultiChannel) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  const std::size_t cin = 3, h = 5, w = 6, k = 3, cout = 4;
  std::vector<double> in(cin * h * w), weight(k * k * cin * cout), bias(cout);
  for (double& x : in) x = u(rng);
  for (double& x : weight) x = u(rng);
  for (double& x : bias) x = u(rng);
  const ConvShape s{cin, h, w, cout, k};
  const auto out = conv2d_forward(in, s, weight, bias);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t y = 0; y < s.out_height(); ++y) {
      for (std::size_t x = 0; x < s.out_width(); ++x) {
        EXPECT_NEAR(out[(co * s.out_height() + y) * s.out_width() + x],
                    bias[co] + brute_conv_at(in, h, w, cin, weight, k, cout, co, y, x), 1e-12);
      }
    }
  }
}

TEST(MicroConvNet, ZeroWeightsGiveUniformScores) {
  const MicroConvNet net;
  const auto p = zeros_like(net.init(0));
  std::mt19937_64 rng(2);
  const auto d = random_dataset(3, 3, 8, 8, 10, rng);
  for (const auto& scores : net.predict(p, d, all_indices(d))) {
    const auto probs = softmax(scores);
    for (double q : probs) EXPECT_DOUBLE_EQ(q, 0.1);
  }
  // Uniform prediction over C classes costs ln C.
  EXPECT_NEAR(net.loss_and_gradient(p, d, all_indices(d)).loss, std::log(10.0), 1e-12);
}

TEST(MicroConvNet, InitShapesAndDeterminism) {
  const MicroConvNet net;
  const auto a = net.init(42);
  EXPECT_EQ(a, net.init(42));
  EXPECT_NE(a, net.init(43));
  EXPECT_EQ(a.layers[0].shape, (std::vector<std::size_t>{3, 3, 3, 8}));
  EXPECT_EQ(a.layers[2].shape, (std::vector<std::size_t>{3, 3, 8, 16}));
  EXPECT_EQ(a.layers[4].shape, (std::vector<std::size_t>{10, 16}));
  const double limit = std::sqrt(6.0 / (27.0 + 72.0));
  for (double v : a.layers[0].values) EXPECT_LE(std::abs(v), limit);
}

TEST(MicroConvNet, RejectsShapeMismatch) {
  const MicroConvNet net;
  std::mt19937_64 rng(3);
  const auto d = random_dataset(2, 1, 8, 8, 10, rng);  // wrong channel count
  const auto idx = all_indices(d);
  EXPECT_THROW(net.loss_and_gradient(net.init(0), d, idx), ShapeMismatchError);
  const MicroConvNet other({3, 8, 8, 5});
  const auto d3 = random_dataset(2, 3, 8, 8, 10, rng);
  EXPECT_THROW(net.loss_and_gradient(other.init(0), d3, all_indices(d3)), ShapeMismatchError);
}

TEST(MicroConvNet, LabelOutOfRange) {
  const MicroConvNet net({3, 8, 8, 4});
  std::mt19937_64 rng(4);
  auto d = random_dataset(2, 3, 8, 8, 4, rng);
  d.labels[1] = 4;
  EXPECT_THROW(net.loss_and_gradient(net.init(0), d, all_indices(d)), LabelOutOfRangeError);
}

TEST(CrossEntropy, PerfectPredictionApproachesZero) {
  std::vector<double> scores(5, -20.0);
  scores[2] = 20.0;
  std::vector<double> g(5);
  const double loss = cross_entropy(scores, 2, g);
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-6);
}

TEST(MicroConvNet, GradientMatchesFiniteDifferences) {
  const MicroConvNet net({2, 6, 6, 3, 3, 4, 3});
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = testutil::random_like(net.init(0), rng);
    const auto d = random_dataset(3, 2, 6, 6, 3, rng);
    const auto idx = all_indices(d);
    const auto analytic = net.loss_and_gradient(p, d, idx).grad;
    const auto numeric =
        testutil::numeric_gradient(p, [&](const ModelParams& q) { return net.loss_and_gradient(q, d, idx).loss; });
    EXPECT_LT(testutil::relative_error(analytic, numeric), 1e-4);
  }
}

TEST(LinearSoftmax, GradientMatchesFiniteDifferences) {
  const LinearSoftmax lin(6, 4);
  std::mt19937_64 rng(6);
  const auto p = testutil::random_like(lin.init(0), rng);
  const auto d = random_dataset(4, 1, 2, 3, 4, rng);
  const auto idx = all_indices(d);
  const auto analytic = lin.loss_and_gradient(p, d, idx).grad;
  const auto numeric =
      testutil::numeric_gradient(p, [&](const ModelParams& q) { return lin.loss_and_gradient(q, d, idx).loss; });
  EXPECT_LT(testutil::relative_error(analytic, numeric), 1e-6);
}

TEST(LinearSoftmax, SmallSgdStepDecreasesLoss) {
  const LinearSoftmax lin(4, 3);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = testutil::random_like(lin.init(0), rng);
    const auto d = random_dataset(4, 1, 1, 4, 3, rng);
    const auto idx = all_indices(d);
    const auto before = lin.loss_and_gradient(p, d, idx);
    auto opt = make_optimizer({OptimizerKind::sgd, 1e-3, 0.9, 0.999, 1e-8, 0.0}, p);
    optimizer_step(opt, p, before.grad);
    EXPECT_LT(lin.loss_and_gradient(p, d, idx).loss, before.loss);
  }
}

TEST(Optimizer, SgdExample) {
  ModelParams w{{Layer("w", {1}, {1.0})}};
  const ModelParams g{{Layer("w", {1}, {1.0})}};
  auto opt = make_optimizer({OptimizerKind::sgd, 0.1, 0.9, 0.999, 1e-8, 0.0}, w);
  optimizer_step(opt, w, g);
  EXPECT_DOUBLE_EQ(w.layers[0].values[0], 0.9);
  EXPECT_EQ(opt.step_count, 1u);
}

TEST(Optimizer, SgdWeightDecayIsAddedToGradient) {
  ModelParams w{{Layer("w", {1}, {2.0})}};
  const ModelParams g{{Layer("w", {1}, {0.5})}};
  auto opt = make_optimizer({OptimizerKind::sgd, 0.1, 0.9, 0.999, 1e-8, 0.25}, w);
  optimizer_step(opt, w, g);
  EXPECT_DOUBLE_EQ(w.layers[0].values[0], 2.0 - 0.1 * (0.5 + 0.25 * 2.0));
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  // m_hat = g and v_hat = g^2 after bias correction, so the step is
  // -lr * g / (|g| + eps).
  for (double g0 : {1e-3, -0.2, 5.0, -300.0}) {
    ModelParams w{{Layer("w", {2}, {1.0, -1.0})}};
    const ModelParams g{{Layer("w", {2}, {g0, g0})}};
    auto opt = make_optimizer({OptimizerKind::adam, 0.01, 0.9, 0.999, 1e-8, 0.0}, w);
    optimizer_step(opt, w, g);
    const double expected = -0.01 * std::copysign(1.0, g0);
    EXPECT_NEAR(w.layers[0].values[0] - 1.0, expected, 1e-3 * 0.01);
    EXPECT_NEAR(w.layers[0].values[1] + 1.0, expected, 1e-3 * 0.01);
  }
}

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(8);
  const MicroConvNet net;
  const auto p0 = net.init(1);
  const auto zero = zeros_like(p0);
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto p = p0;
    auto opt = make_optimizer({kind, 0.1, 0.9, 0.999, 1e-8, 0.0}, p);
    for (int i = 0; i < 3; ++i) optimizer_step(opt, p, zero);
    EXPECT_EQ(p, p0);
  }
}

TEST(Optimizer, RejectsBadConfigAndShapes) {
  const MicroConvNet net;
  auto p = net.init(0);
  EXPECT_THROW(make_optimizer({OptimizerKind::adam, 0.1, 1.0, 0.999, 1e-8, 0.0}, p), InvalidArgumentError);
  EXPECT_THROW(make_optimizer({OptimizerKind::adam, 0.1, 0.9, 0.999, 0.0, 0.0}, p), InvalidArgumentError);
  auto opt = make_optimizer({}, p);
  const ModelParams wrong{{Layer("w", {1}, {1.0})}};
  EXPECT_THROW(optimizer_step(opt, p, wrong), ShapeMismatchError);
}

TEST(Optimizer, DeterministicTraining) {
  const MicroConvNet net;
  std::mt19937_64 rng(9);
  const auto d = random_dataset(8, 3, 8, 8, 10, rng);
  const auto idx = all_indices(d);
  auto run = [&] {
    auto p = net.init(5);
    auto opt = make_optimizer({OptimizerKind::adam, 1e-2, 0.9, 0.999, 1e-8, 1e-4}, p);
    for (int i = 0; i < 5; ++i) optimizer_step(opt, p, net.loss_and_gradient(p, d, idx).grad);
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, StepLr) {
  const auto s = LrSchedule::step_lr(25, 0.5);
  EXPECT_EQ(schedule_lr(s, 0, 0.1), 0.1);
  EXPECT_EQ(schedule_lr(s, 24, 0.1), 0.1);
  EXPECT_EQ(schedule_lr(s, 25, 0.1), 0.05);
  EXPECT_EQ(schedule_lr(s, 75, 0.1), 0.1 * 0.125);
  EXPECT_EQ(schedule_lr(LrSchedule{}, 1000, 0.1), 0.1);
  EXPECT_THROW(schedule_lr(LrSchedule::step_lr(0, 0.5), 3, 0.1), InvalidArgumentError);
}
