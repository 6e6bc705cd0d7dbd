#include <gtest/gtest.h>

#include <random>

#include "lesionforge/ndtensor.hpp"
#include "support/oracles.hpp"

using namespace lesionforge;
using lesionforge::oracle::finite_difference;
using lesionforge::oracle::random_tensor;
using lesionforge::oracle::relative_error;

TEST(DenseTensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor a({2, 2}), b({4});
  EXPECT_THROW(a += b, ShapeError);
}

TEST(Conv2d, ScalarAffine) {
  Tensor in({1, 1, 1}, {5.0});
  Tensor k({1, 1, 1, 1}, {2.0});
  std::vector<double> bias{1.0};
  EXPECT_EQ(conv2d_forward<double>(in, k, bias)[0], 11.0);
}

TEST(Conv2d, OverlapCounting) {
  Tensor in({3, 3, 1}, 1.0);
  Tensor k({3, 3, 1, 1}, 1.0);
  std::vector<double> bias{0.0};
  const auto out = conv2d_forward<double>(in, k, bias);
  EXPECT_EQ(out.at(1, 1, 0), 9.0);
  EXPECT_EQ(out.at(0, 0, 0), 4.0);
  EXPECT_EQ(out.at(2, 2, 0), 4.0);
  EXPECT_EQ(out.at(0, 1, 0), 6.0);
  EXPECT_EQ(out.at(1, 2, 0), 6.0);
}

TEST(Conv2d, MatchesNaiveLoopBitForBit) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto in = random_tensor({5, 5, 2}, rng);
    const auto k = random_tensor({3, 3, 2, 4}, rng);
    const auto b = random_tensor({4}, rng);
    const auto fast = conv2d_forward<double>(in, k, b.data());
    const auto ref = oracle::naive_conv(in, k, b.storage());
    for (std::size_t i = 0; i < fast.size(); ++i) ASSERT_EQ(fast[i], ref[i]) << "trial " << trial << " i " << i;
  }
}

TEST(Conv2d, ShapeErrors) {
  Tensor in({4, 4, 2});
  std::vector<double> bias(3);
  EXPECT_THROW(conv2d_forward<double>(in, Tensor({3, 3, 3, 3}), bias), ShapeError);
  EXPECT_THROW(conv2d_forward<double>(in, Tensor({2, 2, 2, 3}), bias), ShapeError);
  EXPECT_THROW(conv2d_forward<double>(in, Tensor({3, 3, 2, 4}), bias), ShapeError);
  EXPECT_THROW(conv2d_backward(Tensor({4, 4, 2}), in, Tensor({3, 3, 2, 3})), ShapeError);
}

TEST(Conv2dBackward, ZeroAndScalar) {
  std::mt19937_64 rng(3);
  const auto in = random_tensor({4, 4, 2}, rng);
  const auto k = random_tensor({3, 3, 2, 3}, rng);
  const auto g = conv2d_backward(Tensor({4, 4, 3}), in, k);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);

  const auto gs = conv2d_backward(Tensor({1, 1, 1}, {3.0}), Tensor({1, 1, 1}, {5.0}), Tensor({1, 1, 1, 1}, {2.0}));
  EXPECT_EQ(gs[0], 6.0);
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto in = random_tensor({5, 4, 2}, rng);
    const auto k = random_tensor({3, 3, 2, 3}, rng);
    const auto b = random_tensor({3}, rng);
    const auto seed = random_tensor({5, 4, 3}, rng);
    auto f = [&](const Tensor& x) { return dot(seed, conv2d_forward<double>(x, k, b.data())); };
    const auto fd = finite_difference(f, in);
    EXPECT_LT(relative_error(conv2d_backward(seed, in, k), fd), 1e-5);
  }
}

TEST(Relu, ForwardBackward) {
  Tensor x({3}, {-1.0, 0.0, 2.0});
  const auto y = relu_forward(x);
  EXPECT_EQ(y.storage(), (std::vector<double>{0.0, 0.0, 2.0}));
  const auto g = relu_backward(Tensor({3}, {5.0, 5.0, 5.0}), x);
  EXPECT_EQ(g.storage(), (std::vector<double>{0.0, 0.0, 5.0}));
}

TEST(Relu, MatchesFiniteDifferencesAwayFromZero) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 4, 3}, rng);
    for (auto& v : x.storage())
      if (std::abs(v) < 1e-3) v = 0.5;
    const auto seed = random_tensor({4, 4, 3}, rng);
    auto f = [&](const Tensor& t) { return dot(seed, relu_forward(t)); };
    EXPECT_LT(relative_error(relu_backward(seed, x), finite_difference(f, x)), 1e-8);
  }
}

TEST(MaxPool, SmallPlaneAndRouting) {
  Tensor x({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  auto r = maxpool2_forward(x);
  ASSERT_EQ(r.output.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(r.output[0], 4.0);
  const auto g = maxpool2_backward<double>(Tensor({1, 1, 1}, {1.0}), r.argmax, r.input_shape);
  EXPECT_EQ(g.at(1, 1, 0), 1.0);
  EXPECT_EQ(sum(g), 1.0);
}

TEST(MaxPool, TiesRouteToFirstElement) {
  Tensor x({4, 4, 1}, 0.7);
  auto r = maxpool2_forward(x);
  for (double v : r.output.data()) EXPECT_EQ(v, 0.7);
  const auto g = maxpool2_backward<double>(Tensor({2, 2, 1}, 1.0), r.argmax, r.input_shape);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xx = 0; xx < 4; ++xx)
      EXPECT_EQ(g.at(y, xx, 0), (y % 2 == 0 && xx % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPool, MatchesWindowScanAndConservesMass) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor({6, 6, 3}, rng);
    auto r = maxpool2_forward(x);
    EXPECT_EQ(r.output, oracle::naive_maxpool(x));
    const auto seed = random_tensor(r.output.shape(), rng);
    const auto g = maxpool2_backward<double>(seed, r.argmax, r.input_shape);
    EXPECT_NEAR(sum(g), sum(seed), 1e-12);
    auto f = [&](const Tensor& t) { return dot(seed, maxpool2_forward(t).output); };
    EXPECT_LT(relative_error(g, finite_difference(f, x)), 1e-8);
  }
}

TEST(MaxPool, OddExtentsTruncate) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({5, 7, 2}, rng);
  const auto r = maxpool2_forward(x);
  EXPECT_EQ(r.output.shape(), (Shape{2, 3, 2}));
  const auto g = maxpool2_backward<double>(Tensor(r.output.shape(), 1.0), r.argmax, r.input_shape);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t xx = 0; xx < 7; ++xx) EXPECT_EQ(g.at(4, xx, c), 0.0);
    for (std::size_t y = 0; y < 5; ++y) EXPECT_EQ(g.at(y, 6, c), 0.0);
  }
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor p({3}, {0.1, -0.2, 0.3});
  AdamState<double> s(p.shape(), {});
  auto u = adam_step(p, Tensor({3}), s);
  EXPECT_EQ(u.param, p);
  EXPECT_EQ(u.state.step_count, 1u);
  EXPECT_EQ(s.step_count, 0u);  // caller's copy untouched
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p({4}, 1.0);
  AdamState<double> s(p.shape(), {0.1, 0.9, 0.999, 1e-8});
  auto u = adam_step(p, Tensor({4}, 1.0), s);
  for (double v : u.param.data()) EXPECT_NEAR(v, 0.9, 1e-8);
}

TEST(Adam, TwoStepScalarTrace) {
  // Frozen from a hand-rolled two-iteration trace: p0 = 0.3, g = 1 then -0.5,
  // lr 0.1, betas 0.9/0.999, eps 1e-8.
  AdamState<double> s({1}, {0.1, 0.9, 0.999, 1e-8});
  auto u = adam_step(Tensor({1}, {0.3}), Tensor({1}, {1.0}), s);
  EXPECT_NEAR(u.param[0], 0.20000000099999998, 1e-15);
  u = adam_step(u.param, Tensor({1}, {-0.5}), u.state);
  EXPECT_NEAR(u.param[0], 0.17336629737090314, 1e-15);
  EXPECT_NEAR(u.state.first_moment[0], 0.04, 1e-15);
  EXPECT_NEAR(u.state.second_moment[0], 0.001249, 1e-15);
  EXPECT_EQ(u.state.step_count, 2u);
}
