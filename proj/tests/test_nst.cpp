#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <random>

#include "lesionforge/nst.hpp"
#include "support/oracles.hpp"

using namespace lesionforge;
using lesionforge::oracle::finite_difference;
using lesionforge::oracle::random_tensor;
using lesionforge::oracle::relative_error;

namespace {

ImagePlane random_plane(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  std::vector<double> d(n * n * 3);
  for (auto& v : d) v = u(rng);
  return ImagePlane(n, n, 3, std::move(d));
}

MaskPyramid disk_pyramid(std::size_t n, const std::vector<std::string>& layers) {
  BinaryMask m(n, n);
  const double c = (double(n) - 1) / 2, r = double(n) / 3;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) m.set(y, x, (y - c) * (y - c) + (x - c) * (x - c) <= r * r);
  return build_mask_pyramid(m, layers);
}

}  // namespace

TEST(Gram, SmallCases) {
  const auto g = gram(Tensor({4, 2}, 1.0));
  EXPECT_EQ(g.storage(), (std::vector<double>{4, 4, 4, 4}));
  const auto o = gram(Tensor({2, 2}, {1.0, 0.0, 0.0, 3.0}));
  EXPECT_EQ(o[1], 0.0);
  EXPECT_EQ(o[2], 0.0);
  EXPECT_EQ(o[3], 9.0);
}

TEST(Gram, MatchesDoubleLoopAndIsPsd) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto f = random_tensor({12, 5}, rng);
    const auto g = gram(f);
    const auto ref = oracle::naive_gram(f.storage(), 12, 5);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(g[i], ref[i], 1e-12);
    Eigen::Map<const Eigen::Matrix<double, 5, 5, Eigen::RowMajor>> gm(g.data().data());
    EXPECT_LT((gm - gm.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 5, 5>> es(gm);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
  }
  // h x w x N maps flatten to (h*w) x N.
  const auto hw = random_tensor({3, 4, 5}, rng);
  const auto flat = Tensor({12, 5}, hw.storage());
  EXPECT_EQ(gram(hw), gram(flat));
}

TEST(Gram, ScalesQuadratically) {
  std::mt19937_64 rng(2);
  const auto f = random_tensor({9, 4}, rng);
  EXPECT_LT(relative_error(gram(2.5 * f), 6.25 * gram(f)), 1e-14);
}

TEST(MaskFeatures, OnesZerosAndUniform) {
  std::mt19937_64 rng(3);
  const auto f = random_tensor({6, 6, 4}, rng);
  EXPECT_EQ(mask_features(f, std::vector<double>(36, 1.0)), f);
  for (double v : mask_features(f, std::vector<double>(36, 0.0)).storage()) EXPECT_EQ(v, 0.0);
  const auto uni = uniform_level(6, 6);
  EXPECT_LT(relative_error(gram(mask_features(f, uni.weights)), (1.0 / 36.0) * gram(f)), 1e-10);
  EXPECT_THROW(mask_features(f, std::vector<double>(35, 1.0)), ShapeError);
}

TEST(MaskFeatures, HalfPlaneMatchesRowSubset) {
  std::mt19937_64 rng(4);
  const auto f = random_tensor({8, 8, 3}, rng);
  BinaryMask half(8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 3; ++x) half.set(y, x, true);
  const auto t = build_mask_pyramid(half, {"relu1_1"}).at("relu1_1").weights;
  // Only the 24 foreground rows contribute, each scaled by t^2 = 1/24.
  std::vector<double> rows;
  for (std::size_t k = 0; k < 64; ++k)
    if (t[k] != 0.0)
      for (std::size_t j = 0; j < 3; ++j) rows.push_back(f[k * 3 + j] * t[k]);
  ASSERT_EQ(rows.size(), 24u * 3u);
  const auto ref = oracle::naive_gram(rows, 24, 3);
  const auto g = gram(mask_features(f, t));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(g[i], ref[i], 1e-12);
}

TEST(ContentLoss, ArithmeticAndGradient) {
  const Tensor p({10}, 0.0);
  const auto same = content_loss(p, p);
  EXPECT_EQ(same.loss, 0.0);
  for (double v : same.seed.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(content_loss(Tensor({10}, 1.0), p).loss, 5.0);

  std::mt19937_64 rng(5);
  const auto f = random_tensor({4, 4, 3}, rng), target = random_tensor({4, 4, 3}, rng);
  auto fn = [&](const Tensor& x) { return content_loss(x, target).loss; };
  EXPECT_LT(relative_error(content_loss(f, target).seed, finite_difference(fn, f)), 1e-6);
}

TEST(StyleLoss, ArithmeticAndGradient) {
  const auto single = style_layer_loss(Tensor({2, 1}, 1.0), Tensor({1, 1}, 0.0));
  EXPECT_DOUBLE_EQ(single.loss, 0.25);

  std::mt19937_64 rng(6);
  const auto f = random_tensor({5, 5, 4}, rng);
  EXPECT_EQ(style_layer_loss(f, gram(f)).loss, 0.0);

  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({5, 5, 4}, rng);
    const auto a = gram(random_tensor({5, 5, 4}, rng));
    auto fn = [&](const Tensor& t) { return style_layer_loss(t, a).loss; };
    EXPECT_LT(relative_error(style_layer_loss(x, a).seed, finite_difference(fn, x)), 1e-5);
  }
  EXPECT_THROW(style_layer_loss(f, Tensor({3, 3})), ShapeError);
}

TEST(TvLoss, ArithmeticAndGradient) {
  EXPECT_EQ(tv_loss(Tensor({3, 3, 3}, 0.4)).loss, 0.0);
  EXPECT_EQ(tv_loss(Tensor({2, 2, 1}, {0, 1, 0, 1})).loss, 2.0);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_tensor({6, 5, 3}, rng);
    auto fn = [&](const Tensor& t) { return tv_loss(t).loss; };
    EXPECT_LT(relative_error(tv_loss(x).seed, finite_difference(fn, x)), 1e-6);
  }
  // Zero differences contribute a zero subgradient.
  const auto flat = tv_loss(Tensor({2, 2, 1}, 0.5));
  for (double v : flat.seed.storage()) EXPECT_EQ(v, 0.0);
}

TEST(TotalLoss, TvOnlyAndSelfStyle) {
  const auto net = random_network(12);
  std::mt19937_64 rng(8);
  const auto img = to_tensor(random_plane(16, rng));
  TransferConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const auto full = build_mask_pyramid(BinaryMask(16, 16, 1), cfg.style_layers);
  const auto targets = build_style_targets(net, img, img, full, cfg);
  const auto tv_only = total_loss(net, targets, cfg, img);
  EXPECT_EQ(tv_only.total, tv_loss(img).loss);
  EXPECT_EQ(tv_only.grad, tv_loss(img).seed);

  cfg.beta = 1000.0;
  cfg.gamma = 0.0;
  const auto self = total_loss(net, targets, cfg, img);
  EXPECT_LT(self.style, 1e-20);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  const auto net = random_network(13);
  std::mt19937_64 rng(9);
  TransferConfig cfg;
  cfg.beta = 1e4;
  cfg.gamma = 0.1;
  const auto style = to_tensor(random_plane(16, rng));
  const auto content = to_tensor(random_plane(16, rng));
  const auto targets = build_style_targets(net, style, content, disk_pyramid(16, cfg.style_layers), cfg);
  const auto x = to_tensor(random_plane(16, rng));
  const auto loss = total_loss(net, targets, cfg, x);
  EXPECT_GT(loss.content, 0.0);
  EXPECT_GT(loss.style, 0.0);
  auto fn = [&](const Tensor& t) { return total_loss(net, targets, cfg, t).total; };
  EXPECT_LT(relative_error(loss.grad, finite_difference(fn, x, 1e-6)), 1e-4);
}

TEST(TotalLoss, PyramidMustMatchActivations) {
  const auto net = random_network(14);
  TransferConfig cfg;
  const auto img = Tensor({16, 16, 3}, 0.5);
  EXPECT_THROW(build_style_targets(net, img, img, disk_pyramid(32, cfg.style_layers), cfg), ShapeError);
  cfg.style_layers = {"relu1_1", "relu1_1"};
  EXPECT_THROW(cfg.validate(), ShapeError);
}

TEST(Transfer, DescendsAndIsDeterministic) {
  const auto net = random_network(15, 8, 255.0);
  std::mt19937_64 rng(10);
  const auto style = random_plane(16, rng), content = random_plane(16, rng);
  TransferConfig cfg;
  cfg.max_iters = 30;
  const auto pyr = disk_pyramid(16, cfg.style_layers);
  const auto a = run_transfer(style, content, pyr, net, cfg);
  const auto b = run_transfer(style, content, pyr, net, cfg);
  ASSERT_FALSE(a.loss_trace.empty());
  EXPECT_LE(a.loss_trace.size(), cfg.max_iters);
  EXPECT_LT(a.loss_trace.back(), a.loss_trace.front());
  for (double e : a.loss_trace) EXPECT_GE(e, 0.0);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.reason, b.reason);
}

TEST(Transfer, ConvergedRunsSatisfyStoppingRule) {
  const auto net = random_network(16, 8, 255.0);
  std::mt19937_64 rng(11);
  TransferConfig cfg;
  cfg.max_iters = 400;
  cfg.rel_tol = 0.01;
  const auto pyr = disk_pyramid(16, cfg.style_layers);
  const auto r = run_transfer(random_plane(16, rng), random_plane(16, rng), pyr, net, cfg);
  ASSERT_EQ(r.reason, Termination::Converged);
  const auto n = r.loss_trace.size();
  ASSERT_GE(n, 2u);
  EXPECT_LT(relative_change(r.loss_trace[n - 2], r.loss_trace[n - 1]), cfg.rel_tol);
  for (std::size_t i = 1; i + 1 < n; ++i)
    EXPECT_GE(relative_change(r.loss_trace[i - 1], r.loss_trace[i]), cfg.rel_tol);
}

TEST(Transfer, SelfStyleKeepsContentNearZero) {
  const auto net = random_network(17);
  std::mt19937_64 rng(12);
  const auto img = random_plane(16, rng);
  TransferConfig cfg;
  cfg.max_iters = 50;
  const auto full = build_mask_pyramid(BinaryMask(16, 16, 1), cfg.style_layers);
  const auto r = run_transfer(img, img, full, net, cfg);
  EXPECT_LE(r.loss_trace.back(), r.loss_trace.front());
  EXPECT_LE(r.final_content, 0.01 * r.loss_trace.front());
}

TEST(Transfer, NonFiniteLossNamesIteration) {
  auto net = random_network(18);
  net.convs[0].kernels[0] = std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(13);
  TransferConfig cfg;
  const auto pyr = disk_pyramid(16, cfg.style_layers);
  const auto img = random_plane(16, rng);
  try {
    run_transfer(img, img, pyr, net, cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(Transfer, SidecarCarriesTraceAndConfig) {
  const auto net = random_network(19, 8, 255.0);
  std::mt19937_64 rng(14);
  TransferConfig cfg;
  cfg.max_iters = 3;
  cfg.rel_tol = 0.0;
  const auto pyr = disk_pyramid(16, cfg.style_layers);
  const auto r = run_transfer(random_plane(16, rng), random_plane(16, rng), pyr, net, cfg);
  const auto j = transfer_sidecar(cfg, r);
  EXPECT_EQ(j["termination"], "max-iters");
  EXPECT_EQ(j["loss_trace"].size(), 3u);
  EXPECT_EQ(j["config"]["content_layer"], "relu4_2");
  EXPECT_EQ(j["config"]["layer_weights"].size(), 5u);
  EXPECT_DOUBLE_EQ(j["config"]["adam"]["learning_rate"].get<double>(), 0.02);
}
