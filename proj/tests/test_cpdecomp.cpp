#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "lesionforge/cpdecomp.hpp"
#include "support/oracles.hpp"

using namespace lesionforge;

namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = g(rng);
  return m;
}

StackedTensor random_stack(std::size_t n, std::size_t h, std::size_t d, std::mt19937_64& rng) {
  return mode1_fold(random_matrix(Eigen::Index(n), Eigen::Index(h * d), rng), h, d);
}

}  // namespace

TEST(Stack, LayoutAndRoundTrip) {
  ImagePlane img(4, 5, 3);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.set(y, x, c, c == 0 ? 0.1 : c == 1 ? 0.5 : 0.9);
  const auto t = stack_images({img, ImagePlane(4, 5, 3, 0.5)}, {"a", "b"});
  EXPECT_EQ(t.height, 4u);
  EXPECT_EQ(t.depth, 15u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 15; ++j) {
      EXPECT_EQ(t.at(0, i, j), j < 5 ? 0.1 : j < 10 ? 0.5 : 0.9);
      EXPECT_EQ(t.at(1, i, j), 0.5);
    }
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u;
  std::vector<double> d(4 * 5 * 3);
  for (auto& v : d) v = u(rng);
  const ImagePlane r(4, 5, 3, d);
  const auto back = unstack_images(stack_images({r}));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].data(), r.data());
  EXPECT_THROW(stack_images({img, ImagePlane(4, 4, 3)}), ShapeError);
  EXPECT_THROW(stack_images({}), ShapeError);
}

TEST(Unfold, PinnedTwoByTwoByTwo) {
  // X[n,i,j] = 1 + 4n + 2i + j.
  StackedTensor t;
  t.height = 2;
  t.depth = 2;
  t.ids = {"0", "1"};
  t.data.resize(4, 2);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) t.data(i + 2 * j, n) = 1 + 4 * n + 2 * i + j;
  Matrix expect(2, 4);
  expect << 1, 3, 2, 4, 5, 7, 6, 8;
  EXPECT_EQ(mode1_unfold(t), expect);
  const auto again = mode1_fold(expect, 2, 2);
  EXPECT_EQ(again.data, t.data);
  EXPECT_THROW(mode1_fold(expect, 3, 2), ShapeError);
}

TEST(Unfold, ReconstructionIdentity) {
  std::mt19937_64 rng(2);
  const Matrix a = random_matrix(5, 3, rng), b = random_matrix(4, 3, rng), c = random_matrix(6, 3, rng);
  const auto t = oracle::from_factors(a, b, c);
  const Matrix recon = a * khatri_rao(c, b).transpose();
  EXPECT_LT((mode1_unfold(t) - recon).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(khatri_rao(c, random_matrix(4, 2, rng)), ShapeError);
}

TEST(CpAls, RecoversRankOne) {
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(6, 1, rng), b = random_matrix(7, 1, rng), c = random_matrix(9, 1, rng);
  const auto model = cp_als(oracle::from_factors(a, b, c), {.rank = 1, .seed = 11});
  EXPECT_GE(model.fit(), 0.9999);
  auto cosine = [](const Matrix& p, const Matrix& q) { return std::abs(p.col(0).dot(q.col(0))) / (p.norm() * q.norm()); };
  EXPECT_NEAR(cosine(model.a, a), 1.0, 1e-8);
  EXPECT_NEAR(cosine(model.b, b), 1.0, 1e-8);
  EXPECT_NEAR(cosine(model.c, c), 1.0, 1e-8);
  EXPECT_NEAR(model.b.col(0).norm(), 1.0, 1e-12);
  EXPECT_NEAR(model.c.col(0).norm(), 1.0, 1e-12);
}

TEST(CpAls, ExactRankThreeOverSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto t = oracle::from_factors(random_matrix(12, 3, rng), random_matrix(10, 3, rng), random_matrix(15, 3, rng));
    const auto model = cp_als(t, {.rank = 3, .seed = seed});
    EXPECT_GE(model.fit(), 0.999) << seed;
    EXPECT_LT((mode1_unfold(t) - model.a * khatri_rao(model.c, model.b).transpose()).norm() / t.data.norm(), 1e-3);
  }
}

TEST(CpAls, FitTraceIsMonotone) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto t = random_stack(8, 6, 9, rng);
    const auto model = cp_als(t, {.rank = 4, .max_sweeps = 60, .seed = seed});
    ASSERT_FALSE(model.fit_trace.empty());
    for (std::size_t k = 1; k < model.fit_trace.size(); ++k)
      EXPECT_GE(model.fit_trace[k], model.fit_trace[k - 1] - 1e-9) << "seed " << seed << " sweep " << k;
    EXPECT_LE(model.fit_trace.size(), 60u);
  }
}

TEST(CpAls, CanonicalFormAndDeterminism) {
  std::mt19937_64 rng(4);
  const auto t = random_stack(7, 5, 6, rng);
  const auto m1 = cp_als(t, {.rank = 3, .seed = 9});
  const auto m2 = cp_als(t, {.rank = 3, .seed = 9});
  EXPECT_EQ(m1.a, m2.a);
  EXPECT_EQ(m1.b, m2.b);
  EXPECT_EQ(m1.c, m2.c);
  EXPECT_EQ(m1.fit_trace, m2.fit_trace);
  for (Eigen::Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(m1.b.col(r).norm(), 1.0, 1e-12);
    EXPECT_NEAR(m1.c.col(r).norm(), 1.0, 1e-12);
    Eigen::Index idx;
    m1.b.col(r).cwiseAbs().maxCoeff(&idx);
    EXPECT_GT(m1.b(idx, r), 0.0);
  }
  EXPECT_EQ(m1.ids, t.ids);
}

TEST(CpAls, WarnsAndRejects) {
  std::mt19937_64 rng(5);
  const auto t = random_stack(2, 3, 3, rng);
  EXPECT_FALSE(cp_als(t, {.rank = 3, .max_sweeps = 5}).warnings.empty());
  EXPECT_TRUE(cp_als(t, {.rank = 1, .max_sweeps = 5}).warnings.empty());
  EXPECT_THROW(cp_als(t, {.rank = 0}), ShapeError);
  auto bad = t;
  bad.data(0, 0) = std::nan("");
  EXPECT_THROW(cp_als(bad, {.rank = 1}), NumericError);
}

TEST(Projection, FixedPointOfExactModel) {
  std::mt19937_64 rng(6);
  const auto t = oracle::from_factors(random_matrix(10, 3, rng), random_matrix(8, 3, rng), random_matrix(12, 3, rng));
  const auto model = cp_als(t, {.rank = 3, .seed = 1});
  ASSERT_GE(model.fit(), 0.999999);
  const Matrix a = project_test(model, t);
  EXPECT_LT((a - model.a).norm() / model.a.norm(), 1e-6);
}

TEST(Projection, MatchesPerRowLeastSquares) {
  std::mt19937_64 rng(7);
  const auto train = random_stack(9, 5, 7, rng);
  const auto model = cp_als(train, {.rank = 4, .seed = 2});
  const auto test = random_stack(6, 5, 7, rng);
  const Matrix got = project_test(model, test);
  const Matrix f = khatri_rao(model.c, model.b);
  const Matrix x1 = mode1_unfold(test);
  const Eigen::JacobiSVD<Matrix> svd(f, Eigen::ComputeThinU | Eigen::ComputeThinV);
  for (Eigen::Index n = 0; n < x1.rows(); ++n) {
    const Vector want = svd.solve(x1.row(n).transpose());
    EXPECT_LT((got.row(n).transpose() - want).norm(), 1e-8 * std::max(1.0, want.norm())) << n;
  }
  EXPECT_EQ(project_test(model, mode1_fold(Matrix::Zero(3, 35), 5, 7)), Matrix::Zero(3, 4));
  EXPECT_THROW(project_test(model, random_stack(2, 7, 5, rng)), ShapeError);
}

TEST(ModelFile, RoundTripAndCorruption) {
  std::mt19937_64 rng(8);
  const auto model = cp_als(random_stack(5, 4, 6, rng), {.rank = 2, .max_sweeps = 10, .seed = 3});
  const auto bytes = serialize_model(model);
  const auto back = parse_model(bytes);
  EXPECT_EQ(back.a, model.a);
  EXPECT_EQ(back.b, model.b);
  EXPECT_EQ(back.c, model.c);
  EXPECT_EQ(back.ids, model.ids);
  EXPECT_EQ(back.fit_trace, model.fit_trace);
  EXPECT_EQ(back.seed, 3u);
  auto flipped = bytes;
  flipped[40] ^= 1;
  EXPECT_THROW(parse_model(flipped), FormatError);
  EXPECT_THROW(parse_model(std::span(bytes).first(bytes.size() - 3)), FormatError);
  const auto path = std::filesystem::temp_directory_path() / "lesionforge_cp_model.bin";
  save_model(model, path);
  EXPECT_EQ(load_model(path).a, model.a);
  std::filesystem::remove(path);
}

TEST(Loadings, CsvKeyedById) {
  Matrix a(2, 2);
  a << 1.5, -2, 0.25, 3;
  EXPECT_EQ(loadings_csv(a, {"x", "y"}, {1, 0}), "id,label,cp_1,cp_2\nx,1,1.5,-2\ny,0,0.25,3\n");
  EXPECT_THROW(loadings_csv(a, {"x"}, {}), ShapeError);
}

TEST(ClusterReport, SeparatingColumnRanksFirst) {
  std::mt19937_64 rng(9);
  const Eigen::Index n = 20;
  Matrix a = random_matrix(n, 4, rng);
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (Eigen::Index k = 0; k < n; ++k) {
    labels.push_back(int(k % 2));
    ids.push_back("id" + std::to_string(k));
    a(k, 2) = labels.back() ? 5.0 + 0.01 * double(k) : -5.0 - 0.01 * double(k);
    a(k, 3) = 1.0;
  }
  const auto rep = rank_clusters_report(a, ids, labels, 3);
  ASSERT_EQ(rep.ranked.size(), 3u);
  EXPECT_EQ(rep.ranked.front().column, 2u);
  ASSERT_EQ(rep.notices.size(), 1u);
  EXPECT_NE(rep.notices[0].find("cluster 4"), std::string::npos);
  // Sort oracle for top-k ids.
  for (const auto& c : rep.ranked) {
    std::vector<std::pair<double, std::string>> v;
    for (Eigen::Index k = 0; k < n; ++k) v.emplace_back(a(k, Eigen::Index(c.column)), ids[std::size_t(k)]);
    std::sort(v.begin(), v.end());
    EXPECT_EQ(c.top_positive, (std::vector<std::string>{v[19].second, v[18].second, v[17].second}));
    EXPECT_EQ(c.top_negative, (std::vector<std::string>{v[0].second, v[1].second, v[2].second}));
  }
  EXPECT_NE(cluster_report_text(rep).find("note: cluster 4"), std::string::npos);
}
