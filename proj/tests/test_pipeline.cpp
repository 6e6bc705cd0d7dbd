#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "lesionforge/pipeline.hpp"
#include "support/synthetic.hpp"

using namespace lesionforge;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lesionforge_pipeline_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

RunConfig smoke_config(const fs::path& cache) {
  RunConfig cfg;
  cfg.seed = 11;
  cfg = apply_test_mode(cfg);
  cfg.cp_ranks = {4};
  cfg.feature_sets = {"ABCD", "CP-style", "ABCD+CP-style", "CP-raw"};
  cfg.classifiers = {{ModelKind::Logistic, 0.5}, {ModelKind::Svm, 0, Kernel::Linear, 1.0}};
  cfg.folds = 3;
  cfg.repeats = 1;
  cfg.transfer.max_iters = 15;
  cfg.cache_dir = cache.string();
  return cfg;
}

StageCounts counts(const RunSummary& s, const std::string& stage) { return s.counts.at(stage); }

}  // namespace

TEST(Manifest, ParsesLabelsPathsAndOptionalColumns) {
  const auto m = parse_manifest(
      "# lesions\n"
      "ID,Path,Label,Mask,Split\n"
      "a,img/a.png,benign,masks/a.png,train\n"
      "\n"
      "b,/abs/b.png,MALIGNANT,,Test\r\n"
      "c,c.png,1,,train\n",
      "/data");
  ASSERT_EQ(m.entries.size(), 3u);
  EXPECT_EQ(m.entries[0].image, fs::path("/data/img/a.png"));
  EXPECT_EQ(*m.entries[0].mask, fs::path("/data/masks/a.png"));
  EXPECT_EQ(m.entries[1].image, fs::path("/abs/b.png"));
  EXPECT_FALSE(m.entries[1].mask.has_value());
  EXPECT_EQ(m.entries[1].split, "test");
  EXPECT_EQ(m.labels(), (Labels{0, 1, 1}));
  EXPECT_TRUE(m.has_split());
}

TEST(Manifest, RejectsMalformedInput) {
  EXPECT_NE(error_of([] { parse_manifest("id,path\na,a.png\n", "."); }).find("'label'"), std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label\na,a.png,2\n", "."); }).find("label '2'"), std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label\na,a.png,0\na,b.png,1\n", "."); }).find("duplicate id 'a'"),
            std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label\n\"a\",a.png,0\n", "."); }).find("quoted"), std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label\na,a.png\n", "."); }).find("expected 3 fields"), std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label,split\na,a.png,0,train\nb,b.png,1,\n", "."); }).find("no split"),
            std::string::npos);
  EXPECT_NE(error_of([] { parse_manifest("id,path,label,colour\n", "."); }).find("unknown column"), std::string::npos);
  EXPECT_THROW(parse_manifest("", "."), FormatError);
}

TEST(Manifest, MissingFilesAreNamed) {
  const auto m = parse_manifest("id,path,label\nles7,nowhere.png,0\n", scratch("missing").string());
  EXPECT_NE(error_of([&] { check_manifest_files(m); }).find("image 'les7'"), std::string::npos);
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c;
  c.cp_ranks = {8, 16};
  c.transfer.beta = 100;
  c.transfer.gamma = 10;
  c.classifiers = {{ModelKind::Svm, 0, Kernel::Rbf, 10.0, 0.1}};
  c.content_global = true;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(parse_run_config(j)), j);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_NE(error_of([] { parse_run_config(nlohmann::json{{"cp_rank", 4}}); }).find("cp_rank"), std::string::npos);
  EXPECT_NE(error_of([] { parse_run_config(nlohmann::json::parse(R"({"transfer":{"betta":1}})")); }).find("betta"),
            std::string::npos);
}

TEST(Config, RandomForestIsReserved) {
  const auto j = nlohmann::json::parse(R"({"classifiers":[{"model":"random_forest"}]})");
  const auto msg = error_of([&] { parse_run_config(j); });
  EXPECT_NE(msg.find("random_forest"), std::string::npos);
  EXPECT_NE(msg.find("not implemented"), std::string::npos);
}

TEST(Config, TransferSettingsOutsideTheTableNeedOptIn) {
  RunConfig c;
  c.transfer.beta = 500;
  EXPECT_THROW(validate_run_config(c), ShapeError);
  c.allow_custom = true;
  EXPECT_NO_THROW(validate_run_config(c));
}

TEST(Config, TestModeShrinksTheRun) {
  RunConfig c;
  c.cp_ranks = {24, 48};
  const auto t = apply_test_mode(c);
  EXPECT_LE(t.preprocess.size, 32u);
  EXPECT_LE(t.transfer.max_iters, 40u);
  EXPECT_EQ(t.cp_ranks, (std::vector<std::size_t>{4}));
  EXPECT_EQ(t.network.rfind("random-tiny:", 0), 0u);
  EXPECT_NO_THROW(validate_run_config(t));
}

TEST(Grid, TuningTableHas375Cells) {
  const auto g = GridAxes::table1();
  EXPECT_EQ(g.cell_count(), 375u);
  const auto cells = g.cells(TransferConfig{});
  ASSERT_EQ(cells.size(), 375u);
  std::set<std::string> distinct;
  for (const auto& c : cells) distinct.insert(detail::transfer_config_json(c).dump());
  EXPECT_EQ(distinct.size(), 375u);
  EXPECT_EQ(cells.front().style_layers.size(), 1u);
  EXPECT_EQ(cells.back().style_layers.size(), 5u);
  EXPECT_EQ(cells[1].gamma, 10.0);  // TV weight varies fastest
}

TEST(Grid, OneValuePerAxisIsOneCell) {
  GridAxes g{{{"relu1_1"}}, {"relu4_2"}, {1000}, {1}};
  EXPECT_EQ(g.cell_count(), 1u);
  const auto cells = g.cells(TransferConfig{});
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].beta, 1000.0);
}

TEST(Artifacts, MatrixFormatKeepsValuesOutsideTheUnitInterval) {
  Matrix m(3, 2);
  m << -4.5, 0.25, 17.0, 1e-12, 3.0, -0.0;
  const auto bytes = serialize_matrix(m);
  EXPECT_EQ(parse_matrix(bytes), m);
  auto bad = bytes;
  bad[20] ^= 1;
  EXPECT_THROW(parse_matrix(bad), FormatError);
  EXPECT_THROW(parse_matrix(serialize_plane(ImagePlane(2, 2, 1))), FormatError);
}

TEST(Artifacts, RasterRoundTrip) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> d(5 * 4 * 3);
  for (auto& v : d) v = u(rng);
  const ImagePlane img(5, 4, 3, d);
  EXPECT_EQ(parse_plane(serialize_plane(img)), img);
}

TEST(Artifacts, KeysSeparateFieldBoundaries) {
  EXPECT_NE(stage_key("s", {"ab", "c"}), stage_key("s", {"a", "bc"}));
  EXPECT_NE(stage_key("s", {"x"}), stage_key("t", {"x"}));
  EXPECT_EQ(stage_key("s", {"x"}), stage_key("s", {"x"}));
  EXPECT_EQ(stage_key("s", {"x"}).size(), 64u);
  const std::string abc = "abc";
  EXPECT_EQ(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("run");
    manifest_path_ = synth::write_corpus(root_ / "corpus", {.count = 12, .size = 64, .seed = 5});
  }

  static Manifest manifest() {
    auto m = load_manifest(manifest_path_);
    check_manifest_files(m);
    return m;
  }

  static inline fs::path root_, manifest_path_;
};

TEST_F(PipelineRun, SmokeRunEmitsReportsAndCachesEveryStage) {
  const auto cache = root_ / "cache-smoke";
  const auto cfg = smoke_config(cache);
  Pipeline p(manifest(), cfg, root_ / "smoke");
  const auto first = p.run();

  // 3 feature blocks at one rank plus ABCD, two classifiers each.
  ASSERT_EQ(first.report.rows.size(), 8u);
  for (const auto& r : first.report.rows) {
    EXPECT_EQ(r.folds, 3u);
    EXPECT_GE(r.auc.mean, 0.0);
    EXPECT_LE(r.auc.mean, 1.0);
  }
  EXPECT_EQ(counts(first, "preprocess").computed, 12u);
  EXPECT_EQ(counts(first, "segment").computed, 12u);
  EXPECT_EQ(counts(first, "content-image").computed, 3u);
  EXPECT_EQ(counts(first, "transfer").computed, 36u);
  EXPECT_EQ(counts(first, "features").computed, 12u);
  EXPECT_EQ(counts(first, "decompose").computed, 6u);
  EXPECT_EQ(counts(first, "classify").computed, 4u);

  for (const char* f : {"report.csv", "report.txt", "abcd_features.csv", "config.resolved.json",
                        "cp_style_R4_loadings.csv", "cp_style_R4_clusters.txt", "cp_raw_R4_loadings.csv"}) {
    EXPECT_TRUE(fs::is_regular_file(root_ / "smoke" / f)) << f;
  }
  EXPECT_EQ(line_count(slurp(root_ / "smoke" / "report.csv")), 9u);
  EXPECT_EQ(line_count(slurp(root_ / "smoke" / "abcd_features.csv")), 13u);
  EXPECT_EQ(line_count(slurp(root_ / "smoke" / "cp_style_R4_loadings.csv")), 13u);
  const auto resolved = nlohmann::json::parse(slurp(root_ / "smoke" / "config.resolved.json"));
  EXPECT_EQ(parse_run_config(resolved).seed, 11u);

  // A second run reuses every artifact and reproduces the report.
  Pipeline again(manifest(), cfg, root_ / "smoke-again");
  const auto second = again.run();
  for (const auto& [stage, c] : second.counts) EXPECT_EQ(c.computed, 0u) << stage;
  EXPECT_EQ(counts(second, "transfer").reused, 36u);
  EXPECT_EQ(slurp(root_ / "smoke-again" / "report.csv"), slurp(root_ / "smoke" / "report.csv"));
}

TEST_F(PipelineRun, DeletedTransferRecomputesOnlyItsDependents) {
  const auto cache = root_ / "cache-dirty";
  const auto cfg = smoke_config(cache);
  Pipeline p(manifest(), cfg, root_ / "dirty");
  p.run();
  fs::remove(p.artifact("transfer", p.transfer_keys_for_split(0)[3], ".bin"));

  Pipeline q(manifest(), cfg, root_ / "dirty");
  const auto s = q.run();
  EXPECT_EQ(counts(s, "preprocess").computed, 0u);
  EXPECT_EQ(counts(s, "segment").computed, 0u);
  EXPECT_EQ(counts(s, "content-image").computed, 0u);
  EXPECT_EQ(counts(s, "features").computed, 0u);
  EXPECT_EQ(counts(s, "transfer").computed, 1u);
  // Only split 0's style decomposition saw the recomputed transfer.
  EXPECT_EQ(counts(s, "decompose").computed, 1u);
  EXPECT_EQ(counts(s, "decompose").reused, 5u);
  // CP-style and ABCD+CP-style; ABCD and CP-raw are reused.
  EXPECT_EQ(counts(s, "classify").computed, 2u);
  EXPECT_EQ(counts(s, "classify").reused, 2u);
}

TEST_F(PipelineRun, UnselectedUpstreamStageIsNamed) {
  auto cfg = smoke_config(root_ / "cache-empty");
  cfg.stages = {"classify"};
  Pipeline p(manifest(), cfg, root_ / "lookup");
  try {
    p.run();
    FAIL() << "expected MissingArtifact";
  } catch (const MissingArtifact& e) {
    EXPECT_NE(std::string(e.what()).find("run the 'preprocess' stage"), std::string::npos) << e.what();
  }
}

TEST_F(PipelineRun, StagesRunOneAtATime) {
  auto cfg = smoke_config(root_ / "cache-staged");
  cfg.feature_sets = {"ABCD"};
  for (const char* stage : {"preprocess", "segment", "features", "classify", "report"}) {
    cfg.stages = {stage};
    Pipeline(manifest(), cfg, root_ / "staged").run();
  }
  EXPECT_EQ(line_count(slurp(root_ / "staged" / "report.csv")), 3u);
  cfg.stages = {"report"};
  const auto s = Pipeline(manifest(), cfg, root_ / "staged").run();
  EXPECT_EQ(counts(s, "classify").reused, 1u);
}

TEST_F(PipelineRun, EnvironmentOverridesTheCacheDirectory) {
  const auto env_cache = root_ / "cache-env";
  ::setenv("LESIONFORGE_CACHE", env_cache.c_str(), 1);
  auto cfg = smoke_config(root_ / "cache-ignored");
  cfg.stages = {"preprocess"};
  Pipeline p(manifest(), cfg, root_ / "env");
  EXPECT_EQ(p.cache_dir(), env_cache);
  p.run();
  ::unsetenv("LESIONFORGE_CACHE");
  EXPECT_TRUE(fs::is_directory(env_cache / "preprocess"));
  EXPECT_FALSE(fs::exists(root_ / "cache-ignored"));
}

TEST_F(PipelineRun, SeededRunsWriteIdenticalMetrics) {
  auto cfg = smoke_config(root_ / "cache-det-a");
  cfg.feature_sets = {"ABCD", "CP-raw"};
  Pipeline(manifest(), cfg, root_ / "det-a").run();
  cfg.cache_dir = (root_ / "cache-det-b").string();
  cfg.workers = 1;
  Pipeline(manifest(), cfg, root_ / "det-b").run();
  EXPECT_EQ(slurp(root_ / "det-a" / "report.csv"), slurp(root_ / "det-b" / "report.csv"));
}

TEST_F(PipelineRun, GridWritesOneRowPerCell) {
  auto cfg = smoke_config(root_ / "cache-grid");
  cfg.grid = {{{"relu1_1"}, {"relu1_1", "relu2_1"}}, {"relu4_2"}, {1000}, {1}};
  const auto g = run_grid(manifest(), cfg, root_ / "grid");
  ASSERT_EQ(g.cells.size(), 2u);
  EXPECT_EQ(line_count(slurp(root_ / "grid" / "grid_cells.csv")), 3u);
  EXPECT_EQ(slurp(root_ / "grid" / "grid_cells.csv"), g.cells_csv);
  // style_layers has two values; the other axes one each.
  EXPECT_EQ(line_count(g.marginals_csv), 1u + 2 + 1 + 1 + 1);
  for (const auto& c : g.cells) EXPECT_FALSE(c.best_model.empty());
}
