#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "lesionforge/pipeline.hpp"

using namespace lesionforge;

namespace {

struct Common {
  std::string manifest, config, out = "runs/latest";
  bool allow_custom = false, content_global = false, test_mode = false;
  std::size_t workers = 0;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool needs_manifest = true) {
  auto* m = cmd->add_option("-m,--manifest", c.manifest, "Manifest CSV (id,path,label[,mask][,split])");
  if (needs_manifest) m->required();
  m->check(CLI::ExistingFile);
  cmd->add_option("-c,--config", c.config, "Run configuration JSON")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "Run directory for reports and the resolved config");
  cmd->add_option("-j,--workers", c.workers, "Worker threads (0 = all cores)");
  cmd->add_option("--seed", c.seed, "Master seed");
  cmd->add_flag("--allow-custom", c.allow_custom, "Permit transfer settings outside the tuning table");
  cmd->add_flag("--content-global", c.content_global,
                "Average every image (test folds included) into one content canvas");
  cmd->add_flag("--test-mode", c.test_mode, "Small images, tiny network, few iterations");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.allow_custom) cfg.allow_custom = true;
  if (c.content_global) cfg.content_global = true;
  if (c.workers) cfg.workers = c.workers;
  if (c.seed) cfg.seed = *c.seed;
  if (c.test_mode || cfg.test_mode) cfg = apply_test_mode(std::move(cfg));
  return cfg;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void print_counts(const RunSummary& s) {
  for (const auto& name : stage_names()) {
    const auto it = s.counts.find(name);
    if (it == s.counts.end() || (it->second.computed == 0 && it->second.reused == 0)) continue;
    std::printf("%-14s computed %zu, cached %zu\n", name.c_str(), it->second.computed, it->second.reused);
  }
}

int run_stages(const Common& c, std::vector<std::string> stages) {
  auto cfg = resolve_config(c);
  cfg.stages = std::move(stages);
  auto manifest = load_manifest(c.manifest);
  check_manifest_files(manifest);
  Pipeline p(std::move(manifest), cfg, c.out, log_line);
  const auto summary = p.run();
  print_counts(summary);
  for (const auto& n : summary.notices) std::printf("note: %s\n", n.c_str());
  if (!summary.report.rows.empty() && std::find(cfg.stages.begin(), cfg.stages.end(), "report") != cfg.stages.end()) {
    std::fputs(report_table(summary.report).c_str(), stdout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style-registered lesion features: preprocessing, guided style transfer, CP features, classification"};
  app.require_subcommand(1);
  Common c;

  auto* validate = app.add_subcommand("validate", "Check a manifest and configuration");
  add_common(validate, c, false);

  std::vector<std::pair<CLI::App*, std::string>> stage_cmds;
  const std::pair<const char*, const char*> stages[] = {
      {"preprocess", "Resize, median filter, hair removal and color normalization"},
      {"segment", "Lesion masks from Otsu thresholding or mask files"},
      {"content-image", "Mean content canvas per training set"},
      {"transfer", "Mask-guided style transfer of every lesion"},
      {"features", "ABCD descriptors from the preprocessed originals"},
      {"decompose", "CP decomposition of training stacks and test projection"},
      {"classify", "Cross-validated classifiers over the feature sets"},
      {"report", "Write metric CSV, table, loadings and cluster summaries"}};
  for (const auto& [name, help] : stages) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, c);
    stage_cmds.emplace_back(cmd, name);
  }
  auto* run = app.add_subcommand("run", "Every stage in order");
  add_common(run, c);
  auto* grid = app.add_subcommand("grid", "Style-transfer tuning grid with per-axis marginals");
  add_common(grid, c);

  CLI11_PARSE(app, argc, argv);
  try {
    if (validate->parsed()) {
      const auto cfg = resolve_config(c);
      validate_run_config(cfg);
      std::printf("config ok: %zu grid cells, ranks", cfg.grid.cell_count());
      for (auto r : cfg.cp_ranks) std::printf(" %zu", r);
      std::printf(", cache %s\n", resolve_cache_dir(cfg).string().c_str());
      if (!c.manifest.empty()) {
        const auto m = load_manifest(c.manifest);
        check_manifest_files(m);
        const auto y = m.labels();
        std::printf("manifest ok: %zu images, %zu malignant, %s\n", y.size(),
                    std::size_t(std::count(y.begin(), y.end(), 1)), m.has_split() ? "declared split" : "cross-validation");
      }
      return 0;
    }
    for (const auto& [cmd, name] : stage_cmds)
      if (cmd->parsed()) return run_stages(c, {name});
    if (run->parsed()) return run_stages(c, {});
    if (grid->parsed()) {
      const auto cfg = resolve_config(c);
      auto manifest = load_manifest(c.manifest);
      check_manifest_files(manifest);
      const auto g = run_grid(manifest, cfg, c.out, log_line);
      std::printf("%zu grid cells written to %s\n", g.cells.size(), (std::filesystem::path(c.out) / "grid_cells.csv").c_str());
      return 0;
    }
  } catch (const MissingArtifact& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
