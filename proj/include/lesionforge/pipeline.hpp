#ifndef LESIONFORGE_PIPELINE_HPP
#define LESIONFORGE_PIPELINE_HPP

// Stage orchestration over a manifest: preprocess, segment, content image,
// transfer, ABCD features, CP decomposition, classification and reports.
// Every per-item result is a content-addressed artifact in the cache
// directory; the key hashes the stage name, its parameters and the keys of
// its inputs.

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionforge/classify.hpp"
#include "lesionforge/cpdecomp.hpp"
#include "lesionforge/detail/binary_io.hpp"
#include "lesionforge/features.hpp"
#include "lesionforge/image_io.hpp"
#include "lesionforge/imaging.hpp"
#include "lesionforge/nst.hpp"
#include "lesionforge/segmentation.hpp"
#include "lesionforge/vggnet.hpp"

namespace lesionforge {

/// An upstream artifact the requested stage depends on is not cached.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------- hashing

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 initialisation failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& bytes(std::span<const std::uint8_t> b) {
    EVP_DigestUpdate(ctx_, b.data(), b.size());
    return *this;
  }
  /// Length-prefixed, so ("ab","c") and ("a","bc") hash differently.
  Sha256& field(std::string_view s) {
    const std::uint64_t n = s.size();
    EVP_DigestUpdate(ctx_, &n, sizeof n);
    EVP_DigestUpdate(ctx_, s.data(), s.size());
    return *this;
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += digits[md[i] >> 4];
      out += digits[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::span<const std::uint8_t> b) { return Sha256().bytes(b).hex(); }

inline std::string stage_key(std::string_view stage, std::initializer_list<std::string_view> parts) {
  Sha256 h;
  h.field("lesionforge-artifact-v1").field(stage);
  for (auto p : parts) h.field(p);
  return h.hex();
}

// ---------------------------------------------------------------- rasters

/// "LFI1": u64 height, width, channels, f64 samples, u32 CRC32.
inline std::vector<std::uint8_t> serialize_plane(const ImagePlane& img) {
  detail::ByteWriter w;
  w.bytes("LFI1", 4);
  w.u64(img.height());
  w.u64(img.width());
  w.u64(img.channels());
  for (double v : img.data()) w.f64(v);
  w.u32(detail::crc32_of(w.buffer()));
  return std::move(w.buffer());
}

inline ImagePlane parse_plane(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != "LFI1") throw FormatError(origin + ": not a raster artifact");
  const auto h = r.u64("height"), w = r.u64("width"), c = r.u64("channels");
  if (h * w * c * 8 > r.remaining()) throw FormatError(origin + ": raster header exceeds file size");
  std::vector<double> d(h * w * c);
  for (auto& v : d) v = r.f64("samples");
  const auto end = r.position();
  if (r.u32("crc32") != detail::crc32_of(bytes.first(end))) throw FormatError(origin + ": raster checksum mismatch");
  return ImagePlane(h, w, c, std::move(d));
}

/// "LFM1": u64 rows, cols, f64 row-major values, u32 CRC32. Unlike rasters,
/// values are stored unclamped.
inline std::vector<std::uint8_t> serialize_matrix(const Matrix& m) {
  detail::ByteWriter w;
  w.bytes("LFM1", 4);
  w.u64(std::uint64_t(m.rows()));
  w.u64(std::uint64_t(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
  w.u32(detail::crc32_of(w.buffer()));
  return std::move(w.buffer());
}

inline Matrix parse_matrix(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != "LFM1") throw FormatError(origin + ": not a matrix artifact");
  const auto rows = r.u64("rows"), cols = r.u64("cols");
  if (rows * cols * 8 > r.remaining()) throw FormatError(origin + ": matrix header exceeds file size");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64("values");
  const auto end = r.position();
  if (r.u32("crc32") != detail::crc32_of(bytes.first(end))) throw FormatError(origin + ": matrix checksum mismatch");
  return m;
}

// ---------------------------------------------------------------- manifest

struct ManifestEntry {
  std::string id;
  std::filesystem::path image;
  int label = 0;
  std::optional<std::filesystem::path> mask;
  std::string split;  // "train", "test" or empty
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  bool has_split() const {
    return std::any_of(entries.begin(), entries.end(), [](const auto& e) { return !e.split.empty(); });
  }
  Labels labels() const {
    Labels y;
    for (const auto& e : entries) y.push_back(e.label);
    return y;
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> v;
    for (const auto& e : entries) v.push_back(e.id);
    return v;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

/// CSV with header naming id, path, label and optionally mask and split.
/// Labels are 0/1 or benign/malignant. Relative paths resolve against
/// `base_dir`. Blank lines and lines starting with '#' are skipped.
inline Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::map<std::string, std::size_t> col;
  std::size_t line_no = 0;
  Manifest m;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.find('"') != std::string::npos) throw FormatError("manifest line " + std::to_string(line_no) + ": quoted fields are not supported");
    const auto fields = detail::split_csv_line(t);
    if (col.empty()) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const auto name = detail::lower(fields[i]);
        if (name != "id" && name != "path" && name != "label" && name != "mask" && name != "split") {
          throw FormatError("manifest header: unknown column '" + fields[i] + "'");
        }
        if (!col.emplace(name, i).second) throw FormatError("manifest header: duplicate column '" + fields[i] + "'");
      }
      for (const char* need : {"id", "path", "label"})
        if (!col.count(need)) throw FormatError(std::string("manifest header lacks the '") + need + "' column");
      continue;
    }
    if (fields.size() != col.size()) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected " + std::to_string(col.size()) +
                        " fields, got " + std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.id = fields[col["id"]];
    if (e.id.empty()) throw FormatError("manifest line " + std::to_string(line_no) + ": empty id");
    if (!seen.insert(e.id).second) throw FormatError("manifest: duplicate id '" + e.id + "'");
    const std::filesystem::path p = fields[col["path"]];
    e.image = p.is_absolute() ? p : base_dir / p;
    const auto lab = detail::lower(fields[col["label"]]);
    if (lab == "1" || lab == "malignant") {
      e.label = 1;
    } else if (lab == "0" || lab == "benign") {
      e.label = 0;
    } else {
      throw FormatError("manifest: image '" + e.id + "' has label '" + fields[col["label"]] +
                        "'; expected 0, 1, benign or malignant");
    }
    if (col.count("mask") && !fields[col["mask"]].empty()) {
      const std::filesystem::path mp = fields[col["mask"]];
      e.mask = mp.is_absolute() ? mp : base_dir / mp;
    }
    if (col.count("split")) {
      e.split = detail::lower(fields[col["split"]]);
      if (e.split != "train" && e.split != "test" && !e.split.empty()) {
        throw FormatError("manifest: image '" + e.id + "' has split '" + e.split + "'; expected train or test");
      }
    }
    m.entries.push_back(std::move(e));
  }
  if (col.empty()) throw FormatError("manifest is empty");
  if (m.entries.empty()) throw FormatError("manifest lists no images");
  if (m.has_split()) {
    for (const auto& e : m.entries)
      if (e.split.empty()) throw FormatError("manifest: image '" + e.id + "' has no split while others do");
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

/// Every referenced file exists.
inline void check_manifest_files(const Manifest& m) {
  for (const auto& e : m.entries) {
    if (!std::filesystem::is_regular_file(e.image)) {
      throw FormatError("image '" + e.id + "': file not found: " + e.image.string());
    }
    if (e.mask && !std::filesystem::is_regular_file(*e.mask)) {
      throw FormatError("image '" + e.id + "': mask not found: " + e.mask->string());
    }
  }
}

// ---------------------------------------------------------------- config

/// Style-transfer tuning grid axes.
struct GridAxes {
  std::vector<std::vector<std::string>> style_layer_sets;
  std::vector<std::string> content_layers;
  std::vector<double> ratios;
  std::vector<double> tv_weights;

  static GridAxes table1() {
    GridAxes g;
    const auto& s = style_layer_choices();
    for (std::size_t k = 1; k <= s.size(); ++k) g.style_layer_sets.emplace_back(s.begin(), s.begin() + std::ptrdiff_t(k));
    g.content_layers = content_layer_choices();
    g.ratios = {1, 10, 100, 1000, 10000};
    g.tv_weights = {1, 10, 100};
    return g;
  }

  std::size_t cell_count() const {
    return style_layer_sets.size() * content_layers.size() * ratios.size() * tv_weights.size();
  }

  /// Cells in order: style subset, content layer, ratio, TV weight (fastest).
  std::vector<TransferConfig> cells(const TransferConfig& base) const {
    std::vector<TransferConfig> out;
    for (const auto& s : style_layer_sets)
      for (const auto& c : content_layers)
        for (double r : ratios)
          for (double t : tv_weights) {
            TransferConfig cfg = base;
            cfg.style_layers = s;
            cfg.layer_weights.clear();
            cfg.content_layer = c;
            cfg.alpha = 1.0;
            cfg.beta = r;
            cfg.gamma = t;
            out.push_back(std::move(cfg));
          }
    return out;
  }
};

/// Feature blocks the classify stage can evaluate.
inline const std::vector<std::string>& feature_set_choices() {
  static const std::vector<std::string> v{"ABCD", "CP-style", "CP-raw", "ABCD+CP-style", "ABCD+CP-raw"};
  return v;
}

struct RunConfig {
  PreprocessOptions preprocess;
  TransferConfig transfer;
  std::string network = "random-tiny:0";  // or a VGGW1 file path
  double input_gain = 1.0;                 // conv1_1 gain for random-tiny networks
  std::vector<std::size_t> cp_ranks{24, 48, 72, 96};
  CpOptions cp;
  std::vector<std::string> feature_sets{"ABCD", "CP-style", "ABCD+CP-style", "CP-raw"};
  std::vector<ModelSpec> classifiers = default_model_grid();
  std::size_t folds = 5, repeats = 10;
  std::uint64_t seed = 0;
  std::string cache_dir = ".lesionforge-cache";
  std::size_t workers = 0;
  bool content_global = false;
  bool allow_custom = false;
  bool test_mode = false;
  GridAxes grid = GridAxes::table1();
  ColorTable colors = default_color_table();
  std::vector<std::string> stages;  // empty = every stage
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> v{"preprocess", "segment",   "content-image", "transfer",
                                          "features",   "decompose", "classify",      "report"};
  return v;
}

namespace detail {

inline nlohmann::json transfer_config_json(const TransferConfig& t) {
  nlohmann::json j{{"style_layers", t.style_layers}, {"content_layer", t.content_layer}, {"alpha", t.alpha},
                   {"beta", t.beta},                 {"gamma", t.gamma},                 {"max_iters", t.max_iters},
                   {"rel_tol", t.rel_tol},
                   {"adam",
                    {{"learning_rate", t.adam.learning_rate},
                     {"beta1", t.adam.beta1},
                     {"beta2", t.adam.beta2},
                     {"epsilon", t.adam.epsilon}}}};
  if (!t.layer_weights.empty()) j["layer_weights"] = t.layer_weights;
  return j;
}

inline void require_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end()) {
      throw FormatError(where + ": unknown key '" + k + "'");
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + "." + key + ": " + e.what());
  }
}

inline nlohmann::json classifier_grid_json(const std::vector<ModelSpec>& grid) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : grid) {
    if (m.kind == ModelKind::Logistic) {
      arr.push_back({{"model", "logistic"}, {"alpha", m.alpha}});
    } else if (m.kernel == Kernel::Linear) {
      arr.push_back({{"model", "svm"}, {"kernel", "linear"}, {"cost", m.cost}});
    } else {
      arr.push_back({{"model", "svm"}, {"kernel", "rbf"}, {"cost", m.cost}, {"gamma", m.gamma}});
    }
  }
  return arr;
}

inline std::vector<ModelSpec> parse_classifier_grid(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "default") return default_model_grid();
  if (!j.is_array()) throw FormatError("classifiers must be \"default\" or an array of model entries");
  std::vector<ModelSpec> out;
  for (const auto& e : j) {
    require_keys(e, "classifiers[]", {"model", "alpha", "kernel", "cost", "gamma"});
    const auto model = e.value("model", std::string());
    ModelSpec s;
    if (model == "logistic") {
      s.kind = ModelKind::Logistic;
      read_opt(e, "alpha", s.alpha, "classifiers[]");
    } else if (model == "svm") {
      s.kind = ModelKind::Svm;
      const auto kernel = e.value("kernel", std::string("linear"));
      if (kernel != "linear" && kernel != "rbf") throw FormatError("classifiers[]: kernel must be linear or rbf");
      s.kernel = kernel == "rbf" ? Kernel::Rbf : Kernel::Linear;
      read_opt(e, "cost", s.cost, "classifiers[]");
      read_opt(e, "gamma", s.gamma, "classifiers[]");
    } else if (model == "random_forest") {
      throw FormatError("classifiers[]: random_forest is reserved in the schema but not implemented");
    } else {
      throw FormatError("classifiers[]: unknown model '" + model + "'");
    }
    out.push_back(s);
  }
  if (out.empty()) throw FormatError("classifiers must not be empty");
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json grid{{"style_layer_sets", c.grid.style_layer_sets},
                      {"content_layers", c.grid.content_layers},
                      {"ratios", c.grid.ratios},
                      {"tv_weights", c.grid.tv_weights}};
  return {{"preprocess",
           {{"size", c.preprocess.size},
            {"median_window", c.preprocess.median_window},
            {"hair_removal", c.preprocess.hair_removal},
            {"hair_threshold", c.preprocess.hair.threshold},
            {"hair_element_length", c.preprocess.hair.element_length},
            {"minkowski_p", c.preprocess.minkowski_p}}},
          {"transfer", detail::transfer_config_json(c.transfer)},
          {"network", c.network},
          {"input_gain", c.input_gain},
          {"cp_ranks", c.cp_ranks},
          {"cp", {{"max_sweeps", c.cp.max_sweeps}, {"fit_tol", c.cp.fit_tol}, {"restarts", c.cp.restarts}}},
          {"feature_sets", c.feature_sets},
          {"classifiers", detail::classifier_grid_json(c.classifiers)},
          {"folds", c.folds},
          {"repeats", c.repeats},
          {"seed", c.seed},
          {"cache_dir", c.cache_dir},
          {"workers", c.workers},
          {"content_global", c.content_global},
          {"allow_custom", c.allow_custom},
          {"test_mode", c.test_mode},
          {"grid", grid},
          {"color_table", color_table_to_json(c.colors)},
          {"stages", c.stages}};
}

/// Strict parse: unknown keys are errors. Missing keys keep their defaults.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::read_opt;
  detail::require_keys(j, "config",
                       {"preprocess", "transfer", "network", "input_gain", "cp_ranks", "cp", "feature_sets",
                        "classifiers", "folds", "repeats", "seed", "cache_dir", "workers", "content_global",
                        "allow_custom", "test_mode", "grid", "color_table", "stages"});
  RunConfig c;
  if (j.contains("preprocess")) {
    const auto& p = j["preprocess"];
    detail::require_keys(p, "preprocess",
                         {"size", "median_window", "hair_removal", "hair_threshold", "hair_element_length", "minkowski_p"});
    read_opt(p, "size", c.preprocess.size, "preprocess");
    read_opt(p, "median_window", c.preprocess.median_window, "preprocess");
    read_opt(p, "hair_removal", c.preprocess.hair_removal, "preprocess");
    read_opt(p, "hair_threshold", c.preprocess.hair.threshold, "preprocess");
    read_opt(p, "hair_element_length", c.preprocess.hair.element_length, "preprocess");
    read_opt(p, "minkowski_p", c.preprocess.minkowski_p, "preprocess");
  }
  if (j.contains("transfer")) {
    const auto& t = j["transfer"];
    detail::require_keys(t, "transfer",
                         {"style_layers", "content_layer", "alpha", "beta", "gamma", "max_iters", "rel_tol", "adam",
                          "layer_weights"});
    read_opt(t, "style_layers", c.transfer.style_layers, "transfer");
    read_opt(t, "content_layer", c.transfer.content_layer, "transfer");
    read_opt(t, "alpha", c.transfer.alpha, "transfer");
    read_opt(t, "beta", c.transfer.beta, "transfer");
    read_opt(t, "gamma", c.transfer.gamma, "transfer");
    read_opt(t, "max_iters", c.transfer.max_iters, "transfer");
    read_opt(t, "rel_tol", c.transfer.rel_tol, "transfer");
    read_opt(t, "layer_weights", c.transfer.layer_weights, "transfer");
    if (t.contains("adam")) {
      const auto& a = t["adam"];
      detail::require_keys(a, "transfer.adam", {"learning_rate", "beta1", "beta2", "epsilon"});
      read_opt(a, "learning_rate", c.transfer.adam.learning_rate, "transfer.adam");
      read_opt(a, "beta1", c.transfer.adam.beta1, "transfer.adam");
      read_opt(a, "beta2", c.transfer.adam.beta2, "transfer.adam");
      read_opt(a, "epsilon", c.transfer.adam.epsilon, "transfer.adam");
    }
  }
  read_opt(j, "network", c.network, "config");
  read_opt(j, "input_gain", c.input_gain, "config");
  read_opt(j, "cp_ranks", c.cp_ranks, "config");
  if (j.contains("cp")) {
    detail::require_keys(j["cp"], "cp", {"max_sweeps", "fit_tol", "restarts"});
    read_opt(j["cp"], "max_sweeps", c.cp.max_sweeps, "cp");
    read_opt(j["cp"], "fit_tol", c.cp.fit_tol, "cp");
    read_opt(j["cp"], "restarts", c.cp.restarts, "cp");
  }
  read_opt(j, "feature_sets", c.feature_sets, "config");
  if (j.contains("classifiers")) c.classifiers = detail::parse_classifier_grid(j["classifiers"]);
  read_opt(j, "folds", c.folds, "config");
  read_opt(j, "repeats", c.repeats, "config");
  read_opt(j, "seed", c.seed, "config");
  read_opt(j, "cache_dir", c.cache_dir, "config");
  read_opt(j, "workers", c.workers, "config");
  read_opt(j, "content_global", c.content_global, "config");
  read_opt(j, "allow_custom", c.allow_custom, "config");
  read_opt(j, "test_mode", c.test_mode, "config");
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    detail::require_keys(g, "grid", {"style_layer_sets", "content_layers", "ratios", "tv_weights"});
    read_opt(g, "style_layer_sets", c.grid.style_layer_sets, "grid");
    read_opt(g, "content_layers", c.grid.content_layers, "grid");
    read_opt(g, "ratios", c.grid.ratios, "grid");
    read_opt(g, "tv_weights", c.grid.tv_weights, "grid");
  }
  if (j.contains("color_table")) c.colors = parse_color_table(j["color_table"]);
  read_opt(j, "stages", c.stages, "config");
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  try {
    return parse_run_config(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
}

/// Small images, a tiny random network and few iterations for CI runs.
inline RunConfig apply_test_mode(RunConfig c) {
  c.test_mode = true;
  c.preprocess.size = std::min<std::size_t>(c.preprocess.size, 32);
  c.preprocess.median_window = std::min<std::size_t>(c.preprocess.median_window, 3);
  c.preprocess.hair.element_length = std::min<std::size_t>(c.preprocess.hair.element_length, 5);
  if (c.network.rfind("random-tiny:", 0) != 0) c.network = "random-tiny:" + std::to_string(c.seed);
  c.transfer.max_iters = std::min<std::size_t>(c.transfer.max_iters, 40);
  for (auto& r : c.cp_ranks) r = std::min<std::size_t>(r, 4);
  std::sort(c.cp_ranks.begin(), c.cp_ranks.end());
  c.cp_ranks.erase(std::unique(c.cp_ranks.begin(), c.cp_ranks.end()), c.cp_ranks.end());
  c.repeats = std::min<std::size_t>(c.repeats, 2);
  return c;
}

namespace detail {

inline bool in_list(double v, std::initializer_list<double> allowed) {
  return std::find(allowed.begin(), allowed.end(), v) != allowed.end();
}

inline void check_table1(const TransferConfig& t, const std::string& where) {
  const auto g = GridAxes::table1();
  if (std::find(g.style_layer_sets.begin(), g.style_layer_sets.end(), t.style_layers) == g.style_layer_sets.end()) {
    throw ShapeError(where + ": style layers are not one of the tuning-table subsets (use --allow-custom)");
  }
  if (std::find(g.content_layers.begin(), g.content_layers.end(), t.content_layer) == g.content_layers.end()) {
    throw ShapeError(where + ": content layer '" + t.content_layer + "' is not in the tuning table (use --allow-custom)");
  }
  if (t.alpha != 1.0 || !in_list(t.beta, {1, 10, 100, 1000, 10000})) {
    throw ShapeError(where + ": style/content ratio must be 1, 10, 100, 1000 or 10000 with alpha 1 (use --allow-custom)");
  }
  if (!in_list(t.gamma, {1, 10, 100})) throw ShapeError(where + ": TV weight must be 1, 10 or 100 (use --allow-custom)");
}

}  // namespace detail

inline void validate_run_config(const RunConfig& c) {
  c.transfer.validate();
  if (c.preprocess.size < 16) throw ShapeError("preprocess.size must be at least 16");
  if (c.cp_ranks.empty()) throw ShapeError("cp_ranks must not be empty");
  for (auto r : c.cp_ranks)
    if (r == 0) throw ShapeError("cp_ranks entries must be positive");
  for (const auto& f : c.feature_sets) {
    const auto& fs = feature_set_choices();
    if (std::find(fs.begin(), fs.end(), f) == fs.end()) throw ShapeError("unknown feature set '" + f + "'");
  }
  for (const auto& s : c.stages) {
    const auto& ss = stage_names();
    if (std::find(ss.begin(), ss.end(), s) == ss.end()) throw ShapeError("unknown stage '" + s + "'");
  }
  if (c.network.rfind("random-tiny:", 0) == 0) {
    const auto tail = c.network.substr(12);
    if (tail.empty() || tail.find_first_not_of("0123456789") != std::string::npos) {
      throw ShapeError("network 'random-tiny:SEED' needs a decimal seed");
    }
  }
  if (c.grid.cell_count() == 0) throw ShapeError("grid has an empty axis");
  if (!c.allow_custom) {
    detail::check_table1(c.transfer, "transfer");
    for (const auto& cell : c.grid.cells(c.transfer)) detail::check_table1(cell, "grid");
  }
}

/// LESIONFORGE_CACHE overrides the configured directory.
inline std::filesystem::path resolve_cache_dir(const RunConfig& c) {
  if (const char* env = std::getenv("LESIONFORGE_CACHE"); env && *env) return env;
  return c.cache_dir;
}

inline VggNetwork load_network(const std::string& spec, double input_gain) {
  if (spec.rfind("random-tiny:", 0) == 0) return random_network(std::stoull(spec.substr(12)), 8, input_gain);
  return load_weights(spec);
}

// ---------------------------------------------------------------- reports

inline nlohmann::json report_to_json(const ClassificationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : r.rows) {
    nlohmann::json row{{"model", m.model}, {"features", m.features}, {"folds", m.folds}};
    const std::pair<const char*, const MetricSummary*> cols[] = {{"accuracy", &m.accuracy},
                                                                 {"auc", &m.auc},
                                                                 {"sensitivity", &m.sensitivity},
                                                                 {"specificity", &m.specificity},
                                                                 {"runtime", &m.runtime}};
    for (const auto& [name, s] : cols) row[name] = {s->mean, s->sd};
    rows.push_back(row);
  }
  return rows;
}

inline ClassificationReport report_from_json(const nlohmann::json& j) {
  ClassificationReport r;
  for (const auto& row : j) {
    ModelReport m;
    m.model = row.at("model").get<std::string>();
    m.features = row.at("features").get<std::string>();
    m.folds = row.at("folds").get<std::size_t>();
    const std::pair<const char*, MetricSummary*> cols[] = {{"accuracy", &m.accuracy},
                                                           {"auc", &m.auc},
                                                           {"sensitivity", &m.sensitivity},
                                                           {"specificity", &m.specificity},
                                                           {"runtime", &m.runtime}};
    for (const auto& [name, s] : cols) {
      s->mean = row.at(name).at(0).get<double>();
      s->sd = row.at(name).at(1).get<double>();
    }
    r.rows.push_back(std::move(m));
  }
  return r;
}

// ---------------------------------------------------------------- pipeline

struct StageCounts {
  std::size_t computed = 0, reused = 0;
};

struct RunSummary {
  std::map<std::string, StageCounts> counts;
  ClassificationReport report;
  std::vector<std::string> notices;
};

class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  Pipeline(Manifest manifest, RunConfig config, std::filesystem::path run_dir, Logger log = {})
      : m_(std::move(manifest)), cfg_(std::move(config)), run_dir_(std::move(run_dir)), log_(std::move(log)) {
    validate_run_config(cfg_);
    cache_ = resolve_cache_dir(cfg_);
    const auto& all = stage_names();
    selected_ = cfg_.stages.empty() ? std::set<std::string>(all.begin(), all.end())
                                    : std::set<std::string>(cfg_.stages.begin(), cfg_.stages.end());
    needed_ = closure(selected_);
    network_tag_ = network_tag();
  }

  const std::filesystem::path& cache_dir() const { return cache_; }

  /// Train/test splits this run evaluates on: the declared split, or the
  /// repeated stratified folds.
  std::vector<FoldSplit> splits() const {
    if (m_.has_split()) {
      FoldSplit s;
      s.seed = derive_seed(cfg_.seed, 0, 1);
      for (std::size_t i = 0; i < m_.entries.size(); ++i) (m_.entries[i].split == "train" ? s.train : s.test).push_back(i);
      if (s.train.empty() || s.test.empty()) throw ShapeError("manifest split needs both train and test images");
      return {s};
    }
    return stratified_folds(m_.labels(), cfg_.folds, cfg_.repeats, cfg_.seed);
  }

  RunSummary run() {
    std::filesystem::create_directories(run_dir_);
    detail::write_text_atomic(run_dir_ / "config.resolved.json", to_json(cfg_).dump(2) + "\n");
    summary_ = {};
    for (const auto& s : stage_names()) summary_.counts[s];
    if (needed_.count("preprocess")) stage_preprocess();
    if (needed_.count("segment")) stage_segment();
    const auto sp = splits();
    if (needed_.count("content-image")) stage_content(sp);
    if (needed_.count("transfer")) stage_transfer(sp);
    if (needed_.count("features")) stage_features();
    if (needed_.count("decompose")) stage_decompose(sp);
    if (needed_.count("classify")) stage_classify(sp);
    if (needed_.count("report")) stage_report(sp);
    return summary_;
  }

  /// Artifact paths, for inspection and tests.
  std::filesystem::path artifact(const std::string& stage, const std::string& key, const std::string& ext) const {
    return cache_ / stage / (key + ext);
  }
  const std::vector<std::string>& transfer_keys_for_split(std::size_t s) const { return transfer_keys_.at(s); }

 private:
  struct Art {
    std::string key;
    bool dirty = false;  // produced during this run
  };

  Manifest m_;
  RunConfig cfg_;
  std::filesystem::path run_dir_, cache_;
  Logger log_;
  std::set<std::string> selected_, needed_;
  std::string network_tag_;
  RunSummary summary_;
  std::mutex mu_;
  std::optional<VggNetwork> net_;

  std::vector<Art> pre_, mask_, abcd_;
  std::map<std::string, Art> content_;                     // by content key
  std::vector<std::string> split_content_;                 // content key per split
  std::map<std::pair<std::size_t, std::string>, Art> transfer_;  // (image, content key)
  std::vector<std::vector<std::string>> transfer_keys_;    // per split, per image
  std::map<std::tuple<std::string, std::size_t, std::size_t>, Art> decomp_;  // (source, rank, split)
  std::map<std::string, Art> classify_;                    // by report label

  /// Adds every stage the selection depends on under this configuration:
  /// classify needs features only for ABCD sets and decompose only for CP
  /// sets; decompose needs transfer only for style features.
  std::set<std::string> closure(std::set<std::string> s) const {
    std::vector<std::string> classify_deps, decompose_deps{"preprocess"};
    if (uses_abcd()) classify_deps.push_back("features");
    if (uses_cp()) classify_deps.push_back("decompose");
    if (uses_source("style") || !uses_cp()) decompose_deps.push_back("transfer");
    const std::map<std::string, std::vector<std::string>> deps{
        {"preprocess", {}},
        {"segment", {"preprocess"}},
        {"content-image", {"preprocess"}},
        {"transfer", {"preprocess", "segment", "content-image"}},
        {"features", {"preprocess", "segment"}},
        {"decompose", decompose_deps},
        {"classify", classify_deps},
        {"report", {"classify"}}};
    for (bool grew = true; grew;) {
      grew = false;
      for (const auto& st : std::vector<std::string>(s.begin(), s.end()))
        for (const auto& d : deps.at(st)) grew |= s.insert(d).second;
    }
    return s;
  }

  void say(const std::string& msg) {
    if (log_) {
      std::lock_guard lk(mu_);
      log_(msg);
    }
  }

  std::string network_tag() const {
    if (cfg_.network.rfind("random-tiny:", 0) == 0) return cfg_.network + "@" + format_double(cfg_.input_gain);
    return "sha256:" + sha256_hex(detail::read_file_bytes(cfg_.network));
  }

  const VggNetwork& network() {
    std::lock_guard lk(mu_);
    if (!net_) net_ = load_network(cfg_.network, cfg_.input_gain);
    return *net_;
  }

  bool uses_cp() const {
    return std::any_of(cfg_.feature_sets.begin(), cfg_.feature_sets.end(),
                       [](const auto& f) { return f.find("CP") != std::string::npos; });
  }
  bool uses_source(const std::string& src) const {
    return std::any_of(cfg_.feature_sets.begin(), cfg_.feature_sets.end(),
                       [&](const auto& f) { return f.find("CP-" + src) != std::string::npos; });
  }
  bool uses_abcd() const {
    return std::any_of(cfg_.feature_sets.begin(), cfg_.feature_sets.end(),
                       [](const auto& f) { return f.find("ABCD") != std::string::npos; });
  }

  /// Reuses the artifact when every file exists and no input was produced
  /// in this run; otherwise computes it (selected stage) or reports which
  /// stage to run (unselected stage).
  Art ensure(const std::string& stage, const std::string& key, const std::vector<std::string>& exts, bool inputs_dirty,
             const std::string& what, const std::function<void()>& compute) {
    const bool present = std::all_of(exts.begin(), exts.end(),
                                     [&](const auto& e) { return std::filesystem::exists(artifact(stage, key, e)); });
    if (!selected_.count(stage)) {
      if (!present) {
        throw MissingArtifact("no cached '" + stage + "' artifact for " + what + "; run the '" + stage + "' stage first");
      }
      count(stage, false);
      return {key, false};
    }
    if (present && !inputs_dirty) {
      count(stage, false);
      return {key, false};
    }
    compute();
    count(stage, true);
    return {key, true};
  }

  void count(const std::string& stage, bool computed) {
    std::lock_guard lk(mu_);
    auto& c = summary_.counts[stage];
    (computed ? c.computed : c.reused) += 1;
  }

  void put(const std::string& stage, const std::string& key, const std::string& ext, std::span<const std::uint8_t> b) {
    detail::write_file_atomic(artifact(stage, key, ext), b);
  }
  void put_plane(const std::string& stage, const std::string& key, const std::string& ext, const ImagePlane& p) {
    put(stage, key, ext, serialize_plane(p));
  }
  ImagePlane get_plane(const std::string& stage, const std::string& key, const std::string& ext) const {
    const auto path = artifact(stage, key, ext);
    return parse_plane(detail::read_file_bytes(path), path.string());
  }
  void put_matrix(const std::string& stage, const std::string& key, const std::string& ext, const Matrix& m) {
    put(stage, key, ext, serialize_matrix(m));
  }
  Matrix get_matrix(const std::string& stage, const std::string& key, const std::string& ext) const {
    const auto path = artifact(stage, key, ext);
    return parse_matrix(detail::read_file_bytes(path), path.string());
  }

  ImagePlane normalized(std::size_t i) const { return get_plane("preprocess", pre_[i].key, ".norm.bin"); }
  ImagePlane pre_normalization(std::size_t i) const { return get_plane("preprocess", pre_[i].key, ".pre.bin"); }
  BinaryMask mask(std::size_t i) const { return mask_from_image(get_plane("segment", mask_[i].key, ".bin")); }

  nlohmann::json preprocess_json() const { return to_json(cfg_)["preprocess"]; }

  void stage_preprocess() {
    const auto params = preprocess_json().dump();
    pre_.assign(m_.entries.size(), {});
    parallel_for(m_.entries.size(), cfg_.workers, [&](std::size_t i) {
      const auto& e = m_.entries[i];
      const auto bytes = detail::read_file_bytes(e.image);
      const auto key = stage_key("preprocess", {params, sha256_hex(bytes)});
      pre_[i] = ensure("preprocess", key, {".pre.bin", ".norm.bin"}, false, "image '" + e.id + "'", [&] {
        const auto raw = e.image.extension() == ".ppm" ? decode_ppm(bytes, e.image.string()) : decode_png(bytes, e.image.string());
        const auto r = preprocess(raw, cfg_.preprocess);
        put_plane("preprocess", key, ".pre.bin", r.pre_normalization);
        put_plane("preprocess", key, ".norm.bin", r.normalized);
      });
    });
  }

  void stage_segment() {
    mask_.assign(m_.entries.size(), {});
    parallel_for(m_.entries.size(), cfg_.workers, [&](std::size_t i) {
      const auto& e = m_.entries[i];
      const std::string source = e.mask ? "file:" + sha256_hex(detail::read_file_bytes(*e.mask)) : "otsu";
      const auto key = stage_key("segment", {pre_[i].key, source, "clean-9"});
      mask_[i] = ensure("segment", key, {".bin"}, pre_[i].dirty, "image '" + e.id + "'", [&] {
        BinaryMask raw;
        if (e.mask) {
          const auto img = read_image(*e.mask);
          raw = resize_nearest(mask_from_image(img.channels() == 1 ? img : to_gray(img)), cfg_.preprocess.size,
                               cfg_.preprocess.size);
        } else {
          raw = otsu_threshold(to_gray(normalized(i)));
        }
        if (raw.empty()) throw NumericError("image '" + e.id + "': segmentation produced an empty mask");
        put_plane("segment", key, ".bin", mask_to_image(clean_mask(raw)));
      });
    });
  }

  std::vector<std::vector<std::size_t>> content_members(const std::vector<FoldSplit>& sp) const {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& s : sp) {
      if (cfg_.content_global) {
        std::vector<std::size_t> all(m_.entries.size());
        std::iota(all.begin(), all.end(), 0);
        out.push_back(std::move(all));
      } else {
        out.push_back(s.train);
      }
    }
    return out;
  }

  void stage_content(const std::vector<FoldSplit>& sp) {
    if (cfg_.content_global && !m_.has_split()) say("warning: --content-global averages test images into the content canvas");
    split_content_.clear();
    content_.clear();
    for (const auto& members : content_members(sp)) {
      std::string ids;
      bool dirty = false;
      for (auto i : members) {
        ids += pre_[i].key;
        dirty |= pre_[i].dirty;
      }
      const auto key = stage_key("content-image", {ids});
      split_content_.push_back(key);
      if (content_.count(key)) continue;
      content_[key] = ensure("content-image", key, {".bin"}, dirty, "the content canvas", [&] {
        std::vector<ImagePlane> imgs;
        for (auto i : members) imgs.push_back(pre_normalization(i));
        put_plane("content-image", key, ".bin", build_content_image(imgs));
      });
    }
  }

  void stage_transfer(const std::vector<FoldSplit>& sp) {
    transfer_.clear();
    transfer_keys_.assign(sp.size(), {});
    if (!uses_source("style") && !selected_.count("transfer")) return;
    const auto params = detail::transfer_config_json(cfg_.transfer).dump();
    std::vector<std::pair<std::size_t, std::string>> jobs;
    std::set<std::pair<std::size_t, std::string>> seen;
    for (std::size_t s = 0; s < sp.size(); ++s)
      for (std::size_t i = 0; i < m_.entries.size(); ++i)
        if (seen.insert({i, split_content_[s]}).second) jobs.emplace_back(i, split_content_[s]);
    std::vector<Art> done(jobs.size());
    parallel_for(jobs.size(), cfg_.workers, [&](std::size_t k) {
      const auto [i, ck] = jobs[k];
      const auto key = stage_key("transfer", {pre_[i].key, mask_[i].key, ck, network_tag_, params});
      const bool dirty = pre_[i].dirty || mask_[i].dirty || content_.at(ck).dirty;
      done[k] = ensure("transfer", key, {".bin", ".json"}, dirty, "image '" + m_.entries[i].id + "'", [&] {
        const auto pyr = build_mask_pyramid(mask(i), cfg_.transfer.style_layers);
        const auto r = run_transfer(normalized(i), get_plane("content-image", ck, ".bin"), pyr, network(), cfg_.transfer);
        put_plane("transfer", key, ".bin", r.image);
        auto side = transfer_sidecar(cfg_.transfer, r);
        side["image_id"] = m_.entries[i].id;
        side.erase("wall_seconds");
        detail::write_text_atomic(artifact("transfer", key, ".json"), side.dump(2) + "\n");
        say("transfer " + m_.entries[i].id + ": " + to_string(r.reason) + " after " + std::to_string(r.loss_trace.size()) +
            " iterations");
      });
    });
    for (std::size_t k = 0; k < jobs.size(); ++k) transfer_[jobs[k]] = done[k];
    for (std::size_t s = 0; s < sp.size(); ++s)
      for (std::size_t i = 0; i < m_.entries.size(); ++i) transfer_keys_[s].push_back(transfer_.at({i, split_content_[s]}).key);
  }

  void stage_features() {
    abcd_.assign(m_.entries.size(), {});
    if (!uses_abcd() && !selected_.count("features")) return;
    const auto table = color_table_to_json(cfg_.colors).dump();
    parallel_for(m_.entries.size(), cfg_.workers, [&](std::size_t i) {
      const auto key = stage_key("features", {pre_[i].key, mask_[i].key, table});
      abcd_[i] = ensure("features", key, {".bin"}, pre_[i].dirty || mask_[i].dirty, "image '" + m_.entries[i].id + "'", [&] {
        const auto v = assemble_abcd(normalized(i), mask(i), cfg_.colors);
        put_matrix("features", key, ".bin", Eigen::Map<const Eigen::RowVectorXd>(v.data(), Eigen::Index(v.size())));
      });
    });
  }

  /// Inputs of one stacked image: the transferred image or the normalized
  /// original.
  std::pair<std::string, bool> stack_input(const std::string& src, std::size_t split, std::size_t i) const {
    if (src == "style") {
      const auto& a = transfer_.at({i, split_content_[split]});
      return {a.key, a.dirty};
    }
    return {pre_[i].key, pre_[i].dirty};
  }

  ImagePlane stack_image(const std::string& src, std::size_t split, std::size_t i) const {
    if (src == "style") return get_plane("transfer", transfer_.at({i, split_content_[split]}).key, ".bin");
    return normalized(i);
  }

  void stage_decompose(const std::vector<FoldSplit>& sp) {
    decomp_.clear();
    std::vector<std::tuple<std::string, std::size_t, std::size_t>> jobs;
    for (const char* src : {"style", "raw"}) {
      if (!uses_source(src) && !(selected_.count("decompose") && std::string(src) == "style" && !uses_cp())) continue;
      for (auto r : cfg_.cp_ranks)
        for (std::size_t s = 0; s < sp.size(); ++s) jobs.emplace_back(src, r, s);
    }
    std::vector<Art> done(jobs.size());
    const auto cp_params = to_json(cfg_)["cp"].dump();
    parallel_for(jobs.size(), cfg_.workers, [&](std::size_t k) {
      const auto& [src, rank, s] = jobs[k];
      std::string inputs = src + "|train:";
      bool dirty = false;
      for (auto i : sp[s].train) {
        const auto [key, d] = stack_input(src, s, i);
        inputs += key + ",";
        dirty |= d;
      }
      inputs += "|test:";
      for (auto i : sp[s].test) {
        const auto [key, d] = stack_input(src, s, i);
        inputs += key + ",";
        dirty |= d;
      }
      const auto seed = derive_seed(cfg_.seed, 0xC9, s);
      const auto key = stage_key("decompose", {inputs, std::to_string(rank), cp_params, std::to_string(seed)});
      done[k] = ensure("decompose", key, {".cpm", ".test.bin"}, dirty,
                       "CP-" + src + " rank " + std::to_string(rank) + " split " + std::to_string(s), [&] {
                         std::vector<ImagePlane> train, test;
                         std::vector<std::string> train_ids, test_ids;
                         for (auto i : sp[s].train) {
                           train.push_back(stack_image(src, s, i));
                           train_ids.push_back(m_.entries[i].id);
                         }
                         for (auto i : sp[s].test) {
                           test.push_back(stack_image(src, s, i));
                           test_ids.push_back(m_.entries[i].id);
                         }
                         CpOptions opt = cfg_.cp;
                         opt.rank = rank;
                         opt.seed = seed;
                         // Only training images enter the decomposition.
                         const auto model = cp_als(stack_images(train, train_ids), opt);
                         for (const auto& w : model.warnings) say("warning: " + w);
                         const Matrix a_test = project_test(model, stack_images(test, test_ids));
                         save_model(model, artifact("decompose", key, ".cpm"));
                         put_matrix("decompose", key, ".test.bin", a_test);
                       });
    });
    for (std::size_t k = 0; k < jobs.size(); ++k) decomp_[jobs[k]] = done[k];
  }

  Matrix abcd_rows(const std::vector<std::size_t>& rows) const {
    Matrix x(Eigen::Index(rows.size()), Eigen::Index(kAbcdLength));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      x.row(Eigen::Index(r)) = get_matrix("features", abcd_[rows[r]].key, ".bin").row(0);
    }
    return x;
  }

  static Matrix hcat(const Matrix& a, const Matrix& b) {
    if (a.cols() == 0) return b;
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
  }

  struct FeatureJob {
    std::string label, set;
    std::size_t rank = 0;
  };

  std::vector<FeatureJob> feature_jobs() const {
    std::vector<FeatureJob> jobs;
    for (const auto& f : cfg_.feature_sets) {
      if (f == "ABCD") {
        jobs.push_back({f, f, 0});
        continue;
      }
      for (auto r : cfg_.cp_ranks) jobs.push_back({f + "(R=" + std::to_string(r) + ")", f, r});
    }
    return jobs;
  }

  void stage_classify(const std::vector<FoldSplit>& sp) {
    classify_.clear();
    summary_.report = {};
    const auto grid_json = detail::classifier_grid_json(cfg_.classifiers).dump();
    const auto labels = m_.labels();
    for (const auto& job : feature_jobs()) {
      const bool abcd = job.set.find("ABCD") != std::string::npos;
      const std::string src = job.set.find("CP-style") != std::string::npos ? "style"
                              : job.set.find("CP-raw") != std::string::npos ? "raw"
                                                                             : "";
      std::string inputs;
      bool dirty = false;
      if (abcd)
        for (const auto& a : abcd_) {
          inputs += a.key + ",";
          dirty |= a.dirty;
        }
      if (!src.empty())
        for (std::size_t s = 0; s < sp.size(); ++s) {
          const auto& d = decomp_.at({src, job.rank, s});
          inputs += d.key + ",";
          dirty |= d.dirty;
        }
      std::string split_desc;
      for (const auto& s : sp) split_desc += std::to_string(s.seed) + ":" + std::to_string(s.test.size()) + ",";
      const auto key = stage_key("classify", {job.label, inputs, grid_json, split_desc});
      classify_[job.label] = ensure("classify", key, {".json"}, dirty, "feature set " + job.label, [&] {
        Dataset data{Matrix(Eigen::Index(labels.size()), 0), labels, m_.ids(), job.label};
        const auto hook = [&](const FoldSplit& f) {
          const std::size_t s = std::size_t(std::find_if(sp.begin(), sp.end(), [&](const FoldSplit& o) {
                                               return o.repeat == f.repeat && o.fold == f.fold;
                                             }) - sp.begin());
          Matrix tr(Eigen::Index(f.train.size()), 0), te(Eigen::Index(f.test.size()), 0);
          if (abcd) {
            tr = abcd_rows(f.train);
            te = abcd_rows(f.test);
          }
          if (!src.empty()) {
            const auto& d = decomp_.at({src, job.rank, s});
            const auto model = load_model(artifact("decompose", d.key, ".cpm"));
            tr = hcat(tr, model.a);
            te = hcat(te, get_matrix("decompose", d.key, ".test.bin"));
          }
          return std::pair{tr, te};
        };
        const auto rep = evaluate_splits(data, cfg_.classifiers, sp, cfg_.workers, hook);
        detail::write_text_atomic(artifact("classify", key, ".json"), report_to_json(rep).dump(1) + "\n");
      });
      const auto path = artifact("classify", key, ".json");
      std::ifstream in(path);
      const auto part = report_from_json(nlohmann::json::parse(in));
      summary_.report.rows.insert(summary_.report.rows.end(), part.rows.begin(), part.rows.end());
    }
  }

  void stage_report(const std::vector<FoldSplit>& sp) {
    detail::write_text_atomic(run_dir_ / "report.csv", report_csv(summary_.report));
    detail::write_text_atomic(run_dir_ / "report.txt", report_table(summary_.report));
    if (!abcd_.empty() && !abcd_.front().key.empty()) {
      std::vector<FeatureRow> rows;
      for (std::size_t i = 0; i < m_.entries.size(); ++i) {
        const Matrix v = get_matrix("features", abcd_[i].key, ".bin");
        rows.push_back({m_.entries[i].id, m_.entries[i].label, std::vector<double>(v.data(), v.data() + v.size())});
      }
      detail::write_text_atomic(run_dir_ / "abcd_features.csv", features_csv(rows, abcd_column_names()));
    }
    // Loadings and cluster ranking of the first split's decompositions.
    for (const auto& [k, art] : decomp_) {
      const auto& [src, rank, s] = k;
      if (s != 0) continue;
      const auto model = load_model(artifact("decompose", art.key, ".cpm"));
      const Matrix a_test = get_matrix("decompose", art.key, ".test.bin");
      Matrix all(model.a.rows() + a_test.rows(), model.a.cols());
      all << model.a, a_test;
      std::vector<std::string> ids;
      Labels y, ytrain;
      for (auto i : sp[0].train) {
        ids.push_back(m_.entries[i].id);
        y.push_back(m_.entries[i].label);
        ytrain.push_back(m_.entries[i].label);
      }
      for (auto i : sp[0].test) {
        ids.push_back(m_.entries[i].id);
        y.push_back(m_.entries[i].label);
      }
      const auto stem = "cp_" + src + "_R" + std::to_string(rank);
      detail::write_text_atomic(run_dir_ / (stem + "_loadings.csv"), loadings_csv(all, ids, y));
      std::vector<std::string> train_ids(ids.begin(), ids.begin() + model.a.rows());
      detail::write_text_atomic(run_dir_ / (stem + "_clusters.txt"),
                                cluster_report_text(rank_clusters_report(model.a, train_ids, ytrain, 3)));
    }
  }
};

// ---------------------------------------------------------------- grid

struct GridCell {
  TransferConfig transfer;
  std::string best_model;
  MetricSummary accuracy, auc;
};

struct GridSummary {
  std::vector<GridCell> cells;
  std::string cells_csv, marginals_csv;
};

namespace detail {

inline std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

}  // namespace detail

inline std::string grid_cells_csv(const std::vector<GridCell>& cells) {
  std::ostringstream out;
  out << "cell,style_layers,content_layer,ratio,tv_weight,best_model,accuracy_mean,accuracy_sd,auc_mean,auc_sd\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    out << i << ',' << detail::join(c.transfer.style_layers, "+") << ',' << c.transfer.content_layer << ','
        << format_double(c.transfer.beta) << ',' << format_double(c.transfer.gamma) << ",\"" << c.best_model << "\","
        << format_double(c.accuracy.mean) << ',' << format_double(c.accuracy.sd) << ',' << format_double(c.auc.mean)
        << ',' << format_double(c.auc.sd) << '\n';
  }
  return out.str();
}

/// Mean, sd, min and max of cell accuracy for every value of every axis.
inline std::string grid_marginals_csv(const std::vector<GridCell>& cells) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  std::vector<std::pair<std::string, std::string>> order;
  auto add = [&](const std::string& axis, const std::string& value, double acc) {
    auto k = std::pair{axis, value};
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(acc);
  };
  for (const auto& c : cells) {
    add("style_layers", detail::join(c.transfer.style_layers, "+"), c.accuracy.mean);
    add("content_layer", c.transfer.content_layer, c.accuracy.mean);
    add("ratio", format_double(c.transfer.beta), c.accuracy.mean);
    add("tv_weight", format_double(c.transfer.gamma), c.accuracy.mean);
  }
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    static const std::map<std::string, int> rank{{"style_layers", 0}, {"content_layer", 1}, {"ratio", 2}, {"tv_weight", 3}};
    return rank.at(a.first) < rank.at(b.first);
  });
  std::ostringstream out;
  out << "axis,value,cells,accuracy_mean,accuracy_sd,accuracy_min,accuracy_max\n";
  for (const auto& k : order) {
    const auto& v = groups[k];
    const auto s = summarize(v);
    out << k.first << ',' << k.second << ',' << v.size() << ',' << format_double(s.mean) << ',' << format_double(s.sd)
        << ',' << format_double(*std::min_element(v.begin(), v.end())) << ','
        << format_double(*std::max_element(v.begin(), v.end())) << '\n';
  }
  return out.str();
}

/// Runs the pipeline through classification for every grid cell on the
/// first CP rank's style features; writes grid_cells.csv and
/// grid_marginals.csv to `run_dir`. Cells share cached upstream stages.
inline GridSummary run_grid(const Manifest& manifest, RunConfig cfg, const std::filesystem::path& run_dir,
                            Pipeline::Logger log = {}) {
  validate_run_config(cfg);
  cfg.feature_sets = {"CP-style"};
  cfg.cp_ranks = {cfg.cp_ranks.front()};
  cfg.stages = {};
  GridSummary g;
  std::filesystem::create_directories(run_dir);
  detail::write_text_atomic(run_dir / "config.resolved.json", to_json(cfg).dump(2) + "\n");
  const auto cells = cfg.grid.cells(cfg.transfer);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    RunConfig cell = cfg;
    cell.transfer = cells[i];
    cell.stages = {"preprocess", "segment", "content-image", "transfer", "decompose", "classify"};
    if (log) log("grid cell " + std::to_string(i + 1) + "/" + std::to_string(cells.size()));
    Pipeline p(manifest, cell, run_dir / "cells" / std::to_string(i), log);
    const auto summary = p.run();
    const auto& rows = summary.report.rows;
    if (rows.empty()) throw Error("grid cell " + std::to_string(i) + " produced no report rows");
    const auto best = std::max_element(rows.begin(), rows.end(), [](const ModelReport& a, const ModelReport& b) {
      return a.accuracy.mean < b.accuracy.mean;
    });
    g.cells.push_back({cells[i], best->model, best->accuracy, best->auc});
  }
  g.cells_csv = grid_cells_csv(g.cells);
  g.marginals_csv = grid_marginals_csv(g.cells);
  detail::write_text_atomic(run_dir / "grid_cells.csv", g.cells_csv);
  detail::write_text_atomic(run_dir / "grid_marginals.csv", g.marginals_csv);
  return g;
}

}  // namespace lesionforge

#endif  // LESIONFORGE_PIPELINE_HPP
