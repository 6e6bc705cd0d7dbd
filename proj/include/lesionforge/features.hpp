#ifndef LESIONFORGE_FEATURES_HPP
#define LESIONFORGE_FEATURES_HPP

// ABCD descriptors computed from a lesion mask and its image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesionforge/error.hpp"
#include "lesionforge/imaging.hpp"
#include "lesionforge/segmentation.hpp"

namespace lesionforge {

struct ShapeMoments {
  double x0 = 0.0, y0 = 0.0;  // centroid, pixel units
  double m11 = 0.0, m20 = 0.0, m02 = 0.0;
  double theta = 0.0;  // major-axis angle from +x, radians
  std::size_t area = 0;
};

/// Central second moments of the foreground; m20 runs along x (columns).
inline ShapeMoments compute_moments(const BinaryMask& m) {
  ShapeMoments s;
  double sx = 0.0, sy = 0.0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x)) {
        ++s.area;
        sx += double(x);
        sy += double(y);
      }
  if (s.area == 0) throw ShapeError("moments of an empty mask");
  s.x0 = sx / double(s.area);
  s.y0 = sy / double(s.area);
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x)) {
        const double dx = double(x) - s.x0, dy = double(y) - s.y0;
        s.m11 += dx * dy;
        s.m20 += dx * dx;
        s.m02 += dy * dy;
      }
  s.theta = (s.m11 == 0.0 && s.m20 == s.m02) ? 0.0 : 0.5 * std::atan2(2.0 * s.m11, s.m20 - s.m02);
  return s;
}

/// Rotates the mask by -theta about its centroid so the major axis lies
/// along +x. Nearest-neighbour inverse mapping onto a canvas that holds the
/// whole rotated shape with a one-pixel margin. theta == 0 returns the input.
inline BinaryMask rotate_mask(const BinaryMask& m, double theta) {
  if (theta == 0.0) return m;
  const auto mom = compute_moments(m);
  const double c = std::cos(theta), s = std::sin(theta);
  double lo_x = INFINITY, hi_x = -INFINITY, lo_y = INFINITY, hi_y = -INFINITY;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x)) {
        const double dx = double(x) - mom.x0, dy = double(y) - mom.y0;
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        lo_x = std::min(lo_x, u);
        hi_x = std::max(hi_x, u);
        lo_y = std::min(lo_y, v);
        hi_y = std::max(hi_y, v);
      }
  const double ox = std::floor(lo_x) - 1.0, oy = std::floor(lo_y) - 1.0;
  const auto w = std::size_t(std::ceil(hi_x) - ox + 2.0);
  const auto h = std::size_t(std::ceil(hi_y) - oy + 2.0);
  BinaryMask out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q) {
      const double u = double(q) + ox, v = double(r) + oy;
      const double sx = std::round(mom.x0 + c * u - s * v), sy = std::round(mom.y0 + s * u + c * v);
      out.set(r, q, m.at_or_background(std::ptrdiff_t(sy), std::ptrdiff_t(sx)));
    }
  return out;
}

struct SymmetryIndex {
  double sai_x = 1.0;  // top half mirrored onto bottom half
  double sai_y = 1.0;  // left half mirrored onto right half
};

namespace detail {

/// IoU of the near half (2*coord < axis2) mirrored across the axis with the
/// far half (2*coord > axis2). `axis2` is twice the axis coordinate, so axes
/// between pixel rows are exact. Pixels on the axis belong to neither half.
inline double mirror_iou(const BinaryMask& m, long axis2, bool horizontal_axis) {
  std::size_t near = 0, far = 0, inter = 0;
  for (long y = 0; y < long(m.height()); ++y)
    for (long x = 0; x < long(m.width()); ++x) {
      if (!m.at(std::size_t(y), std::size_t(x))) continue;
      const long coord = horizontal_axis ? y : x;
      if (2 * coord > axis2) {
        ++far;
      } else if (2 * coord < axis2) {
        ++near;
        const long mirror = axis2 - coord;
        inter += horizontal_axis ? m.at_or_background(mirror, x) : m.at_or_background(y, mirror);
      }
    }
  const std::size_t uni = near + far - inter;
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

}  // namespace detail

/// Symmetry about explicit axes: the horizontal axis sits at row axis_y and
/// the vertical axis at column axis_x; both are rounded to the nearest half
/// pixel.
inline SymmetryIndex sai(const BinaryMask& m, double axis_y, double axis_x) {
  SymmetryIndex r;
  r.sai_x = detail::mirror_iou(m, std::lround(2.0 * axis_y), true);
  r.sai_y = detail::mirror_iou(m, std::lround(2.0 * axis_x), false);
  return r;
}

/// Symmetry about the axes through the centroid.
inline SymmetryIndex sai(const BinaryMask& m) {
  const auto mom = compute_moments(m);
  return sai(m, mom.y0, mom.x0);
}

/// lambda_min / lambda_max of the 2x2 inertia matrix.
inline double lengthening(const ShapeMoments& s) {
  const double mean = 0.5 * (s.m20 + s.m02);
  const double root = std::sqrt(0.25 * (s.m20 - s.m02) * (s.m20 - s.m02) + s.m11 * s.m11);
  const double hi = mean + root, lo = std::max(0.0, mean - root);
  if (!(hi > 0.0)) throw NumericError("lengthening undefined for a single-pixel mask");
  return lo / hi;
}

/// Foreground pixels whose 3x3 neighbourhood sum is below 9; outside the
/// mask counts as background.
inline std::size_t border_pixel_count(const BinaryMask& m) {
  std::size_t p = 0;
  for (std::ptrdiff_t y = 0; y < std::ptrdiff_t(m.height()); ++y)
    for (std::ptrdiff_t x = 0; x < std::ptrdiff_t(m.width()); ++x) {
      if (!m.at(std::size_t(y), std::size_t(x))) continue;
      int sum = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) sum += m.at_or_background(y + dy, x + dx);
      p += sum < 9;
    }
  return p;
}

/// P^2 / (4 pi A).
inline double border_irregularity(const BinaryMask& m) {
  const double a = double(m.count());
  if (a == 0.0) throw ShapeError("border irregularity of an empty mask");
  const double p = double(border_pixel_count(m));
  return p * p / (4.0 * std::numbers::pi * a);
}

struct ColorBox {
  std::string name;
  std::array<double, 3> rgb_min{}, rgb_max{};

  bool contains(double r, double g, double b) const noexcept {
    return r >= rgb_min[0] && r <= rgb_max[0] && g >= rgb_min[1] && g <= rgb_max[1] && b >= rgb_min[2] &&
           b <= rgb_max[2];
  }
};

using ColorTable = std::vector<ColorBox>;

inline const std::array<const char*, 6>& color_names() {
  static const std::array<const char*, 6> n{"white", "red", "light_brown", "dark_brown", "blue_gray", "black"};
  return n;
}

/// Default boxes in [0,1] RGB units, one per ABCD color.
inline ColorTable default_color_table() {
  return {
      {"white", {0.8, 0.8, 0.8}, {1.0, 1.0, 1.0}},
      {"red", {0.588, 0.0, 0.0}, {1.0, 0.2, 0.2}},
      {"light_brown", {0.588, 0.196, 0.0}, {0.94, 0.588, 0.392}},
      {"dark_brown", {0.243, 0.0, 0.0}, {0.588, 0.392, 0.196}},
      {"blue_gray", {0.0, 0.392, 0.49}, {0.588, 0.588, 0.588}},
      {"black", {0.0, 0.0, 0.0}, {0.243, 0.243, 0.243}},
  };
}

inline nlohmann::json color_table_to_json(const ColorTable& t) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& b : t) j.push_back({{"name", b.name}, {"rgb_min", b.rgb_min}, {"rgb_max", b.rgb_max}});
  return j;
}

/// Parses [{name, rgb_min[3], rgb_max[3]}, ...]; exactly the six ABCD colors
/// are required, in any order, and are returned in canonical order.
inline ColorTable parse_color_table(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("color table must be a JSON array");
  ColorTable parsed;
  for (const auto& e : j) {
    try {
      ColorBox b{e.at("name").get<std::string>(), e.at("rgb_min").get<std::array<double, 3>>(),
                 e.at("rgb_max").get<std::array<double, 3>>()};
      for (std::size_t c = 0; c < 3; ++c)
        if (b.rgb_min[c] > b.rgb_max[c]) throw FormatError("color '" + b.name + "' has rgb_min > rgb_max");
      parsed.push_back(std::move(b));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("malformed color table entry: ") + ex.what());
    }
  }
  ColorTable out;
  for (const char* name : color_names()) {
    auto it = std::find_if(parsed.begin(), parsed.end(), [&](const ColorBox& b) { return b.name == name; });
    if (it == parsed.end()) throw FormatError(std::string("color table lacks '") + name + "'");
    out.push_back(*it);
  }
  if (parsed.size() != out.size()) throw FormatError("color table has unknown or duplicate colors");
  return out;
}

inline ColorTable load_color_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open color table " + path.string());
  try {
    return parse_color_table(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("color table " + path.string() + ": " + e.what());
  }
}

namespace detail {

inline void require_same_extent(const ImagePlane& img, const BinaryMask& m) {
  if (img.height() != m.height() || img.width() != m.width() || img.channels() != 3) {
    throw ShapeError("image (" + std::to_string(img.height()) + "x" + std::to_string(img.width()) + "x" +
                     std::to_string(img.channels()) + ") and mask (" + std::to_string(m.height()) + "x" +
                     std::to_string(m.width()) + ") disagree");
  }
  if (m.empty()) throw ShapeError("mask has no foreground");
}

}  // namespace detail

/// Fraction of in-mask pixels inside each box (boxes may overlap).
inline std::vector<double> color_proportions(const ImagePlane& img, const BinaryMask& m,
                                             const ColorTable& table) {
  detail::require_same_extent(img, m);
  std::vector<std::size_t> hits(table.size(), 0);
  std::size_t n = 0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x) {
      if (!m.at(y, x)) continue;
      ++n;
      for (std::size_t k = 0; k < table.size(); ++k)
        hits[k] += table[k].contains(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
  std::vector<double> out(table.size());
  for (std::size_t k = 0; k < table.size(); ++k) out[k] = double(hits[k]) / double(n);
  return out;
}

inline const std::array<const char*, 7>& summary_names() {
  static const std::array<const char*, 7> n{"min", "q1", "median", "q3", "max", "mean", "sd"};
  return n;
}

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * double(v.size() - 1);
  const auto i = std::size_t(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - double(i)) * (v[i + 1] - v[i]);
}

/// Per channel R, G, B: min, Q1, median, Q3, max, mean, population sd over
/// in-mask pixels.
inline std::vector<double> channel_summaries(const ImagePlane& img, const BinaryMask& m) {
  detail::require_same_extent(img, m);
  std::vector<double> out;
  out.reserve(21);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> v;
    for (std::size_t y = 0; y < m.height(); ++y)
      for (std::size_t x = 0; x < m.width(); ++x)
        if (m.at(y, x)) v.push_back(img.at(y, x, c));
    std::sort(v.begin(), v.end());
    // Moments about the minimum keep a constant region exactly constant.
    const double pivot = v.front();
    double shift = 0.0;
    for (double a : v) shift += a - pivot;
    shift /= double(v.size());
    double var = 0.0;
    for (double a : v) var += (a - pivot - shift) * (a - pivot - shift);
    var /= double(v.size());
    const double mean = pivot + shift;
    out.insert(out.end(), {v.front(), quantile_sorted(v, 0.25), quantile_sorted(v, 0.5),
                           quantile_sorted(v, 0.75), v.back(), mean, std::sqrt(var)});
  }
  return out;
}

struct Diameter {
  std::size_t height = 0, width = 0;
};

inline Diameter diameter(const BinaryMask& m) {
  std::size_t y0 = m.height(), y1 = 0, x0 = m.width(), x1 = 0;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x)) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y0 > y1) throw ShapeError("diameter of an empty mask");
  return {y1 - y0 + 1, x1 - x0 + 1};
}

inline constexpr std::size_t kAbcdLength = 33;

inline std::vector<std::string> abcd_column_names() {
  std::vector<std::string> n{"sai_x", "sai_y", "lengthening", "border_irregularity"};
  for (const char* c : color_names()) n.push_back(std::string("color_") + c);
  for (const char* ch : {"r", "g", "b"})
    for (const char* s : summary_names()) n.push_back(std::string(ch) + "_" + s);
  n.push_back("diameter_h");
  n.push_back("diameter_w");
  return n;
}

/// The 33 ABCD values in column order. `img` is the image the colors are
/// read from (the preprocessed original, not a transferred image).
inline std::vector<double> assemble_abcd(const ImagePlane& img, const BinaryMask& mask,
                                         const ColorTable& table = default_color_table()) {
  detail::require_same_extent(img, mask);
  if (table.size() != 6) throw ShapeError("color table must have six entries");
  const auto mom = compute_moments(mask);
  const auto rotated = rotate_mask(mask, mom.theta);
  const auto sym = sai(rotated);
  const auto d = diameter(rotated);
  std::vector<double> v{sym.sai_x, sym.sai_y, lengthening(mom), border_irregularity(mask)};
  const auto colors = color_proportions(img, mask, table);
  v.insert(v.end(), colors.begin(), colors.end());
  const auto stats = channel_summaries(img, mask);
  v.insert(v.end(), stats.begin(), stats.end());
  v.push_back(double(d.height));
  v.push_back(double(d.width));
  return v;
}

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

struct FeatureRow {
  std::string id;
  int label = 0;
  std::vector<double> values;
};

inline std::string features_csv(const std::vector<FeatureRow>& rows, const std::vector<std::string>& columns) {
  std::ostringstream out;
  out << "id,label";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  for (const auto& r : rows) {
    if (r.values.size() != columns.size()) {
      throw ShapeError("feature row '" + r.id + "' has " + std::to_string(r.values.size()) + " values for " +
                       std::to_string(columns.size()) + " columns");
    }
    out << r.id << ',' << r.label;
    for (double v : r.values) out << ',' << format_double(v);
    out << '\n';
  }
  return out.str();
}

}  // namespace lesionforge

#endif  // LESIONFORGE_FEATURES_HPP
