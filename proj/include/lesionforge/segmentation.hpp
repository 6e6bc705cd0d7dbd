#ifndef LESIONFORGE_SEGMENTATION_HPP
#define LESIONFORGE_SEGMENTATION_HPP

// Binary lesion masks: Otsu thresholding, single-blob cleanup, and the
// per-layer normalized mask pyramid that guides style statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "lesionforge/error.hpp"
#include "lesionforge/imaging.hpp"
#include "lesionforge/vggnet.hpp"

namespace lesionforge {

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : height_(height), width_(width), data_(height * width, fill ? 1 : 0) {
    if (height == 0 || width == 0) throw ShapeError("mask extents must be positive");
  }
  BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (height == 0 || width == 0) throw ShapeError("mask extents must be positive");
    if (data_.size() != height * width) throw ShapeError("mask data length does not match extents");
    for (auto& v : data_) v = v ? 1 : 0;
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  const std::vector<std::uint8_t>& data() const noexcept { return data_; }

  bool at(std::size_t y, std::size_t x) const noexcept { return data_[y * width_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v) noexcept { data_[y * width_ + x] = v ? 1 : 0; }
  /// Out-of-range coordinates read as background.
  bool at_or_background(std::ptrdiff_t y, std::ptrdiff_t x) const noexcept {
    if (y < 0 || x < 0 || y >= std::ptrdiff_t(height_) || x >= std::ptrdiff_t(width_)) return false;
    return at(std::size_t(y), std::size_t(x));
  }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
  }
  bool empty() const noexcept { return count() == 0; }

  bool operator==(const BinaryMask&) const = default;

 private:
  std::size_t height_ = 0, width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Nonzero samples (any channel) are foreground.
inline BinaryMask mask_from_image(const ImagePlane& img) {
  BinaryMask m(img.height(), img.width());
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      bool on = false;
      for (std::size_t c = 0; c < img.channels(); ++c) on = on || img.at(y, x, c) > 0.0;
      m.set(y, x, on);
    }
  return m;
}

/// 0 = background, 1.0 = foreground (written as 255).
inline ImagePlane mask_to_image(const BinaryMask& m) {
  ImagePlane img(m.height(), m.width(), 1);
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x) img.set(y, x, 0, m.at(y, x) ? 1.0 : 0.0);
  return img;
}

inline BinaryMask resize_nearest(const BinaryMask& m, std::size_t h, std::size_t w) {
  BinaryMask out(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto sy = std::min(m.height() - 1, static_cast<std::size_t>((double(y) + 0.5) * m.height() / h));
    for (std::size_t x = 0; x < w; ++x) {
      const auto sx = std::min(m.width() - 1, static_cast<std::size_t>((double(x) + 0.5) * m.width() / w));
      out.set(y, x, m.at(sy, sx));
    }
  }
  return out;
}

inline constexpr std::size_t kOtsuBins = 256;

inline std::size_t otsu_bin(double v) {
  return std::min<std::size_t>(kOtsuBins - 1, static_cast<std::size_t>(clamp01(v) * double(kOtsuBins)));
}

/// Otsu level over 256 uniform bins: pixels in bins <= level form the dark
/// class. Inter-class variance comparisons are done in exact integer
/// arithmetic; ties resolve to the lowest level.
inline std::size_t otsu_level(const ImagePlane& gray) {
  if (gray.channels() != 1) throw ShapeError("Otsu thresholding needs a 1-channel image");
  std::vector<std::uint64_t> hist(kOtsuBins, 0);
  for (double v : gray.data()) ++hist[otsu_bin(v)];
  const std::uint64_t n = gray.pixels();
  std::uint64_t total_sum = 0;
  for (std::size_t b = 0; b < kOtsuBins; ++b) total_sum += b * hist[b];

  using u128 = unsigned __int128;
  bool found = false;
  std::size_t best = 0;
  u128 best_num = 0, best_den = 1;
  std::uint64_t n0 = 0, s0 = 0;
  for (std::size_t t = 0; t + 1 < kOtsuBins; ++t) {
    n0 += hist[t];
    s0 += t * hist[t];
    const std::uint64_t n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const std::uint64_t s1 = total_sum - s0;
    // sigma_b^2 * n^2 = (n0*s1 - n1*s0)^2 / (n0*n1)
    const u128 a = u128(n0) * s1, b = u128(n1) * s0;
    const u128 diff = a > b ? a - b : b - a;
    const u128 num = diff * diff;
    const u128 den = u128(n0) * n1;
    if (num == 0) continue;
    // num/den > best_num/best_den  <=>  num*best_den > best_num*den
    if (!found || num * best_den > best_num * den) {
      found = true;
      best = t;
      best_num = num;
      best_den = den;
    }
  }
  if (!found) throw NumericError("degenerate histogram: no threshold separates two classes");
  return best;
}

inline BinaryMask otsu_threshold(const ImagePlane& gray) {
  const auto level = otsu_level(gray);
  BinaryMask m(gray.height(), gray.width());
  for (std::size_t y = 0; y < gray.height(); ++y)
    for (std::size_t x = 0; x < gray.width(); ++x) m.set(y, x, otsu_bin(gray.at(y, x, 0)) <= level);
  return m;
}

namespace detail {

/// 4-connected labels of pixels whose value equals `value`; labels start at 1
/// in row-major order of each component's first pixel.
inline std::vector<std::uint32_t> label_components(const BinaryMask& m, bool value, std::size_t& count) {
  const std::size_t h = m.height(), w = m.width();
  std::vector<std::uint32_t> labels(h * w, 0);
  count = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if ((m.data()[start] != 0) != value || labels[start]) continue;
    const auto id = static_cast<std::uint32_t>(++count);
    labels[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if ((m.data()[q] != 0) == value && !labels[q]) {
          labels[q] = id;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
  }
  return labels;
}

}  // namespace detail

/// Largest 4-connected foreground component; equal sizes keep the component
/// whose first pixel comes earliest in row-major order.
inline BinaryMask keep_largest_component(const BinaryMask& m) {
  std::size_t count = 0;
  const auto labels = detail::label_components(m, true, count);
  if (count == 0) throw ShapeError("mask has no foreground");
  std::vector<std::size_t> sizes(count + 1, 0);
  for (auto l : labels) ++sizes[l];
  std::size_t best = 1;
  for (std::size_t l = 2; l <= count; ++l)
    if (sizes[l] > sizes[best]) best = l;
  std::vector<std::uint8_t> data(m.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = labels[i] == best;
  return BinaryMask(m.height(), m.width(), std::move(data));
}

/// Background not 4-reachable from the border becomes foreground.
inline BinaryMask fill_holes(const BinaryMask& m) {
  const std::size_t h = m.height(), w = m.width();
  std::vector<std::uint8_t> outside(h * w, 0);
  std::vector<std::size_t> stack;
  auto seed = [&](std::size_t p) {
    if (!m.data()[p] && !outside[p]) {
      outside[p] = 1;
      stack.push_back(p);
    }
  };
  for (std::size_t x = 0; x < w; ++x) {
    seed(x);
    seed((h - 1) * w + x);
  }
  for (std::size_t y = 0; y < h; ++y) {
    seed(y * w);
    seed(y * w + w - 1);
  }
  while (!stack.empty()) {
    const auto p = stack.back();
    stack.pop_back();
    const std::size_t y = p / w, x = p % w;
    if (y > 0) seed(p - w);
    if (y + 1 < h) seed(p + w);
    if (x > 0) seed(p - 1);
    if (x + 1 < w) seed(p + 1);
  }
  std::vector<std::uint8_t> data(h * w);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = outside[i] ? 0 : 1;
  return BinaryMask(h, w, std::move(data));
}

/// k x k majority vote with replicated borders. The window always holds k*k
/// samples, so with odd k there are no ties.
inline BinaryMask binary_median(const BinaryMask& m, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ShapeError("median window must be odd");
  const auto h = std::ptrdiff_t(m.height()), w = std::ptrdiff_t(m.width());
  const auto r = std::ptrdiff_t(k / 2);
  std::vector<std::uint32_t> integral((m.height() + 1) * (m.width() + 1), 0);
  const std::size_t iw = m.width() + 1;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      integral[(y + 1) * iw + x + 1] =
          integral[y * iw + x + 1] + integral[(y + 1) * iw + x] - integral[y * iw + x] + (m.at(y, x) ? 1 : 0);
  auto rect = [&](std::ptrdiff_t y0, std::ptrdiff_t x0, std::ptrdiff_t y1, std::ptrdiff_t x1) {
    // inclusive in-range rectangle
    return std::int64_t(integral[std::size_t(y1 + 1) * iw + std::size_t(x1 + 1)]) -
           integral[std::size_t(y0) * iw + std::size_t(x1 + 1)] - integral[std::size_t(y1 + 1) * iw + std::size_t(x0)] +
           integral[std::size_t(y0) * iw + std::size_t(x0)];
  };
  BinaryMask out(m.height(), m.width());
  const std::int64_t majority = std::int64_t(k * k) / 2 + 1;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      // Replicated borders: out-of-range rows/columns repeat the edge line,
      // so count the in-range window and add the repeated edges explicitly.
      std::int64_t votes = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        const auto yy = std::clamp(y + dy, std::ptrdiff_t{0}, h - 1);
        const auto x0 = std::max(x - r, std::ptrdiff_t{0}), x1 = std::min(x + r, w - 1);
        votes += rect(yy, x0, yy, x1);
        if (x - r < 0) votes += (r - x) * (m.at(std::size_t(yy), 0) ? 1 : 0);
        if (x + r > w - 1) votes += (x + r - (w - 1)) * (m.at(std::size_t(yy), std::size_t(w - 1)) ? 1 : 0);
      }
      out.set(std::size_t(y), std::size_t(x), votes >= majority);
    }
  }
  return out;
}

inline BinaryMask blob_and_holes(const BinaryMask& m) { return fill_holes(keep_largest_component(m)); }

struct CleanMaskOptions {
  std::size_t median_window = 9;
  std::size_t max_rounds = 4096;
};

/// Largest blob, holes filled, median-smoothed, then blob+hole again. The
/// smoothing round repeats until the mask stops changing. Majority smoothing
/// can settle into a short cycle instead; the cycle member with the smallest
/// row-major bit pattern is returned then, so the result is idempotent either
/// way. If smoothing would erase the mask entirely the pre-smoothing mask is
/// returned.
inline BinaryMask clean_mask(const BinaryMask& m, const CleanMaskOptions& opt = {}) {
  if (m.empty()) throw ShapeError("cannot clean an empty mask");
  std::vector<BinaryMask> history{blob_and_holes(m)};
  for (std::size_t round = 0; round < opt.max_rounds; ++round) {
    const auto& cur = history.back();
    const auto blurred = binary_median(cur, opt.median_window);
    if (blurred.empty()) return cur;
    auto next = blob_and_holes(blurred);
    if (next == cur) return cur;
    const auto seen = std::find(history.begin(), history.end(), next);
    if (seen != history.end()) {
      return *std::min_element(seen, history.end(),
                               [](const BinaryMask& a, const BinaryMask& b) { return a.data() < b.data(); });
    }
    history.push_back(std::move(next));
  }
  return history.back();
}

enum class MaskPooling { Max, Average };

struct PyramidLevel {
  std::size_t height = 0, width = 0;
  std::vector<double> weights;  // row-major, sum of squares == 1
};

struct MaskPyramid {
  std::map<std::string, PyramidLevel> levels;

  const PyramidLevel& at(const std::string& layer) const {
    auto it = levels.find(layer);
    if (it == levels.end()) throw ShapeError("mask pyramid has no level for layer '" + layer + "'");
    return it->second;
  }
};

namespace detail {

inline std::vector<double> pool_plane(const std::vector<double>& src, std::size_t h, std::size_t w,
                                      MaskPooling mode) {
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("mask too small for the requested pooling depth");
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const double a = src[2 * y * w + 2 * x], b = src[2 * y * w + 2 * x + 1];
      const double c = src[(2 * y + 1) * w + 2 * x], d = src[(2 * y + 1) * w + 2 * x + 1];
      out[y * ow + x] = mode == MaskPooling::Max ? std::max({a, b, c, d}) : 0.25 * (a + b + c + d);
    }
  return out;
}

}  // namespace detail

/// Unit-norm uniform weights 1/sqrt(h*w).
inline PyramidLevel uniform_level(std::size_t h, std::size_t w) {
  return {h, w, std::vector<double>(h * w, 1.0 / std::sqrt(double(h * w)))};
}

/// Downscales the mask through the same 2x2 pooling cascade as the network
/// for each requested layer, then scales each level to unit sum of squares.
inline MaskPyramid build_mask_pyramid(const BinaryMask& mask, const std::vector<std::string>& layers,
                                      MaskPooling mode = MaskPooling::Max) {
  if (mask.empty()) throw ShapeError("mask pyramid needs a nonempty mask");
  MaskPyramid pyr;
  for (const auto& layer : layers) {
    const auto depth = vgg19_pool_depth(layer);
    std::vector<double> plane(mask.data().begin(), mask.data().end());
    std::size_t h = mask.height(), w = mask.width();
    for (std::size_t d = 0; d < depth; ++d) {
      plane = detail::pool_plane(plane, h, w, mode);
      h /= 2;
      w /= 2;
    }
    double ss = 0.0;
    for (double v : plane) ss += v * v;
    if (!(ss > 0.0)) throw NumericError("mask vanished at layer '" + layer + "'");
    const double inv = 1.0 / std::sqrt(ss);
    for (auto& v : plane) v *= inv;
    pyr.levels[layer] = PyramidLevel{h, w, std::move(plane)};
  }
  return pyr;
}

}  // namespace lesionforge

#endif  // LESIONFORGE_SEGMENTATION_HPP
