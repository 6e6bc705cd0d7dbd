#ifndef LESIONFORGE_IMAGING_HPP
#define LESIONFORGE_IMAGING_HPP

// Rasters in [0,1] and the dermoscopy preprocessing chain: bilinear resize,
// median filtering, DullRazor-style hair removal, Shades-of-Gray color
// constancy, and the pixelwise-mean content canvas.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lesionforge/error.hpp"
#include "lesionforge/ndtensor.hpp"

namespace lesionforge {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

/// H x W x C raster, channel-interleaved, samples in [0,1]; C is 1 or 3.
class ImagePlane {
 public:
  ImagePlane() = default;

  ImagePlane(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels), data_(height * width * channels, clamp01(fill)) {
    validate();
  }

  ImagePlane(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    validate();
    if (data_.size() != height_ * width_ * channels_) {
      throw ShapeError("image data length " + std::to_string(data_.size()) + " != " + std::to_string(height_) +
                       "x" + std::to_string(width_) + "x" + std::to_string(channels_));
    }
    for (auto& v : data_) v = clamp01(v);
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pixels() const noexcept { return height_ * width_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * width_ + x) * channels_ + c];
  }
  /// Writes are clamped to [0,1].
  void set(std::size_t y, std::size_t x, std::size_t c, double v) noexcept {
    data_[(y * width_ + x) * channels_ + c] = clamp01(v);
  }

  bool same_geometry(const ImagePlane& o) const noexcept {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  bool operator==(const ImagePlane&) const = default;

 private:
  void validate() const {
    if (height_ == 0 || width_ == 0) throw ShapeError("image extents must be positive");
    if (channels_ != 1 && channels_ != 3) {
      throw ShapeError("image channels must be 1 or 3, got " + std::to_string(channels_));
    }
  }

  std::size_t height_ = 0, width_ = 0, channels_ = 0;
  std::vector<double> data_;
};

inline Tensor to_tensor(const ImagePlane& img) {
  return Tensor({img.height(), img.width(), img.channels()}, img.data());
}

/// Values outside [0,1] are clamped.
inline ImagePlane from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("image tensor must be H x W x C");
  return ImagePlane(t.extent(0), t.extent(1), t.extent(2), t.storage());
}

/// ITU-R BT.601 luma.
inline ImagePlane to_gray(const ImagePlane& img) {
  if (img.channels() == 1) return img;
  ImagePlane g(img.height(), img.width(), 1);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      g.set(y, x, 0, 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2));
  return g;
}

namespace detail {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

/// Half-pixel-centre source taps: u = (i + 0.5) * in/out - 0.5, clamped.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = double(in) / double(out);
  for (std::size_t i = 0; i < out; ++i) {
    double u = (double(i) + 0.5) * scale - 0.5;
    u = std::clamp(u, 0.0, double(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(u));
    const auto hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, u - double(lo)};
  }
  return taps;
}

}  // namespace detail

inline ImagePlane resize_bilinear(const ImagePlane& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be at least 1x1");
  const auto ty = detail::bilinear_taps(img.height(), out_h);
  const auto tx = detail::bilinear_taps(img.width(), out_w);
  const std::size_t c = img.channels();
  ImagePlane out(out_h, out_w, c);
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto& a = ty[y];
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto& b = tx[x];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = img.at(a.lo, b.lo, ch) * (1.0 - b.frac) + img.at(a.lo, b.hi, ch) * b.frac;
        const double bot = img.at(a.hi, b.lo, ch) * (1.0 - b.frac) + img.at(a.hi, b.hi, ch) * b.frac;
        out.set(y, x, ch, top * (1.0 - a.frac) + bot * a.frac);
      }
    }
  }
  return out;
}

/// k x k median per channel with replicated borders.
inline ImagePlane median_filter(const ImagePlane& img, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ShapeError("median window must be odd, got " + std::to_string(k));
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const auto h = static_cast<std::ptrdiff_t>(img.height());
  const auto w = static_cast<std::ptrdiff_t>(img.width());
  ImagePlane out(img.height(), img.width(), img.channels());
  std::vector<double> window(k * k);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < img.channels(); ++c) {
        std::size_t n = 0;
        for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
          const auto yy = static_cast<std::size_t>(std::clamp(y + dy, std::ptrdiff_t{0}, h - 1));
          for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
            const auto xx = static_cast<std::size_t>(std::clamp(x + dx, std::ptrdiff_t{0}, w - 1));
            window[n++] = img.at(yy, xx, c);
          }
        }
        auto mid = window.begin() + static_cast<std::ptrdiff_t>(window.size() / 2);
        std::nth_element(window.begin(), mid, window.end());
        out.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c, *mid);
      }
    }
  }
  return out;
}

struct HairRemovalOptions {
  double threshold = 0.07;          // closing response above this marks hair
  std::size_t element_length = 9;  // linear structuring element length
};

struct HairRemovalResult {
  ImagePlane image;
  std::vector<std::uint8_t> hair_mask;  // H*W, 1 = hair
};

namespace detail {

/// One channel as a plain H x W buffer.
inline std::vector<double> channel_plane(const ImagePlane& img, std::size_t c) {
  std::vector<double> p(img.pixels());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data()[i * img.channels() + c];
  return p;
}

/// Grayscale dilation (take_max) or erosion along a centred line element.
/// Samples falling outside the raster are ignored.
inline std::vector<double> line_morph(const std::vector<double>& src, std::size_t h, std::size_t w, int dx, int dy,
                                      std::size_t length, bool take_max) {
  const auto r = static_cast<std::ptrdiff_t>(length / 2);
  std::vector<double> out(src.size());
  for (std::ptrdiff_t y = 0; y < std::ptrdiff_t(h); ++y) {
    for (std::ptrdiff_t x = 0; x < std::ptrdiff_t(w); ++x) {
      double v = take_max ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        const auto yy = y + t * dy, xx = x + t * dx;
        if (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(h) || xx >= std::ptrdiff_t(w)) continue;
        const double s = src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        v = take_max ? std::max(v, s) : std::min(v, s);
      }
      out[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = v;
    }
  }
  return out;
}

}  // namespace detail

/// DullRazor-style hair removal returning the detected hair mask as well.
/// Per channel, the maximum of grayscale closings with 0/45/90 degree line
/// elements is compared to the channel; pixels where any channel's response
/// exceeds the threshold are hair. Each hair pixel is re-estimated by linear
/// interpolation between the nearest non-hair pixels along whichever of four
/// directions crosses the hair mask most briefly (across the strand).
inline HairRemovalResult remove_hair_with_mask(const ImagePlane& img, const HairRemovalOptions& opt = {}) {
  if (img.channels() != 3) throw ShapeError("hair removal needs a 3-channel image");
  const std::size_t h = img.height(), w = img.width();
  std::vector<std::uint8_t> mask(h * w, 0);
  constexpr std::array<std::array<int, 2>, 3> elements{{{1, 0}, {1, -1}, {0, 1}}};
  std::array<std::vector<double>, 3> planes;
  for (std::size_t c = 0; c < 3; ++c) {
    planes[c] = detail::channel_plane(img, c);
    std::vector<double> closed(h * w, -std::numeric_limits<double>::infinity());
    for (const auto& e : elements) {
      const auto dil = detail::line_morph(planes[c], h, w, e[0], e[1], opt.element_length, true);
      const auto clo = detail::line_morph(dil, h, w, e[0], e[1], opt.element_length, false);
      for (std::size_t i = 0; i < closed.size(); ++i) closed[i] = std::max(closed[i], clo[i]);
    }
    for (std::size_t i = 0; i < closed.size(); ++i)
      if (closed[i] - planes[c][i] > opt.threshold) mask[i] = 1;
  }

  ImagePlane out = img;
  constexpr std::array<std::array<int, 2>, 4> dirs{{{1, 0}, {0, 1}, {1, 1}, {1, -1}}};
  auto is_hair = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    return mask[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 0;
  };
  auto inside = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    return y >= 0 && x >= 0 && y < std::ptrdiff_t(h) && x < std::ptrdiff_t(w);
  };
  for (std::ptrdiff_t y = 0; y < std::ptrdiff_t(h); ++y) {
    for (std::ptrdiff_t x = 0; x < std::ptrdiff_t(w); ++x) {
      if (!is_hair(y, x)) continue;
      struct End {
        bool found = false;
        std::ptrdiff_t y = 0, x = 0, dist = 0;
      };
      auto walk = [&](int dx, int dy) {
        End e;
        for (std::ptrdiff_t t = 1;; ++t) {
          const auto yy = y + t * dy, xx = x + t * dx;
          if (!inside(yy, xx)) return e;
          if (!is_hair(yy, xx)) return End{true, yy, xx, t};
        }
      };
      std::ptrdiff_t best_len = std::numeric_limits<std::ptrdiff_t>::max();
      End best_a, best_b;
      bool two_sided = false;
      for (const auto& d : dirs) {
        const End a = walk(d[0], d[1]);
        const End b = walk(-d[0], -d[1]);
        if (a.found && b.found) {
          const auto len = a.dist + b.dist;
          if (!two_sided || len < best_len) {
            best_len = len;
            best_a = a;
            best_b = b;
            two_sided = true;
          }
        } else if (!two_sided && (a.found || b.found)) {
          const End& one = a.found ? a : b;
          if (one.dist < best_len) {
            best_len = one.dist;
            best_a = one;
            best_b = End{};
          }
        }
      }
      if (!best_a.found) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        const double va = img.at(std::size_t(best_a.y), std::size_t(best_a.x), c);
        double v = va;
        if (best_b.found) {
          const double vb = img.at(std::size_t(best_b.y), std::size_t(best_b.x), c);
          v = (va * double(best_b.dist) + vb * double(best_a.dist)) / double(best_a.dist + best_b.dist);
        }
        out.set(std::size_t(y), std::size_t(x), c, v);
      }
    }
  }
  return {std::move(out), std::move(mask)};
}

inline ImagePlane remove_hair(const ImagePlane& img, const HairRemovalOptions& opt = {}) {
  return remove_hair_with_mask(img, opt).image;
}

/// Minkowski p-mean of one channel.
inline double minkowski_mean(const ImagePlane& img, std::size_t c, double p) {
  double acc = 0.0;
  for (std::size_t i = 0; i < img.pixels(); ++i) acc += std::pow(img.data()[i * img.channels() + c], p);
  return std::pow(acc / double(img.pixels()), 1.0 / p);
}

/// Shades-of-Gray constancy: each channel is scaled by g / m_c where m_c is its
/// Minkowski p-mean and g the mean of the three. A channel with m_c == 0 is
/// left as is.
inline ImagePlane shades_of_gray(const ImagePlane& img, double p = 6.0) {
  if (img.channels() != 3) throw ShapeError("Shades of Gray needs a 3-channel image");
  if (!(p >= 1.0)) throw ShapeError("Minkowski order must be >= 1");
  std::array<double, 3> m{};
  for (std::size_t c = 0; c < 3; ++c) m[c] = minkowski_mean(img, c, p);
  const double g = (m[0] + m[1] + m[2]) / 3.0;
  ImagePlane out(img.height(), img.width(), 3);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double gain = m[c] > 0.0 ? g / m[c] : 1.0;
        out.set(y, x, c, img.at(y, x, c) * gain);
      }
  return out;
}

/// Pixelwise mean, summed sequentially in list order.
inline ImagePlane build_content_image(const std::vector<ImagePlane>& images) {
  if (images.empty()) throw ShapeError("content image needs at least one input image");
  const auto& first = images.front();
  std::vector<double> acc(first.data().size(), 0.0);
  for (const auto& img : images) {
    if (!img.same_geometry(first)) throw ShapeError("content image inputs must share one geometry");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += img.data()[i];
  }
  const double n = double(images.size());
  for (auto& v : acc) v /= n;
  return ImagePlane(first.height(), first.width(), first.channels(), std::move(acc));
}

/// The preprocessing chain in order; `pre_normalization` is the image after
/// median filtering and hair removal, before color normalization, which is
/// what the content canvas averages.
struct PreprocessOptions {
  std::size_t size = 224;
  std::size_t median_window = 5;
  bool hair_removal = true;
  HairRemovalOptions hair{};
  double minkowski_p = 6.0;
};

struct PreprocessResult {
  ImagePlane pre_normalization;
  ImagePlane normalized;
};

inline PreprocessResult preprocess(const ImagePlane& raw, const PreprocessOptions& opt = {}) {
  ImagePlane img = raw;
  if (img.channels() == 1) {
    std::vector<double> rgb(img.pixels() * 3);
    for (std::size_t i = 0; i < img.pixels(); ++i) rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = img.data()[i];
    img = ImagePlane(img.height(), img.width(), 3, std::move(rgb));
  }
  img = resize_bilinear(img, opt.size, opt.size);
  img = median_filter(img, opt.median_window);
  if (opt.hair_removal) img = remove_hair(img, opt.hair);
  auto normalized = shades_of_gray(img, opt.minkowski_p);
  return {std::move(img), std::move(normalized)};
}

}  // namespace lesionforge

#endif  // LESIONFORGE_IMAGING_HPP
