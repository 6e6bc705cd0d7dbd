#ifndef LESIONFORGE_TESTS_SYNTHETIC_HPP
#define LESIONFORGE_TESTS_SYNTHETIC_HPP

// Synthetic lesion corpus: a randomly placed, randomly shaped dark blob over
// noisy, unevenly lit skin. The texture inside the blob depends on the class:
// coarse brown blotches for class 0, fine blue-gray dots for class 1.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "lesionforge/image_io.hpp"
#include "lesionforge/segmentation.hpp"

namespace synth {

struct CorpusOptions {
  std::size_t count = 12;
  std::size_t size = 64;
  std::uint64_t seed = 1;
  double texture_amplitude = 0.18;
  double radius_min = 0.16, radius_span = 0.08;  // fractions of the image side
  double background = 0.0;                       // skin tone, shading and mottling amplitude
  bool masks = false;                            // ground-truth masks in the manifest
};

struct Lesion {
  lesionforge::ImagePlane image;
  lesionforge::BinaryMask mask;
};

inline Lesion lesion_image(int label, std::size_t n, std::mt19937_64& rng, const CorpusOptions& opt) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  const double pi = 3.14159265358979323846, amp = opt.texture_amplitude, bg = opt.background;
  const double r0 = double(n) * (opt.radius_min + opt.radius_span * u(rng));
  const double cy = r0 * 1.4 + u(rng) * (double(n) - 2.8 * r0), cx = r0 * 1.4 + u(rng) * (double(n) - 2.8 * r0);
  const double a2 = 0.25 * u(rng), a3 = 0.15 * u(rng), p2 = 2 * pi * u(rng), p3 = 2 * pi * u(rng);
  const double phase_y = 2 * pi * u(rng), phase_x = 2 * pi * u(rng), tone = 0.9 + 0.2 * u(rng);
  double cast[3];
  for (auto& v : cast) v = bg * (2 * u(rng) - 1);
  const double ramp = 2 * pi * u(rng), mottle_y = 2 * pi * u(rng), mottle_x = 2 * pi * u(rng);
  const double mottle_f = 1.5 + 2 * u(rng);

  Lesion out{lesionforge::ImagePlane(n, n, 3), lesionforge::BinaryMask(n, n)};
  const double skin[3] = {0.86, 0.70, 0.60}, lesion[3] = {0.45, 0.30, 0.24}, dots[3] = {0.6, 1.6, 2.6};
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = double(y) - cy, dx = double(x) - cx;
      const double th = std::atan2(dy, dx);
      const double r = r0 * (1 + a2 * std::cos(2 * th + p2) + a3 * std::cos(3 * th + p3));
      const bool inside = dy * dy + dx * dx < r * r;
      out.mask.set(y, x, inside);
      const double ty = double(y) / double(n) - 0.5, tx = double(x) / double(n) - 0.5;
      const double shade = bg * (std::cos(ramp) * tx + std::sin(ramp) * ty) +
                           0.5 * bg * std::sin(2 * pi * mottle_f * tx + mottle_x) * std::sin(2 * pi * mottle_f * ty + mottle_y);
      const double dot = std::cos(pi * 0.9 * double(x) + phase_x) * std::cos(pi * 0.9 * double(y) + phase_y);
      const double blotch = std::sin(2 * pi * double(x) / 12.0 + phase_x) * std::sin(2 * pi * double(y) / 12.0 + phase_y);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = skin[c] + cast[c] + shade;
        if (inside && label) {
          v = lesion[c] * tone + (dot > 0 ? amp * dot * dots[c] : 0.0);
        } else if (inside) {
          v = lesion[c] * tone + amp * blotch;
        }
        out.image.set(y, x, c, lesionforge::clamp01(v + noise(rng)));
      }
    }
  return out;
}

/// Writes PNGs and manifest.csv into `dir`; labels alternate 0,1,...
inline std::filesystem::path write_corpus(const std::filesystem::path& dir, const CorpusOptions& opt) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(opt.seed);
  std::ofstream manifest(dir / "manifest.csv");
  manifest << (opt.masks ? "id,path,label,mask\n" : "id,path,label\n");
  for (std::size_t i = 0; i < opt.count; ++i) {
    const int label = int(i % 2);
    const auto name = "les" + std::to_string(i);
    const auto l = lesion_image(label, opt.size, rng, opt);
    lesionforge::write_image(l.image, dir / (name + ".png"));
    manifest << name << ',' << name << ".png," << label;
    if (opt.masks) {
      lesionforge::write_image(lesionforge::mask_to_image(l.mask), dir / (name + "_mask.png"));
      manifest << ',' << name << "_mask.png";
    }
    manifest << '\n';
  }
  return dir / "manifest.csv";
}

}  // namespace synth

#endif  // LESIONFORGE_TESTS_SYNTHETIC_HPP
