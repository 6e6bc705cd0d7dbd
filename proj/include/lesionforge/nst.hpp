#ifndef LESIONFORGE_NST_HPP
#define LESIONFORGE_NST_HPP

// Mask-guided neural style transfer: content, masked-Gram style and total
// variation losses, and Adam-driven synthesis of the target image.
//
// Feature maps are handled as M x N matrices (M spatial positions, N
// channels), which is exactly the row-major layout of an h x w x N tensor.
// Style statistics of the style image are taken under its lesion mask
// pyramid; those of the generated image under a uniform unit-norm mask, so
// the whole canvas takes on the lesion's statistics.

#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "lesionforge/error.hpp"
#include "lesionforge/imaging.hpp"
#include "lesionforge/ndtensor.hpp"
#include "lesionforge/segmentation.hpp"
#include "lesionforge/vggnet.hpp"

namespace lesionforge {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureDims {
  std::size_t positions, channels;
};

inline FeatureDims feature_dims(const Tensor& f) {
  if (f.rank() == 2) return {f.extent(0), f.extent(1)};
  if (f.rank() == 3) return {f.extent(0) * f.extent(1), f.extent(2)};
  throw ShapeError("feature map must be M x N or h x w x N, got " + shape_string(f.shape()));
}

inline Eigen::Map<const RowMatrix> as_matrix(const Tensor& f) {
  const auto d = feature_dims(f);
  return {f.data().data(), Eigen::Index(d.positions), Eigen::Index(d.channels)};
}

}  // namespace detail

/// G = F^T F: inner products between the N vectorized feature maps.
inline Tensor gram(const Tensor& features) {
  const auto d = detail::feature_dims(features);
  const auto f = detail::as_matrix(features);
  detail::RowMatrix g = f.transpose() * f;
  g = 0.5 * (g + g.transpose()).eval();
  return Tensor({d.channels, d.channels}, std::vector<double>(g.data(), g.data() + g.size()));
}

/// Scales row k (spatial position k) of every feature map by mask[k].
inline Tensor mask_features(const Tensor& features, std::span<const double> mask) {
  const auto d = detail::feature_dims(features);
  if (mask.size() != d.positions) {
    throw ShapeError("mask length " + std::to_string(mask.size()) + " != feature positions " +
                     std::to_string(d.positions));
  }
  Tensor out = features;
  for (std::size_t k = 0; k < d.positions; ++k)
    for (std::size_t j = 0; j < d.channels; ++j) out[k * d.channels + j] *= mask[k];
  return out;
}

struct LossWithSeed {
  double loss = 0.0;
  Tensor seed;  // derivative of loss w.r.t. the features (or image)
};

/// L = 1/2 sum (F - P)^2, seed F - P.
inline LossWithSeed content_loss(const Tensor& features, const Tensor& target) {
  Tensor::require_same_shape(features, target, "content_loss");
  LossWithSeed r{0.0, features - target};
  for (double v : r.seed.data()) r.loss += 0.5 * v * v;
  return r;
}

/// E = sum (G - A)^2 / (4 N^2 M^2) with G = gram(F~); seed F~ (G - A) / (N^2 M^2).
inline LossWithSeed style_layer_loss(const Tensor& masked_features, const Tensor& target_gram) {
  const auto d = detail::feature_dims(masked_features);
  if (target_gram.shape() != Shape{d.channels, d.channels}) {
    throw ShapeError("style target Gram " + shape_string(target_gram.shape()) + " does not match " +
                     std::to_string(d.channels) + " feature maps");
  }
  const double n = double(d.channels), m = double(d.positions);
  const auto f = detail::as_matrix(masked_features);
  detail::RowMatrix diff = f.transpose() * f;
  diff = 0.5 * (diff + diff.transpose()).eval();
  diff -= detail::as_matrix(target_gram);
  LossWithSeed r;
  r.loss = diff.squaredNorm() / (4.0 * n * n * m * m);
  detail::RowMatrix seed = (f * diff) / (n * n * m * m);
  r.seed = Tensor(masked_features.shape(), std::vector<double>(seed.data(), seed.data() + seed.size()));
  return r;
}

/// Anisotropic TV: sum of |x(i,j) - x(i+1,j)| + |x(i,j) - x(i,j+1)| over all
/// channels, out-of-range neighbours omitted; sign(0) = 0 in the gradient.
inline LossWithSeed tv_loss(const Tensor& image) {
  detail::require_rank(image, 3, "tv_loss image");
  const std::size_t h = image.extent(0), w = image.extent(1), c = image.extent(2);
  LossWithSeed r{0.0, Tensor(image.shape())};
  auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = image.at(y, x, ch);
        if (y + 1 < h) {
          const double d = v - image.at(y + 1, x, ch);
          r.loss += std::abs(d);
          r.seed.at(y, x, ch) += sgn(d);
          r.seed.at(y + 1, x, ch) -= sgn(d);
        }
        if (x + 1 < w) {
          const double d = v - image.at(y, x + 1, ch);
          r.loss += std::abs(d);
          r.seed.at(y, x, ch) += sgn(d);
          r.seed.at(y, x + 1, ch) -= sgn(d);
        }
      }
  return r;
}

inline const std::vector<std::string>& style_layer_choices() {
  static const std::vector<std::string> v{"relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"};
  return v;
}

inline const std::vector<std::string>& content_layer_choices() {
  static const std::vector<std::string> v{"relu1_2", "relu2_2", "relu3_2", "relu4_2", "relu5_2"};
  return v;
}

struct TransferConfig {
  std::vector<std::string> style_layers = style_layer_choices();
  std::string content_layer = "relu4_2";
  double alpha = 1.0;
  double beta = 1000.0;  // style/content ratio with alpha = 1
  double gamma = 1.0;    // TV weight
  std::vector<double> layer_weights;  // empty: 1/|style_layers| each
  std::size_t max_iters = 500;
  double rel_tol = 0.0005;
  AdamSettings adam{};

  double layer_weight(std::size_t i) const {
    return layer_weights.empty() ? 1.0 / double(style_layers.size()) : layer_weights.at(i);
  }

  void validate() const {
    if (style_layers.empty()) throw ShapeError("at least one style layer is required");
    std::set<std::string> seen;
    for (const auto& l : style_layers) {
      if (!vgg19_op_index(l)) throw ShapeError("unknown style layer '" + l + "'");
      if (!seen.insert(l).second) throw ShapeError("duplicate style layer '" + l + "'");
    }
    if (!vgg19_op_index(content_layer)) throw ShapeError("unknown content layer '" + content_layer + "'");
    if (!layer_weights.empty() && layer_weights.size() != style_layers.size()) {
      throw ShapeError("layer_weights must have one entry per style layer");
    }
    if (alpha < 0 || beta < 0 || gamma < 0) throw ShapeError("loss weights must be nonnegative");
    if (max_iters == 0) throw ShapeError("max_iters must be positive");
  }

  std::set<std::string> wanted_layers() const {
    std::set<std::string> s(style_layers.begin(), style_layers.end());
    s.insert(content_layer);
    return s;
  }
};

struct StyleTargets {
  std::map<std::string, Tensor> grams;  // masked Gram of the style image per style layer
  Tensor content;                        // P at the content layer
};

/// Masked style Grams of `style` under `pyramid` and content features of
/// `content`. Pyramid levels must match the activation extents exactly.
inline StyleTargets build_style_targets(const VggNetwork& net, const Tensor& style, const Tensor& content,
                                        const MaskPyramid& pyramid, const TransferConfig& cfg) {
  cfg.validate();
  StyleTargets t;
  const auto style_acts =
      forward_collect(net, style, std::set<std::string>(cfg.style_layers.begin(), cfg.style_layers.end()));
  for (const auto& layer : cfg.style_layers) {
    const auto& level = pyramid.at(layer);
    const auto& shp = style_acts.shapes.at(layer);
    if (level.height != shp.height || level.width != shp.width) {
      throw ShapeError("mask level for " + layer + " is " + std::to_string(level.height) + "x" +
                       std::to_string(level.width) + " but activations are " + std::to_string(shp.height) + "x" +
                       std::to_string(shp.width));
    }
    t.grams[layer] = gram(mask_features(style_acts.at(layer), level.weights));
  }
  t.content = forward_collect(net, content, {cfg.content_layer}).at(cfg.content_layer);
  return t;
}

struct TotalLoss {
  double total = 0.0, content = 0.0, style = 0.0, tv = 0.0;
  Tensor grad;  // d total / d image
};

/// alpha*L_content + beta*sum_l w_l E_l + gamma*L_tv and its image gradient.
inline TotalLoss total_loss(const VggNetwork& net, const StyleTargets& targets, const TransferConfig& cfg,
                            const Tensor& image, ForwardSession& session) {
  TotalLoss r;
  std::map<std::string, Tensor> seeds;
  const bool need_net = cfg.alpha != 0.0 || cfg.beta != 0.0;
  if (need_net) {
    const auto acts = session.forward(image, cfg.wanted_layers());
    if (cfg.alpha != 0.0) {
      auto c = content_loss(acts.at(cfg.content_layer), targets.content);
      r.content = c.loss;
      c.seed *= cfg.alpha;
      seeds[cfg.content_layer] = std::move(c.seed);
    }
    if (cfg.beta != 0.0) {
      for (std::size_t i = 0; i < cfg.style_layers.size(); ++i) {
        const auto& layer = cfg.style_layers[i];
        const auto& shp = acts.shapes.at(layer);
        const auto uniform = uniform_level(shp.height, shp.width);
        auto it = targets.grams.find(layer);
        if (it == targets.grams.end()) throw ShapeError("no style target for layer '" + layer + "'");
        auto s = style_layer_loss(mask_features(acts.at(layer), uniform.weights), it->second);
        const double w = cfg.layer_weight(i);
        r.style += w * s.loss;
        // chain through the mask: dE/dF = t (row-wise) * dE/dF~
        auto g = mask_features(s.seed, uniform.weights);
        g *= cfg.beta * w;
        if (auto e = seeds.find(layer); e != seeds.end()) {
          e->second += g;
        } else {
          seeds[layer] = std::move(g);
        }
      }
    }
    r.grad = session.backward(seeds);
  } else {
    r.grad = Tensor(image.shape());
  }
  if (cfg.gamma != 0.0) {
    auto tv = tv_loss(image);
    r.tv = tv.loss;
    tv.seed *= cfg.gamma;
    r.grad += tv.seed;
  }
  r.total = cfg.alpha * r.content + cfg.beta * r.style + cfg.gamma * r.tv;
  return r;
}

inline TotalLoss total_loss(const VggNetwork& net, const StyleTargets& targets, const TransferConfig& cfg,
                            const Tensor& image) {
  ForwardSession session(net);
  return total_loss(net, targets, cfg, image, session);
}

enum class Termination { MaxIters, Converged };

inline const char* to_string(Termination t) { return t == Termination::Converged ? "converged" : "max-iters"; }

struct TransferResult {
  ImagePlane image;                 // clamped to [0,1]
  std::vector<double> loss_trace;   // total loss at each evaluated iterate
  Termination reason = Termination::MaxIters;
  double final_content = 0.0, final_style = 0.0, final_tv = 0.0;
  double wall_seconds = 0.0;
};

/// Relative change |e_t - e_{t-1}| / e_t; zero when e_t is zero.
inline double relative_change(double prev, double cur) {
  if (cur == 0.0) return 0.0;
  return std::abs(cur - prev) / std::abs(cur);
}

/// Adam on raw pixels starting from the content image. Each iteration
/// evaluates the loss at the current iterate and records it; the run stops
/// when the relative change drops below rel_tol (or the loss is exactly zero)
/// or after max_iters evaluations. The returned image is the last evaluated
/// iterate, clamped.
inline TransferResult run_transfer(const ImagePlane& style, const ImagePlane& content, const MaskPyramid& pyramid,
                                   const VggNetwork& net, const TransferConfig& cfg) {
  cfg.validate();
  if (!style.same_geometry(content) || style.channels() != 3) {
    throw ShapeError("style and content images must both be H x W x 3 with equal extents");
  }
  const auto start = std::chrono::steady_clock::now();
  const Tensor style_t = to_tensor(style), content_t = to_tensor(content);
  const auto targets = build_style_targets(net, style_t, content_t, pyramid, cfg);

  TransferResult result;
  ForwardSession session(net);
  Tensor x = content_t;
  AdamState<double> adam(x.shape(), cfg.adam);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    auto loss = total_loss(net, targets, cfg, x, session);
    if (!std::isfinite(loss.total)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(it));
    }
    result.loss_trace.push_back(loss.total);
    result.final_content = loss.content;
    result.final_style = loss.style;
    result.final_tv = loss.tv;
    if (loss.total == 0.0 ||
        (it > 0 && relative_change(result.loss_trace[it - 1], loss.total) < cfg.rel_tol)) {
      result.reason = Termination::Converged;
      break;
    }
    if (it + 1 == cfg.max_iters) break;
    auto step = adam_step(std::move(x), loss.grad, std::move(adam));
    x = std::move(step.param);
    adam = std::move(step.state);
  }
  result.image = from_tensor(x);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline nlohmann::json to_json(const TransferConfig& cfg) {
  nlohmann::json j;
  j["style_layers"] = cfg.style_layers;
  j["content_layer"] = cfg.content_layer;
  j["alpha"] = cfg.alpha;
  j["beta"] = cfg.beta;
  j["gamma"] = cfg.gamma;
  std::vector<double> w;
  for (std::size_t i = 0; i < cfg.style_layers.size(); ++i) w.push_back(cfg.layer_weight(i));
  j["layer_weights"] = w;
  j["max_iters"] = cfg.max_iters;
  j["rel_tol"] = cfg.rel_tol;
  j["adam"] = {{"learning_rate", cfg.adam.learning_rate},
               {"beta1", cfg.adam.beta1},
               {"beta2", cfg.adam.beta2},
               {"epsilon", cfg.adam.epsilon}};
  return j;
}

/// Run sidecar: config, loss trace, termination reason, final loss terms and
/// wall time.
inline nlohmann::json transfer_sidecar(const TransferConfig& cfg, const TransferResult& r) {
  nlohmann::json j;
  j["config"] = to_json(cfg);
  j["loss_trace"] = r.loss_trace;
  j["termination"] = to_string(r.reason);
  j["iterations"] = r.loss_trace.size();
  j["final"] = {{"content", r.final_content}, {"style", r.final_style}, {"tv", r.final_tv}};
  j["wall_seconds"] = r.wall_seconds;
  return j;
}

}  // namespace lesionforge

#endif  // LESIONFORGE_NST_HPP
