#ifndef LESIONFORGE_VGGNET_HPP
#define LESIONFORGE_VGGNET_HPP

// Fixed VGG19 feature graph (blocks 1-5, no classifier head), its VGGW1
// weight container, and forward/reverse passes over named activations.
//
// VGGW1 layout (little-endian):
//   "VGGW" | u32 version=1 | u32 layer_count
//   per conv layer: u32 name_len | name | u32 rank=4 | u32 dims[4] = {k,k,Cin,Cout}
//                   | f32 weights[k*k*Cin*Cout] (row-major) | f32 bias[Cout]
//   f32 channel_means[3]
//   u32 crc32 over every preceding byte

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "lesionforge/detail/binary_io.hpp"
#include "lesionforge/error.hpp"
#include "lesionforge/ndtensor.hpp"

namespace lesionforge {

inline constexpr std::array<std::size_t, 5> kVggBlockWidths{64, 128, 256, 512, 512};
inline constexpr std::array<std::size_t, 5> kVggBlockConvs{2, 2, 4, 4, 4};
inline constexpr std::uint32_t kVggwVersion = 1;

enum class VggOpKind { Conv, Relu, Pool };

struct VggOp {
  VggOpKind kind;
  std::string name;
  std::size_t block;       // 1-based
  std::size_t conv_index;  // index into VggNetwork::convs for Conv and Relu
};

/// Ordered op list conv1_1, relu1_1, conv1_2, relu1_2, pool1, ... pool5.
inline const std::vector<VggOp>& vgg19_ops() {
  static const std::vector<VggOp> ops = [] {
    std::vector<VggOp> v;
    std::size_t conv = 0;
    for (std::size_t b = 0; b < 5; ++b) {
      for (std::size_t n = 0; n < kVggBlockConvs[b]; ++n, ++conv) {
        const auto suffix = std::to_string(b + 1) + "_" + std::to_string(n + 1);
        v.push_back({VggOpKind::Conv, "conv" + suffix, b + 1, conv});
        v.push_back({VggOpKind::Relu, "relu" + suffix, b + 1, conv});
      }
      v.push_back({VggOpKind::Pool, "pool" + std::to_string(b + 1), b + 1, 0});
    }
    return v;
  }();
  return ops;
}

inline std::vector<std::string> vgg19_conv_names() {
  std::vector<std::string> names;
  for (const auto& op : vgg19_ops())
    if (op.kind == VggOpKind::Conv) names.push_back(op.name);
  return names;
}

/// Index of `name` in vgg19_ops(), or nullopt for unknown names.
inline std::optional<std::size_t> vgg19_op_index(const std::string& name) {
  const auto& ops = vgg19_ops();
  for (std::size_t i = 0; i < ops.size(); ++i)
    if (ops[i].name == name) return i;
  return std::nullopt;
}

/// Number of 2x2 pools applied before the named layer's output.
inline std::size_t vgg19_pool_depth(const std::string& name) {
  const auto idx = vgg19_op_index(name);
  if (!idx) throw ShapeError("unknown VGG layer '" + name + "'");
  const auto& op = vgg19_ops()[*idx];
  return op.kind == VggOpKind::Pool ? op.block : op.block - 1;
}

struct ConvLayer {
  std::string name;
  Tensor kernels;  // 3 x 3 x Cin x Cout
  std::vector<double> bias;

  std::size_t in_channels() const { return kernels.extent(2); }
  std::size_t out_channels() const { return kernels.extent(3); }
};

struct VggNetwork {
  std::vector<ConvLayer> convs;  // 16 layers in canonical order
  std::array<double, 3> channel_means{0.0, 0.0, 0.0};

  std::size_t block_width(std::size_t block) const {
    std::size_t conv = 0;
    for (std::size_t b = 1; b < block; ++b) conv += kVggBlockConvs[b - 1];
    return convs.at(conv).out_channels();
  }
};

/// Checks layer names, order and kernel shapes. Channel widths must be the
/// canonical 64/128/256/512/512, or all reduced as ceil(canonical / d) for a
/// single divisor d (the reduced test-scale networks).
inline void validate_topology(const VggNetwork& net) {
  const auto names = vgg19_conv_names();
  if (net.convs.size() != names.size()) {
    throw ShapeError("VGG19 needs " + std::to_string(names.size()) + " conv layers, got " +
                     std::to_string(net.convs.size()));
  }
  auto widths_for = [](std::size_t d) {
    std::array<std::size_t, 5> w{};
    for (std::size_t b = 0; b < 5; ++b) w[b] = (kVggBlockWidths[b] + d - 1) / d;
    return w;
  };
  std::optional<std::size_t> divisor;
  const auto first_out = net.convs.front().kernels.rank() == 4 ? net.convs.front().out_channels() : 0;
  for (std::size_t d = 1; d <= 64 && !divisor; ++d) {
    if (widths_for(d)[0] != first_out) continue;
    const auto w = widths_for(d);
    bool ok = true;
    std::size_t conv = 0;
    for (std::size_t b = 0; b < 5 && ok; ++b)
      for (std::size_t n = 0; n < kVggBlockConvs[b]; ++n, ++conv)
        if (net.convs[conv].kernels.rank() != 4 || net.convs[conv].out_channels() != w[b]) ok = false;
    if (ok) divisor = d;
  }
  if (!divisor)
    for (std::size_t d = 1; d <= 64 && !divisor; ++d)
      if (widths_for(d)[0] == first_out) divisor = d;
  const auto expected = widths_for(divisor.value_or(1));
  std::size_t conv = 0;
  std::size_t cin = 3;
  for (std::size_t b = 0; b < 5; ++b) {
    for (std::size_t n = 0; n < kVggBlockConvs[b]; ++n, ++conv) {
      const auto& layer = net.convs[conv];
      if (layer.name != names[conv]) {
        throw ShapeError("layer " + std::to_string(conv) + " is named '" + layer.name + "', expected '" +
                         names[conv] + "'");
      }
      const Shape want{3, 3, cin, expected[b]};
      if (layer.kernels.shape() != want) {
        throw ShapeError("layer " + layer.name + ": kernel shape " + shape_string(layer.kernels.shape()) +
                         " does not match VGG19 shape " + shape_string(want));
      }
      if (layer.bias.size() != expected[b]) {
        throw ShapeError("layer " + layer.name + ": bias length " + std::to_string(layer.bias.size()) +
                         " != " + std::to_string(expected[b]));
      }
      cin = expected[b];
    }
  }
}

inline std::vector<std::uint8_t> serialize_weights(const VggNetwork& net) {
  detail::ByteWriter w;
  w.bytes("VGGW", 4);
  w.u32(kVggwVersion);
  w.u32(static_cast<std::uint32_t>(net.convs.size()));
  for (const auto& layer : net.convs) {
    w.str(layer.name);
    w.u32(static_cast<std::uint32_t>(layer.kernels.rank()));
    for (auto e : layer.kernels.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (auto v : layer.kernels.data()) w.f32(static_cast<float>(v));
    for (auto v : layer.bias) w.f32(static_cast<float>(v));
  }
  for (auto m : net.channel_means) w.f32(static_cast<float>(m));
  w.u32(detail::crc32_of(w.buffer()));
  return std::move(w.buffer());
}

inline VggNetwork parse_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != "VGGW") throw FormatError("not a VGGW file (bad magic)");
  const auto version = r.u32("version");
  if (version != kVggwVersion) {
    throw FormatError("unsupported VGGW version " + std::to_string(version) + " (expected 1)");
  }
  const auto count = r.u32("layer count");
  const auto names = vgg19_conv_names();
  if (count != names.size()) {
    throw FormatError("VGGW layer count " + std::to_string(count) + " != " + std::to_string(names.size()));
  }
  VggNetwork net;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "layer " + names[i];
    ConvLayer layer;
    layer.name = r.str(where + " name");
    if (layer.name != names[i]) {
      throw FormatError("layer " + std::to_string(i) + " is '" + layer.name + "', expected '" + names[i] + "'");
    }
    const std::string ctx = "layer " + layer.name;
    const auto rank = r.u32(ctx + " rank");
    if (rank != 4) throw FormatError(ctx + ": rank " + std::to_string(rank) + " != 4");
    Shape shape(4);
    for (auto& e : shape) e = r.u32(ctx + " dims");
    const auto volume = shape_volume(shape);
    if (volume == 0 || volume * 4 > r.remaining()) {
      throw FormatError(ctx + ": truncated or implausible weight block " + shape_string(shape));
    }
    std::vector<double> data(volume);
    for (auto& v : data) v = r.f32(ctx + " weights");
    layer.kernels = Tensor(shape, std::move(data));
    layer.bias.resize(shape[3]);
    for (auto& v : layer.bias) v = r.f32(ctx + " bias");
    net.convs.push_back(std::move(layer));
  }
  for (auto& m : net.channel_means) m = r.f32("channel means");
  const auto payload_end = r.position();
  const auto stored_crc = r.u32("crc32");
  const auto actual_crc = detail::crc32_of(bytes.first(payload_end));
  if (stored_crc != actual_crc) throw FormatError("VGGW checksum mismatch");
  if (r.remaining() != 0) throw FormatError("trailing bytes after VGGW checksum");
  validate_topology(net);
  return net;
}

inline VggNetwork load_weights(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("weight file not found: " + path.string());
  const auto bytes = detail::read_file_bytes(path);
  return parse_weights(bytes);
}

inline void save_weights(const VggNetwork& net, const std::filesystem::path& path) {
  validate_topology(net);
  detail::write_file_atomic(path, serialize_weights(net));
}

namespace detail {
// Round a double to the nearest float. The volatile store keeps GCC 11's SLP
// vectorizer from dropping the narrowing on short fixed-size loops.
inline double round_to_float(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}
}  // namespace detail

/// Seeded random VGG19-topology network at 1/width_divisor channel widths.
/// He-normal kernels; `input_gain` scales conv1_1, which is how networks
/// trained on 0-255 pixel values see [0,1] inputs.
inline VggNetwork random_network(std::uint64_t seed, std::size_t width_divisor = 8, double input_gain = 1.0,
                                 std::array<double, 3> means = {0.485, 0.456, 0.406}) {
  if (width_divisor == 0) throw ShapeError("width divisor must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  VggNetwork net;
  for (std::size_t c = 0; c < 3; ++c) net.channel_means[c] = detail::round_to_float(means[c]);
  const auto names = vgg19_conv_names();
  std::size_t conv = 0, cin = 3;
  for (std::size_t b = 0; b < 5; ++b) {
    const std::size_t cout = (kVggBlockWidths[b] + width_divisor - 1) / width_divisor;
    for (std::size_t n = 0; n < kVggBlockConvs[b]; ++n, ++conv) {
      ConvLayer layer{names[conv], Tensor({3, 3, cin, cout}), std::vector<double>(cout)};
      const double scale = std::sqrt(2.0 / (9.0 * double(cin))) * (conv == 0 ? input_gain : 1.0);
      for (auto& v : layer.kernels.storage()) v = detail::round_to_float(scale * normal(rng));
      for (auto& v : layer.bias) v = detail::round_to_float(0.05 * normal(rng));
      net.convs.push_back(std::move(layer));
      cin = cout;
    }
  }
  return net;
}

struct LayerShape {
  std::size_t height = 0, width = 0, channels = 0;
  /// M_l: number of spatial positions.
  std::size_t positions() const { return height * width; }
};

struct LayerActivations {
  std::map<std::string, Tensor> maps;  // h x w x N per layer
  std::map<std::string, LayerShape> shapes;

  const Tensor& at(const std::string& name) const {
    auto it = maps.find(name);
    if (it == maps.end()) throw ShapeError("activation '" + name + "' was not collected");
    return it->second;
  }
};

/// Forward/reverse evaluation of one image. Owns the activation cache the
/// reverse pass reuses; the network itself is only read.
class ForwardSession {
 public:
  explicit ForwardSession(const VggNetwork& net) : net_(&net) {}

  /// Runs ops up to the deepest wanted layer. `image` is H x W x 3 in [0,1];
  /// the network's channel means are subtracted first.
  LayerActivations forward(const Tensor& image, const std::set<std::string>& wanted) {
    if (image.rank() != 3 || image.extent(2) != 3) {
      throw ShapeError("VGG input must be H x W x 3, got " + shape_string(image.shape()));
    }
    if (wanted.empty()) throw ShapeError("no layers requested");
    std::size_t deepest = 0;
    for (const auto& name : wanted) {
      const auto idx = vgg19_op_index(name);
      if (!idx) throw ShapeError("unknown VGG layer '" + name + "'");
      deepest = std::max(deepest, *idx);
    }
    const auto& ops = vgg19_ops();
    wanted_ = wanted;
    input_shape_ = image.shape();
    depth_ = deepest + 1;
    conv_outputs_.assign(net_->convs.size(), Tensor());
    pool_argmax_.assign(5, {});
    pool_inputs_.assign(5, Shape{});
    op_shapes_.assign(depth_, Shape{});

    Tensor x = image;
    for (std::size_t i = 0; i < x.size(); i += 3)
      for (std::size_t c = 0; c < 3; ++c) x[i + c] -= net_->channel_means[c];

    LayerActivations acts;
    for (std::size_t i = 0; i < depth_; ++i) {
      const auto& op = ops[i];
      switch (op.kind) {
        case VggOpKind::Conv: {
          const auto& layer = net_->convs[op.conv_index];
          x = conv2d_forward<double>(x, layer.kernels, layer.bias);
          conv_outputs_[op.conv_index] = x;
          break;
        }
        case VggOpKind::Relu:
          x = relu_forward(x);
          break;
        case VggOpKind::Pool: {
          pool_inputs_[op.block - 1] = x.shape();
          auto pooled = maxpool2_forward(x);
          pool_argmax_[op.block - 1] = std::move(pooled.argmax);
          x = std::move(pooled.output);
          break;
        }
      }
      op_shapes_[i] = x.shape();
      if (wanted.count(op.name)) {
        acts.shapes[op.name] = LayerShape{x.extent(0), x.extent(1), x.extent(2)};
        acts.maps[op.name] = x;
      }
    }
    return acts;
  }

  /// Gradient at the input image of L = sum_l <seed_l, F^l>, for seeds at
  /// layers collected by the most recent forward().
  Tensor backward(const std::map<std::string, Tensor>& seeds) const {
    if (depth_ == 0) throw ShapeError("backward called before forward");
    const auto& ops = vgg19_ops();
    std::optional<std::size_t> deepest;
    for (const auto& [name, seed] : seeds) {
      if (!wanted_.count(name)) {
        throw ShapeError("gradient seed for layer '" + name + "' which was not computed in the forward pass");
      }
      const auto idx = *vgg19_op_index(name);
      if (seed.shape() != op_shapes_[idx]) {
        throw ShapeError("seed for " + name + " has shape " + shape_string(seed.shape()) + ", activation is " +
                         shape_string(op_shapes_[idx]));
      }
      deepest = std::max(deepest.value_or(0), idx);
    }
    if (!deepest) return Tensor(input_shape_);

    Tensor g(op_shapes_[*deepest]);
    for (std::size_t i = *deepest + 1; i-- > 0;) {
      const auto& op = ops[i];
      if (auto it = seeds.find(op.name); it != seeds.end()) g += it->second;
      switch (op.kind) {
        case VggOpKind::Conv: {
          const Shape& in_shape = i == 0 ? input_shape_ : op_shapes_[i - 1];
          g = conv2d_backward_shape(g, in_shape, net_->convs[op.conv_index].kernels);
          break;
        }
        case VggOpKind::Relu:
          g = relu_backward(g, conv_outputs_[op.conv_index]);
          break;
        case VggOpKind::Pool:
          g = maxpool2_backward<double>(g, pool_argmax_[op.block - 1], pool_inputs_[op.block - 1]);
          break;
      }
    }
    return g;
  }

 private:
  const VggNetwork* net_;
  std::set<std::string> wanted_;
  Shape input_shape_;
  std::size_t depth_ = 0;
  std::vector<Tensor> conv_outputs_;
  std::vector<std::vector<std::size_t>> pool_argmax_;
  std::vector<Shape> pool_inputs_;
  std::vector<Shape> op_shapes_;
};

inline LayerActivations forward_collect(const VggNetwork& net, const Tensor& image,
                                        const std::set<std::string>& wanted) {
  ForwardSession session(net);
  return session.forward(image, wanted);
}

inline Tensor backward_to_input(const VggNetwork& net, const Tensor& image,
                                const std::map<std::string, Tensor>& seeds) {
  std::set<std::string> wanted;
  for (const auto& [name, _] : seeds) wanted.insert(name);
  if (wanted.empty()) return Tensor(image.shape());
  ForwardSession session(net);
  session.forward(image, wanted);
  return session.backward(seeds);
}

}  // namespace lesionforge

#endif  // LESIONFORGE_VGGNET_HPP
