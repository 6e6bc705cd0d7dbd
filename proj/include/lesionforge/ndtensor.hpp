#ifndef LESIONFORGE_NDTENSOR_HPP
#define LESIONFORGE_NDTENSOR_HPP

// Dense row-major tensors and the forward/reverse primitives of a VGG-style
// feature graph: same-padded stride-1 convolution, ReLU, 2x2 max pooling.
// Spatial tensors are laid out H x W x C (channel fastest). Reductions
// accumulate in double regardless of the storage type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lesionforge/error.hpp"

namespace lesionforge {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
class DenseTensor {
 public:
  using value_type = T;

  DenseTensor() = default;

  explicit DenseTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {
    validate_extents();
  }

  DenseTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // H x W x C accessors.
  T& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }
  const T& at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return data_[(y * shape_[1] + x) * shape_[2] + c];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  DenseTensor& operator+=(const DenseTensor& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  DenseTensor& operator-=(const DenseTensor& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  DenseTensor& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  friend DenseTensor operator+(DenseTensor a, const DenseTensor& b) { return a += b; }
  friend DenseTensor operator-(DenseTensor a, const DenseTensor& b) { return a -= b; }
  friend DenseTensor operator*(DenseTensor a, T s) { return a *= s; }
  friend DenseTensor operator*(T s, DenseTensor a) { return a *= s; }

  bool operator==(const DenseTensor& other) const = default;

  static void require_same_shape(const DenseTensor& a, const DenseTensor& b, const char* op) {
    if (a.shape_ != b.shape_) {
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape_) + " vs " +
                       shape_string(b.shape_));
    }
  }

 private:
  void validate_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = DenseTensor<double>;

/// Frobenius inner product, accumulated in double.
template <typename T>
double dot(const DenseTensor<T>& a, const DenseTensor<T>& b) {
  DenseTensor<T>::require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

template <typename T>
double sum(const DenseTensor<T>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += double(v);
  return acc;
}

namespace detail {

template <typename T>
void require_rank(const DenseTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(t.shape()));
  }
}

template <typename T>
void check_conv_operands(const DenseTensor<T>& input, const DenseTensor<T>& kernels) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  if (kernels.extent(0) != kernels.extent(1) || kernels.extent(0) % 2 == 0) {
    throw ShapeError("conv2d kernels must be square with odd size, got " + shape_string(kernels.shape()));
  }
  if (kernels.extent(2) != input.extent(2)) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(kernels.extent(2)) +
                     " != input channels " + std::to_string(input.extent(2)));
  }
}

}  // namespace detail

/// Same-padded (zero), stride-1 convolution. `kernels` is k x k x Cin x Cout.
/// Each output accumulates bias first, then taps in (ky, kx, ci) order.
template <typename T>
DenseTensor<T> conv2d_forward(const DenseTensor<T>& input, const DenseTensor<T>& kernels,
                              std::span<const T> bias) {
  detail::check_conv_operands(input, kernels);
  const std::size_t h = input.extent(0), w = input.extent(1), cin = input.extent(2);
  const std::size_t k = kernels.extent(0), cout = kernels.extent(3);
  if (bias.size() != cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != output channels " +
                     std::to_string(cout));
  }
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  DenseTensor<T> out({h, w, cout});
  std::vector<double> acc(cout);
  const T* in = input.data().data();
  const T* ker = kernels.data().data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t co = 0; co < cout; ++co) acc[co] = double(bias[co]);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto yy = static_cast<std::ptrdiff_t>(y + ky) - pad;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto xx = static_cast<std::ptrdiff_t>(x + kx) - pad;
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* px = in + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * cin;
          const T* tap = ker + (ky * k + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double v = double(px[ci]);
            const T* wrow = tap + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) acc[co] += v * double(wrow[co]);
          }
        }
      }
      T* o = &out.at(y, x, 0);
      for (std::size_t co = 0; co < cout; ++co) o[co] = static_cast<T>(acc[co]);
    }
  }
  return out;
}

/// Reverse pass of conv2d_forward with respect to its input only (weights
/// frozen). Only the input's shape matters, so this form takes just that.
template <typename T>
DenseTensor<T> conv2d_backward_shape(const DenseTensor<T>& grad_out, const Shape& input_shape,
                                     const DenseTensor<T>& kernels) {
  if (input_shape.size() != 3) throw ShapeError("conv2d_backward: input must be rank 3");
  detail::require_rank(kernels, 4, "conv2d kernels");
  if (kernels.extent(2) != input_shape[2]) {
    throw ShapeError("conv2d_backward: kernel input channels " + std::to_string(kernels.extent(2)) +
                     " != input channels " + std::to_string(input_shape[2]));
  }
  const std::size_t h = input_shape[0], w = input_shape[1], cin = input_shape[2];
  const std::size_t k = kernels.extent(0), cout = kernels.extent(3);
  if (grad_out.shape() != Shape{h, w, cout}) {
    throw ShapeError("conv2d_backward: grad_out shape " + shape_string(grad_out.shape()) +
                     " != forward output shape " + shape_string({h, w, cout}));
  }
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<double> acc(h * w * cin, 0.0);
  const T* ker = kernels.data().data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T* g = &grad_out.at(y, x, 0);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const auto yy = static_cast<std::ptrdiff_t>(y + ky) - pad;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto xx = static_cast<std::ptrdiff_t>(x + kx) - pad;
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          double* dst = acc.data() + (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * cin;
          const T* tap = ker + (ky * k + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* wrow = tap + ci * cout;
            double s = 0.0;
            for (std::size_t co = 0; co < cout; ++co) s += double(g[co]) * double(wrow[co]);
            dst[ci] += s;
          }
        }
      }
    }
  }
  DenseTensor<T> grad_in(input_shape);
  for (std::size_t i = 0; i < acc.size(); ++i) grad_in[i] = static_cast<T>(acc[i]);
  return grad_in;
}

template <typename T>
DenseTensor<T> conv2d_backward(const DenseTensor<T>& grad_out, const DenseTensor<T>& input,
                               const DenseTensor<T>& kernels) {
  detail::check_conv_operands(input, kernels);
  return conv2d_backward_shape(grad_out, input.shape(), kernels);
}

template <typename T>
DenseTensor<T> relu_forward(const DenseTensor<T>& x) {
  DenseTensor<T> y = x;
  for (auto& v : y.storage()) v = v > T{0} ? v : T{0};
  return y;
}

/// Gradient passes only where x > 0; the tie x == 0 gets zero gradient.
template <typename T>
DenseTensor<T> relu_backward(const DenseTensor<T>& grad_out, const DenseTensor<T>& x) {
  DenseTensor<T>::require_same_shape(grad_out, x, "relu_backward");
  DenseTensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
struct PoolResult {
  DenseTensor<T> output;
  /// Flat input index that produced each output element.
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

/// 2x2 stride-2 max pooling. A trailing odd row/column is dropped; ties pick
/// the first maximal element in row-major window order.
template <typename T>
PoolResult<T> maxpool2_forward(const DenseTensor<T>& x) {
  detail::require_rank(x, 3, "maxpool2 input");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2: input too small " + shape_string(x.shape()));
  PoolResult<T> r{DenseTensor<T>({oh, ow, c}), std::vector<std::size_t>(oh * ow * c), x.shape()};
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xo = 0; xo < ow; ++xo) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * y) * w + 2 * xo) * c + ch;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (y * ow + xo) * c + ch;
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
DenseTensor<T> maxpool2_backward(const DenseTensor<T>& grad_out, std::span<const std::size_t> argmax,
                                 const Shape& input_shape) {
  if (grad_out.size() != argmax.size()) {
    throw ShapeError("maxpool2_backward: grad_out has " + std::to_string(grad_out.size()) +
                     " elements but argmax has " + std::to_string(argmax.size()));
  }
  DenseTensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= g.size()) throw ShapeError("maxpool2_backward: argmax index out of range");
    g[argmax[i]] += grad_out[i];
  }
  return g;
}

struct AdamSettings {
  double learning_rate = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  DenseTensor<T> first_moment;
  DenseTensor<T> second_moment;
  std::size_t step_count = 0;
  AdamSettings settings;

  AdamState() = default;
  AdamState(const Shape& shape, AdamSettings s)
      : first_moment(shape), second_moment(shape), settings(s) {}
};

template <typename T>
struct AdamUpdate {
  DenseTensor<T> param;
  AdamState<T> state;
};

/// One bias-corrected Adam step. Arguments are taken by value so callers can
/// move their buffers in; nothing the caller still owns is modified.
template <typename T>
AdamUpdate<T> adam_step(DenseTensor<T> param, const DenseTensor<T>& grad, AdamState<T> state) {
  DenseTensor<T>::require_same_shape(param, grad, "adam_step");
  DenseTensor<T>::require_same_shape(param, state.first_moment, "adam_step moments");
  const auto& s = state.settings;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = s.beta1 * double(state.first_moment[i]) + (1.0 - s.beta1) * g;
    const double v = s.beta2 * double(state.second_moment[i]) + (1.0 - s.beta2) * g * g;
    state.first_moment[i] = static_cast<T>(m);
    state.second_moment[i] = static_cast<T>(v);
    const double mhat = m / c1;
    const double vhat = v / c2;
    param[i] = static_cast<T>(double(param[i]) - s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon));
  }
  return {std::move(param), std::move(state)};
}

}  // namespace lesionforge

#endif  // LESIONFORGE_NDTENSOR_HPP
