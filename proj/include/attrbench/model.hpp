#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/random.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Fully connected layer on rank-1 inputs. weight is (out, in), bias is (out).
struct Dense {
  Tensor weight;
  Tensor bias;
};

/// Square-kernel 2-D convolution on (C,H,W) inputs. weight is (out, in, k, k), bias is (out).
struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t kernel() const { return weight.dim(2); }
};

struct Relu {};

struct MaxPool2d {
  std::size_t size = 2;
  std::size_t stride = 2;
};

struct Flatten {};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Flatten>;

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1, relu = 2, maxpool2d = 3, flatten = 4 };

inline LayerKind kind_of(const Layer& layer) { return static_cast<LayerKind>(layer.index()); }

inline const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

namespace detail {

inline std::size_t pooled_extent(std::size_t in, std::size_t window, std::size_t stride,
                                 std::size_t padding) {
  if (in + 2 * padding < window) {
    throw InvalidInput("window " + std::to_string(window) + " exceeds padded extent " +
                       std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - window) / stride + 1;
}

inline Shape output_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      [&](const auto& l) -> Shape {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) {
          if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.dim(0) != l.weight.dim(0)) {
            throw InvalidInput("dense parameters must be weight (out,in) and bias (out)");
          }
          if (in.size() != 1 || in[0] != l.weight.dim(1)) {
            throw InvalidInput("dense layer expects input (" + std::to_string(l.weight.dim(1)) +
                               "), got " + shape_string(in));
          }
          return {l.weight.dim(0)};
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          if (l.weight.rank() != 4 || l.weight.dim(2) != l.weight.dim(3) || l.bias.rank() != 1 ||
              l.bias.dim(0) != l.weight.dim(0) || l.stride == 0) {
            throw InvalidInput("conv2d parameters must be weight (out,in,k,k), bias (out), stride>0");
          }
          if (in.size() != 3 || in[0] != l.weight.dim(1)) {
            throw InvalidInput("conv2d expects (" + std::to_string(l.weight.dim(1)) +
                               ",H,W) input, got " + shape_string(in));
          }
          return {l.weight.dim(0), pooled_extent(in[1], l.kernel(), l.stride, l.padding),
                  pooled_extent(in[2], l.kernel(), l.stride, l.padding)};
        } else if constexpr (std::is_same_v<T, MaxPool2d>) {
          if (in.size() != 3 || l.size == 0 || l.stride == 0) {
            throw InvalidInput("maxpool2d expects (C,H,W) input, got " + shape_string(in));
          }
          return {in[0], pooled_extent(in[1], l.size, l.stride, 0),
                  pooled_extent(in[2], l.size, l.stride, 0)};
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return {shape_size(in)};
        } else {
          return in;
        }
      },
      layer);
}

}  // namespace detail

/// Layered differentiable classifier. Parameters are fixed once constructed; training produces a
/// new Model.
class Model {
 public:
  Model() = default;

  Model(Shape input_shape, std::vector<Layer> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    if (layers_.empty()) throw InvalidInput("model needs at least one layer");
    activation_shapes_.push_back(input_shape_);
    for (const Layer& layer : layers_) {
      activation_shapes_.push_back(detail::output_shape(layer, activation_shapes_.back()));
    }
    if (activation_shapes_.back().size() != 1) {
      throw InvalidInput("model output must be a logit vector, got " +
                         shape_string(activation_shapes_.back()));
    }
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t output_size() const { return activation_shapes_.back()[0]; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }

  /// Shape of activation i: 0 is the input, i > 0 the output of layer i-1.
  const Shape& activation_shape(std::size_t i) const { return activation_shapes_.at(i); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& layer : layers_) {
      if (const auto* d = std::get_if<Dense>(&layer)) n += d->weight.size() + d->bias.size();
      if (const auto* c = std::get_if<Conv2d>(&layer)) n += c->weight.size() + c->bias.size();
    }
    return n;
  }

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> activation_shapes_;
};

/// He-uniform initialised layers.
inline Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  Dense d{Tensor({out, in}), Tensor({out})};
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& w : d.weight.values()) w = u(rng);
  return d;
}

inline Conv2d make_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                        std::size_t padding, Rng& rng) {
  Conv2d c{Tensor({out, in, kernel, kernel}), Tensor({out}), stride, padding};
  const double bound = std::sqrt(6.0 / static_cast<double>(in * kernel * kernel));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& w : c.weight.values()) w = u(rng);
  return c;
}

/// Widths of the two-convolution classifier: conv(3x3) -> relu -> pool -> conv(3x3) -> relu ->
/// pool -> dense hidden -> relu -> dense classes. The reference widths are 32/64/128.
struct CnnSpec {
  std::size_t conv1_channels = 32;
  std::size_t conv2_channels = 64;
  std::size_t hidden = 128;
  std::size_t first_stride = 1;
};

inline Model make_small_cnn(const Shape& input_shape, std::size_t classes, const CnnSpec& spec,
                            std::uint64_t seed) {
  if (input_shape.size() != 3) throw InvalidInput("small CNN expects (C,H,W) input");
  Rng rng(seed);
  std::vector<Layer> layers;
  layers.emplace_back(make_conv(input_shape[0], spec.conv1_channels, 3, spec.first_stride, 1, rng));
  layers.emplace_back(Relu{});
  layers.emplace_back(MaxPool2d{2, 2});
  layers.emplace_back(make_conv(spec.conv1_channels, spec.conv2_channels, 3, 1, 1, rng));
  layers.emplace_back(Relu{});
  layers.emplace_back(MaxPool2d{2, 2});
  layers.emplace_back(Flatten{});
  // Resolve the flattened width by walking the shapes so far.
  Shape shape = input_shape;
  for (const Layer& l : layers) shape = detail::output_shape(l, shape);
  if (spec.hidden > 0) {
    layers.emplace_back(make_dense(shape[0], spec.hidden, rng));
    layers.emplace_back(Relu{});
    layers.emplace_back(make_dense(spec.hidden, classes, rng));
  } else {
    layers.emplace_back(make_dense(shape[0], classes, rng));
  }
  return Model(input_shape, std::move(layers));
}

/// f(x) = W x + b as a single dense layer over rank-1 inputs (flattened when the input is an
/// image).
inline Model make_linear(const Shape& input_shape, const Tensor& weight, const Tensor& bias) {
  std::vector<Layer> layers;
  if (input_shape.size() != 1) layers.emplace_back(Flatten{});
  layers.emplace_back(Dense{weight, bias});
  return Model(input_shape, std::move(layers));
}

}  // namespace attrbench
