#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attrbench/error.hpp"

namespace attrbench {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_extents();
    values_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (values_.size() != shape_size(shape_)) {
      throw InvalidInput("tensor payload of " + std::to_string(values_.size()) +
                         " values does not fill shape " + shape_string(shape_));
    }
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() & noexcept { return values_; }
  std::span<const double> values() const& noexcept { return values_; }
  // A span into a temporary would dangle as soon as the full expression ends.
  std::span<const double> values() const&& = delete;
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::vector<double>& storage() noexcept { return values_; }

  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  /// (channel, row, column) access on rank-3 tensors.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values_[(c * shape_[1] + y) * shape_[2] + x];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw InvalidInput("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  double sum() const {
    double s = 0.0;
    for (double v : values_) s += v;
    return s;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_same_shape(const Tensor& other, const char* op) const {
    if (shape_ != other.shape_) {
      throw InvalidInput(std::string("shape mismatch in ") + op + ": " + shape_string(shape_) +
                         " vs " + shape_string(other.shape_));
    }
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw InvalidInput("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
inline Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
inline Tensor operator*(Tensor a, double s) { return a *= s; }

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

/// True when both tensors share shape and every payload bit.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Channel-major view of an input as (channels, pixels). Rank-3 tensors are (C,H,W); rank-1
/// and rank-2 tensors are treated as single-channel.
struct PixelLayout {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t pixels() const noexcept { return height * width; }
};

inline PixelLayout pixel_layout(const Shape& shape) {
  switch (shape.size()) {
    case 1:
      return {1, 1, shape[0]};
    case 2:
      return {1, shape[0], shape[1]};
    case 3:
      return {shape[0], shape[1], shape[2]};
    default:
      throw InvalidInput("expected an input of rank 1..3, got " + shape_string(shape));
  }
}

/// Per-pixel attribution: the mean over colour channels.
inline std::vector<double> channel_mean(const Tensor& e) {
  const PixelLayout layout = pixel_layout(e.shape());
  const std::size_t n = layout.pixels();
  std::vector<double> out(n, 0.0);
  for (std::size_t c = 0; c < layout.channels; ++c) {
    for (std::size_t p = 0; p < n; ++p) out[p] += e[c * n + p];
  }
  if (layout.channels > 1) {
    for (double& v : out) v /= static_cast<double>(layout.channels);
  }
  return out;
}

/// FNV-1a over the payload bytes; used as a cache digest.
inline std::uint64_t digest(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  for (std::size_t e : t.shape()) {
    h ^= e;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace attrbench
