#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"
#include "attrbench/random.hpp"

namespace attrbench {

/// Shape drawn for each class of the synthetic dataset, in class-id order.
enum class SynthShape { hbar, vbar, disk, checker, ring, plus, diagonal, frame };

inline constexpr std::array<const char*, 8> kSynthShapeNames = {
    "hbar", "vbar", "disk", "checker", "ring", "plus", "diagonal", "frame"};

inline constexpr std::size_t kSynthMaxClasses = kSynthShapeNames.size();

namespace detail {

inline bool inside_shape(SynthShape shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double dist = std::sqrt(dx * dx + dy * dy);
  switch (shape) {
    case SynthShape::hbar: return ay <= 0.35 * r && ax <= 1.4 * r;
    case SynthShape::vbar: return ax <= 0.35 * r && ay <= 1.4 * r;
    case SynthShape::disk: return dist <= r;
    case SynthShape::checker: return ax <= r && ay <= r && ((dx < 0) == (dy < 0));
    case SynthShape::ring: return dist >= 0.6 * r && dist <= r;
    case SynthShape::plus:
      return (ax <= 0.3 * r && ay <= 1.2 * r) || (ay <= 0.3 * r && ax <= 1.2 * r);
    case SynthShape::diagonal: return std::abs(dx - dy) <= 0.45 * r && ax <= r && ay <= r;
    case SynthShape::frame: return std::max(ax, ay) >= 0.6 * r && std::max(ax, ay) <= r;
  }
  return false;
}

}  // namespace detail

/// Single-channel images of class-determined shapes over uniform background noise, with raw
/// pixel values in [0,1]. The shape pixels of each image are recorded in `regions`.
inline Dataset synth_generate(std::uint64_t seed, std::size_t count, std::size_t size,
                              std::size_t num_classes) {
  if (size < 16 || size > 64) throw InvalidInput("synthetic image size must be in [16, 64]");
  if (num_classes < 2 || num_classes > kSynthMaxClasses) {
    throw InvalidInput("synthetic class count must be in [2, " + std::to_string(kSynthMaxClasses) + "]");
  }
  if (count == 0) throw InvalidInput("synthetic count must be positive");

  Rng rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.3);
  std::uniform_real_distribution<double> brightness(0.65, 1.0);
  std::uniform_real_distribution<double> scale(0.16, 0.24);
  std::uniform_int_distribution<std::size_t> cls(0, num_classes - 1);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.images = Tensor({count, 1, size, size});
  ds.regions = Tensor({count, 1, size, size});
  ds.labels.resize(count);
  const double s = static_cast<double>(size);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = cls(rng);
    ds.labels[i] = label;
    const double r = scale(rng) * s;
    const double margin = 1.45 * r;
    std::uniform_real_distribution<double> pos(margin, s - 1.0 - margin);
    const double cx = pos(rng), cy = pos(rng);
    const double level = brightness(rng);
    double* img = ds.images.data() + i * size * size;
    double* reg = ds.regions->data() + i * size * size;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const bool in = detail::inside_shape(static_cast<SynthShape>(label), static_cast<double>(x) - cx,
                                             static_cast<double>(y) - cy, r);
        const double v = noise(rng) + (in ? level : 0.0);
        img[y * size + x] = std::min(1.0, v);
        reg[y * size + x] = in ? 1.0 : 0.0;
      }
    }
  }
  return ds;
}

}  // namespace attrbench
