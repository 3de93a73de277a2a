#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "attrbench/autodiff.hpp"
#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"
#include "attrbench/model.hpp"
#include "attrbench/random.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Square patch pasted over all channels of an image to push the prediction to `target`.
struct AdversarialPatch {
  Tensor values;  // (C, side, side)
  std::size_t target = 0;
  /// Fraction of validation images whose argmax flips to the target.
  double success_rate = 0.0;
  /// Validation success rate after each optimisation epoch.
  std::vector<double> history;

  std::size_t side() const { return values.dim(1); }
  bool weak() const { return success_rate < 0.5; }
};

struct PatchConfig {
  std::size_t side = 0;  // 0 selects ceil(0.3 * image side)
  std::size_t steps = 300;
  std::size_t batch = 16;
  std::size_t steps_per_epoch = 25;
  double step_size = 0.01;  // in units of the valid input range
  std::size_t validation_images = 64;
  std::uint64_t seed = 0;
};

inline std::size_t default_patch_side(std::size_t image_side) {
  return static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(image_side)));
}

struct PatchPlacement {
  std::size_t y = 0, x = 0;
};

inline PatchPlacement random_placement(std::size_t height, std::size_t width, std::size_t side, Rng& rng) {
  std::uniform_int_distribution<std::size_t> py(0, height - side), px(0, width - side);
  const std::size_t y = py(rng);
  return {y, px(rng)};
}

/// Pixel indices covered by a patch at `at`, ascending.
inline std::vector<std::size_t> patch_pixels(std::size_t width, std::size_t side, PatchPlacement at) {
  std::vector<std::size_t> out;
  out.reserve(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) out.push_back((at.y + y) * width + at.x + x);
  }
  return out;
}

inline Tensor apply_patch(const Tensor& image, const Tensor& patch, PatchPlacement at) {
  const PixelLayout layout = pixel_layout(image.shape());
  const std::size_t side = patch.dim(1);
  if (patch.dim(0) != layout.channels || at.y + side > layout.height || at.x + side > layout.width) {
    throw InvalidInput("patch does not fit the image");
  }
  Tensor out = image;
  const std::size_t n = layout.pixels();
  for (std::size_t c = 0; c < layout.channels; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        out[c * n + (at.y + y) * layout.width + at.x + x] = patch[(c * side + y) * side + x];
      }
    }
  }
  return out;
}

namespace detail {

// Valid input range per channel: raw [0,1] mapped through the dataset normalisation.
inline std::pair<std::vector<double>, std::vector<double>> input_bounds(const Dataset& data) {
  const std::size_t channels = data.images.dim(1);
  std::vector<double> lo(channels, 0.0), hi(channels, 1.0);
  if (!data.stats.empty()) {
    for (std::size_t c = 0; c < channels; ++c) {
      lo[c] = data.stats.normalize(c, 0.0);
      hi[c] = data.stats.normalize(c, 1.0);
    }
  }
  return {lo, hi};
}

}  // namespace detail

/// Fraction of the given images whose prediction becomes `target` with the patch pasted at a
/// seeded placement.
inline double patch_success_rate(const Model& model, const Dataset& data, const std::vector<std::size_t>& images,
                                 const Tensor& patch, std::size_t target, std::uint64_t seed) {
  if (images.empty()) return 0.0;
  const std::size_t H = data.images.dim(2), W = data.images.dim(3);
  std::size_t hits = 0;
  for (std::size_t i : images) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const PatchPlacement at = random_placement(H, W, patch.dim(1), rng);
    if (predict_class(model, apply_patch(data.image(i), patch, at)) == target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

/// Signed projected gradient ascent on the mean target logit over random placements on images
/// of other classes. Training uses every non-target image except the validation set, which is
/// the first `validation_images` of them.
inline AdversarialPatch train_patch(const Model& model, const Dataset& data, std::size_t target,
                                    const PatchConfig& cfg) {
  bool has_conv = false;
  for (const Layer& l : model.layers()) has_conv = has_conv || kind_of(l) == LayerKind::conv2d;
  if (!has_conv) throw UnsupportedModel("adversarial patches need a convolutional model");
  if (target >= model.output_size()) throw InvalidInput("patch target class out of range");
  const std::size_t C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
  const std::size_t side = cfg.side == 0 ? default_patch_side(std::min(H, W)) : cfg.side;
  if (side == 0 || 2 * side > std::min(H, W)) {
    throw ConfigError("patch side " + std::to_string(side) + " exceeds half the image side");
  }
  if (cfg.batch == 0 || cfg.steps_per_epoch == 0) throw ConfigError("patch batch and epoch length must be positive");

  std::vector<std::size_t> validation, training;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] == target) continue;
    (validation.size() < cfg.validation_images ? validation : training).push_back(i);
  }
  if (training.empty()) training = validation;
  if (training.empty()) throw InvalidInput("no images of non-target classes to train a patch on");

  const auto [lo, hi] = detail::input_bounds(data);
  Rng rng(cfg.seed);
  AdversarialPatch patch;
  patch.target = target;
  patch.values = Tensor({C, side, side});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < side * side; ++k) patch.values[c * side * side + k] = lo[c] + (hi[c] - lo[c]) * uniform01(rng);
  }

  const std::uint64_t val_seed = derive_seed(cfg.seed, "validation");
  std::uniform_int_distribution<std::size_t> pick(0, training.size() - 1);
  const std::size_t n = H * W;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor grad({C, side, side});
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t i = training[pick(rng)];
      const PatchPlacement at = random_placement(H, W, side, rng);
      const Tensor g = gradient(model, apply_patch(data.image(i), patch.values, at), target);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            grad[(c * side + y) * side + x] += g[c * n + (at.y + y) * W + at.x + x];
          }
        }
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      const double step_len = cfg.step_size * (hi[c] - lo[c]);
      for (std::size_t k = 0; k < side * side; ++k) {
        double& v = patch.values[c * side * side + k];
        const double g = grad[c * side * side + k];
        v = std::clamp(v + (g > 0 ? step_len : g < 0 ? -step_len : 0.0), lo[c], hi[c]);
      }
    }
    if ((step + 1) % cfg.steps_per_epoch == 0) {
      patch.history.push_back(patch_success_rate(model, data, validation, patch.values, target, val_seed));
    }
  }
  patch.success_rate = patch_success_rate(model, data, validation, patch.values, target, val_seed);
  return patch;
}

}  // namespace attrbench
