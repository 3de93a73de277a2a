#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Per-channel mean and standard deviation used for z-normalisation.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const noexcept { return mean.empty(); }

  double normalize(std::size_t channel, double raw) const {
    return (raw - mean[channel]) / stddev[channel];
  }
};

/// Images are stored as one (N, C, H, W) tensor.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  /// Statistics that were applied to `images`; empty while the data is raw [0,1].
  ChannelStats stats;
  /// Known informative pixels, (N, 1, H, W) with 0/1 entries. Only synthetic data carries it.
  std::optional<Tensor> regions;

  std::size_t size() const noexcept { return labels.size(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t image_volume() const { return images.dim(1) * images.dim(2) * images.dim(3); }

  Tensor image(std::size_t i) const {
    if (i >= size()) throw InvalidInput("image index " + std::to_string(i) + " out of range");
    const std::size_t v = image_volume();
    return Tensor(image_shape(), std::vector<double>(images.data() + i * v, images.data() + (i + 1) * v));
  }

  /// Region mask of image i as a (1,H,W) tensor.
  Tensor region(std::size_t i) const {
    if (!regions) throw InvalidInput("dataset has no ground-truth regions");
    const std::size_t hw = images.dim(2) * images.dim(3);
    return Tensor({1, images.dim(2), images.dim(3)},
                  std::vector<double>(regions->data() + i * hw, regions->data() + (i + 1) * hw));
  }

  void validate() const {
    if (images.rank() != 4) throw InvalidInput("dataset images must be (N,C,H,W)");
    if (images.dim(0) != labels.size()) {
      throw InvalidInput("dataset has " + std::to_string(images.dim(0)) + " images but " +
                         std::to_string(labels.size()) + " labels");
    }
    for (std::size_t l : labels) {
      if (l >= num_classes) throw InvalidInput("label " + std::to_string(l) + " >= class count");
    }
  }
};

/// Mean and population standard deviation per channel. Constant channels get stddev 1.
inline ChannelStats compute_channel_stats(const Dataset& ds) {
  const std::size_t n = ds.size(), c = ds.images.dim(1), hw = ds.images.dim(2) * ds.images.dim(3);
  ChannelStats stats{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) sum += p[k];
    }
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) ss += (p[k] - mean) * (p[k] - mean);
    }
    const double sd = std::sqrt(ss / count);
    stats.mean[ch] = mean;
    stats.stddev[ch] = sd > 0.0 ? sd : 1.0;
  }
  return stats;
}

/// Applies z-normalisation to raw data. Statistics are normally computed on the training split
/// and reused unchanged for evaluation data.
inline Dataset normalized(Dataset raw, const ChannelStats& stats) {
  if (!raw.stats.empty()) throw InvalidInput("dataset is already normalised");
  const std::size_t n = raw.size(), c = raw.images.dim(1), hw = raw.images.dim(2) * raw.images.dim(3);
  if (stats.mean.size() != c) throw InvalidInput("channel statistics do not match dataset");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = raw.images.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] = stats.normalize(ch, p[k]);
    }
  }
  raw.stats = stats;
  return raw;
}

/// Images [begin, end) as a new dataset.
inline Dataset slice(const Dataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.size()) throw InvalidInput("bad dataset slice");
  const std::size_t v = ds.image_volume();
  Dataset out;
  Shape shape = ds.images.shape();
  shape[0] = end - begin;
  out.images = Tensor(shape, std::vector<double>(ds.images.data() + begin * v, ds.images.data() + end * v));
  out.labels.assign(ds.labels.begin() + static_cast<long>(begin), ds.labels.begin() + static_cast<long>(end));
  out.num_classes = ds.num_classes;
  out.stats = ds.stats;
  if (ds.regions) {
    const std::size_t hw = ds.images.dim(2) * ds.images.dim(3);
    Shape rs = ds.regions->shape();
    rs[0] = end - begin;
    out.regions = Tensor(rs, std::vector<double>(ds.regions->data() + begin * hw, ds.regions->data() + end * hw));
  }
  return out;
}

}  // namespace attrbench
