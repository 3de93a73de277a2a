#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"
#include "attrbench/random.hpp"
#include "attrbench/segmentation.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

enum class MaskerKind { dataset_mean, uniform_random, blur };

/// Most-relevant-first or least-relevant-first.
enum class Order { morf, lerf };

inline const char* masker_name(MaskerKind k) {
  switch (k) {
    case MaskerKind::dataset_mean: return "constant";
    case MaskerKind::uniform_random: return "random";
    case MaskerKind::blur: return "blur";
  }
  return "?";
}

/// Replacement rule for removed pixels. A masker turns an input into its "fill" image; masking a
/// pixel copies the fill value into all of its channels, so the replaced values depend on the
/// pixel only and never on which other pixels are masked.
struct Masker {
  MaskerKind kind = MaskerKind::dataset_mean;
  std::size_t blur_kernel = 9;
  std::uint64_t seed = 0;
  /// Normalisation applied to uniform draws; empty means inputs are raw [0,1] pixels.
  ChannelStats stats;

  std::string name() const { return masker_name(kind); }

  void validate() const {
    if (kind == MaskerKind::blur && (blur_kernel % 2 == 0 || blur_kernel == 0)) {
      throw ConfigError("blur kernel size must be odd, got " + std::to_string(blur_kernel));
    }
  }

  Tensor fill_for(const Tensor& x) const {
    validate();
    const PixelLayout layout = pixel_layout(x.shape());
    const std::size_t n = layout.pixels();
    Tensor fill(x.shape());
    switch (kind) {
      case MaskerKind::dataset_mean:
        break;
      case MaskerKind::uniform_random: {
        Rng rng(seed);
        for (std::size_t c = 0; c < layout.channels; ++c) {
          for (std::size_t p = 0; p < n; ++p) {
            const double u = uniform01(rng);
            fill[c * n + p] = stats.empty() ? u : stats.normalize(c, u);
          }
        }
        break;
      }
      case MaskerKind::blur: {
        const long half = static_cast<long>(blur_kernel / 2);
        const double sigma = static_cast<double>(blur_kernel) / 3.0;
        std::vector<double> kernel(blur_kernel);
        for (long i = -half; i <= half; ++i) {
          kernel[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        }
        const long H = static_cast<long>(layout.height), W = static_cast<long>(layout.width);
        for (std::size_t c = 0; c < layout.channels; ++c) {
          const double* src = x.data() + c * n;
          double* dst = fill.data() + c * n;
          for (long y = 0; y < H; ++y) {
            for (long xx = 0; xx < W; ++xx) {
              double acc = 0.0, wsum = 0.0;
              for (long dy = -half; dy <= half; ++dy) {
                const long yy = y + dy;
                if (yy < 0 || yy >= H) continue;
                const double wy = kernel[static_cast<std::size_t>(dy + half)];
                for (long dx = -half; dx <= half; ++dx) {
                  const long xq = xx + dx;
                  if (xq < 0 || xq >= W) continue;
                  const double wgt = wy * kernel[static_cast<std::size_t>(dx + half)];
                  acc += wgt * src[yy * W + xq];
                  wsum += wgt;
                }
              }
              dst[y * W + xx] = acc / wsum;
            }
          }
        }
        break;
      }
    }
    return fill;
  }
};

/// Pixel indices by descending channel-mean attribution; equal scores keep ascending index.
struct PixelRanking {
  std::vector<std::size_t> order;

  std::size_t size() const noexcept { return order.size(); }
};

/// Indices in removal order: descending score for MoRF, ascending for LeRF. Ties keep ascending
/// index in both orders, so a constant score gives the same order either way.
inline std::vector<std::size_t> removal_order(const std::vector<double>& score, Order order) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (order == Order::morf) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  }
  return idx;
}

inline PixelRanking rank_pixels(const Tensor& e) { return PixelRanking{removal_order(channel_mean(e), Order::morf)}; }

/// Copies fill values into every channel of the listed pixels.
inline void mask_in_place(Tensor& x, const Tensor& fill, std::span<const std::size_t> pixels) {
  const PixelLayout layout = pixel_layout(x.shape());
  const std::size_t n = layout.pixels();
  for (std::size_t c = 0; c < layout.channels; ++c) {
    for (std::size_t p : pixels) x[c * n + p] = fill[c * n + p];
  }
}

inline Tensor mask_pixels(const Tensor& x, const Tensor& fill, std::span<const std::size_t> pixels) {
  Tensor out = x;
  mask_in_place(out, fill, pixels);
  return out;
}

namespace detail {

inline void check_k(std::size_t k, std::size_t n, const char* what) {
  if (k > n) {
    throw InvalidInput(std::string(what) + ": k=" + std::to_string(k) + " exceeds " + std::to_string(n));
  }
}

}  // namespace detail

/// x with its k highest-ranked pixels removed.
inline Tensor mask_top(const Tensor& x, const PixelRanking& ranking, std::size_t k, const Masker& masker) {
  detail::check_k(k, ranking.size(), "mask_top");
  if (k == 0) return x;
  return mask_pixels(x, masker.fill_for(x), std::span(ranking.order).first(k));
}

/// x with its k lowest-ranked pixels removed.
inline Tensor mask_bottom(const Tensor& x, const PixelRanking& ranking, std::size_t k,
                          const Masker& masker) {
  detail::check_k(k, ranking.size(), "mask_bottom");
  if (k == 0) return x;
  return mask_pixels(x, masker.fill_for(x), std::span(ranking.order).last(k));
}

/// Pixels of the k most (morf) or least (lerf) important segments under attribution e.
inline std::vector<std::size_t> segment_mask_pixels(const Tensor& e, const Segmentation& seg, std::size_t k,
                                                    Order order) {
  detail::check_k(k, seg.count, "mask_segments");
  const std::vector<std::size_t> ranked = removal_order(segment_attribution(e, seg), order);
  std::vector<std::uint8_t> chosen(seg.count, 0);
  for (std::size_t i = 0; i < k; ++i) chosen[ranked[i]] = 1;
  std::vector<std::size_t> pixels;
  for (std::size_t p = 0; p < seg.labels.size(); ++p) {
    if (chosen[seg.labels[p]]) pixels.push_back(p);
  }
  return pixels;
}

inline Tensor mask_segments(const Tensor& x, const Tensor& e, const Segmentation& seg, std::size_t k,
                            const Masker& masker, Order order) {
  const std::vector<std::size_t> pixels = segment_mask_pixels(e, seg, k, order);
  return mask_pixels(x, masker.fill_for(x), pixels);
}

}  // namespace attrbench
