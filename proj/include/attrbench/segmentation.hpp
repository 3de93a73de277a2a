#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Partition of an H x W pixel grid into `count` labelled segments.
struct Segmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t count = 0;
  std::vector<std::size_t> labels;  // row-major, one per pixel

  std::size_t pixels() const noexcept { return height * width; }

  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s(count, 0);
    for (std::size_t l : labels) ++s[l];
    return s;
  }

  /// Pixel indices of each segment, ascending.
  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> m(count);
    for (std::size_t p = 0; p < labels.size(); ++p) m[labels[p]].push_back(p);
    return m;
  }

  /// Every label in [0, count) is non-empty and 4-connected.
  bool is_valid_partition() const {
    if (labels.size() != pixels() || count == 0) return false;
    for (std::size_t l : labels) {
      if (l >= count) return false;
    }
    std::vector<std::size_t> seen(count, 0);
    std::vector<std::uint8_t> visited(labels.size(), 0);
    std::vector<std::size_t> stack;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      if (visited[p]) continue;
      const std::size_t l = labels[p];
      if (seen[l]++) return false;  // a second component with the same label
      stack.push_back(p);
      visited[p] = 1;
      while (!stack.empty()) {
        const std::size_t q = stack.back();
        stack.pop_back();
        const std::size_t y = q / width, x = q % width;
        const std::size_t nb[4] = {y > 0 ? q - width : q, y + 1 < height ? q + width : q,
                                   x > 0 ? q - 1 : q, x + 1 < width ? q + 1 : q};
        for (std::size_t n : nb) {
          if (!visited[n] && labels[n] == l) {
            visited[n] = 1;
            stack.push_back(n);
          }
        }
      }
    }
    return std::all_of(seen.begin(), seen.end(), [](std::size_t s) { return s == 1; });
  }
};

/// One segment per pixel.
inline Segmentation pixel_segmentation(std::size_t height, std::size_t width) {
  Segmentation s{height, width, height * width, std::vector<std::size_t>(height * width)};
  std::iota(s.labels.begin(), s.labels.end(), 0);
  return s;
}

struct SlicParams {
  std::size_t target_segments = 100;
  double compactness = 10.0;
  std::size_t iterations = 10;
  /// Recorded for reproducibility manifests; the seed grid is deterministic.
  std::uint64_t seed = 0;
};

namespace detail {

// Relabels 4-connected components, merges components smaller than min_size into their largest
// adjacent component, and numbers the result in raster order of first appearance.
inline Segmentation enforce_connectivity(std::size_t h, std::size_t w, const std::vector<std::size_t>& raw,
                                         std::size_t min_size) {
  const std::size_t n = h * w;
  std::vector<std::size_t> comp(n, std::numeric_limits<std::size_t>::max());
  std::vector<std::size_t> comp_size;
  std::vector<std::size_t> stack;
  for (std::size_t p = 0; p < n; ++p) {
    if (comp[p] != std::numeric_limits<std::size_t>::max()) continue;
    const std::size_t id = comp_size.size();
    comp_size.push_back(0);
    comp[p] = id;
    stack.push_back(p);
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      ++comp_size[id];
      const std::size_t y = q / w, x = q % w;
      const std::size_t nb[4] = {y > 0 ? q - w : q, y + 1 < h ? q + w : q, x > 0 ? q - 1 : q,
                                 x + 1 < w ? q + 1 : q};
      for (std::size_t m : nb) {
        if (comp[m] == std::numeric_limits<std::size_t>::max() && raw[m] == raw[q]) {
          comp[m] = id;
          stack.push_back(m);
        }
      }
    }
  }

  // Union-find over components.
  std::vector<std::size_t> parent(comp_size.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  std::vector<std::size_t> size = comp_size;
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::vector<std::size_t>> adjacent(parent.size());
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t a = find(comp[p]);
      const std::size_t y = p / w, x = p % w;
      if (x + 1 < w) {
        const std::size_t b = find(comp[p + 1]);
        if (a != b) {
          adjacent[a].push_back(b);
          adjacent[b].push_back(a);
        }
      }
      if (y + 1 < h) {
        const std::size_t b = find(comp[p + w]);
        if (a != b) {
          adjacent[a].push_back(b);
          adjacent[b].push_back(a);
        }
      }
    }
    for (std::size_t c = 0; c < parent.size(); ++c) {
      if (find(c) != c || size[c] >= min_size) continue;
      std::size_t best = c;
      for (std::size_t nb : adjacent[c]) {
        const std::size_t r = find(nb);
        if (r == c) continue;
        if (best == c || size[r] > size[best] || (size[r] == size[best] && r < best)) best = r;
      }
      if (best == c) continue;  // isolated: the whole image is one component
      parent[c] = best;
      size[best] += size[c];
      changed = true;
      break;  // adjacency is stale after a merge
    }
  }

  Segmentation seg{h, w, 0, std::vector<std::size_t>(n)};
  std::vector<std::size_t> relabel(parent.size(), std::numeric_limits<std::size_t>::max());
  for (std::size_t p = 0; p < n; ++p) {
    const std::size_t r = find(comp[p]);
    if (relabel[r] == std::numeric_limits<std::size_t>::max()) relabel[r] = seg.count++;
    seg.labels[p] = relabel[r];
  }
  return seg;
}

}  // namespace detail

/// SLIC superpixels on a (C,H,W) image using per-channel intensity distance on the values as
/// stored (normalized inputs in the pipeline), without a colour-space conversion.
inline Segmentation slic(const Tensor& image, const SlicParams& params) {
  const PixelLayout layout = pixel_layout(image.shape());
  const std::size_t h = layout.height, w = layout.width, ch = layout.channels, n = h * w;
  if (image.rank() != 3 || h < 8 || w < 8) throw InvalidInput("slic needs a (C,H,W) image of at least 8x8");
  if (params.target_segments == 0 || params.target_segments > n) {
    throw InvalidInput("slic target of " + std::to_string(params.target_segments) +
                       " segments is not in [1, " + std::to_string(n) + "]");
  }

  const std::span<const double> color = image.values();

  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(params.target_segments));
  const std::size_t nx = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w / step)));
  const std::size_t ny = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h / step)));
  const std::size_t k = nx * ny;
  const double sx = static_cast<double>(w) / static_cast<double>(nx);
  const double sy = static_cast<double>(h) / static_cast<double>(ny);

  struct Center {
    double x, y;
    std::vector<double> c;
  };
  std::vector<Center> centers(k);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      Center& ctr = centers[j * nx + i];
      ctr.x = (static_cast<double>(i) + 0.5) * sx - 0.5;
      ctr.y = (static_cast<double>(j) + 0.5) * sy - 0.5;
      ctr.c.assign(ch, 0.0);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(i * sx));
      const std::size_t x1 = std::min(w, static_cast<std::size_t>(std::floor((i + 1) * sx)));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(j * sy));
      const std::size_t y1 = std::min(h, static_cast<std::size_t>(std::floor((j + 1) * sy)));
      double cnt = 0.0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          for (std::size_t c = 0; c < ch; ++c) ctr.c[c] += color[c * n + y * w + x];
          cnt += 1.0;
        }
      }
      if (cnt > 0.0) {
        for (double& v : ctr.c) v /= cnt;
      }
    }
  }

  const double spatial_weight = (params.compactness * params.compactness) / (step * step);
  auto distance = [&](const Center& ctr, std::size_t p) {
    const double dx = static_cast<double>(p % w) - ctr.x, dy = static_cast<double>(p / w) - ctr.y;
    double dc = 0.0;
    for (std::size_t c = 0; c < ch; ++c) {
      const double d = color[c * n + p] - ctr.c[c];
      dc += d * d;
    }
    return dc + spatial_weight * (dx * dx + dy * dy);
  };

  const std::size_t unassigned = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> assign(n, unassigned);
  std::vector<double> best(n);
  const double reach = std::max(sx, sy);
  for (std::size_t it = 0; it < std::max<std::size_t>(1, params.iterations); ++it) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    std::fill(assign.begin(), assign.end(), unassigned);
    for (std::size_t c = 0; c < k; ++c) {
      const Center& ctr = centers[c];
      const long x0 = std::max(0L, static_cast<long>(std::floor(ctr.x - reach)));
      const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(ctr.x + reach)));
      const long y0 = std::max(0L, static_cast<long>(std::floor(ctr.y - reach)));
      const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(ctr.y + reach)));
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double d = distance(ctr, p);
          if (d < best[p]) {
            best[p] = d;
            assign[p] = c;
          }
        }
      }
    }
    for (std::size_t p = 0; p < n; ++p) {
      if (assign[p] != unassigned) continue;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = distance(centers[c], p);
        if (d < best[p]) {
          best[p] = d;
          assign[p] = c;
        }
      }
    }
    std::vector<Center> sums(k, Center{0.0, 0.0, std::vector<double>(ch, 0.0)});
    std::vector<double> counts(k, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      Center& s = sums[assign[p]];
      s.x += static_cast<double>(p % w);
      s.y += static_cast<double>(p / w);
      for (std::size_t c = 0; c < ch; ++c) s.c[c] += color[c * n + p];
      counts[assign[p]] += 1.0;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0.0) continue;
      centers[c].x = sums[c].x / counts[c];
      centers[c].y = sums[c].y / counts[c];
      for (std::size_t q = 0; q < ch; ++q) centers[c].c[q] = sums[c].c[q] / counts[c];
    }
  }

  // Fragments under half the nominal cell area are merged away (the usual SLIC cleanup).
  const std::size_t min_size = std::max<std::size_t>(1, n / (2 * k));
  return detail::enforce_connectivity(h, w, assign, min_size);
}

/// Mean channel-averaged attribution of each segment. With `absolute`, pixel values are taken
/// in magnitude before averaging.
inline std::vector<double> segment_attribution(const Tensor& e, const Segmentation& seg,
                                               bool absolute = false) {
  const PixelLayout layout = pixel_layout(e.shape());
  if (layout.height != seg.height || layout.width != seg.width) {
    throw InvalidInput("attribution map " + shape_string(e.shape()) + " does not match a " +
                       std::to_string(seg.height) + "x" + std::to_string(seg.width) + " segmentation");
  }
  const std::vector<double> pix = channel_mean(e);
  std::vector<double> sum(seg.count, 0.0), cnt(seg.count, 0.0);
  for (std::size_t p = 0; p < pix.size(); ++p) {
    sum[seg.labels[p]] += absolute ? std::abs(pix[p]) : pix[p];
    cnt[seg.labels[p]] += 1.0;
  }
  for (std::size_t l = 0; l < seg.count; ++l) sum[l] /= cnt[l];
  return sum;
}

/// Segment labels ordered by descending score; ties keep the lower label first.
inline std::vector<std::size_t> rank_segments(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Plain (P2) PGM of the label image; grey level equals the label.
inline void write_pgm(const Segmentation& seg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path);
  out << "P2\n" << seg.width << " " << seg.height << "\n" << std::max<std::size_t>(1, seg.count - 1) << "\n";
  for (std::size_t y = 0; y < seg.height; ++y) {
    for (std::size_t x = 0; x < seg.width; ++x) {
      out << seg.labels[y * seg.width + x] << (x + 1 < seg.width ? " " : "\n");
    }
  }
}

}  // namespace attrbench
