#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"

// IDX archives as distributed for MNIST: big-endian u32 magic (0x00000803 for u8 images,
// 0x00000801 for u8 labels), big-endian u32 extents, then raw bytes.

namespace attrbench {

namespace detail {

inline std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open IDX file " + path, 0);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw FormatError("truncated IDX header in " + path, at);
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Loads an image/label archive pair. Pixels are scaled to [0,1]; no normalisation is applied.
/// `num_classes` of 0 infers the class count from the largest label.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::size_t num_classes = 0) {
  const auto img = detail::slurp(images_path);
  const auto lab = detail::slurp(labels_path);

  const std::uint32_t im = detail::be32(img, 0, images_path);
  if (im != kIdxImageMagic) throw FormatError("bad IDX image magic in " + images_path, 0);
  const std::uint32_t n = detail::be32(img, 4, images_path);
  const std::uint32_t rows = detail::be32(img, 8, images_path);
  const std::uint32_t cols = detail::be32(img, 12, images_path);
  if (rows == 0 || cols == 0) throw FormatError("zero image extent in " + images_path, 8);
  const std::size_t payload = static_cast<std::size_t>(n) * rows * cols;
  if (img.size() < 16 + payload) {
    throw FormatError("truncated IDX image payload in " + images_path, img.size());
  }

  const std::uint32_t lm = detail::be32(lab, 0, labels_path);
  if (lm != kIdxLabelMagic) throw FormatError("bad IDX label magic in " + labels_path, 0);
  const std::uint32_t nl = detail::be32(lab, 4, labels_path);
  if (nl != n) {
    throw FormatError("image count " + std::to_string(n) + " does not match label count " +
                          std::to_string(nl),
                      4);
  }
  if (lab.size() < 8 + static_cast<std::size_t>(n)) {
    throw FormatError("truncated IDX label payload in " + labels_path, lab.size());
  }
  if (n == 0) throw FormatError("empty IDX archive " + images_path, 4);

  Dataset ds;
  ds.images = Tensor({n, 1, rows, cols});
  for (std::size_t i = 0; i < payload; ++i) ds.images[i] = img[16 + i] / 255.0;
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = num_classes ? num_classes : max_label + 1;
  if (max_label >= ds.num_classes) {
    throw FormatError("label " + std::to_string(max_label) + " exceeds class count", 8);
  }
  return ds;
}

/// Writes a raw single-channel dataset; pixel values are quantised to round(255 v).
inline void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  if (!ds.stats.empty()) throw InvalidInput("write_idx expects raw [0,1] pixels");
  if (ds.images.dim(1) != 1) throw InvalidInput("IDX images must be single-channel");
  std::vector<std::uint8_t> img, lab;
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.images.dim(2)));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.images.dim(3)));
  for (double v : ds.images.values()) {
    img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t l : ds.labels) {
    if (l > 255) throw InvalidInput("IDX labels must fit in one byte");
    lab.push_back(static_cast<std::uint8_t>(l));
  }
  std::ofstream(images_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  std::ofstream(labels_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
}

}  // namespace attrbench
