#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include <unistd.h>

#include "attrbench/segmentation.hpp"
#include "attrbench/synthetic.hpp"
#include "../support/oracles.hpp"

using namespace attrbench;

namespace {

// Checks the partition and connectivity invariants without going through is_valid_partition.
void expect_partition(const Segmentation& s) {
  ASSERT_EQ(s.labels.size(), s.height * s.width);
  std::vector<std::size_t> hist(s.count, 0);
  for (std::size_t l : s.labels) {
    ASSERT_LT(l, s.count);
    ++hist[l];
  }
  std::size_t total = 0;
  for (std::size_t h : hist) {
    EXPECT_GT(h, 0u);
    total += h;
  }
  EXPECT_EQ(total, s.height * s.width);
  // Flood fill from the first pixel of each label must reach every pixel carrying it.
  for (std::size_t l = 0; l < s.count; ++l) {
    std::vector<std::uint8_t> seen(s.labels.size(), 0);
    std::size_t start = 0;
    while (s.labels[start] != l) ++start;
    std::vector<std::size_t> queue{start};
    seen[start] = 1;
    std::size_t reached = 0;
    while (!queue.empty()) {
      const std::size_t p = queue.back();
      queue.pop_back();
      ++reached;
      const long y = static_cast<long>(p / s.width), x = static_cast<long>(p % s.width);
      for (auto [dy, dx] : {std::pair{-1L, 0L}, {1L, 0L}, {0L, -1L}, {0L, 1L}}) {
        const long ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<long>(s.height) || nx >= static_cast<long>(s.width)) continue;
        const std::size_t q = static_cast<std::size_t>(ny) * s.width + static_cast<std::size_t>(nx);
        if (!seen[q] && s.labels[q] == l) {
          seen[q] = 1;
          queue.push_back(q);
        }
      }
    }
    EXPECT_EQ(reached, hist[l]) << "segment " << l << " is not 4-connected";
  }
}

}  // namespace

TEST(Slic, ConstantImageGivesFourByFourGrid) {
  const Segmentation s = slic(Tensor({1, 32, 32}, 0.5), {16, 10.0, 10, 0});
  ASSERT_EQ(s.count, 16u);
  // Every 8x8 block carries exactly one label and distinct blocks carry distinct labels.
  std::map<std::size_t, std::size_t> block_of_label;
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      const std::size_t block = (y / 8) * 4 + x / 8;
      const auto [it, inserted] = block_of_label.emplace(s.labels[y * 32 + x], block);
      EXPECT_EQ(it->second, block);
    }
  }
  EXPECT_EQ(block_of_label.size(), 16u);
}

TEST(Slic, TargetOneCoversEverything) {
  std::mt19937_64 rng(1);
  const Segmentation s = slic(oracle::random_tensor({3, 20, 20}, rng), {1, 10.0, 10, 0});
  EXPECT_EQ(s.count, 1u);
  for (std::size_t l : s.labels) EXPECT_EQ(l, 0u);
}

TEST(Slic, TargetBeyondPixelCountRejected) {
  EXPECT_THROW(slic(Tensor({1, 8, 8}), {65, 10.0, 10, 0}), InvalidInput);
  EXPECT_THROW(slic(Tensor({1, 8, 8}), {0, 10.0, 10, 0}), InvalidInput);
}

TEST(Slic, RandomImagesArePartitionsOfConnectedSegments) {
  std::mt19937_64 rng(2);
  for (std::size_t target : {4u, 25u, 50u, 100u}) {
    for (std::size_t channels : {1u, 3u}) {
      const Segmentation s = slic(oracle::random_tensor({channels, 28, 28}, rng), {target, 10.0, 10, 0});
      expect_partition(s);
      EXPECT_TRUE(s.is_valid_partition());
    }
  }
}

TEST(Slic, SegmentCountNearTargetOnShapeImages) {
  const Dataset ds = synth_generate(3, 8, 32, 4);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Segmentation s = slic(ds.image(i), {100, 10.0, 10, 0});
    expect_partition(s);
    EXPECT_GE(s.count, 70u);
    EXPECT_LE(s.count, 130u);
  }
}

TEST(Slic, NonSquareConstantImageStaysConnected) {
  // Grid placement on a shifted/non-square lattice must still give connected cells.
  for (auto [h, w] : {std::pair{24u, 40u}, {33u, 17u}, {16u, 16u}}) {
    const Segmentation s = slic(Tensor({1, h, w}, 1.0), {12, 10.0, 10, 0});
    expect_partition(s);
  }
}

TEST(Slic, Deterministic) {
  std::mt19937_64 rng(4);
  const Tensor img = oracle::random_tensor({1, 24, 24}, rng);
  EXPECT_EQ(slic(img, {30, 10.0, 10, 0}).labels, slic(img, {30, 10.0, 10, 0}).labels);
}

TEST(SegmentAttribution, ConstantMapScoresConstant) {
  std::mt19937_64 rng(5);
  const Segmentation s = slic(oracle::random_tensor({1, 16, 16}, rng), {9, 10.0, 10, 0});
  for (double v : segment_attribution(Tensor({2, 16, 16}, 0.7), s)) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(SegmentAttribution, IndicatorMap) {
  const Segmentation s{1, 4, 2, {0, 0, 1, 1}};
  const auto scores = segment_attribution(Tensor({1, 1, 4}, std::vector<double>{1, 1, 0, 0}), s);
  EXPECT_EQ(scores, (std::vector<double>{1.0, 0.0}));
}

TEST(SegmentAttribution, AveragesChannelMeans) {
  // Segment 1 is pixels {2, 4} with channel means 0.2 and 0.6.
  const Segmentation s{1, 5, 2, {0, 0, 1, 0, 1}};
  const Tensor e({2, 1, 5}, std::vector<double>{9, 9, 0.1, 9, 1.0, /* channel 1 */ 9, 9, 0.3, 9, 0.2});
  EXPECT_NEAR(segment_attribution(e, s)[1], 0.4, 1e-15);
}

TEST(SegmentAttribution, ChannelPermutationInvariant) {
  std::mt19937_64 rng(6);
  const Segmentation s = slic(oracle::random_tensor({1, 12, 12}, rng), {6, 10.0, 10, 0});
  const Tensor e = oracle::random_tensor({3, 12, 12}, rng);
  Tensor permuted({3, 12, 12});
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 144; ++p) permuted[perm[c] * 144 + p] = e[c * 144 + p];
  }
  const auto a = segment_attribution(e, s), b = segment_attribution(permuted, s);
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_NEAR(a[l], b[l], 1e-15);
}

TEST(SegmentAttribution, AbsoluteToggleUsesMagnitudes) {
  const Segmentation s{1, 2, 1, {0, 0}};
  const Tensor e({1, 1, 2}, std::vector<double>{-1.0, 0.5});
  EXPECT_DOUBLE_EQ(segment_attribution(e, s)[0], -0.25);
  EXPECT_DOUBLE_EQ(segment_attribution(e, s, true)[0], 0.75);
}

TEST(SegmentAttribution, ShapeMismatchRejected) {
  const Segmentation s = pixel_segmentation(4, 4);
  EXPECT_THROW(segment_attribution(Tensor({1, 4, 5}), s), InvalidInput);
}

TEST(RankSegments, TiesKeepLowerLabelFirst) {
  EXPECT_EQ(rank_segments({0.1, 0.5, 0.5, -1.0}), (std::vector<std::size_t>{1, 2, 0, 3}));
}

TEST(Pgm, ExportRoundTripsLabels) {
  const std::filesystem::path path =
      std::filesystem::temp_directory_path() / ("attrbench_seg_" + std::to_string(::getpid()) + ".pgm");
  const Segmentation s = slic(Tensor({1, 16, 16}), {4, 10.0, 10, 0});
  write_pgm(s, path.string());
  std::ifstream in(path);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 16u);
  EXPECT_EQ(h, 16u);
  EXPECT_EQ(maxval, s.count - 1);
  std::vector<std::size_t> labels(w * h);
  for (auto& l : labels) in >> l;
  EXPECT_EQ(labels, s.labels);
  std::filesystem::remove(path);
}
