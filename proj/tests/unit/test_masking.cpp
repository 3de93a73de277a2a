#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attrbench/masking.hpp"
#include "../support/oracles.hpp"

using namespace attrbench;

namespace {

std::vector<std::size_t> changed_pixels(const Tensor& a, const Tensor& b) {
  const PixelLayout l = pixel_layout(a.shape());
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < l.pixels(); ++p) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      if (a[c * l.pixels() + p] != b[c * l.pixels() + p]) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

// Inputs whose entries are all far from zero so any replacement is visible.
Tensor nonzero_input(const Shape& shape, std::mt19937_64& rng) {
  Tensor x = oracle::random_tensor(shape, rng, 1.0, 2.0);
  return x;
}

Masker masker(MaskerKind kind, std::size_t kernel = 9, std::uint64_t seed = 0) {
  Masker m;
  m.kind = kind;
  m.blur_kernel = kernel;
  m.seed = seed;
  return m;
}

}  // namespace

TEST(RankPixels, SortsDescending) {
  EXPECT_EQ(rank_pixels(Tensor({1, 1, 3}, std::vector<double>{3, 1, 2})).order,
            (std::vector<std::size_t>{0, 2, 1}));
}

TEST(RankPixels, UsesChannelMean) {
  // Pixel 0 has channels (0.9, 0, 0), pixel 1 has (0.2, 0.2, 0.2).
  const Tensor e({3, 1, 2}, std::vector<double>{0.2, 0.9, 0.2, 0.0, 0.2, 0.0});
  EXPECT_EQ(rank_pixels(e).order, (std::vector<std::size_t>{1, 0}));
  const Tensor f({3, 1, 2}, std::vector<double>{0.9, 0.2, 0.0, 0.2, 0.0, 0.2});
  EXPECT_EQ(rank_pixels(f).order, (std::vector<std::size_t>{0, 1}));
}

TEST(RankPixels, AllEqualIsIdentity) {
  const PixelRanking r = rank_pixels(Tensor({2, 4, 4}, 1.5));
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r.order[i], i);
}

TEST(RankPixels, PermutationWithNonIncreasingScores) {
  std::mt19937_64 rng(1);
  const Tensor e = oracle::random_tensor({3, 7, 9}, rng);
  const PixelRanking r = rank_pixels(e);
  std::vector<std::size_t> sorted = r.order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  const auto score = [&](std::size_t p) { return (e[p] + e[63 + p] + e[126 + p]) / 3.0; };
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_GE(score(r.order[i - 1]), score(r.order[i]));
}

TEST(MaskTop, ZeroKReturnsInputExactly) {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({3, 5, 5}, rng);
  const PixelRanking r = rank_pixels(oracle::random_tensor({3, 5, 5}, rng));
  for (MaskerKind kind : {MaskerKind::dataset_mean, MaskerKind::uniform_random, MaskerKind::blur}) {
    EXPECT_TRUE(bit_equal(mask_top(x, r, 0, masker(kind)), x));
    EXPECT_TRUE(bit_equal(mask_bottom(x, r, 0, masker(kind)), x));
  }
}

TEST(MaskTop, FullDatasetMeanMaskIsZero) {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({3, 6, 6}, rng);
  const Tensor out = mask_top(x, rank_pixels(x), 36, masker(MaskerKind::dataset_mean));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(MaskTop, BlurOfConstantImageIsUnchanged) {
  const Tensor x({1, 10, 10}, 0.37);
  const PixelRanking r = rank_pixels(Tensor({1, 10, 10}));
  const Tensor out = mask_top(x, r, 40, masker(MaskerKind::blur));
  for (double v : out.values()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(MaskTop, KOutOfRangeRejected) {
  const Tensor x({1, 3, 3});
  const PixelRanking r = rank_pixels(x);
  EXPECT_THROW(mask_top(x, r, 10, {}), InvalidInput);
  EXPECT_THROW(mask_bottom(x, r, 10, {}), InvalidInput);
}

TEST(MaskTop, ReplacesExactlyKPixelsInAllChannels) {
  std::mt19937_64 rng(4);
  const Tensor x = nonzero_input({3, 8, 8}, rng);
  const PixelRanking r = rank_pixels(oracle::random_tensor({3, 8, 8}, rng));
  for (std::size_t k : {1u, 7u, 30u, 64u}) {
    const Tensor out = mask_top(x, r, k, masker(MaskerKind::dataset_mean));
    std::vector<std::size_t> expected(r.order.begin(), r.order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(expected.begin(), expected.end());
    EXPECT_EQ(changed_pixels(x, out), expected);
    for (std::size_t p : expected) {
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out[c * 64 + p], 0.0);
    }
  }
}

TEST(MaskTop, TopAndBottomAreComplementary) {
  std::mt19937_64 rng(5);
  const Tensor x = nonzero_input({1, 6, 6}, rng);
  const PixelRanking r = rank_pixels(oracle::random_tensor({1, 6, 6}, rng));
  for (std::size_t k = 0; k <= 36; ++k) {
    const auto top = changed_pixels(x, mask_top(x, r, k, {}));
    const auto bottom = changed_pixels(x, mask_bottom(x, r, 36 - k, {}));
    std::vector<std::size_t> all;
    std::merge(top.begin(), top.end(), bottom.begin(), bottom.end(), std::back_inserter(all));
    ASSERT_EQ(all.size(), 36u);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(all[i], i);
  }
}

TEST(MaskTop, MaskedSetIndependentOfMasker) {
  std::mt19937_64 rng(6);
  const Tensor x = nonzero_input({1, 12, 12}, rng);
  // Random fill values lie in [0,1] and a blurred image of values in [1,2] lies in [1,2] but
  // differs from the original, so every masked pixel is visibly changed for these maskers.
  const PixelRanking r = rank_pixels(oracle::random_tensor({1, 12, 12}, rng));
  const auto expect = changed_pixels(x, mask_top(x, r, 20, masker(MaskerKind::dataset_mean)));
  EXPECT_EQ(changed_pixels(x, mask_top(x, r, 20, masker(MaskerKind::uniform_random, 9, 11))), expect);
  const Tensor blurred = mask_top(x, r, 20, masker(MaskerKind::blur));
  for (std::size_t p : changed_pixels(x, blurred)) {
    EXPECT_NE(std::find(expect.begin(), expect.end(), p), expect.end());
  }
}

TEST(Masker, UniformRandomIsReproducibleAndNormalised) {
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor({2, 5, 5}, rng);
  Masker m = masker(MaskerKind::uniform_random, 9, 42);
  m.stats = ChannelStats{{0.5, 0.2}, {0.25, 0.1}};
  const Tensor a = m.fill_for(x), b = m.fill_for(x);
  EXPECT_TRUE(bit_equal(a, b));
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_GE(a[i], (0.0 - 0.5) / 0.25);
    EXPECT_LT(a[i], (1.0 - 0.5) / 0.25);
    EXPECT_GE(a[25 + i], (0.0 - 0.2) / 0.1);
    EXPECT_LT(a[25 + i], (1.0 - 0.2) / 0.1);
  }
  m.seed = 43;
  EXPECT_FALSE(bit_equal(a, m.fill_for(x)));
}

TEST(Masker, BlurIsGaussianAverageOfOriginal) {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor({1, 11, 11}, rng);
  const Tensor fill = masker(MaskerKind::blur, 5).fill_for(x);
  // Direct 2-D weighted sum at a corner and at the centre, truncated to the image.
  const double sigma = 5.0 / 3.0;
  for (auto [py, px] : {std::pair{0, 0}, {5, 5}, {10, 3}}) {
    double acc = 0.0, wsum = 0.0;
    for (int y = 0; y < 11; ++y) {
      for (int xx = 0; xx < 11; ++xx) {
        if (std::abs(y - py) > 2 || std::abs(xx - px) > 2) continue;
        const double w = std::exp(-((y - py) * (y - py) + (xx - px) * (xx - px)) / (2 * sigma * sigma));
        acc += w * x[static_cast<std::size_t>(y * 11 + xx)];
        wsum += w;
      }
    }
    EXPECT_NEAR(fill[static_cast<std::size_t>(py * 11 + px)], acc / wsum, 1e-12);
  }
}

TEST(Masker, EvenBlurKernelRejected) {
  EXPECT_THROW(masker(MaskerKind::blur, 4).validate(), ConfigError);
  EXPECT_THROW(masker(MaskerKind::blur, 4).fill_for(Tensor({1, 4, 4})), ConfigError);
}

TEST(MaskSegments, FullCoverMasksEverything) {
  std::mt19937_64 rng(9);
  const Tensor x = nonzero_input({1, 4, 4}, rng);
  const Segmentation s{4, 4, 2, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1}};
  const Tensor out = mask_segments(x, oracle::random_tensor({1, 4, 4}, rng), s, 2, {}, Order::morf);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(MaskSegments, MostAndLeastImportant) {
  std::mt19937_64 rng(10);
  const Tensor x = nonzero_input({1, 2, 2}, rng);
  const Segmentation s{2, 2, 2, {0, 0, 1, 1}};
  const Tensor e({1, 2, 2}, std::vector<double>{0.9, 0.9, 0.1, 0.1});
  EXPECT_EQ(changed_pixels(x, mask_segments(x, e, s, 1, {}, Order::morf)), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(changed_pixels(x, mask_segments(x, e, s, 1, {}, Order::lerf)), (std::vector<std::size_t>{2, 3}));
  EXPECT_THROW(mask_segments(x, e, s, 3, {}, Order::morf), InvalidInput);
}
