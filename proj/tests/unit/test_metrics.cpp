#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attrbench/attribution.hpp"
#include "attrbench/metrics.hpp"
#include "attrbench/model.hpp"
#include "attrbench/patch.hpp"
#include "attrbench/synthetic.hpp"
#include "attrbench/training.hpp"
#include "../support/oracles.hpp"

using namespace attrbench;

namespace {

const Masker kZero{};  // dataset-mean masking: zero in normalized space

// logit = x1 + 2 x2 on a (1, 1, 2) input.
Model hand_linear() { return make_linear({1, 1, 2}, Tensor({1, 2}, std::vector<double>{1, 2}), Tensor({1})); }

Tensor t12(double a, double b) { return Tensor({1, 1, 2}, std::vector<double>{a, b}); }

Tensor w_times_x(const oracle::LinearFixture& f, const Tensor& x, std::size_t c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f.weight[c * x.size() + i] * x[i];
  return out;
}

AttributionMethod method_of(MethodKind kind) { return AttributionMethod{method_name(kind), kind, {}}; }

}  // namespace

// ---------------------------------------------------------------------------------------------
// Deletion / insertion

TEST(Deletion, HandExampleMoRF) {
  EXPECT_DOUBLE_EQ(deletion(hand_linear(), t12(1, 1), t12(1, 2), 0, Order::morf, kZero, 2, 1.0).score, 0.5);
}

TEST(Deletion, HandExampleLeRF) {
  EXPECT_DOUBLE_EQ(deletion(hand_linear(), t12(1, 1), t12(1, 2), 0, Order::lerf, kZero, 2, 1.0).score, 1.0);
}

TEST(Deletion, ConstantMapGivesSameScoreInBothOrders) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 1);
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng);
  const Tensor e({1, 16, 16}, 0.3);
  for (auto fn : {&deletion, &insertion}) {
    EXPECT_EQ(fn(m, x, e, 1, Order::morf, kZero, 15, 0.15).score, fn(m, x, e, 1, Order::lerf, kZero, 15, 0.15).score);
  }
}

TEST(Deletion, TrajectoryRespectsTheCap) {
  EXPECT_EQ(trajectory_counts(784, 15, 0.15), (std::vector<std::size_t>{8, 16, 24, 31, 39, 47, 55, 63, 71, 78, 86,
                                                                         94, 102, 110, 118}));
  // 15 % of 784 = 117.6: the last step masks at most round(117.6) pixels.
  EXPECT_LE(trajectory_counts(784, 15, 0.15).back(), 118u);
  EXPECT_THROW(trajectory_counts(10, 0, 0.15), ConfigError);
}

TEST(Deletion, MatchesHandRolledTrajectory) {
  std::mt19937_64 rng(3);
  const auto f = oracle::random_linear({1, 5, 5}, 2, rng);
  const Tensor x = oracle::random_tensor({1, 5, 5}, rng), e = oracle::random_tensor({1, 5, 5}, rng);
  // MoRF: remove pixels by descending e; evaluate after round(i * 0.4 * 25 / 4) removals.
  std::vector<std::size_t> order(25);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return e[a] > e[b]; });
  double total = 0.0;
  for (std::size_t i = 1; i <= 4; ++i) {
    const std::size_t k = static_cast<std::size_t>(std::round(i * 0.4 * 25 / 4.0));
    Tensor xm = x;
    for (std::size_t j = 0; j < k; ++j) xm[order[j]] = 0.0;
    total += oracle::linear_logit(f, xm, 1);
  }
  EXPECT_NEAR(deletion(f.model, x, e, 1, Order::morf, kZero, 4, 0.4).score, total / 4.0, 1e-12);
}

TEST(Insertion, FullResolutionIdentitiesAreBitExact) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 4);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
    const std::size_t d = 256;
    for (const Masker& mk : {kZero, Masker{MaskerKind::blur, 5, 0, {}}}) {
      EXPECT_EQ(insertion(m, x, e, 2, Order::morf, mk, d, 1.0).score, deletion(m, x, e, 2, Order::lerf, mk, d, 1.0).score);
      EXPECT_EQ(insertion(m, x, e, 2, Order::lerf, mk, d, 1.0).score, deletion(m, x, e, 2, Order::morf, mk, d, 1.0).score);
    }
  }
}

TEST(Insertion, TrajectoryStartsFromTheBlankImage) {
  // Inserted counts are 0, k_1, ..., k_{L-1}: with L = 1 the only point is the blank image.
  EXPECT_DOUBLE_EQ(insertion(hand_linear(), t12(1, 1), t12(1, 2), 0, Order::morf, kZero, 1, 1.0).score, 0.0);
  // L = 2 on d = 2: blank, then the most relevant pixel (x2) inserted.
  EXPECT_DOUBLE_EQ(insertion(hand_linear(), t12(1, 1), t12(1, 2), 0, Order::morf, kZero, 2, 1.0).score, (0.0 + 2.0) / 2);
  EXPECT_DOUBLE_EQ(insertion(hand_linear(), t12(1, 1), t12(1, 2), 0, Order::lerf, kZero, 2, 1.0).score, (0.0 + 1.0) / 2);
}

TEST(Trajectory, RankInvariantUnderMonotoneTransform) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 6);
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
  Tensor g = e;
  for (double& v : g.values()) v = std::exp(3.0 * v) - 7.0;
  for (Order o : {Order::morf, Order::lerf}) {
    EXPECT_EQ(deletion(m, x, e, 0, o, kZero, 15).score, deletion(m, x, g, 0, o, kZero, 15).score);
    EXPECT_EQ(insertion(m, x, e, 0, o, kZero, 15).score, insertion(m, x, g, 0, o, kZero, 15).score);
  }
  for (bool del : {true, false}) {
    EXPECT_EQ(minimal_subset(m, x, e, del, kZero).score, minimal_subset(m, x, g, del, kZero).score);
  }
}

// ---------------------------------------------------------------------------------------------
// Minimal subset

TEST(MinimalSubset, ConstantModelIsCensored) {
  const Model m = make_linear({1, 4, 4}, Tensor({2, 16}), Tensor({2}, std::vector<double>{1, 0}));
  std::mt19937_64 rng(8);
  const MetricResult r = minimal_subset(m, oracle::random_tensor({1, 4, 4}, rng), oracle::random_tensor({1, 4, 4}, rng),
                                        true, kZero, true);
  EXPECT_EQ(r.score, 17.0);
  EXPECT_EQ(r.flags, kFlagCensored);
  EXPECT_FALSE(r.excluded());
}

TEST(MinimalSubset, SingleRemovalFlipsMargin) {
  // class 0: 2 x1 + 0.5 x2, class 1: constant 1. At x = (1, 1) class 0 wins 2.5 to 1; removing x1
  // leaves 0.5 < 1.
  const Model m = make_linear({1, 1, 2}, Tensor({2, 2}, std::vector<double>{2, 0.5, 0, 0}), Tensor({2}, std::vector<double>{0, 1}));
  EXPECT_EQ(minimal_subset(m, t12(1, 1), t12(1, 0), true, kZero, true).score, 1.0);
  // Removing the irrelevant pixel first needs both removals.
  EXPECT_EQ(minimal_subset(m, t12(1, 1), t12(0, 1), true, kZero, true).score, 2.0);
}

TEST(MinimalSubset, InsertionOnBlankAlreadyCorrectIsZero) {
  const Model m = make_linear({1, 1, 2}, Tensor({2, 2}, std::vector<double>{1, 1, 0, 0}), Tensor({2}, std::vector<double>{1, 0}));
  EXPECT_EQ(minimal_subset(m, t12(1, 1), t12(1, 0), false, kZero, true).score, 0.0);
}

TEST(MinimalSubset, MatchesBruteForceScan) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const auto f = oracle::random_linear({1, 6, 6}, 3, rng);
    const Tensor x = oracle::random_tensor({1, 6, 6}, rng), e = oracle::random_tensor({1, 6, 6}, rng);
    std::vector<std::size_t> order(36);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return e[a] > e[b]; });
    auto argmax = [&](const Tensor& t) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < 3; ++c) {
        if (oracle::linear_logit(f, t, c) > oracle::linear_logit(f, t, best)) best = c;
      }
      return best;
    };
    const std::size_t orig = argmax(x);
    double del = 37.0, ins = 37.0;
    for (std::size_t k = 1; k <= 36 && del > 36; ++k) {
      Tensor xm = x;
      for (std::size_t j = 0; j < k; ++j) xm[order[j]] = 0.0;
      if (argmax(xm) != orig) del = static_cast<double>(k);
    }
    for (std::size_t k = 0; k <= 36 && ins > 36; ++k) {
      Tensor xm(x.shape());
      for (std::size_t j = 0; j < k; ++j) xm[order[j]] = x[order[j]];
      if (argmax(xm) == orig) ins = static_cast<double>(k);
    }
    EXPECT_EQ(minimal_subset(f.model, x, e, true, kZero, true).score, del);
    EXPECT_EQ(minimal_subset(f.model, x, e, false, kZero, true).score, ins);
  }
}

TEST(MinimalSubset, CoarseScanRoundsUpToTheStep) {
  // d = 400 gives a scan step of 2: the coarse answer is the exact answer rounded up to even.
  std::mt19937_64 rng(10);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = oracle::random_linear({1, 20, 20}, 2, rng);
    const Tensor x = oracle::random_tensor({1, 20, 20}, rng), e = oracle::random_tensor({1, 20, 20}, rng);
    const double exact = minimal_subset(f.model, x, e, true, kZero, true).score;
    const double coarse = minimal_subset(f.model, x, e, true, kZero, false).score;
    if (exact > 400) continue;
    // The prediction could flip back between two probed counts; only monotone cases are pinned.
    EXPECT_GE(coarse, exact);
    if (coarse == exact + (static_cast<int>(exact) % 2)) ++checked;
    EXPECT_EQ(static_cast<int>(coarse) % 2 == 0 || coarse == 401, true);
  }
  EXPECT_GT(checked, 0);
}

// ---------------------------------------------------------------------------------------------
// IROF

TEST(Irof, SingleSegmentIsFullyMaskedLogit) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 11);
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
  const Segmentation one{16, 16, 1, std::vector<std::size_t>(256, 0)};
  EXPECT_EQ(irof(m, x, e, 2, Order::morf, kZero, one).score, predict(m, Tensor({1, 16, 16}))[2]);
}

TEST(Irof, EqualSegmentScoresGiveEqualOrders) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 13);
  std::mt19937_64 rng(14);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng);
  const Segmentation seg = slic(x, {9, 10.0, 10, 0});
  const Tensor e({1, 16, 16}, 1.0);
  EXPECT_EQ(irof(m, x, e, 0, Order::morf, kZero, seg).score, irof(m, x, e, 0, Order::lerf, kZero, seg).score);
}

TEST(Irof, TwoSegmentHandExample) {
  // logit = 1*a + 2*b + 3*c + 4*d on [[a, b], [c, d]] = all ones; segments: left column, right column.
  const Model m = make_linear({1, 2, 2}, Tensor({1, 4}, std::vector<double>{1, 2, 3, 4}), Tensor({1}));
  const Segmentation seg{2, 2, 2, {0, 1, 0, 1}};
  const Tensor x({1, 2, 2}, 1.0);
  const Tensor e({1, 2, 2}, std::vector<double>{0.0, 1.0, 0.0, 1.0});
  // MoRF removes the right column (logit 4), then everything (0).
  EXPECT_DOUBLE_EQ(irof(m, x, e, 0, Order::morf, kZero, seg).score, (4.0 + 0.0) / 2);
  // LeRF removes the left column first (logit 6).
  EXPECT_DOUBLE_EQ(irof(m, x, e, 0, Order::lerf, kZero, seg).score, (6.0 + 0.0) / 2);
}

TEST(Irof, InvariantUnderPositiveAffineRescaling) {
  const Model m = make_small_cnn({3, 16, 16}, 3, {3, 4, 6, 1}, 15);
  std::mt19937_64 rng(16);
  const Tensor x = oracle::random_tensor({3, 16, 16}, rng), e = oracle::random_tensor({3, 16, 16}, rng);
  const Segmentation seg = slic(x, {16, 10.0, 10, 0});
  Tensor g = e;
  for (double& v : g.values()) v = 4.0 * v + 1.0;
  for (Order o : {Order::morf, Order::lerf}) {
    EXPECT_EQ(irof(m, x, e, 1, o, kZero, seg).score, irof(m, x, g, 1, o, kZero, seg).score);
  }
}

// ---------------------------------------------------------------------------------------------
// Sensitivity-n

TEST(SensitivityN, LinearModelWithExactContributionsCorrelatesPerfectly) {
  std::mt19937_64 rng(17);
  const auto f = oracle::random_linear({1, 8, 8}, 2, rng);
  const Tensor x = oracle::random_tensor({1, 8, 8}, rng);
  Tensor e = w_times_x(f, x, 1);
  EXPECT_NEAR(sensitivity_n(f.model, x, e, 1, 7, 100, kZero, 3).score, 1.0, 1e-12);
  e *= -1.0;
  EXPECT_NEAR(sensitivity_n(f.model, x, e, 1, 7, 100, kZero, 3).score, -1.0, 1e-12);
}

TEST(SensitivityN, BoundedDeterministicAndDegenerate) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 18);
  std::mt19937_64 rng(19);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor e = oracle::random_tensor({1, 16, 16}, rng);
    const MetricResult a = sensitivity_n(m, x, e, 0, 26, 100, kZero, 5);
    EXPECT_GE(a.score, -1.0);
    EXPECT_LE(a.score, 1.0);
    EXPECT_EQ(a.score, sensitivity_n(m, x, e, 0, 26, 100, kZero, 5).score);
  }
  const MetricResult flat = sensitivity_n(m, x, Tensor({1, 16, 16}, 2.0), 0, 26, 100, kZero, 5);
  EXPECT_TRUE(std::isnan(flat.score));
  EXPECT_EQ(flat.flags, kFlagDegenerate);
  EXPECT_TRUE(flat.excluded());
  EXPECT_THROW(sensitivity_n(m, x, x, 0, 256, 100, kZero, 5), ConfigError);
  EXPECT_THROW(sensitivity_n(m, x, x, 0, 0, 100, kZero, 5), ConfigError);
}

TEST(SensitivityN, MatchesHandComputedCorrelation) {
  // Replays the subset stream with an independent partial Fisher-Yates shuffle.
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 20);
  std::mt19937_64 rng(21);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
  Rng replay(77);
  std::vector<double> sums, drops;
  const double base = predict(m, x)[2];
  for (int i = 0; i < 30; ++i) {
    std::vector<std::size_t> idx(256);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t j = 0; j < 10; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, 255);
      std::swap(idx[j], idx[pick(replay)]);
    }
    Tensor xm = x;
    double s = 0.0;
    for (std::size_t j = 0; j < 10; ++j) {
      s += e[idx[j]];
      xm[idx[j]] = 0.0;
    }
    sums.push_back(s);
    drops.push_back(base - predict(m, xm)[2]);
  }
  EXPECT_NEAR(sensitivity_n(m, x, e, 2, 10, 30, kZero, 77).score, oracle::pearson(sums, drops), 1e-12);
}

TEST(SegSensitivityN, SegmentAdditiveModelCorrelatesPerfectly) {
  std::mt19937_64 rng(22);
  const auto f = oracle::random_linear({1, 8, 8}, 1, rng);
  const Tensor x = oracle::random_tensor({1, 8, 8}, rng);
  const Segmentation seg = slic(x, {8, 10.0, 10, 0});
  // Segment scores are means, so weight each pixel's contribution by its segment size to make
  // the segment score proportional to the segment's total effect.
  const auto sizes = seg.sizes();
  Tensor e = w_times_x(f, x, 0);
  for (std::size_t p = 0; p < 64; ++p) e[p] *= static_cast<double>(sizes[seg.labels[p]]);
  EXPECT_NEAR(seg_sensitivity_n(f.model, x, e, 0, seg, 2, 100, kZero, 4).score, 1.0, 1e-12);
}

TEST(SegSensitivityN, TwoSegmentsOneRemoved) {
  // Only subsets {0} and {1} exist; with matching scores the correlation of the two-point
  // cloud is +1, with swapped scores -1.
  const Model m = make_linear({1, 2, 2}, Tensor({1, 4}, std::vector<double>{1, 2, 3, 4}), Tensor({1}));
  const Segmentation seg{2, 2, 2, {0, 1, 0, 1}};
  const Tensor x({1, 2, 2}, 1.0);
  EXPECT_NEAR(seg_sensitivity_n(m, x, Tensor({1, 2, 2}, std::vector<double>{2, 3, 2, 3}), 0, seg, 1, 50, kZero, 1).score,
              1.0, 1e-12);
  EXPECT_NEAR(seg_sensitivity_n(m, x, Tensor({1, 2, 2}, std::vector<double>{3, 2, 3, 2}), 0, seg, 1, 50, kZero, 1).score,
              -1.0, 1e-12);
  EXPECT_THROW(seg_sensitivity_n(m, x, x, 0, seg, 2, 50, kZero, 1), ConfigError);
}

// ---------------------------------------------------------------------------------------------
// Infidelity

TEST(Infidelity, ExactForLinearModelWithWeights) {
  std::mt19937_64 rng(23);
  const auto f = oracle::random_linear({1, 6, 6}, 2, rng);
  const Tensor x = oracle::random_tensor({1, 6, 6}, rng);
  Tensor w({1, 6, 6});
  for (std::size_t i = 0; i < 36; ++i) w[i] = f.weight[36 + i];
  for (Perturbation kind : {Perturbation::noisy_baseline, Perturbation::square}) {
    EXPECT_NEAR(infidelity(f.model, x, w, 1, kind, 200, 3).score, 0.0, 1e-20);
    Tensor w10 = w;
    w10 *= 10.0;
    EXPECT_NEAR(infidelity(f.model, x, w10, 1, kind, 200, 3).score, 0.0, 1e-20);
    const InfidelitySample s = infidelity_sample(f.model, x, w10, 1, kind, 50, 0.2, 0, 3);
    EXPECT_NEAR(infidelity_beta(s), 0.1, 1e-12);
  }
}

TEST(Infidelity, NoisyBaselineMatchesIndependentReplay) {
  std::mt19937_64 rng(24);
  const auto f = oracle::random_linear({1, 4, 4}, 1, rng);
  const Tensor x = oracle::random_tensor({1, 4, 4}, rng), e = oracle::random_tensor({1, 4, 4}, rng);
  Rng replay(9);
  std::normal_distribution<double> noise(0.0, 0.2);
  std::vector<double> p, d;
  for (int i = 0; i < 40; ++i) {
    Tensor eps({1, 4, 4});
    double proj = 0.0;
    for (std::size_t k = 0; k < 16; ++k) {
      eps[k] = noise(replay);
      proj += (x[k] - eps[k]) * e[k];  // I = x - eps
    }
    p.push_back(proj);
    d.push_back(oracle::linear_logit(f, x, 0) - oracle::linear_logit(f, eps, 0));
  }
  // Least-squares slope through the origin, then the mean squared residual.
  double sxy = 0.0, sxx = 0.0;
  for (int i = 0; i < 40; ++i) {
    sxy += p[i] * d[i];
    sxx += p[i] * p[i];
  }
  const double beta = sxy / sxx;
  double infd = 0.0;
  for (int i = 0; i < 40; ++i) infd += (beta * p[i] - d[i]) * (beta * p[i] - d[i]);
  infd /= 40.0;
  EXPECT_NEAR(infidelity_beta(infidelity_sample(f.model, x, e, 0, Perturbation::noisy_baseline, 40, 0.2, 0, 9)), beta,
              1e-12 * std::abs(beta));
  EXPECT_NEAR(infidelity(f.model, x, e, 0, Perturbation::noisy_baseline, 40, 9).score, infd, 1e-12 * infd);
}

TEST(Infidelity, ScaleInvariantOnCnn) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 25);
  std::mt19937_64 rng(26);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
  for (Perturbation kind : {Perturbation::noisy_baseline, Perturbation::square}) {
    const double base = infidelity(m, x, e, 0, kind, 100, 5).score;
    for (double lambda : {0.01, -3.0, 250.0}) {
      Tensor s = e;
      s *= lambda;
      EXPECT_NEAR(infidelity(m, x, s, 0, kind, 100, 5).score, base, 1e-9 * base);
    }
  }
}

TEST(Infidelity, SquareSideAndDegenerateCases) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 27);
  std::mt19937_64 rng(28);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng);
  EXPECT_EQ(infidelity(m, x, Tensor({1, 16, 16}), 0, Perturbation::noisy_baseline, 10, 1).flags, kFlagDegenerate);
  EXPECT_THROW(infidelity(m, x, x, 0, Perturbation::square, 1, 1), ConfigError);
  EXPECT_THROW(infidelity(m, x, x, 0, Perturbation::square, 10, 1, 0.2, 17), ConfigError);
  // Default square of side ceil(16/4) = 4 zeroes exactly 16 pixels per sample.
  const Model probe = make_linear({1, 16, 16}, Tensor({1, 256}, 1.0), Tensor({1}));
  const InfidelitySample s = infidelity_sample(probe, Tensor({1, 16, 16}, 1.0), Tensor({1, 16, 16}, 1.0), 0,
                                               Perturbation::square, 20, 0.2, 0, 4);
  for (double drop : s.drops) EXPECT_DOUBLE_EQ(drop, 16.0);
}

// ---------------------------------------------------------------------------------------------
// Max-sensitivity

TEST(MaxSensitivity, ConstantMethodAndLinearGradientGiveZero) {
  std::mt19937_64 rng(29);
  const auto f = oracle::random_linear({1, 5, 5}, 2, rng);
  const Tensor x = oracle::random_tensor({1, 5, 5}, rng);
  const Tensor region({1, 5, 5}, 1.0);
  MethodContext ctx;
  ctx.region = &region;
  EXPECT_EQ(max_sensitivity(f.model, x, method_of(MethodKind::oracle_region), 0, ctx, 0.1, 20, 1).score, 0.0);
  EXPECT_EQ(max_sensitivity(f.model, x, method_of(MethodKind::gradient), 0, ctx, 0.1, 20, 1).score, 0.0);
}

TEST(MaxSensitivity, MatchesReplayedDraws) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 30);
  std::mt19937_64 rng(31);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng);
  auto unit = [](Tensor t) {
    double n = 0.0;
    for (double v : t.values()) n += v * v;
    t *= 1.0 / std::sqrt(n);
    return t;
  };
  const Tensor base = unit(gradient(m, x, 1));
  Rng replay(6);
  std::uniform_real_distribution<double> shift(-0.1, 0.1);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    Tensor y = x;
    for (double& v : y.values()) v += shift(replay);
    const Tensor ey = unit(gradient(m, y, 1));
    for (std::size_t k = 0; k < ey.size(); ++k) worst = std::max(worst, std::abs(base[k] - ey[k]));
  }
  const MetricResult r = max_sensitivity(m, x, method_of(MethodKind::gradient), 1, {}, 0.1, 10, 6);
  EXPECT_NEAR(r.score, worst, 1e-12);
  EXPECT_GE(r.score, 0.0);
  EXPECT_LE(r.score, 2.0);
}

TEST(MaxSensitivity, ZeroMapIsDegenerate) {
  const Tensor region({1, 4, 4}, 0.0);
  MethodContext ctx;
  ctx.region = &region;
  const Model m = make_linear({1, 4, 4}, Tensor({1, 16}, 1.0), Tensor({1}));
  EXPECT_EQ(max_sensitivity(m, Tensor({1, 4, 4}), method_of(MethodKind::oracle_region), 0, ctx, 0.1, 5, 1).flags,
            kFlagDegenerate);
}

// ---------------------------------------------------------------------------------------------
// Impact coverage and patches

TEST(Iou, Arithmetic) {
  const std::vector<std::size_t> p{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(iou(p, p), 1.0);
  EXPECT_DOUBLE_EQ(iou(p, std::vector<std::size_t>{5, 6, 7, 8}), 0.0);
  EXPECT_DOUBLE_EQ(iou(p, std::vector<std::size_t>{3, 4, 5, 6}), 1.0 / 3.0);
}

namespace {

// Class 1 responds to total brightness; class 0 has a fixed logit. A bright patch flips to 1.
Model brightness_model(std::size_t side) {
  Tensor w({2, side * side});
  for (std::size_t i = 0; i < side * side; ++i) w[side * side + i] = 1.0;
  // Conv front end so the model qualifies for patch training.
  return Model({1, side, side}, {Conv2d{Tensor({1, 1, 1, 1}, 1.0), Tensor({1}), 1, 0}, Flatten{},
                                 Dense{w, Tensor({2}, std::vector<double>{20.0, 0.0})}});
}

AdversarialPatch bright_patch(std::size_t side, double value) {
  AdversarialPatch p;
  p.values = Tensor({1, side, side}, value);
  p.target = 1;
  return p;
}

}  // namespace

TEST(ImpactCoverage, OracleOnPatchScoresOneAndDisjointScoresZero) {
  const Model m = brightness_model(10);
  const AdversarialPatch patch = bright_patch(3, 5.0);
  const Tensor x({1, 10, 10});
  Rng rng(42);
  const PatchPlacement at = random_placement(10, 10, 3, rng);
  Tensor on({1, 10, 10}), off({1, 10, 10}, 1.0);
  for (std::size_t p : patch_pixels(10, 3, at)) {
    on[p] = 1.0;
    off[p] = 0.0;
  }
  MethodContext ctx;
  ctx.region = &on;
  EXPECT_DOUBLE_EQ(impact_coverage(m, x, method_of(MethodKind::oracle_region), ctx, patch, 42).score, 1.0);
  ctx.region = &off;
  // Every off-patch pixel ties at 1 and outranks the patch, so the top 9 miss it entirely.
  EXPECT_DOUBLE_EQ(impact_coverage(m, x, method_of(MethodKind::oracle_region), ctx, patch, 42).score, 0.0);
}

TEST(ImpactCoverage, FailedPatchIsFlaggedAndExcluded) {
  const Model m = brightness_model(10);
  const MetricResult r = impact_coverage(m, Tensor({1, 10, 10}), method_of(MethodKind::gradient), {}, bright_patch(3, 0.1), 1);
  EXPECT_EQ(r.flags, kFlagPatchFailed);
  EXPECT_TRUE(r.excluded());
}

TEST(ImpactCoverage, ScoreWithinUnitInterval) {
  const Model m = brightness_model(10);
  std::mt19937_64 rng(32);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const double s = impact_coverage(m, oracle::random_tensor({1, 10, 10}, rng), method_of(MethodKind::edge_baseline), {},
                                     bright_patch(3, 5.0), seed)
                         .score;
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(PatchTraining, ZeroStepsKeepsInitialisation) {
  const Dataset raw = synth_generate(1, 40, 16, 3);
  const Dataset ds = normalized(raw, compute_channel_stats(raw));
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 2);
  PatchConfig cfg;
  cfg.steps = 0;
  cfg.seed = 8;
  const AdversarialPatch p = train_patch(m, ds, 1, cfg);
  ASSERT_EQ(p.side(), 5u);  // ceil(0.3 * 16)
  Rng replay(8);
  const double lo = -ds.stats.mean[0] / ds.stats.stddev[0], hi = (1.0 - ds.stats.mean[0]) / ds.stats.stddev[0];
  for (std::size_t k = 0; k < 25; ++k) EXPECT_DOUBLE_EQ(p.values[k], lo + (hi - lo) * uniform01(replay));
  EXPECT_TRUE(p.history.empty());
  EXPECT_GE(p.success_rate, 0.0);
  EXPECT_LE(p.success_rate, 1.0);
}

TEST(PatchTraining, RejectsUnsupportedSetups) {
  const Dataset ds = synth_generate(1, 20, 16, 3);
  EXPECT_THROW(train_patch(make_linear({1, 16, 16}, Tensor({3, 256}), Tensor({3})), ds, 0, {}), UnsupportedModel);
  PatchConfig big;
  big.side = 9;
  EXPECT_THROW(train_patch(make_small_cnn({1, 16, 16}, 3, {2, 2, 4, 1}, 1), ds, 0, big), ConfigError);
}

TEST(PatchTraining, StaysInRangeAndImprovesOnWeakestClass) {
  const Dataset raw_train = synth_generate(50, 3000, 16, 4);
  const ChannelStats stats = compute_channel_stats(raw_train);
  const Dataset train = normalized(raw_train, stats);
  TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.02;
  const Model m = train_sgd(make_small_cnn({1, 16, 16}, 4, {4, 8, 16, 1}, 51), train, tc).model;
  // Weakest class: the one the model predicts least often.
  std::vector<std::size_t> predicted(4, 0);
  for (std::size_t i = 0; i < 500; ++i) ++predicted[predict_class(m, train.image(i))];
  const std::size_t weakest = static_cast<std::size_t>(std::min_element(predicted.begin(), predicted.end()) - predicted.begin());
  PatchConfig cfg;
  cfg.steps = 75;
  cfg.seed = 52;
  const AdversarialPatch p = train_patch(m, slice(train, 0, 600), weakest, cfg);
  ASSERT_EQ(p.history.size(), 3u);
  const double lo = -stats.mean[0] / stats.stddev[0], hi = (1.0 - stats.mean[0]) / stats.stddev[0];
  for (double v : p.values.values()) {
    EXPECT_GE(v, lo);
    EXPECT_LE(v, hi);
  }
  for (std::size_t e = 1; e < p.history.size(); ++e) EXPECT_GT(p.history[e], p.history[e - 1]) << "epoch " << e;
  EXPECT_DOUBLE_EQ(p.success_rate, p.history.back());
}

// ---------------------------------------------------------------------------------------------
// Metric specs and dispatch

TEST(MetricSpec, OrientationTable) {
  const std::vector<std::pair<std::string, bool>> expected = {
      {"Del_MoRF", false}, {"Del_LeRF", true}, {"Ins_MoRF", true},   {"Ins_LeRF", false}, {"MS_Del", false},
      {"MS_Ins", false},   {"IROF_MoRF", false}, {"IROF_LeRF", true}, {"Sens_n", true},    {"SegSens_n", true},
      {"INFD_NB", false},  {"INFD_SQ", false},  {"SENS_MAX", false}, {"COV", true}};
  ASSERT_EQ(standard_metric_ids().size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const MetricSpec s = parse_metric_id(expected[i].first);
    EXPECT_EQ(standard_metric_ids()[i], expected[i].first);
    EXPECT_EQ(s.id(), expected[i].first);
    EXPECT_EQ(s.higher_is_better(), expected[i].second) << expected[i].first;
  }
  EXPECT_THROW(parse_metric_id("ROAR"), ConfigError);
}

TEST(MetricSpec, ImplementationNamesIncludeTheMasker) {
  MetricSpec s = parse_metric_id("Del_MoRF");
  EXPECT_EQ(s.implementation(), "Del_MoRF@constant");
  s.masker.kind = MaskerKind::blur;
  EXPECT_EQ(s.implementation(), "Del_MoRF@blur");
  EXPECT_EQ(parse_metric_id("INFD_NB").implementation(), "INFD_NB");
  EXPECT_TRUE(parse_metric_id("Sens_n").stochastic());
  EXPECT_FALSE(parse_metric_id("Del_LeRF").stochastic());
}

TEST(EvaluateMetric, DispatchMatchesDirectCalls) {
  const Model m = make_small_cnn({1, 16, 16}, 3, {3, 4, 6, 1}, 33);
  std::mt19937_64 rng(34);
  const Tensor x = oracle::random_tensor({1, 16, 16}, rng), e = oracle::random_tensor({1, 16, 16}, rng);
  const Segmentation seg = slic(x, {20, 10.0, 10, 0});
  MetricJob job;
  job.model = &m;
  job.x = &x;
  job.target = 1;
  job.attribution = &e;
  job.segmentation = &seg;
  job.seed = 12;
  EXPECT_EQ(evaluate_metric(parse_metric_id("Del_LeRF"), job).score, deletion(m, x, e, 1, Order::lerf, kZero, 15).score);
  EXPECT_EQ(evaluate_metric(parse_metric_id("IROF_MoRF"), job).score, irof(m, x, e, 1, Order::morf, kZero, seg).score);
  EXPECT_EQ(evaluate_metric(parse_metric_id("SegSens_n"), job).score,
            seg_sensitivity_n(m, x, e, 1, seg, default_subset_size(seg.count), 100, kZero, 12).score);
  EXPECT_EQ(evaluate_metric(parse_metric_id("INFD_SQ"), job).score,
            infidelity(m, x, e, 1, Perturbation::square, 1000, 12).score);
  EXPECT_THROW(evaluate_metric(parse_metric_id("SENS_MAX"), job), ConfigError);
  job.segmentation = nullptr;
  EXPECT_THROW(evaluate_metric(parse_metric_id("IROF_LeRF"), job), ConfigError);
  MetricSpec bad = parse_metric_id("Sens_n");
  bad.subsets = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(EvaluateMetric, DefaultSubsetSizeIsTenPercent) {
  EXPECT_EQ(default_subset_size(784), 79u);
  EXPECT_EQ(default_subset_size(100), 10u);
  EXPECT_EQ(default_subset_size(9), 1u);
}
