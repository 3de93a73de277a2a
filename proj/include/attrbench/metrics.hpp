#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attrbench/attribution.hpp"
#include "attrbench/autodiff.hpp"
#include "attrbench/correlation.hpp"
#include "attrbench/error.hpp"
#include "attrbench/masking.hpp"
#include "attrbench/model.hpp"
#include "attrbench/patch.hpp"
#include "attrbench/random.hpp"
#include "attrbench/segmentation.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

enum class MetricKind {
  deletion,
  insertion,
  minimal_subset_deletion,
  minimal_subset_insertion,
  irof,
  sensitivity_n,
  seg_sensitivity_n,
  infidelity_nb,
  infidelity_sq,
  max_sensitivity,
  impact_coverage,
};

inline constexpr const char* kFlagDegenerate = "degenerate";
inline constexpr const char* kFlagCensored = "censored";
inline constexpr const char* kFlagPatchFailed = "patch_failed";

/// One score. `flags` is empty for ordinary results; degenerate and patch-failure results carry
/// a NaN score and are excluded from analysis, censored results keep their sentinel score.
struct MetricResult {
  double score = 0.0;
  std::string flags;
  std::string metric;
  std::size_t image_id = 0;
  std::string method;

  bool excluded() const { return flags == kFlagDegenerate || flags == kFlagPatchFailed; }
};

inline MetricResult scored(double score, std::string flags = {}) {
  MetricResult r;
  r.score = score;
  r.flags = std::move(flags);
  return r;
}

inline MetricResult degenerate_result() { return scored(std::numeric_limits<double>::quiet_NaN(), kFlagDegenerate); }

/// A metric implementation: metric family, masking order, masker and hyperparameters.
struct MetricSpec {
  MetricKind kind = MetricKind::deletion;
  Order order = Order::morf;
  Masker masker;
  std::size_t steps = 15;
  double cap = 0.15;
  bool exact_scan = false;
  SlicParams segmentation;
  std::size_t subsets = 100;
  std::optional<std::size_t> subset_size;
  std::size_t samples = 1000;
  double noise_sigma = 0.2;
  std::size_t square_side = 0;  // 0 selects ceil(H/4)
  double radius = 0.1;
  std::size_t draws = 50;

  bool has_order() const {
    return kind == MetricKind::deletion || kind == MetricKind::insertion || kind == MetricKind::irof;
  }

  bool uses_masker() const {
    return kind != MetricKind::infidelity_nb && kind != MetricKind::infidelity_sq &&
           kind != MetricKind::max_sensitivity && kind != MetricKind::impact_coverage;
  }

  bool needs_segmentation() const { return kind == MetricKind::irof || kind == MetricKind::seg_sensitivity_n; }

  /// Type II: re-executes the attribution method.
  bool needs_method() const { return kind == MetricKind::max_sensitivity || kind == MetricKind::impact_coverage; }

  bool stochastic() const {
    return kind == MetricKind::sensitivity_n || kind == MetricKind::seg_sensitivity_n ||
           kind == MetricKind::infidelity_nb || kind == MetricKind::infidelity_sq ||
           kind == MetricKind::max_sensitivity || kind == MetricKind::impact_coverage ||
           (uses_masker() && masker.kind == MaskerKind::uniform_random);
  }

  std::string id() const {
    const char* o = order == Order::morf ? "MoRF" : "LeRF";
    switch (kind) {
      case MetricKind::deletion: return std::string("Del_") + o;
      case MetricKind::insertion: return std::string("Ins_") + o;
      case MetricKind::minimal_subset_deletion: return "MS_Del";
      case MetricKind::minimal_subset_insertion: return "MS_Ins";
      case MetricKind::irof: return std::string("IROF_") + o;
      case MetricKind::sensitivity_n: return "Sens_n";
      case MetricKind::seg_sensitivity_n: return "SegSens_n";
      case MetricKind::infidelity_nb: return "INFD_NB";
      case MetricKind::infidelity_sq: return "INFD_SQ";
      case MetricKind::max_sensitivity: return "SENS_MAX";
      case MetricKind::impact_coverage: return "COV";
    }
    return "?";
  }

  std::string masker_label() const { return uses_masker() ? masker.name() : "none"; }

  /// Unique name of the implementation (metric id plus masker where one applies).
  std::string implementation() const { return uses_masker() ? id() + "@" + masker.name() : id(); }

  bool higher_is_better() const {
    switch (kind) {
      case MetricKind::deletion: return order == Order::lerf;
      case MetricKind::insertion: return order == Order::morf;
      case MetricKind::irof: return order == Order::lerf;
      case MetricKind::sensitivity_n:
      case MetricKind::seg_sensitivity_n:
      case MetricKind::impact_coverage: return true;
      default: return false;
    }
  }

  void validate() const {
    masker.validate();
    if ((kind == MetricKind::deletion || kind == MetricKind::insertion) && (steps == 0 || !(cap > 0.0 && cap <= 1.0))) {
      throw ConfigError(id() + ": step count must be positive and the cap in (0, 1]");
    }
    if ((kind == MetricKind::sensitivity_n || kind == MetricKind::seg_sensitivity_n) && subsets < 2) {
      throw ConfigError(id() + ": at least 2 subsets are needed for a correlation");
    }
    if ((kind == MetricKind::infidelity_nb || kind == MetricKind::infidelity_sq) && samples < 2) {
      throw ConfigError(id() + ": at least 2 perturbation samples are needed");
    }
    if (kind == MetricKind::infidelity_nb && !(noise_sigma > 0.0)) throw ConfigError("INFD_NB: sigma must be positive");
    if (kind == MetricKind::max_sensitivity && (draws == 0 || !(radius > 0.0))) {
      throw ConfigError("SENS_MAX: draws and radius must be positive");
    }
  }
};

/// Parses "Del_MoRF", "IROF_LeRF", "Sens_n", ... into a spec with default hyperparameters.
inline MetricSpec parse_metric_id(const std::string& id) {
  MetricSpec s;
  auto ordered = [&](const std::string& prefix, MetricKind kind) {
    if (id == prefix + "MoRF" || id == prefix + "LeRF") {
      s.kind = kind;
      s.order = id.ends_with("MoRF") ? Order::morf : Order::lerf;
      return true;
    }
    return false;
  };
  if (ordered("Del_", MetricKind::deletion) || ordered("Ins_", MetricKind::insertion) ||
      ordered("IROF_", MetricKind::irof)) {
    return s;
  }
  static const std::pair<const char*, MetricKind> plain[] = {
      {"MS_Del", MetricKind::minimal_subset_deletion}, {"MS_Ins", MetricKind::minimal_subset_insertion},
      {"Sens_n", MetricKind::sensitivity_n},           {"SegSens_n", MetricKind::seg_sensitivity_n},
      {"INFD_NB", MetricKind::infidelity_nb},          {"INFD_SQ", MetricKind::infidelity_sq},
      {"SENS_MAX", MetricKind::max_sensitivity},       {"COV", MetricKind::impact_coverage},
  };
  for (const auto& [name, kind] : plain) {
    if (id == name) {
      s.kind = kind;
      return s;
    }
  }
  throw ConfigError("unknown metric '" + id + "'");
}

inline std::vector<std::string> standard_metric_ids() {
  return {"Del_MoRF", "Del_LeRF", "Ins_MoRF", "Ins_LeRF", "MS_Del",  "MS_Ins",   "IROF_MoRF",
          "IROF_LeRF", "Sens_n",  "SegSens_n", "INFD_NB", "INFD_SQ", "SENS_MAX", "COV"};
}

// ---------------------------------------------------------------------------------------------
// Masking trajectories

/// Masked pixel counts round(i * cap * d / L), i = 1..L.
inline std::vector<std::size_t> trajectory_counts(std::size_t d, std::size_t L, double cap) {
  if (L == 0) throw ConfigError("trajectory needs at least one step");
  std::vector<std::size_t> out(L);
  for (std::size_t i = 1; i <= L; ++i) {
    const double k = std::round(static_cast<double>(i) * cap * static_cast<double>(d) / static_cast<double>(L));
    out[i - 1] = std::min(d, static_cast<std::size_t>(k));
  }
  return out;
}

/// Logit c after masking the first k entries of `pixels` (in that order), for each ascending k.
inline std::vector<double> masked_trajectory(const Model& model, const Tensor& x, const Tensor& fill,
                                             std::size_t c, std::span<const std::size_t> pixels,
                                             std::span<const std::size_t> counts) {
  Tensor cur = x;
  std::size_t done = 0;
  std::vector<double> out;
  out.reserve(counts.size());
  for (std::size_t k : counts) {
    if (k < done || k > pixels.size()) throw InvalidInput("masking counts must be ascending and within range");
    mask_in_place(cur, fill, pixels.subspan(done, k - done));
    done = k;
    out.push_back(predict(model, cur)[c]);
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

namespace detail {

inline void check_target(const Model& model, std::size_t c) {
  if (c >= model.output_size()) throw InvalidInput("class index out of range");
}


}  // namespace detail

/// Mean logit while removing the most (MoRF) or least (LeRF) relevant pixels in `steps` equal
/// steps up to `cap` of all pixels.
inline MetricResult deletion(const Model& model, const Tensor& x, const Tensor& e, std::size_t c, Order order,
                             const Masker& masker, std::size_t steps, double cap = 0.15) {
  detail::check_target(model, c);
  x.require_same_shape(e, "deletion");
  const std::vector<std::size_t> pixels = removal_order(channel_mean(e), order);
  const std::vector<std::size_t> counts = trajectory_counts(pixels.size(), steps, cap);
  return scored(mean_of(masked_trajectory(model, x, masker.fill_for(x), c, pixels, counts)));
}

/// Mean logit while inserting the most (MoRF) or least (LeRF) relevant pixels into the masker's
/// blank image. Inserted counts are 0, k_1, ..., k_{L-1}; the trajectory is accumulated in
/// ascending masked-count order, so with L = d and no cap the sums coincide term by term with
/// the opposite-order deletion.
inline MetricResult insertion(const Model& model, const Tensor& x, const Tensor& e, std::size_t c, Order order,
                              const Masker& masker, std::size_t steps, double cap = 0.15) {
  detail::check_target(model, c);
  x.require_same_shape(e, "insertion");
  // Inserting the top j pixels == masking the bottom d - j.
  const std::vector<std::size_t> pixels =
      removal_order(channel_mean(e), order == Order::morf ? Order::lerf : Order::morf);
  const std::size_t d = pixels.size();
  const std::vector<std::size_t> inserted = trajectory_counts(d, steps, cap);
  std::vector<std::size_t> masked;
  masked.push_back(d);  // nothing inserted yet
  for (std::size_t i = 0; i + 1 < steps; ++i) masked.push_back(d - inserted[i]);
  std::sort(masked.begin(), masked.end());
  return scored(mean_of(masked_trajectory(model, x, masker.fill_for(x), c, pixels, masked)));
}

/// Smallest number of pixels whose removal (deletion) changes the prediction, or whose insertion
/// restores it; d + 1 (flagged censored) when no count qualifies.
inline MetricResult minimal_subset(const Model& model, const Tensor& x, const Tensor& e, bool deletion_mode,
                                   const Masker& masker, bool exact_scan = false) {
  x.require_same_shape(e, "minimal_subset");
  const PixelRanking ranking = rank_pixels(e);
  const std::size_t d = ranking.size();
  const std::size_t step = exact_scan ? 1 : std::max<std::size_t>(1, d / 200);
  const std::size_t original = predict_class(model, x);
  const Tensor fill = masker.fill_for(x);

  std::vector<std::size_t> ks;
  for (std::size_t k = deletion_mode ? step : 0; k < d; k += step) ks.push_back(k);
  ks.push_back(d);

  if (deletion_mode) {
    Tensor cur = x;
    std::size_t done = 0;
    for (std::size_t k : ks) {
      mask_in_place(cur, fill, std::span(ranking.order).subspan(done, k - done));
      done = k;
      if (predict_class(model, cur) != original) return scored(static_cast<double>(k));
    }
  } else {
    // Start from the blank image and restore the most relevant pixels first.
    Tensor cur = fill;
    std::size_t done = 0;
    for (std::size_t k : ks) {
      const auto add = std::span(ranking.order).subspan(done, k - done);
      mask_in_place(cur, x, add);
      done = k;
      if (predict_class(model, cur) == original) return scored(static_cast<double>(k));
    }
  }
  return scored(static_cast<double>(d + 1), kFlagCensored);
}

/// Mean logit over the full segment-removal trajectory.
inline MetricResult irof(const Model& model, const Tensor& x, const Tensor& e, std::size_t c, Order order,
                         const Masker& masker, const Segmentation& seg) {
  detail::check_target(model, c);
  const std::vector<std::size_t> ranked = removal_order(segment_attribution(e, seg), order);
  const auto members = seg.members();
  const Tensor fill = masker.fill_for(x);
  Tensor cur = x;
  std::vector<double> traj;
  for (std::size_t l : ranked) {
    mask_in_place(cur, fill, members[l]);
    traj.push_back(predict(model, cur)[c]);
  }
  return scored(mean_of(traj));
}

inline std::size_t default_subset_size(std::size_t count) {
  return static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(count)));
}

namespace detail {

// First n entries of a seeded partial Fisher-Yates shuffle of 0..count-1.
inline std::vector<std::size_t> random_subset(std::size_t count, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, count - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

inline MetricResult correlation_result(const std::vector<double>& sums, const std::vector<double>& drops) {
  const double r = pearson(sums, drops);
  if (!std::isfinite(r)) return degenerate_result();
  return scored(r);
}

}  // namespace detail

/// Pearson correlation between attribution sums of random n-pixel subsets and the logit drop
/// caused by removing them.
inline MetricResult sensitivity_n(const Model& model, const Tensor& x, const Tensor& e, std::size_t c,
                                  std::size_t n, std::size_t subsets, const Masker& masker, std::uint64_t seed) {
  detail::check_target(model, c);
  x.require_same_shape(e, "sensitivity_n");
  const std::vector<double> score = channel_mean(e);
  const std::size_t d = score.size();
  if (n < 1 || n >= d) throw ConfigError("Sens_n: n must be in [1, d)");
  const Tensor fill = masker.fill_for(x);
  const double base = predict(model, x)[c];
  Rng rng(seed);
  std::vector<double> sums, drops;
  for (std::size_t i = 0; i < subsets; ++i) {
    const std::vector<std::size_t> s = detail::random_subset(d, n, rng);
    double sum = 0.0;
    for (std::size_t p : s) sum += score[p];
    sums.push_back(sum);
    drops.push_back(base - predict(model, mask_pixels(x, fill, s))[c]);
  }
  return detail::correlation_result(sums, drops);
}

/// Sensitivity-n over random subsets of n segments, using segment attributions.
inline MetricResult seg_sensitivity_n(const Model& model, const Tensor& x, const Tensor& e, std::size_t c,
                                      const Segmentation& seg, std::size_t n, std::size_t subsets,
                                      const Masker& masker, std::uint64_t seed) {
  detail::check_target(model, c);
  const std::vector<double> score = segment_attribution(e, seg);
  const std::size_t L = seg.count;
  if (n < 1 || n >= L) throw ConfigError("SegSens_n: n must be in [1, L)");
  const auto members = seg.members();
  const Tensor fill = masker.fill_for(x);
  const double base = predict(model, x)[c];
  Rng rng(seed);
  std::vector<double> sums, drops;
  for (std::size_t i = 0; i < subsets; ++i) {
    const std::vector<std::size_t> s = detail::random_subset(L, n, rng);
    double sum = 0.0;
    Tensor xm = x;
    for (std::size_t l : s) {
      sum += score[l];
      mask_in_place(xm, fill, members[l]);
    }
    sums.push_back(sum);
    drops.push_back(base - predict(model, xm)[c]);
  }
  return detail::correlation_result(sums, drops);
}

enum class Perturbation { noisy_baseline, square };

/// Infidelity sample: perturbations I_i with their projections I_i . e and output drops.
struct InfidelitySample {
  std::vector<double> projections;
  std::vector<double> drops;
};

inline InfidelitySample infidelity_sample(const Model& model, const Tensor& x, const Tensor& e, std::size_t c,
                                          Perturbation kind, std::size_t samples, double sigma,
                                          std::size_t square_side, std::uint64_t seed) {
  detail::check_target(model, c);
  x.require_same_shape(e, "infidelity");
  const PixelLayout layout = pixel_layout(x.shape());
  const std::size_t side =
      square_side != 0 ? square_side
                       : static_cast<std::size_t>(std::ceil(static_cast<double>(layout.height) / 4.0));
  if (kind == Perturbation::square && (side > layout.height || side > layout.width)) {
    throw ConfigError("INFD_SQ: square larger than the image");
  }
  const double base = predict(model, x)[c];
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  InfidelitySample out;
  const std::size_t n = layout.pixels();
  for (std::size_t i = 0; i < samples; ++i) {
    Tensor perturbed(x.shape());  // x - I
    double proj = 0.0;
    if (kind == Perturbation::noisy_baseline) {
      // I = x - eps, so x - I = eps.
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double eps = noise(rng);
        perturbed[k] = eps;
        proj += (x[k] - eps) * e[k];
      }
    } else {
      perturbed = x;
      const PatchPlacement at = random_placement(layout.height, layout.width, side, rng);
      for (std::size_t ch = 0; ch < layout.channels; ++ch) {
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t xx = 0; xx < side; ++xx) {
            const std::size_t k = ch * n + (at.y + y) * layout.width + at.x + xx;
            proj += x[k] * e[k];
            perturbed[k] = 0.0;
          }
        }
      }
    }
    out.projections.push_back(proj);
    out.drops.push_back(base - predict(model, perturbed)[c]);
  }
  return out;
}

/// Optimal scaling of the sample: sum(p * drop) / sum(p^2); NaN when every projection is 0.
inline double infidelity_beta(const InfidelitySample& s) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.projections.size(); ++i) {
    num += s.projections[i] * s.drops[i];
    den += s.projections[i] * s.projections[i];
  }
  return den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

inline MetricResult infidelity(const Model& model, const Tensor& x, const Tensor& e, std::size_t c,
                               Perturbation kind, std::size_t samples, std::uint64_t seed, double sigma = 0.2,
                               std::size_t square_side = 0) {
  if (samples < 2) throw ConfigError("infidelity needs at least 2 samples");
  const InfidelitySample s = infidelity_sample(model, x, e, c, kind, samples, sigma, square_side, seed);
  const double beta = infidelity_beta(s);
  if (!std::isfinite(beta)) return degenerate_result();
  double acc = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double r = beta * s.projections[i] - s.drops[i];
    acc += r * r;
  }
  return scored(acc / static_cast<double>(samples));
}

/// Largest L-infinity distance between the unit-L2-normalised attribution of x and those of
/// uniform draws from the L-infinity ball of radius r around x.
inline MetricResult max_sensitivity(const Model& model, const Tensor& x, const AttributionMethod& method,
                                    std::size_t c, const MethodContext& ctx, double radius, std::size_t draws,
                                    std::uint64_t seed, const Tensor* cached = nullptr) {
  auto normalised = [](Tensor t) -> std::optional<Tensor> {
    const double norm = l2_norm(t);
    if (!(norm > 0.0) || !std::isfinite(norm)) return std::nullopt;
    t *= 1.0 / norm;
    return t;
  };
  const auto base = normalised(cached != nullptr ? *cached : method(model, x, c, ctx));
  if (!base) return degenerate_result();
  Rng rng(seed);
  std::uniform_real_distribution<double> shift(-radius, radius);
  double worst = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    Tensor y = x;
    for (double& v : y.values()) v += shift(rng);
    const auto ey = normalised(method(model, y, c, ctx));
    if (!ey) return degenerate_result();
    for (std::size_t k = 0; k < ey->size(); ++k) worst = std::max(worst, std::abs((*base)[k] - (*ey)[k]));
  }
  return scored(worst);
}

/// IOU between the k = |P| top-ranked pixels and the patch P, on x with the patch pasted at a
/// seeded uniform location. Images the patch fails on are flagged.
inline MetricResult impact_coverage(const Model& model, const Tensor& x, const AttributionMethod& method,
                                    const MethodContext& ctx, const AdversarialPatch& patch, std::uint64_t seed) {
  const PixelLayout layout = pixel_layout(x.shape());
  Rng rng(seed);
  const PatchPlacement at = random_placement(layout.height, layout.width, patch.side(), rng);
  const Tensor attacked = apply_patch(x, patch.values, at);
  const std::size_t pred = predict_class(model, attacked);
  if (pred != patch.target) {
    return scored(std::numeric_limits<double>::quiet_NaN(), kFlagPatchFailed);
  }
  const std::vector<std::size_t> P = patch_pixels(layout.width, patch.side(), at);
  const PixelRanking ranking = rank_pixels(method(model, attacked, pred, ctx));
  std::vector<std::uint8_t> in_patch(layout.pixels(), 0);
  for (std::size_t p : P) in_patch[p] = 1;
  std::size_t inter = 0;
  for (std::size_t i = 0; i < P.size(); ++i) inter += in_patch[ranking.order[i]];
  const double k = static_cast<double>(P.size());
  return scored(static_cast<double>(inter) / (2.0 * k - static_cast<double>(inter)));
}

/// IOU of two equally sized pixel sets.
inline double iou(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<std::size_t> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

// ---------------------------------------------------------------------------------------------
// Dispatch

/// Everything one (image, method, metric) evaluation may need.
struct MetricJob {
  const Model* model = nullptr;
  const Tensor* x = nullptr;
  std::size_t target = 0;
  const Tensor* attribution = nullptr;
  const AttributionMethod* method = nullptr;
  MethodContext method_context;
  const Segmentation* segmentation = nullptr;
  const AdversarialPatch* patch = nullptr;
  std::uint64_t seed = 0;
};

inline MetricResult evaluate_metric(const MetricSpec& spec, const MetricJob& job) {
  spec.validate();
  const Model& m = *job.model;
  const Tensor& x = *job.x;
  auto need_segmentation = [&]() -> const Segmentation& {
    if (job.segmentation == nullptr) throw ConfigError(spec.id() + " needs a segmentation");
    return *job.segmentation;
  };
  auto need_method = [&]() -> const AttributionMethod& {
    if (job.method == nullptr) throw ConfigError(spec.id() + " needs the attribution method");
    return *job.method;
  };
  const Tensor& e = *job.attribution;
  switch (spec.kind) {
    case MetricKind::deletion:
      return deletion(m, x, e, job.target, spec.order, spec.masker, spec.steps, spec.cap);
    case MetricKind::insertion:
      return insertion(m, x, e, job.target, spec.order, spec.masker, spec.steps, spec.cap);
    case MetricKind::minimal_subset_deletion:
      return minimal_subset(m, x, e, true, spec.masker, spec.exact_scan);
    case MetricKind::minimal_subset_insertion:
      return minimal_subset(m, x, e, false, spec.masker, spec.exact_scan);
    case MetricKind::irof:
      return irof(m, x, e, job.target, spec.order, spec.masker, need_segmentation());
    case MetricKind::sensitivity_n: {
      const std::size_t d = pixel_layout(x.shape()).pixels();
      return sensitivity_n(m, x, e, job.target, spec.subset_size.value_or(default_subset_size(d)), spec.subsets,
                           spec.masker, job.seed);
    }
    case MetricKind::seg_sensitivity_n: {
      const Segmentation& seg = need_segmentation();
      return seg_sensitivity_n(m, x, e, job.target, seg, spec.subset_size.value_or(default_subset_size(seg.count)),
                               spec.subsets, spec.masker, job.seed);
    }
    case MetricKind::infidelity_nb:
      return infidelity(m, x, e, job.target, Perturbation::noisy_baseline, spec.samples, job.seed, spec.noise_sigma);
    case MetricKind::infidelity_sq:
      return infidelity(m, x, e, job.target, Perturbation::square, spec.samples, job.seed, spec.noise_sigma,
                        spec.square_side);
    case MetricKind::max_sensitivity:
      return max_sensitivity(m, x, need_method(), job.target, job.method_context, spec.radius, spec.draws, job.seed,
                             job.attribution);
    case MetricKind::impact_coverage:
      if (job.patch == nullptr) throw ConfigError("COV needs an adversarial patch");
      return impact_coverage(m, x, need_method(), job.method_context, *job.patch, job.seed);
  }
  return degenerate_result();
}

}  // namespace attrbench
