#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "attrbench/autodiff.hpp"
#include "attrbench/error.hpp"
#include "attrbench/masking.hpp"
#include "attrbench/model.hpp"
#include "attrbench/random.hpp"
#include "attrbench/segmentation.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Per-input relevance for one (input, class) pair.
struct AttributionMap {
  Tensor values;
  std::string method;
  std::size_t target = 0;
};

enum class MethodKind {
  gradient,
  input_x_gradient,
  deconvolution,
  guided_backprop,
  gradcam,
  guided_gradcam,
  integrated_gradients,
  expected_gradients,
  smoothgrad,
  vargrad,
  lime,
  kernelshap,
  deeplift,
  deepshap,
  random_baseline,
  edge_baseline,
  oracle_region,
};

struct MethodInfo {
  MethodKind kind;
  const char* name;
};

inline constexpr MethodInfo kMethods[] = {
    {MethodKind::gradient, "Gradient"},
    {MethodKind::input_x_gradient, "InputXGradient"},
    {MethodKind::deconvolution, "Deconvolution"},
    {MethodKind::guided_backprop, "GuidedBackprop"},
    {MethodKind::gradcam, "GradCAM"},
    {MethodKind::guided_gradcam, "GuidedGradCAM"},
    {MethodKind::integrated_gradients, "IntegratedGradients"},
    {MethodKind::expected_gradients, "ExpectedGradients"},
    {MethodKind::smoothgrad, "SmoothGrad"},
    {MethodKind::vargrad, "VarGrad"},
    {MethodKind::lime, "LIME"},
    {MethodKind::kernelshap, "KernelSHAP"},
    {MethodKind::deeplift, "DeepLIFT"},
    {MethodKind::deepshap, "DeepSHAP"},
    {MethodKind::random_baseline, "Random"},
    {MethodKind::edge_baseline, "Edge"},
    {MethodKind::oracle_region, "Oracle"},
};

/// The fourteen attribution methods, excluding baselines and the region oracle.
inline std::vector<MethodKind> all_attribution_methods() {
  std::vector<MethodKind> out;
  for (const MethodInfo& m : kMethods) {
    if (m.kind != MethodKind::random_baseline && m.kind != MethodKind::edge_baseline &&
        m.kind != MethodKind::oracle_region) {
      out.push_back(m.kind);
    }
  }
  return out;
}

inline const char* method_name(MethodKind kind) {
  for (const MethodInfo& m : kMethods) {
    if (m.kind == kind) return m.name;
  }
  return "?";
}

inline MethodKind parse_method(const std::string& name) {
  for (const MethodInfo& m : kMethods) {
    if (name == m.name) return m.kind;
  }
  throw ConfigError("unknown attribution method '" + name + "'");
}

/// Hyperparameters of the attribution methods. Defaults follow the conventions of each method's
/// original publication.
struct MethodConfig {
  std::size_t path_steps = 64;
  std::size_t expected_draws = 100;
  std::size_t ensemble = 50;
  double noise_level = 0.15;
  /// Absolute noise standard deviation; overrides noise_level when set.
  std::optional<double> noise_sigma;
  std::size_t references = 16;
  std::size_t surrogate_samples = 300;
  std::size_t superpixels = 50;
  double ridge = 1e-6;
  double lime_kernel_width = 0.25;
  /// Evaluate every coalition instead of sampling (feasible for at most 20 segments).
  bool enumerate_coalitions = false;
  Masker masker;
  std::uint64_t seed = 0;

  void validate(MethodKind kind) const {
    switch (kind) {
      case MethodKind::integrated_gradients:
        if (path_steps < 2) throw ConfigError("IntegratedGradients needs at least 2 path steps");
        break;
      case MethodKind::expected_gradients:
        if (expected_draws < 1) throw ConfigError("ExpectedGradients needs at least one draw");
        break;
      case MethodKind::smoothgrad:
        if (ensemble < 1) throw ConfigError("SmoothGrad needs m >= 1");
        break;
      case MethodKind::vargrad:
        if (ensemble < 2) throw ConfigError("VarGrad needs m >= 2");
        break;
      case MethodKind::deepshap:
        if (references < 1) throw ConfigError("DeepSHAP needs at least one reference");
        break;
      default:
        break;
    }
    if ((kind == MethodKind::smoothgrad || kind == MethodKind::vargrad) &&
        ((noise_sigma && !(*noise_sigma > 0.0)) || !(noise_level > 0.0))) {
      throw ConfigError("noise level must be positive");
    }
  }
};

/// Everything a method may need beyond (model, x, c).
struct MethodContext {
  /// Training images used as baselines by ExpectedGradients and references by DeepSHAP.
  std::span<const Tensor> reference_pool;
  /// Identifies the explained image; the random baseline is a function of it.
  std::size_t image_id = 0;
  /// Known informative pixels, for the region oracle.
  const Tensor* region = nullptr;
  /// Overrides the SLIC segmentation used by LIME/KernelSHAP.
  const Segmentation* segmentation = nullptr;
};

// ---------------------------------------------------------------------------------------------
// Modified backpropagation

enum class BackpropVariant { gradient, input_x_gradient, deconvolution, guided };

inline Tensor modified_backprop(const Model& model, const Tensor& x, std::size_t c, BackpropVariant variant) {
  const ForwardResult fr = forward(model, x);
  switch (variant) {
    case BackpropVariant::gradient:
      return backward(fr.tape, BackpropRule::standard(), c);
    case BackpropVariant::input_x_gradient:
      return hadamard(backward(fr.tape, BackpropRule::standard(), c), x);
    case BackpropVariant::deconvolution:
      return backward(fr.tape, BackpropRule::deconv(), c);
    case BackpropVariant::guided:
      return backward(fr.tape, BackpropRule::guided(), c);
  }
  return {};
}

// ---------------------------------------------------------------------------------------------
// Path methods

/// Midpoint-rule IG along the straight line from `baseline` to x.
inline Tensor integrated_gradients(const Model& model, const Tensor& x, std::size_t c, const Tensor& baseline,
                                   std::size_t steps) {
  if (steps < 2) throw ConfigError("IntegratedGradients needs at least 2 path steps");
  x.require_same_shape(baseline, "integrated_gradients");
  const Tensor delta = x - baseline;
  Tensor total(x.shape());
  for (std::size_t i = 0; i < steps; ++i) {
    const double alpha = (static_cast<double>(i) + 0.5) / static_cast<double>(steps);
    Tensor point = baseline;
    for (std::size_t k = 0; k < point.size(); ++k) point[k] += alpha * delta[k];
    total += gradient(model, point, c);
  }
  for (std::size_t k = 0; k < total.size(); ++k) total[k] = total[k] / static_cast<double>(steps) * delta[k];
  return total;
}

/// Monte-Carlo expectation of single-point IG over (baseline from pool, alpha ~ U(0,1)).
inline Tensor expected_gradients(const Model& model, const Tensor& x, std::size_t c,
                                 std::span<const Tensor> pool, std::size_t draws, std::uint64_t seed) {
  if (pool.empty()) throw ConfigError("ExpectedGradients needs a non-empty baseline pool");
  if (draws < 1) throw ConfigError("ExpectedGradients needs at least one draw");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  Tensor total(x.shape());
  for (std::size_t i = 0; i < draws; ++i) {
    const Tensor& base = pool[pick(rng)];
    const double alpha = uniform01(rng);
    Tensor point = base;
    for (std::size_t k = 0; k < point.size(); ++k) point[k] += alpha * (x[k] - base[k]);
    const Tensor g = gradient(model, point, c);
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += (x[k] - base[k]) * g[k];
  }
  total *= 1.0 / static_cast<double>(draws);
  return total;
}

// ---------------------------------------------------------------------------------------------
// Noise ensembles

enum class NoiseMode { smoothgrad, vargrad };

inline double noise_sigma_for(const Tensor& x, const MethodConfig& cfg) {
  if (cfg.noise_sigma) return *cfg.noise_sigma;
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  const double range = *hi - *lo;
  return cfg.noise_level * (range > 0.0 ? range : 1.0);
}

inline Tensor noise_ensemble(const Model& model, const Tensor& x, std::size_t c, NoiseMode mode,
                             const MethodConfig& cfg) {
  cfg.validate(mode == NoiseMode::smoothgrad ? MethodKind::smoothgrad : MethodKind::vargrad);
  const double sigma = noise_sigma_for(x, cfg);
  Rng rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, sigma);
  Tensor mean(x.shape()), m2(x.shape());
  for (std::size_t i = 0; i < cfg.ensemble; ++i) {
    Tensor noisy = x;
    for (double& v : noisy.values()) v += noise(rng);
    const Tensor g = gradient(model, noisy, c);
    // Welford update.
    const double count = static_cast<double>(i + 1);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double d = g[k] - mean[k];
      mean[k] += d / count;
      m2[k] += d * (g[k] - mean[k]);
    }
  }
  if (mode == NoiseMode::smoothgrad) return mean;
  m2 *= 1.0 / static_cast<double>(cfg.ensemble - 1);
  return m2;
}

// ---------------------------------------------------------------------------------------------
// Class activation maps

/// Index of the last conv2d layer, or throws.
inline std::size_t last_conv_layer(const Model& model) {
  for (std::size_t i = model.layer_count(); i > 0; --i) {
    if (kind_of(model.layers()[i - 1]) == LayerKind::conv2d) return i - 1;
  }
  throw UnsupportedModel("Grad-CAM needs a model with at least one conv2d layer");
}

/// Bilinear resize of a (h,w) map to (H,W), sampling at pixel centres.
inline std::vector<double> bilinear_resize(const std::vector<double>& src, std::size_t h, std::size_t w,
                                           std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  const double ry = static_cast<double>(h) / static_cast<double>(H);
  const double rx = static_cast<double>(w) / static_cast<double>(W);
  for (std::size_t y = 0; y < H; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * ry - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(h - 1, y0 + 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * rx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(w - 1, x0 + 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
      const double bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
      out[y * W + x] = top * (1.0 - ty) + bot * ty;
    }
  }
  return out;
}

/// Rectified channel-weighted sum of the last conv layer's feature maps, at feature-map
/// resolution. Weights are the spatial means of d logit_c / d feature map.
inline std::vector<double> gradcam_coarse(const Tape& tape, std::size_t c, std::size_t& h, std::size_t& w) {
  const std::size_t layer = last_conv_layer(*tape.model);
  const Tensor& act = tape.activation(layer + 1);
  const Tensor grad = grad_at_layer(tape, BackpropRule::standard(), c, layer + 1);
  const std::size_t K = act.dim(0);
  h = act.dim(1);
  w = act.dim(2);
  const std::size_t hw = h * w;
  std::vector<double> cam(hw, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double weight = 0.0;
    for (std::size_t i = 0; i < hw; ++i) weight += grad[k * hw + i];
    weight /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += weight * act[k * hw + i];
  }
  for (double& v : cam) v = std::max(0.0, v);
  return cam;
}

enum class CamMode { gradcam, guided_gradcam };

inline Tensor cam(const Model& model, const Tensor& x, std::size_t c, CamMode mode) {
  const ForwardResult fr = forward(model, x);
  std::size_t h = 0, w = 0;
  const std::vector<double> coarse = gradcam_coarse(fr.tape, c, h, w);
  const PixelLayout layout = pixel_layout(x.shape());
  const std::vector<double> up = bilinear_resize(coarse, h, w, layout.height, layout.width);
  Tensor out(x.shape());
  const std::size_t n = layout.pixels();
  for (std::size_t ch = 0; ch < layout.channels; ++ch) {
    std::copy(up.begin(), up.end(), out.data() + ch * n);
  }
  if (mode == CamMode::guided_gradcam) {
    const Tensor guided = backward(fr.tape, BackpropRule::guided(), c);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] *= guided[k];
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Reference propagation

/// DeepLIFT (Rescale) contributions of x - reference to logit_c.
inline Tensor deeplift(const Model& model, const Tensor& x, std::size_t c, const Tensor& reference) {
  x.require_same_shape(reference, "deeplift");
  ForwardResult ref = forward(model, reference);
  const ForwardResult fr = forward(model, x);
  const Tensor mult = backward(fr.tape, BackpropRule::deeplift(std::move(ref.tape)), c);
  Tensor out(x.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = mult[k] * (x[k] - reference[k]);
  return out;
}

/// Mean of DeepLIFT maps over the given references.
inline Tensor deepshap(const Model& model, const Tensor& x, std::size_t c, std::span<const Tensor> references) {
  if (references.empty()) throw ConfigError("DeepSHAP needs at least one reference");
  Tensor total(x.shape());
  for (const Tensor& r : references) total += deeplift(model, x, c, r);
  for (double& v : total.values()) v /= static_cast<double>(references.size());
  return total;
}

/// k references drawn without replacement (with replacement once the pool is exhausted).
inline std::vector<Tensor> draw_references(std::span<const Tensor> pool, std::size_t k, std::uint64_t seed) {
  if (pool.empty()) throw ConfigError("reference pool is empty");
  Rng rng(seed);
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[idx[i % idx.size()]]);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Surrogate models over superpixels

enum class SurrogateMode { lime, kernelshap };

inline double shapley_kernel_weight(std::size_t d, std::size_t s) {
  // (d-1) / (C(d,s) s (d-s)), with C(d,s) in floating point
  double binom = 1.0;
  for (std::size_t i = 1; i <= s; ++i) binom = binom * static_cast<double>(d - s + i) / static_cast<double>(i);
  return static_cast<double>(d - 1) / (binom * static_cast<double>(s) * static_cast<double>(d - s));
}

namespace detail {

// Solves (A + ridge*P) beta = b, where P penalises all but the first `unpenalised` entries.
inline Eigen::VectorXd solve_normal(Eigen::MatrixXd A, const Eigen::VectorXd& b, double ridge,
                                    std::size_t unpenalised) {
  for (Eigen::Index i = static_cast<Eigen::Index>(unpenalised); i < A.rows(); ++i) A(i, i) += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  // LDLT's rcond() skips zero pivots, so rank deficiency is caught on the pivots themselves.
  const Eigen::VectorXd pivots = ldlt.vectorD();
  const double largest = pivots.cwiseAbs().maxCoeff();
  const bool singular = !(largest > 0.0) || !(pivots.minCoeff() > 1e-13 * largest);
  if (ldlt.info() != Eigen::Success || singular || !(ldlt.rcond() > 1e-13)) {
    throw NumericalError(
        "surrogate normal equations are ill-conditioned; increase the sample count or the ridge term");
  }
  return ldlt.solve(b);
}

}  // namespace detail

/// Per-segment surrogate coefficients for logit c. Absent segments are replaced by the fill of
/// cfg.masker.
inline std::vector<double> surrogate_coefficients(const Model& model, const Tensor& x, std::size_t c,
                                                  SurrogateMode mode, const MethodConfig& cfg,
                                                  const Segmentation& seg) {
  const std::size_t L = seg.count;
  if (L < 2) throw ConfigError("surrogate attribution needs at least two segments");
  const Tensor fill = cfg.masker.fill_for(x);
  const auto members = seg.members();
  auto evaluate = [&](const std::vector<std::uint8_t>& z) {
    Tensor xm = x;
    for (std::size_t l = 0; l < L; ++l) {
      if (!z[l]) mask_in_place(xm, fill, members[l]);
    }
    return predict(model, xm)[c];
  };

  std::vector<std::vector<std::uint8_t>> coalitions;
  if (cfg.enumerate_coalitions) {
    if (L > 20) throw ConfigError("coalition enumeration is limited to 20 segments");
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << L); ++mask) {
      std::vector<std::uint8_t> z(L);
      for (std::size_t l = 0; l < L; ++l) z[l] = static_cast<std::uint8_t>((mask >> l) & 1U);
      coalitions.push_back(std::move(z));
    }
  } else {
    if (cfg.surrogate_samples < L + 2) {
      throw ConfigError("surrogate needs at least segment count + 2 = " + std::to_string(L + 2) + " samples");
    }
    Rng rng(cfg.seed);
    std::bernoulli_distribution coin(0.5);
    if (mode == SurrogateMode::lime) coalitions.emplace_back(L, 1);
    while (coalitions.size() < cfg.surrogate_samples) {
      std::vector<std::uint8_t> z(L);
      std::size_t on = 0;
      for (auto& b : z) on += (b = coin(rng));
      if (mode == SurrogateMode::kernelshap && (on == 0 || on == L)) continue;
      coalitions.push_back(std::move(z));
    }
  }

  std::vector<double> f(coalitions.size());
  for (std::size_t i = 0; i < coalitions.size(); ++i) f[i] = evaluate(coalitions[i]);

  if (mode == SurrogateMode::kernelshap) {
    // Empty and full coalitions carry infinite kernel weight; impose them as constraints
    // (fixed intercept f(empty), coefficients summing to f(full) - f(empty)) and eliminate the
    // last coefficient.
    const double f_empty = evaluate(std::vector<std::uint8_t>(L, 0));
    const double f_full = evaluate(std::vector<std::uint8_t>(L, 1));
    const double total = f_full - f_empty;
    const Eigen::Index p = static_cast<Eigen::Index>(L - 1);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd row(p);
    for (std::size_t i = 0; i < coalitions.size(); ++i) {
      const auto& z = coalitions[i];
      std::size_t s = 0;
      for (auto v : z) s += v;
      if (s == 0 || s == L) continue;
      const double weight = shapley_kernel_weight(L, s);
      for (Eigen::Index j = 0; j < p; ++j) row(j) = static_cast<double>(z[j]) - static_cast<double>(z[L - 1]);
      const double y = f[i] - f_empty - static_cast<double>(z[L - 1]) * total;
      A.noalias() += weight * row * row.transpose();
      b.noalias() += weight * y * row;
    }
    const Eigen::VectorXd phi = detail::solve_normal(A, b, cfg.ridge, 0);
    std::vector<double> out(L);
    double rest = total;
    for (Eigen::Index j = 0; j < p; ++j) {
      out[static_cast<std::size_t>(j)] = phi(j);
      rest -= phi(j);
    }
    out[L - 1] = rest;
    return out;
  }

  // LIME: weighted ridge with an unpenalised intercept; proximity is an exponential kernel on
  // the cosine distance to the all-present coalition.
  const Eigen::Index p = static_cast<Eigen::Index>(L + 1);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd row(p);
  const double width = cfg.lime_kernel_width;
  for (std::size_t i = 0; i < coalitions.size(); ++i) {
    const auto& z = coalitions[i];
    double on = 0.0;
    for (auto v : z) on += v;
    const double cosine = on > 0.0 ? on / (std::sqrt(on) * std::sqrt(static_cast<double>(L))) : 0.0;
    const double dist = 1.0 - cosine;
    const double weight = std::exp(-(dist * dist) / (width * width));
    row(0) = 1.0;
    for (std::size_t j = 0; j < L; ++j) row(static_cast<Eigen::Index>(j + 1)) = z[j];
    A.noalias() += weight * row * row.transpose();
    b.noalias() += weight * f[i] * row;
  }
  const Eigen::VectorXd beta = detail::solve_normal(A, b, cfg.ridge, 1);
  std::vector<double> out(L);
  for (std::size_t j = 0; j < L; ++j) out[j] = beta(static_cast<Eigen::Index>(j + 1));
  return out;
}

/// Every pixel of a segment receives its segment's value, in all channels.
inline Tensor broadcast_segments(const std::vector<double>& values, const Segmentation& seg, const Shape& shape) {
  Tensor out(shape);
  const PixelLayout layout = pixel_layout(shape);
  const std::size_t n = layout.pixels();
  for (std::size_t ch = 0; ch < layout.channels; ++ch) {
    for (std::size_t p = 0; p < n; ++p) out[ch * n + p] = values[seg.labels[p]];
  }
  return out;
}

inline Tensor surrogate_attribution(const Model& model, const Tensor& x, std::size_t c, SurrogateMode mode,
                                    const MethodConfig& cfg, const Segmentation* segmentation = nullptr) {
  Segmentation local;
  if (segmentation == nullptr) {
    SlicParams sp;
    sp.target_segments = cfg.superpixels;
    sp.seed = cfg.seed;
    local = slic(x, sp);
    segmentation = &local;
  }
  const std::vector<double> coef = surrogate_coefficients(model, x, c, mode, cfg, *segmentation);
  return broadcast_segments(coef, *segmentation, x.shape());
}

// ---------------------------------------------------------------------------------------------
// Baselines

/// U(0,1) per input element; a pure function of (image id, seed), so every query for the same
/// image returns the same map.
inline Tensor random_baseline(const Shape& shape, std::size_t image_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(image_id)));
  Tensor out(shape);
  for (double& v : out.values()) v = uniform01(rng);
  return out;
}

/// Sobel gradient magnitude per channel, replicating the border.
inline Tensor edge_baseline(const Tensor& x) {
  const PixelLayout layout = pixel_layout(x.shape());
  const long H = static_cast<long>(layout.height), W = static_cast<long>(layout.width);
  const std::size_t n = layout.pixels();
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < layout.channels; ++ch) {
    const double* src = x.data() + ch * n;
    auto at = [&](long y, long xx) {
      y = std::clamp(y, 0L, H - 1);
      xx = std::clamp(xx, 0L, W - 1);
      return src[y * W + xx];
    };
    for (long y = 0; y < H; ++y) {
      for (long xx = 0; xx < W; ++xx) {
        const double gx = (at(y - 1, xx + 1) + 2 * at(y, xx + 1) + at(y + 1, xx + 1)) -
                          (at(y - 1, xx - 1) + 2 * at(y, xx - 1) + at(y + 1, xx - 1));
        const double gy = (at(y + 1, xx - 1) + 2 * at(y + 1, xx) + at(y + 1, xx + 1)) -
                          (at(y - 1, xx - 1) + 2 * at(y - 1, xx) + at(y - 1, xx + 1));
        out[ch * n + static_cast<std::size_t>(y * W + xx)] = std::sqrt(gx * gx + gy * gy);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Uniform entry point

/// A configured method: E(m, x, c).
struct AttributionMethod {
  std::string id;
  MethodKind kind = MethodKind::gradient;
  MethodConfig config;

  bool is_baseline() const {
    return kind == MethodKind::random_baseline || kind == MethodKind::edge_baseline;
  }

  Tensor operator()(const Model& model, const Tensor& x, std::size_t c, const MethodContext& ctx) const {
    config.validate(kind);
    switch (kind) {
      case MethodKind::gradient:
        return modified_backprop(model, x, c, BackpropVariant::gradient);
      case MethodKind::input_x_gradient:
        return modified_backprop(model, x, c, BackpropVariant::input_x_gradient);
      case MethodKind::deconvolution:
        return modified_backprop(model, x, c, BackpropVariant::deconvolution);
      case MethodKind::guided_backprop:
        return modified_backprop(model, x, c, BackpropVariant::guided);
      case MethodKind::gradcam:
        return cam(model, x, c, CamMode::gradcam);
      case MethodKind::guided_gradcam:
        return cam(model, x, c, CamMode::guided_gradcam);
      case MethodKind::integrated_gradients:
        return integrated_gradients(model, x, c, Tensor(x.shape()), config.path_steps);
      case MethodKind::expected_gradients:
        return expected_gradients(model, x, c, ctx.reference_pool, config.expected_draws, config.seed);
      case MethodKind::smoothgrad:
        return noise_ensemble(model, x, c, NoiseMode::smoothgrad, config);
      case MethodKind::vargrad:
        return noise_ensemble(model, x, c, NoiseMode::vargrad, config);
      case MethodKind::lime:
        return surrogate_attribution(model, x, c, SurrogateMode::lime, config, ctx.segmentation);
      case MethodKind::kernelshap:
        return surrogate_attribution(model, x, c, SurrogateMode::kernelshap, config, ctx.segmentation);
      case MethodKind::deeplift:
        return deeplift(model, x, c, Tensor(x.shape()));
      case MethodKind::deepshap: {
        const std::vector<Tensor> refs = draw_references(ctx.reference_pool, config.references, config.seed);
        return deepshap(model, x, c, refs);
      }
      case MethodKind::random_baseline:
        return random_baseline(x.shape(), ctx.image_id, config.seed);
      case MethodKind::edge_baseline:
        return edge_baseline(x);
      case MethodKind::oracle_region: {
        if (ctx.region == nullptr) throw ConfigError("the region oracle needs ground-truth regions");
        const PixelLayout layout = pixel_layout(x.shape());
        Tensor out(x.shape());
        for (std::size_t ch = 0; ch < layout.channels; ++ch) {
          for (std::size_t p = 0; p < layout.pixels(); ++p) out[ch * layout.pixels() + p] = (*ctx.region)[p];
        }
        return out;
      }
    }
    return {};
  }

  AttributionMap explain(const Model& model, const Tensor& x, std::size_t c, const MethodContext& ctx) const {
    return AttributionMap{(*this)(model, x, c, ctx), id, c};
  }
};

}  // namespace attrbench
