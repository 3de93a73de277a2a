#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "attrbench/error.hpp"
#include "attrbench/model.hpp"
#include "attrbench/tensor.hpp"

namespace attrbench {

/// Cached input/output of one layer for one forward pass.
struct TapeNode {
  std::size_t layer = 0;
  Tensor input;
  Tensor output;
};

/// Record of a forward pass. Refers to the model it was produced by, which must outlive it.
struct Tape {
  const Model* model = nullptr;
  std::vector<TapeNode> nodes;

  /// Activation i: 0 is the model input, i > 0 the output of layer i-1.
  const Tensor& activation(std::size_t i) const {
    if (i > nodes.size()) {
      throw InvalidInput("activation index " + std::to_string(i) + " out of range [0, " +
                         std::to_string(nodes.size()) + "]");
    }
    return i == 0 ? nodes.front().input : nodes[i - 1].output;
  }

  const Tensor& logits() const { return nodes.back().output; }
};

struct ForwardResult {
  Tensor logits;
  Tape tape;
};

enum class RuleKind { standard, deconv, guided, deeplift_rescale };

/// How the backward pass treats ReLU (and, for DeepLIFT, max pooling). Linear layers always
/// propagate the transpose Jacobian.
class BackpropRule {
 public:
  static BackpropRule standard() { return BackpropRule(RuleKind::standard); }
  static BackpropRule deconv() { return BackpropRule(RuleKind::deconv); }
  static BackpropRule guided() { return BackpropRule(RuleKind::guided); }

  /// Rescale multipliers relative to the activations recorded on `reference`.
  static BackpropRule deeplift(Tape reference) {
    BackpropRule rule(RuleKind::deeplift_rescale);
    rule.reference_ = std::make_shared<const Tape>(std::move(reference));
    return rule;
  }

  /// A DeepLIFT rule with no reference attached; backward() rejects it.
  static BackpropRule deeplift_unconfigured() { return BackpropRule(RuleKind::deeplift_rescale); }

  RuleKind kind() const noexcept { return kind_; }
  const Tape* reference() const noexcept { return reference_.get(); }

 private:
  explicit BackpropRule(RuleKind kind) : kind_(kind) {}

  RuleKind kind_;
  std::shared_ptr<const Tape> reference_;
};

namespace detail {

// Valid output range [lo, hi) along one axis for kernel offset k.
inline void conv_range(std::size_t out_extent, std::size_t in_extent, std::size_t stride,
                       std::size_t padding, std::size_t k, std::size_t& lo, std::size_t& hi) {
  const long p = static_cast<long>(padding), kk = static_cast<long>(k), s = static_cast<long>(stride);
  long first = 0;
  if (p > kk) first = (p - kk + s - 1) / s;
  long last = (static_cast<long>(in_extent) - 1 + p - kk);
  if (last < 0) {
    lo = hi = 0;
    return;
  }
  last = last / s + 1;
  lo = static_cast<std::size_t>(first);
  hi = std::min(out_extent, static_cast<std::size_t>(std::max(0L, last)));
  if (hi < lo) hi = lo;
}

inline void dense_forward(const Dense& l, const Tensor& x, Tensor& y) {
  const std::size_t out = l.weight.dim(0), in = l.weight.dim(1);
  const double* w = l.weight.data();
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias[o];
    const double* row = w + o * in;
    for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] = s;
  }
}

inline void conv_forward(const Conv2d& l, const Tensor& x, Tensor& y) {
  const std::size_t O = y.dim(0), Ho = y.dim(1), Wo = y.dim(2);
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t K = l.kernel(), s = l.stride, p = l.padding;
  for (std::size_t o = 0; o < O; ++o) {
    std::fill(y.data() + o * Ho * Wo, y.data() + (o + 1) * Ho * Wo, l.bias[o]);
  }
  for (std::size_t ky = 0; ky < K; ++ky) {
    std::size_t oy_lo, oy_hi;
    conv_range(Ho, H, s, p, ky, oy_lo, oy_hi);
    for (std::size_t kx = 0; kx < K; ++kx) {
      std::size_t ox_lo, ox_hi;
      conv_range(Wo, W, s, p, kx, ox_lo, ox_hi);
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          const double w = l.weight[((o * C + c) * K + ky) * K + kx];
          const double* in = x.data() + c * H * W;
          double* out = y.data() + o * Ho * Wo;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            // Unsigned wrap-around keeps base + ox*s exact for every in-range ox.
            const std::size_t base = (oy * s + ky - p) * W + kx - p;
            double* out_row = out + oy * Wo;
            if (s == 1) {
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) out_row[ox] += w * in[base + ox];
            } else {
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) out_row[ox] += w * in[base + ox * s];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward_input(const Conv2d& l, const Tensor& g, Tensor& gin) {
  const std::size_t O = g.dim(0), Ho = g.dim(1), Wo = g.dim(2);
  const std::size_t C = gin.dim(0), H = gin.dim(1), W = gin.dim(2);
  const std::size_t K = l.kernel(), s = l.stride, p = l.padding;
  gin.fill(0.0);
  for (std::size_t ky = 0; ky < K; ++ky) {
    std::size_t oy_lo, oy_hi;
    conv_range(Ho, H, s, p, ky, oy_lo, oy_hi);
    for (std::size_t kx = 0; kx < K; ++kx) {
      std::size_t ox_lo, ox_hi;
      conv_range(Wo, W, s, p, kx, ox_lo, ox_hi);
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          const double w = l.weight[((o * C + c) * K + ky) * K + kx];
          double* in = gin.data() + c * H * W;
          const double* out = g.data() + o * Ho * Wo;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const std::size_t base = (oy * s + ky - p) * W + kx - p;
            const double* out_row = out + oy * Wo;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) in[base + ox * s] += w * out_row[ox];
          }
        }
      }
    }
  }
}

inline void conv_backward_params(const Conv2d& l, const Tensor& x, const Tensor& g, Tensor& gw,
                                 Tensor& gb) {
  const std::size_t O = g.dim(0), Ho = g.dim(1), Wo = g.dim(2);
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t K = l.kernel(), s = l.stride, p = l.padding;
  for (std::size_t o = 0; o < O; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < Ho * Wo; ++i) acc += g[o * Ho * Wo + i];
    gb[o] += acc;
  }
  for (std::size_t ky = 0; ky < K; ++ky) {
    std::size_t oy_lo, oy_hi;
    conv_range(Ho, H, s, p, ky, oy_lo, oy_hi);
    for (std::size_t kx = 0; kx < K; ++kx) {
      std::size_t ox_lo, ox_hi;
      conv_range(Wo, W, s, p, kx, ox_lo, ox_hi);
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          const double* in = x.data() + c * H * W;
          const double* out = g.data() + o * Ho * Wo;
          for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
            const std::size_t base = (oy * s + ky - p) * W + kx - p;
            const double* out_row = out + oy * Wo;
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) acc += in[base + ox * s] * out_row[ox];
          }
          gw[((o * C + c) * K + ky) * K + kx] += acc;
        }
      }
    }
  }
}

// Flat input index of the winner of each pooling window; first maximum in row-major order.
inline std::size_t pool_winner(const MaxPool2d& l, const Tensor& x, std::size_t c, std::size_t oy,
                               std::size_t ox) {
  const std::size_t H = x.dim(1), W = x.dim(2);
  std::size_t best = (c * H + oy * l.stride) * W + ox * l.stride;
  for (std::size_t dy = 0; dy < l.size; ++dy) {
    for (std::size_t dx = 0; dx < l.size; ++dx) {
      const std::size_t idx = (c * H + oy * l.stride + dy) * W + ox * l.stride + dx;
      if (x[idx] > x[best]) best = idx;
    }
  }
  return best;
}

inline void maxpool_forward(const MaxPool2d& l, const Tensor& x, Tensor& y) {
  const std::size_t C = y.dim(0), Ho = y.dim(1), Wo = y.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        y[(c * Ho + oy) * Wo + ox] = x[pool_winner(l, x, c, oy, ox)];
      }
    }
  }
}

inline Tensor apply_layer(const Layer& layer, const Tensor& x, const Shape& out_shape) {
  Tensor y(out_shape);
  switch (kind_of(layer)) {
    case LayerKind::dense:
      dense_forward(std::get<Dense>(layer), x, y);
      break;
    case LayerKind::conv2d:
      conv_forward(std::get<Conv2d>(layer), x, y);
      break;
    case LayerKind::relu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case LayerKind::maxpool2d:
      maxpool_forward(std::get<MaxPool2d>(layer), x, y);
      break;
    case LayerKind::flatten:
      std::copy(x.data(), x.data() + x.size(), y.data());
      break;
  }
  return y;
}

inline void check_input(const Model& model, const Tensor& x) {
  if (x.shape() != model.input_shape()) {
    throw InvalidInput("model expects input " + shape_string(model.input_shape()) + ", got " +
                       shape_string(x.shape()));
  }
}

// Gradient of one layer's input given the gradient of its output.
inline Tensor layer_backward(const Layer& layer, const TapeNode& node, const Tensor& g,
                             const BackpropRule& rule, const TapeNode* ref) {
  Tensor gin(node.input.shape());
  switch (kind_of(layer)) {
    case LayerKind::dense: {
      const Dense& d = std::get<Dense>(layer);
      const std::size_t out = d.weight.dim(0), in = d.weight.dim(1);
      for (std::size_t o = 0; o < out; ++o) {
        const double go = g[o];
        if (go == 0.0) continue;
        const double* row = d.weight.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) gin[i] += row[i] * go;
      }
      break;
    }
    case LayerKind::conv2d:
      conv_backward_input(std::get<Conv2d>(layer), g, gin);
      break;
    case LayerKind::relu: {
      const Tensor& x = node.input;
      switch (rule.kind()) {
        case RuleKind::standard:
          for (std::size_t i = 0; i < x.size(); ++i) gin[i] = x[i] > 0.0 ? g[i] : 0.0;
          break;
        case RuleKind::deconv:
          for (std::size_t i = 0; i < x.size(); ++i) gin[i] = g[i] > 0.0 ? g[i] : 0.0;
          break;
        case RuleKind::guided:
          for (std::size_t i = 0; i < x.size(); ++i) gin[i] = (g[i] > 0.0 && x[i] > 0.0) ? g[i] : 0.0;
          break;
        case RuleKind::deeplift_rescale: {
          const Tensor& xr = ref->input;
          const Tensor& y = node.output;
          const Tensor& yr = ref->output;
          for (std::size_t i = 0; i < x.size(); ++i) {
            const double dx = x[i] - xr[i];
            // Near-equal inputs fall back to the local gradient (the Rescale limit).
            const double m = std::abs(dx) > 1e-10 ? (y[i] - yr[i]) / dx : (x[i] > 0.0 ? 1.0 : 0.0);
            gin[i] = g[i] * m;
          }
          break;
        }
      }
      break;
    }
    case LayerKind::maxpool2d: {
      const MaxPool2d& l = std::get<MaxPool2d>(layer);
      const std::size_t C = g.dim(0), Ho = g.dim(1), Wo = g.dim(2);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            gin[pool_winner(l, node.input, c, oy, ox)] += g[(c * Ho + oy) * Wo + ox];
          }
        }
      }
      break;
    }
    case LayerKind::flatten:
      std::copy(g.data(), g.data() + g.size(), gin.data());
      break;
  }
  return gin;
}

inline void check_rule(const Tape& tape, const BackpropRule& rule) {
  if (tape.model == nullptr || tape.nodes.empty()) throw InvalidInput("empty tape");
  if (rule.kind() == RuleKind::deeplift_rescale) {
    const Tape* ref = rule.reference();
    if (ref == nullptr) {
      throw ConfigError("deeplift-rescale rule needs reference activations");
    }
    bool same = ref->model == tape.model && ref->nodes.size() == tape.nodes.size();
    for (std::size_t i = 0; same && i < tape.nodes.size(); ++i) {
      same = ref->nodes[i].output.shape() == tape.nodes[i].output.shape();
    }
    if (!same) throw ConfigError("deeplift reference tape was recorded on a different model");
  }
}

}  // namespace detail

/// Logits of the model; no tape is kept.
inline Tensor predict(const Model& model, const Tensor& x) {
  detail::check_input(model, x);
  Tensor a = x;
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    a = detail::apply_layer(model.layers()[i], a, model.activation_shape(i + 1));
  }
  return a;
}

inline std::size_t predict_class(const Model& model, const Tensor& x) {
  const Tensor logits = predict(model, x);
  return argmax(logits.values());
}

/// Forward pass that caches every layer's input and output. Logits are returned raw (no softmax).
inline ForwardResult forward(const Model& model, const Tensor& x) {
  detail::check_input(model, x);
  ForwardResult result;
  result.tape.model = &model;
  result.tape.nodes.reserve(model.layer_count());
  Tensor a = x;
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    Tensor out = detail::apply_layer(model.layers()[i], a, model.activation_shape(i + 1));
    result.tape.nodes.push_back(TapeNode{i, std::move(a), out});
    a = std::move(out);
  }
  result.logits = std::move(a);
  return result;
}

/// Propagates `grad_output` (gradient at the logits) back to activation `stop`.
inline Tensor backpropagate(const Tape& tape, const BackpropRule& rule, Tensor grad_output,
                            std::size_t stop = 0) {
  detail::check_rule(tape, rule);
  if (stop > tape.nodes.size()) {
    throw InvalidInput("activation index " + std::to_string(stop) + " out of range [0, " +
                       std::to_string(tape.nodes.size()) + "]");
  }
  grad_output.require_same_shape(tape.logits(), "backpropagate");
  const Model& model = *tape.model;
  const Tape* ref = rule.reference();
  Tensor g = std::move(grad_output);
  for (std::size_t i = tape.nodes.size(); i > stop; --i) {
    const std::size_t l = i - 1;
    g = detail::layer_backward(model.layers()[l], tape.nodes[l], g, rule,
                               ref ? &ref->nodes[l] : nullptr);
  }
  return g;
}

inline Tensor one_hot_logit(const Tape& tape, std::size_t c) {
  const std::size_t o = tape.logits().size();
  if (c >= o) {
    throw InvalidInput("class " + std::to_string(c) + " out of range for " + std::to_string(o) +
                       " outputs");
  }
  Tensor seed(tape.logits().shape());
  seed[c] = 1.0;
  return seed;
}

/// d logit_c / d x under `rule` (for DeepLIFT: the multipliers to apply to x - reference).
inline Tensor backward(const Tape& tape, const BackpropRule& rule, std::size_t c) {
  return backpropagate(tape, rule, one_hot_logit(tape, c), 0);
}

/// d logit_c / d activation. Index 0 is the input; index i > 0 is the output of layer i-1.
inline Tensor grad_at_layer(const Tape& tape, const BackpropRule& rule, std::size_t c,
                            std::size_t activation_index) {
  if (tape.nodes.empty() || activation_index > tape.nodes.size()) {
    throw InvalidInput("activation index " + std::to_string(activation_index) + " out of range");
  }
  return backpropagate(tape, rule, one_hot_logit(tape, c), activation_index);
}

/// Convenience: standard gradient of logit c at x.
inline Tensor gradient(const Model& model, const Tensor& x, std::size_t c) {
  const ForwardResult fr = forward(model, x);
  return backward(fr.tape, BackpropRule::standard(), c);
}

/// Parameter gradients, one entry per layer (empty tensors for parameter-free layers).
struct LayerGrads {
  Tensor weight;
  Tensor bias;
};

inline std::vector<LayerGrads> zero_grads(const Model& model) {
  std::vector<LayerGrads> grads(model.layer_count());
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const Layer& layer = model.layers()[i];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      grads[i] = {Tensor::zeros_like(d->weight), Tensor::zeros_like(d->bias)};
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      grads[i] = {Tensor::zeros_like(c->weight), Tensor::zeros_like(c->bias)};
    }
  }
  return grads;
}

/// Adds d(loss)/d(params) for one sample to `acc`, given d(loss)/d(logits).
inline void accumulate_parameter_gradients(const Tape& tape, Tensor grad_logits,
                                           std::vector<LayerGrads>& acc) {
  const Model& model = *tape.model;
  const BackpropRule rule = BackpropRule::standard();
  Tensor g = std::move(grad_logits);
  for (std::size_t i = tape.nodes.size(); i > 0; --i) {
    const std::size_t l = i - 1;
    const Layer& layer = model.layers()[l];
    const TapeNode& node = tape.nodes[l];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      const std::size_t out = d->weight.dim(0), in = d->weight.dim(1);
      for (std::size_t o = 0; o < out; ++o) {
        const double go = g[o];
        acc[l].bias[o] += go;
        if (go == 0.0) continue;
        double* row = acc[l].weight.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) row[k] += go * node.input[k];
      }
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      detail::conv_backward_params(*c, node.input, g, acc[l].weight, acc[l].bias);
    }
    if (l > 0) g = detail::layer_backward(layer, node, g, rule, nullptr);
  }
}

}  // namespace attrbench
