#pragma once

// Independent reference computations used by the unit and acceptance tests. Nothing here calls
// into the library's own implementation of the quantity being checked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "attrbench/autodiff.hpp"
#include "attrbench/model.hpp"
#include "attrbench/tensor.hpp"

namespace oracle {

using attrbench::Model;
using attrbench::Tensor;

/// Random (C,H,W) tensor with entries in [lo, hi).
inline Tensor random_tensor(const attrbench::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

/// Linear model logit_c(x) = w_c . x + b_c with random weights; returns the model and W.
struct LinearFixture {
  Model model;
  Tensor weight;  // (classes, d)
  Tensor bias;
};

inline LinearFixture random_linear(const attrbench::Shape& input, std::size_t classes, std::mt19937_64& rng) {
  const std::size_t d = attrbench::shape_size(input);
  LinearFixture f{Model(), random_tensor({classes, d}, rng), random_tensor({classes}, rng)};
  f.model = attrbench::make_linear(input, f.weight, f.bias);
  return f;
}

/// Hand-rolled logit for a linear fixture.
inline double linear_logit(const LinearFixture& f, const Tensor& x, std::size_t c) {
  const std::size_t d = x.size();
  double s = f.bias[c];
  for (std::size_t i = 0; i < d; ++i) s += f.weight[c * d + i] * x[i];
  return s;
}

/// On/off state of every ReLU input and the winner of every pooling window; two inputs with the
/// same signature lie in the same linear region of the network.
inline std::vector<std::int64_t> activation_signature(const Model& model, const Tensor& x) {
  const attrbench::ForwardResult fr = attrbench::forward(model, x);
  std::vector<std::int64_t> sig;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const Tensor& in = fr.tape.nodes[l].input;
    const Tensor& out = fr.tape.nodes[l].output;
    const auto kind = attrbench::kind_of(model.layers()[l]);
    if (kind == attrbench::LayerKind::relu) {
      for (double v : in.values()) sig.push_back(v > 0.0);
    } else if (kind == attrbench::LayerKind::maxpool2d) {
      // Position of each output within its input channel.
      const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
      const std::size_t Ho = out.dim(1), Wo = out.dim(2);
      const auto& p = std::get<attrbench::MaxPool2d>(model.layers()[l]);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            std::int64_t best = -1;
            double bv = 0.0;
            for (std::size_t ky = 0; ky < p.size; ++ky) {
              for (std::size_t kx = 0; kx < p.size; ++kx) {
                const std::size_t y = oy * p.stride + ky, xx = ox * p.stride + kx;
                if (y >= H || xx >= W) continue;
                const double v = in[(c * H + y) * W + xx];
                if (best < 0 || v > bv) {
                  best = static_cast<std::int64_t>(ky * p.size + kx);
                  bv = v;
                }
              }
            }
            sig.push_back(best);
          }
        }
      }
    }
  }
  return sig;
}

struct GradCheck {
  double max_rel_error = 0.0;  // max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)
  std::size_t checked = 0;
  std::size_t skipped = 0;     // coordinates whose +-h probes crossed a ReLU/pool kink
};

/// Central finite differences of logit c, skipping coordinates whose probes leave the linear
/// region containing x.
inline GradCheck finite_difference_check(const Model& model, const Tensor& x, std::size_t c, const Tensor& analytic,
                                         double h = 1e-6) {
  const auto base_sig = activation_signature(model, x);
  GradCheck out;
  std::vector<double> num(x.size(), 0.0);
  std::vector<std::uint8_t> used(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    if (activation_signature(model, xp) != base_sig || activation_signature(model, xm) != base_sig) {
      ++out.skipped;
      continue;
    }
    num[i] = (attrbench::predict(model, xp)[c] - attrbench::predict(model, xm)[c]) / (2.0 * h);
    used[i] = 1;
    ++out.checked;
  }
  double scale = 0.0, err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!used[i]) continue;
    scale = std::max({scale, std::abs(analytic[i]), std::abs(num[i])});
    err = std::max(err, std::abs(analytic[i] - num[i]));
  }
  out.max_rel_error = scale > 0.0 ? err / scale : err;
  return out;
}

/// Exact Shapley values of a cooperative game over n players by subset enumeration:
/// phi_i = sum_S |S|! (n-|S|-1)! / n! (v(S u {i}) - v(S)).
inline std::vector<double> brute_force_shapley(std::size_t n, const std::function<double(std::uint64_t)>& value) {
  std::vector<double> fact(n + 1, 1.0);
  for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> phi(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::uint64_t s = 0; s < (std::uint64_t{1} << n); ++s) {
      if (s & (std::uint64_t{1} << i)) continue;
      const std::size_t size = static_cast<std::size_t>(__builtin_popcountll(s));
      const double w = fact[size] * fact[n - size - 1] / fact[n];
      phi[i] += w * (value(s | (std::uint64_t{1} << i)) - value(s));
    }
  }
  return phi;
}

/// Exact one-sided upper-tail p-value of the signed-rank statistic by enumerating all 2^n sign
/// patterns over tie-free ranks 1..n: P(W+ >= w).
inline double signed_rank_upper_tail(std::size_t n, double w) {
  std::size_t hits = 0;
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t s = 0; s < total; ++s) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (s & (std::uint64_t{1} << i)) sum += static_cast<double>(i + 1);
    }
    if (sum >= w) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Pearson correlation written out directly.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  const double ma = sa / n, mb = sb / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

/// Ranks 1..n of tie-free data.
inline std::vector<double> ranks_tie_free(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t below = 0;
    for (double u : v) below += u < v[i];
    r[i] = static_cast<double>(below + 1);
  }
  return r;
}

}  // namespace oracle
