#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "attrbench/autodiff.hpp"
#include "attrbench/dataset.hpp"
#include "attrbench/error.hpp"
#include "attrbench/model.hpp"
#include "attrbench/random.hpp"

namespace attrbench {

struct TrainConfig {
  std::size_t epochs = 5;
  double learning_rate = 0.01;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  /// Mean cross-entropy over each epoch.
  std::vector<double> epoch_loss;
};

/// Softmax cross-entropy; writes d(loss)/d(logits) into grad.
inline double cross_entropy(const Tensor& logits, std::size_t label, Tensor& grad) {
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0.0;
  for (double v : logits.values()) z += std::exp(v - mx);
  grad = Tensor(logits.shape());
  for (std::size_t k = 0; k < logits.size(); ++k) grad[k] = std::exp(logits[k] - mx) / z;
  grad[label] -= 1.0;
  return -(logits[label] - mx - std::log(z));
}

/// Mini-batch SGD with momentum on softmax cross-entropy. Deterministic in cfg.seed.
inline TrainResult train_sgd(const Model& initial, const Dataset& data, const TrainConfig& cfg) {
  if (initial.output_size() != data.num_classes) {
    throw InvalidInput("model has " + std::to_string(initial.output_size()) + " outputs but dataset has " +
                       std::to_string(data.num_classes) + " classes");
  }
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");

  std::vector<Layer> layers = initial.layers();
  Model model = initial;
  std::vector<LayerGrads> velocity = zero_grads(model);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<LayerGrads> grads = zero_grads(model);
      Tensor dlogits;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const ForwardResult fr = forward(model, data.image(idx));
        const double loss = cross_entropy(fr.logits, data.labels[idx], dlogits);
        if (!std::isfinite(loss)) {
          throw NumericalError("training diverged in epoch " + std::to_string(epoch + 1) +
                               " (non-finite loss)");
        }
        epoch_loss += loss;
        accumulate_parameter_gradients(fr.tape, dlogits, grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        Tensor* params[2] = {nullptr, nullptr};
        if (auto* d = std::get_if<Dense>(&layers[l])) {
          params[0] = &d->weight;
          params[1] = &d->bias;
        } else if (auto* c = std::get_if<Conv2d>(&layers[l])) {
          params[0] = &c->weight;
          params[1] = &c->bias;
        } else {
          continue;
        }
        Tensor* g[2] = {&grads[l].weight, &grads[l].bias};
        Tensor* v[2] = {&velocity[l].weight, &velocity[l].bias};
        for (int k = 0; k < 2; ++k) {
          for (std::size_t i = 0; i < params[k]->size(); ++i) {
            (*v[k])[i] = cfg.momentum * (*v[k])[i] - cfg.learning_rate * (*g[k])[i] * inv;
            (*params[k])[i] += (*v[k])[i];
          }
        }
      }
      model = Model(initial.input_shape(), layers);
    }
    const double mean_loss = epoch_loss / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss)) throw NumericalError("training diverged (non-finite loss)");
    result.epoch_loss.push_back(mean_loss);
  }
  result.model = std::move(model);
  return result;
}

inline double accuracy(const Model& model, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predict_class(model, data.image(i)) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Evaluation images and the class each was predicted as.
struct Cohort {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> predicted;

  std::size_t size() const noexcept { return indices.size(); }
};

/// The first n correctly classified images in dataset order.
inline Cohort select_cohort(const Model& model, const Dataset& data, std::size_t n) {
  Cohort cohort;
  if (n == 0) return cohort;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t pred = predict_class(model, data.image(i));
    if (pred != data.labels[i]) continue;
    ++correct;
    cohort.indices.push_back(i);
    cohort.predicted.push_back(pred);
    if (cohort.size() == n) return cohort;
  }
  if (cohort.size() < n) throw CohortError(n, correct);
  return cohort;
}

}  // namespace attrbench
