// Copyright 2026 The pipesgd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pipesgd/common.hpp"

// Models, softmax cross-entropy loss, gradients and minibatch sampling for the
// two fixed model kinds (multinomial logistic regression and a ReLU MLP).
// Everything here is a pure function of its arguments; random state is always
// passed in explicitly.
namespace pipesgd::numerics {

using Rng = std::mt19937_64;

// Uniform integer in [0, bound) by rejection, independent of the standard
// library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
  if (bound == 0) throw ConfigError("uniform_index: empty range");
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

// Derives an independent stream for `rank` from a run seed.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  return Rng(seq);
}

struct Dataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<float> features;  // row-major, size() x dim
  std::vector<std::int32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(features).subspan(i * dim, dim);
  }

  void validate() const {
    if (labels.empty()) throw ConfigError("dataset has no samples");
    if (dim == 0) throw ConfigError("dataset has zero feature dimension");
    if (num_classes < 2) throw ConfigError("dataset needs at least 2 classes");
    if (features.size() != labels.size() * dim) {
      throw ConfigError("dataset feature matrix is " +
                        std::to_string(features.size()) + " values, expected " +
                        std::to_string(labels.size() * dim));
    }
    for (std::int32_t y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw ConfigError("dataset label " + std::to_string(y) +
                          " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }
};

struct Minibatch {
  std::vector<std::size_t> indices;
  std::size_t size() const noexcept { return indices.size(); }
};

inline Minibatch full_batch(const Dataset& data) {
  Minibatch b;
  b.indices.resize(data.size());
  std::iota(b.indices.begin(), b.indices.end(), std::size_t{0});
  return b;
}

enum class ModelKind { logistic_regression, mlp };

struct ParamBlock {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// One dense layer: out x in row-major weights followed by `out` biases.
struct LayerLayout {
  std::size_t in = 0;
  std::size_t out = 0;
  ParamBlock weights;
  ParamBlock bias;
};

class ModelSpec {
 public:
  static ModelSpec logistic(std::size_t dim, std::size_t classes) {
    return ModelSpec(ModelKind::logistic_regression, {dim, classes});
  }

  // layer_dims = {input, hidden..., classes}; ReLU after every hidden layer.
  static ModelSpec mlp(std::vector<std::size_t> layer_dims) {
    if (layer_dims.size() < 3) {
      throw ConfigError("mlp needs at least one hidden layer");
    }
    return ModelSpec(ModelKind::mlp, std::move(layer_dims));
  }

  ModelKind kind() const noexcept { return kind_; }
  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  const std::vector<LayerLayout>& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return num_params_; }
  std::size_t input_dim() const noexcept { return dims_.front(); }
  std::size_t num_classes() const noexcept { return dims_.back(); }

 private:
  ModelSpec(ModelKind kind, std::vector<std::size_t> dims)
      : kind_(kind), dims_(std::move(dims)) {
    for (std::size_t d : dims_) {
      if (d == 0) throw ConfigError("model layer dimension must be positive");
    }
    if (dims_.back() < 2) throw ConfigError("model needs at least 2 classes");
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      LayerLayout layer;
      layer.in = dims_[l];
      layer.out = dims_[l + 1];
      layer.weights = {offset, layer.in * layer.out};
      offset += layer.weights.length;
      layer.bias = {offset, layer.out};
      offset += layer.bias.length;
      layout_.push_back(layer);
    }
    num_params_ = offset;
  }

  ModelKind kind_;
  std::vector<std::size_t> dims_;
  std::vector<LayerLayout> layout_;
  std::size_t num_params_ = 0;
};

inline std::string to_string(ModelKind kind) {
  return kind == ModelKind::mlp ? "mlp" : "logistic";
}

namespace detail {

inline void check_compatible(std::span<const float> params,
                             const ModelSpec& model, const Dataset& data) {
  if (params.size() != model.num_params()) {
    throw ConfigError("parameter vector has " + std::to_string(params.size()) +
                      " values, model layout needs " +
                      std::to_string(model.num_params()));
  }
  if (data.dim != model.input_dim()) {
    throw ConfigError("dataset dim " + std::to_string(data.dim) +
                      " does not match model input " +
                      std::to_string(model.input_dim()));
  }
  if (data.num_classes != model.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) +
                      " classes, model outputs " +
                      std::to_string(model.num_classes()));
  }
}

inline void check_batch(const Dataset& data, const Minibatch& batch) {
  if (batch.indices.empty()) throw ConfigError("empty minibatch");
  for (std::size_t i : batch.indices) {
    if (i >= data.size()) {
      throw ConfigError("minibatch index " + std::to_string(i) +
                        " out of range for " + std::to_string(data.size()) +
                        " samples");
    }
  }
}

// Per-sample forward pass. pre[l] holds layer l's pre-activation z_l, post[l]
// the input to layer l (post[0] = x). Last layer's pre-activation are logits.
struct ForwardCache {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;
};

inline void forward_sample(std::span<const float> params,
                           const ModelSpec& model, std::span<const float> x,
                           ForwardCache& cache) {
  const auto& layers = model.layout();
  cache.pre.resize(layers.size());
  cache.post.resize(layers.size());
  cache.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerLayout& layer = layers[l];
    const float* w = params.data() + layer.weights.offset;
    const float* b = params.data() + layer.bias.offset;
    const std::vector<double>& in = cache.post[l];
    std::vector<double>& z = cache.pre[l];
    z.assign(layer.out, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      double acc = b[o];
      const float* wrow = w + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) acc += wrow[i] * in[i];
      z[o] = acc;
    }
    if (l + 1 < layers.size()) {
      std::vector<double>& next = cache.post[l + 1];
      next.resize(layer.out);
      for (std::size_t o = 0; o < layer.out; ++o) next[o] = std::max(z[o], 0.0);
    }
  }
}

inline double log_sum_exp(const std::vector<double>& logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace detail

// Activations of every sample in a batch, kept for the backward pass.
struct BatchForward {
  std::vector<detail::ForwardCache> samples;
  double loss = 0.0;  // mean softmax cross-entropy
};

inline BatchForward forward_batch(std::span<const float> params,
                                  const ModelSpec& model, const Dataset& data,
                                  const Minibatch& batch) {
  detail::check_compatible(params, model, data);
  detail::check_batch(data, batch);
  BatchForward out;
  out.samples.resize(batch.size());
  double total = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t idx = batch.indices[s];
    detail::forward_sample(params, model, data.row(idx), out.samples[s]);
    const std::vector<double>& logits = out.samples[s].pre.back();
    const double loss = detail::log_sum_exp(logits) - logits[data.labels[idx]];
    total += std::max(loss, 0.0);
  }
  out.loss = total / static_cast<double>(batch.size());
  return out;
}

// Mean softmax cross-entropy over the batch.
inline double forward_loss(std::span<const float> params, const ModelSpec& model,
                           const Dataset& data, const Minibatch& batch) {
  detail::check_compatible(params, model, data);
  detail::check_batch(data, batch);
  detail::ForwardCache cache;
  double total = 0.0;
  for (std::size_t idx : batch.indices) {
    detail::forward_sample(params, model, data.row(idx), cache);
    const std::vector<double>& logits = cache.pre.back();
    total += std::max(detail::log_sum_exp(logits) - logits[data.labels[idx]], 0.0);
  }
  return total / static_cast<double>(batch.size());
}

// Backpropagation through activations saved by forward_batch.
inline GradVec backward_batch(std::span<const float> params,
                              const ModelSpec& model, const Dataset& data,
                              const Minibatch& batch, const BatchForward& fwd) {
  if (fwd.samples.size() != batch.size()) {
    throw ConfigError("backward_batch: forward state does not match batch");
  }
  const auto& layers = model.layout();
  std::vector<double> grad(model.num_params(), 0.0);
  std::vector<double> delta;
  std::vector<double> delta_prev;

  for (std::size_t s = 0; s < batch.size(); ++s) {
    const std::size_t idx = batch.indices[s];
    const detail::ForwardCache& cache = fwd.samples[s];
    // dL/dlogits = softmax - onehot
    const std::vector<double>& logits = cache.pre.back();
    const double lse = detail::log_sum_exp(logits);
    delta.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
      delta[k] = std::exp(logits[k] - lse);
    }
    delta[data.labels[idx]] -= 1.0;

    for (std::size_t l = layers.size(); l-- > 0;) {
      const LayerLayout& layer = layers[l];
      const std::vector<double>& in = cache.post[l];
      double* gw = grad.data() + layer.weights.offset;
      double* gb = grad.data() + layer.bias.offset;
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        gb[o] += d;
        if (d == 0.0) continue;
        double* grow = gw + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) grow[i] += d * in[i];
      }
      if (l == 0) break;
      const float* w = params.data() + layer.weights.offset;
      delta_prev.assign(layer.in, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const float* wrow = w + o * layer.in;
        for (std::size_t i = 0; i < layer.in; ++i) delta_prev[i] += d * wrow[i];
      }
      const std::vector<double>& z_prev = cache.pre[l - 1];
      for (std::size_t i = 0; i < layer.in; ++i) {
        if (z_prev[i] <= 0.0) delta_prev[i] = 0.0;
      }
      delta.swap(delta_prev);
    }
  }

  const double inv = 1.0 / static_cast<double>(batch.size());
  GradVec out(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    out[i] = static_cast<float>(grad[i] * inv);
  }
  return out;
}

// Gradient of forward_loss with respect to the flat parameter vector.
inline GradVec backward_grad(std::span<const float> params,
                             const ModelSpec& model, const Dataset& data,
                             const Minibatch& batch) {
  return backward_batch(params, model, data, batch,
                        forward_batch(params, model, data, batch));
}

// params - lr * grad, elementwise.
inline GradVec sgd_update(std::span<const float> params,
                          std::span<const float> grad, double lr) {
  if (params.size() != grad.size()) {
    throw ConfigError("sgd_update: params has " +
                      std::to_string(params.size()) + " values, grad has " +
                      std::to_string(grad.size()));
  }
  if (!(lr > 0.0)) throw ConfigError("sgd_update: learning rate must be > 0");
  GradVec out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(params[i]) -
                                lr * static_cast<double>(grad[i]));
  }
  if (!all_finite(out.span())) {
    throw Error("sgd_update produced non-finite parameters (diverged)");
  }
  return out;
}

// Draws `size` distinct entries of `pool` (partial Fisher-Yates).
inline Minibatch sample_minibatch(std::span<const std::size_t> pool,
                                  std::size_t size, Rng& rng) {
  if (size < 1 || size > pool.size()) {
    throw ConfigError("minibatch size " + std::to_string(size) +
                      " outside [1, " + std::to_string(pool.size()) + "]");
  }
  std::vector<std::size_t> scratch(pool.begin(), pool.end());
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + uniform_index(rng, scratch.size() - i);
    std::swap(scratch[i], scratch[j]);
  }
  scratch.resize(size);
  return Minibatch{std::move(scratch)};
}

inline Minibatch sample_minibatch(const Dataset& data, std::size_t size,
                                  Rng& rng) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return sample_minibatch(all, size, rng);
}

// Indices i with i mod p == rank.
inline std::vector<std::size_t> shard_indices(std::size_t num_samples, int rank,
                                              int p) {
  std::vector<std::size_t> out;
  for (std::size_t i = static_cast<std::size_t>(rank); i < num_samples;
       i += static_cast<std::size_t>(p)) {
    out.push_back(i);
  }
  return out;
}

// Argmax class for one sample; ties go to the lowest class index.
inline std::size_t predict(std::span<const float> params, const ModelSpec& model,
                           std::span<const float> x) {
  detail::ForwardCache cache;
  detail::forward_sample(params, model, x, cache);
  const std::vector<double>& logits = cache.pre.back();
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

inline double evaluate_accuracy(std::span<const float> params,
                                const ModelSpec& model, const Dataset& data) {
  detail::check_compatible(params, model, data);
  if (data.size() == 0) throw ConfigError("accuracy on an empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (predict(params, model, data.row(i)) ==
        static_cast<std::size_t>(data.labels[i])) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Glorot-uniform weights, zero biases.
inline GradVec init_params(const ModelSpec& model, std::uint64_t seed) {
  GradVec w(model.num_params(), 0.0f);
  Rng rng = make_rng(seed, 0x1417);
  for (const LayerLayout& layer : model.layout()) {
    const double limit =
        std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t i = 0; i < layer.weights.length; ++i) {
      w[layer.weights.offset + i] = static_cast<float>(dist(rng));
    }
  }
  return w;
}

struct BlobSpec {
  std::size_t dim = 64;
  std::size_t classes = 2;
  std::size_t samples = 10000;
  double separation = 3.0;  // distance between class centers, in sigma units
  std::uint64_t seed = 42;
};

// Isotropic unit-variance Gaussian blobs. Centers sit on scaled coordinate
// axes so every pair of classes is exactly `separation` apart; they depend only
// on (dim, classes, separation), so different seeds give train/test splits
// from the same distribution.
inline Dataset make_gaussian_blobs(const BlobSpec& spec) {
  if (spec.classes < 2 || spec.classes > spec.dim) {
    throw ConfigError("blobs need 2 <= classes <= dim");
  }
  if (spec.samples == 0) throw ConfigError("blobs need at least one sample");
  Dataset data;
  data.dim = spec.dim;
  data.num_classes = spec.classes;
  data.features.resize(spec.samples * spec.dim);
  data.labels.resize(spec.samples);
  const double offset = spec.separation / std::sqrt(2.0);
  Rng rng = make_rng(spec.seed, 0xb10b);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    const std::size_t label = uniform_index(rng, spec.classes);
    data.labels[i] = static_cast<std::int32_t>(label);
    float* row = data.features.data() + i * spec.dim;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      row[d] = static_cast<float>(noise(rng) + (d == label ? offset : 0.0));
    }
  }
  return data;
}

}  // namespace pipesgd::numerics
