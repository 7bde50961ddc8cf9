// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Random encoders and synthetic datasets for tests, demos and sweeps.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "kprune/dataset.hpp"
#include "kprune/evaluate.hpp"
#include "kprune/model.hpp"
#include "kprune/runtime.hpp"

namespace kprune {

struct SynthOptions {
  double weight_scale = 1.0;      // multiplies the 1/sqrt(fan_in) init
  double classifier_scale = 3.0;  // spreads logits so classes are separable
  std::size_t heads = 0;          // heads per layer; 0 = config.num_heads
  std::size_t neurons = 0;        // neurons per layer; 0 = config.ffn_neurons
};

namespace detail {

class Filler {
 public:
  explicit Filler(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Matrix<T> matrix(std::size_t rows, std::size_t cols, double stddev) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.values()) v = static_cast<T>(stddev * normal_(rng_));
    return m;
  }
  template <typename T>
  std::vector<T> vector(std::size_t n, double mean, double stddev) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(mean + stddev * normal_(rng_));
    return v;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace detail

/// Gaussian-initialized encoder. Deterministic for a given seed.
template <typename T>
EncoderModel<T> random_model(const ModelConfig& config, std::uint64_t seed,
                             const SynthOptions& opt = {}) {
  config.validate();
  detail::Filler fill(seed);
  const std::size_t d = config.embed_dim, dh = config.head_dim;
  const std::size_t heads = opt.heads ? opt.heads : config.num_heads;
  const std::size_t neurons = opt.neurons ? opt.neurons : config.ffn_neurons;
  const double wd = opt.weight_scale / std::sqrt(static_cast<double>(d));
  auto ln = [&] {
    return LayerNormParams<T>{fill.vector<T>(d, 1.0, 0.1), fill.vector<T>(d, 0.0, 0.1)};
  };
  EncoderModel<T> m;
  m.config = config;
  m.token_embeddings = fill.matrix<T>(config.vocab_size, d, 1.0);
  m.position_embeddings = fill.matrix<T>(config.max_seq_len, d, 0.5);
  m.embed_ln = ln();
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    EncoderLayer<T> layer;
    for (std::size_t i = 0; i < heads; ++i) {
      AttentionHead<T> h;
      h.query = fill.matrix<T>(dh, d, wd);
      h.key = fill.matrix<T>(dh, d, wd);
      h.value = fill.matrix<T>(dh, d, wd);
      h.query_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.key_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.value_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.output = fill.matrix<T>(d, dh, opt.weight_scale / std::sqrt(static_cast<double>(dh * heads)));
      layer.heads.push_back(std::move(h));
    }
    layer.attn_out_bias = fill.vector<T>(d, 0.0, 0.1);
    layer.attn_ln = ln();
    layer.ffn_in = fill.matrix<T>(neurons, d, wd);
    layer.ffn_in_bias = fill.vector<T>(neurons, 0.0, 0.1);
    layer.ffn_out =
        fill.matrix<T>(d, neurons, opt.weight_scale / std::sqrt(static_cast<double>(neurons)));
    layer.ffn_out_bias = fill.vector<T>(d, 0.0, 0.1);
    layer.ffn_ln = ln();
    m.layers.push_back(std::move(layer));
  }
  m.pool_weight = fill.matrix<T>(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  m.pool_bias = fill.vector<T>(d, 0.0, 0.1);
  m.cls_weight = fill.matrix<T>(config.num_classes, d,
                                opt.classifier_scale / std::sqrt(static_cast<double>(d)));
  m.cls_bias = fill.vector<T>(config.num_classes, 0.0, 0.1);
  return m;
}

/// Duplicates every head and neuron. The first copy keeps `share` of the
/// original output projection and the second copy the rest, so the network
/// function is unchanged. share = 0.5 halves both.
template <typename T>
EncoderModel<T> plant_redundancy(const EncoderModel<T>& base, double share = 0.5) {
  EncoderModel<T> m = base;
  for (auto& layer : m.layers) {
    std::vector<AttentionHead<T>> heads;
    for (const auto& h : layer.heads) {
      AttentionHead<T> a = h;
      for (auto& v : a.output.values()) v = static_cast<T>(v * share);
      heads.push_back(std::move(a));
    }
    for (const auto& h : layer.heads) {
      AttentionHead<T> b = h;
      for (auto& v : b.output.values()) v = static_cast<T>(v * (1.0 - share));
      heads.push_back(std::move(b));
    }
    layer.heads = std::move(heads);

    const std::size_t n = layer.num_neurons(), d = layer.ffn_in.cols();
    Matrix<T> in(2 * n, d), out(layer.ffn_out.rows(), 2 * n);
    std::vector<T> bias(2 * n);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = c * n + i;
        std::copy(layer.ffn_in.row(i).begin(), layer.ffn_in.row(i).end(), in.row(j).begin());
        bias[j] = layer.ffn_in_bias[i];
        const double f = c == 0 ? share : 1.0 - share;
        for (std::size_t r = 0; r < out.rows(); ++r)
          out(r, j) = static_cast<T>(layer.ffn_out(r, i) * f);
      }
    layer.ffn_in = std::move(in);
    layer.ffn_in_bias = std::move(bias);
    layer.ffn_out = std::move(out);
  }
  return m;
}

/// Appends `heads` heads and `neurons` neurons per layer with random weights
/// whose output projections are scaled by `scale`, i.e. units that carry
/// little signal.
template <typename T>
EncoderModel<T> add_noise_units(const EncoderModel<T>& base, std::size_t heads,
                                std::size_t neurons, double scale, std::uint64_t seed) {
  EncoderModel<T> m = base;
  detail::Filler fill(seed);
  const std::size_t d = m.config.embed_dim, dh = m.config.head_dim;
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& layer : m.layers) {
    for (std::size_t i = 0; i < heads; ++i) {
      AttentionHead<T> h;
      h.query = fill.matrix<T>(dh, d, wd);
      h.key = fill.matrix<T>(dh, d, wd);
      h.value = fill.matrix<T>(dh, d, wd);
      h.query_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.key_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.value_bias = fill.vector<T>(dh, 0.0, 0.1);
      h.output = fill.matrix<T>(d, dh, scale / std::sqrt(static_cast<double>(dh)));
      layer.heads.push_back(std::move(h));
    }
    const std::size_t n0 = layer.num_neurons(), n = n0 + neurons;
    Matrix<T> in(n, d), out(d, n);
    std::vector<T> bias(n);
    const auto extra_in = fill.matrix<T>(neurons, d, wd);
    const auto extra_bias = fill.vector<T>(neurons, 0.0, 0.1);
    const auto extra_out = fill.matrix<T>(d, neurons, scale);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        in(i, j) = i < n0 ? layer.ffn_in(i, j) : extra_in(i - n0, j);
        out(j, i) = i < n0 ? layer.ffn_out(j, i) : extra_out(j, i - n0);
      }
      bias[i] = i < n0 ? layer.ffn_in_bias[i] : extra_bias[i - n0];
    }
    layer.ffn_in = std::move(in);
    layer.ffn_out = std::move(out);
    layer.ffn_in_bias = std::move(bias);
  }
  return m;
}

/// Random token sequences with lengths uniform in [min_len, max_len].
/// Labels come from `labeler` when given (its argmax), otherwise uniform.
template <typename T>
std::vector<Sample> random_samples(const ModelConfig& config, std::size_t count,
                                   std::size_t min_len, std::size_t max_len, std::uint64_t seed,
                                   const EncoderModel<T>* labeler = nullptr) {
  detail::require(min_len >= 1 && min_len <= max_len && max_len <= config.max_seq_len,
                  "random_samples: bad length range");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(config.vocab_size) - 1);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(config.num_classes) - 1);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::int32_t> ids(len(rng));
    for (auto& t : ids) t = tok(rng);
    Sample s = Sample::unpadded(std::move(ids));
    if (labeler) {
      const auto z = logits(*labeler, s);
      const std::vector<double> zd(z.begin(), z.end());
      s.label = static_cast<int>(argmax(std::span<const double>(zd)));
    } else {
      s.label = cls(rng);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace kprune
