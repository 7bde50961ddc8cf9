// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "kprune/kprune.hpp"

namespace fixture {

/// L=2, H=4, d_h=8, N=32, C=3.
inline kprune::ModelConfig toy_config() {
  kprune::ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 4;
  c.head_dim = 8;
  c.ffn_neurons = 32;
  c.embed_dim = 32;
  c.vocab_size = 50;
  c.max_seq_len = 12;
  c.num_classes = 3;
  c.layernorm_eps = 1e-12;
  c.avg_seq_len = 12;
  return c;
}

/// Smaller toy used where many forward passes are needed.
inline kprune::ModelConfig tiny_config() {
  kprune::ModelConfig c = toy_config();
  c.num_heads = 2;
  c.head_dim = 4;
  c.embed_dim = 8;
  c.ffn_neurons = 8;
  c.max_seq_len = 6;
  c.avg_seq_len = 6;
  return c;
}

template <typename T = float>
kprune::EncoderModel<T> toy_model(std::uint64_t seed, const kprune::ModelConfig& c = toy_config()) {
  return kprune::random_model<T>(c, seed);
}

inline std::vector<kprune::Sample> toy_samples(const kprune::ModelConfig& c, std::size_t n,
                                               std::uint64_t seed) {
  auto samples = kprune::random_samples<float>(c, n, 1, c.max_seq_len, seed);
  for (auto& s : samples) s.label = -1;
  return samples;
}

/// Random 0/1 mask state with the given keep probability.
template <typename T>
kprune::MaskState random_masks(const kprune::EncoderModel<T>& m, std::uint64_t seed,
                               double keep = 0.6) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(keep);
  auto masks = kprune::MaskState::all_ones(m);
  for (auto& layer : masks.heads)
    for (auto& v : layer) v = b(rng) ? 1.0 : 0.0;
  for (auto& layer : masks.neurons)
    for (auto& v : layer) v = b(rng) ? 1.0 : 0.0;
  return masks;
}

template <typename T>
kprune::Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  kprune::Matrix<T> m(r, c);
  for (auto& v : m.values()) v = static_cast<T>(n(rng));
  return m;
}

}  // namespace fixture
