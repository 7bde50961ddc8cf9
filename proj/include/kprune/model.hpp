// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "kprune/error.hpp"
#include "kprune/tensor.hpp"

namespace kprune {

struct ModelConfig {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;  // heads per MHA sub-layer before pruning
  std::size_t head_dim = 0;
  std::size_t ffn_neurons = 0;  // neurons per FFN sub-layer before pruning
  std::size_t embed_dim = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  std::size_t num_classes = 0;
  double layernorm_eps = 1e-12;
  std::size_t avg_seq_len = 0;  // sequence length used for FLOPs accounting

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ContractViolation(std::string("ModelConfig: ") + name + " must be >= 1");
    };
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(head_dim, "head_dim");
    positive(ffn_neurons, "ffn_neurons");
    positive(embed_dim, "embed_dim");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    positive(num_classes, "num_classes");
    positive(avg_seq_len, "avg_seq_len");
    if (embed_dim != num_heads * head_dim)
      throw ContractViolation("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                              " != num_heads * head_dim " +
                              std::to_string(num_heads * head_dim));
    if (avg_seq_len > max_seq_len)
      throw ContractViolation("ModelConfig: avg_seq_len exceeds max_seq_len");
    if (!(layernorm_eps >= 0.0)) throw ContractViolation("ModelConfig: negative layernorm_eps");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerNormParams {
  std::vector<T> gain;
  std::vector<T> shift;
  friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

/// One attention head: its d_h-row slices of the Q/K/V projections and its
/// d x d_h block of the output projection.
template <typename T>
struct AttentionHead {
  Matrix<T> query;  // d_h x d
  Matrix<T> key;
  Matrix<T> value;
  std::vector<T> query_bias;  // d_h
  std::vector<T> key_bias;
  std::vector<T> value_bias;
  Matrix<T> output;  // d x d_h
  friend bool operator==(const AttentionHead&, const AttentionHead&) = default;
};

template <typename T>
struct EncoderLayer {
  std::vector<AttentionHead<T>> heads;
  std::vector<T> attn_out_bias;  // d
  LayerNormParams<T> attn_ln;
  Matrix<T> ffn_in;  // N x d, row i produces neuron i
  std::vector<T> ffn_in_bias;  // N
  Matrix<T> ffn_out;  // d x N, column i is the neuron's output projection
  std::vector<T> ffn_out_bias;  // d
  LayerNormParams<T> ffn_ln;

  std::size_t num_heads() const noexcept { return heads.size(); }
  std::size_t num_neurons() const noexcept { return ffn_in.rows(); }
  friend bool operator==(const EncoderLayer&, const EncoderLayer&) = default;
};

template <typename T>
struct EncoderModel {
  ModelConfig config;
  Matrix<T> token_embeddings;     // vocab x d
  Matrix<T> position_embeddings;  // max_seq_len x d
  LayerNormParams<T> embed_ln;
  std::vector<EncoderLayer<T>> layers;
  Matrix<T> pool_weight;  // d x d
  std::vector<T> pool_bias;
  Matrix<T> cls_weight;  // C x d
  std::vector<T> cls_bias;

  std::size_t num_sublayers() const noexcept { return 2 * layers.size(); }
  std::size_t total_heads() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.num_heads();
    return n;
  }
  std::size_t total_neurons() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.num_neurons();
    return n;
  }
  std::vector<std::size_t> heads_per_layer() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.num_heads());
    return out;
  }
  std::vector<std::size_t> neurons_per_layer() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.num_neurons());
    return out;
  }

  /// Checks every tensor shape against the config; throws ContractViolation.
  void validate() const;

  friend bool operator==(const EncoderModel&, const EncoderModel&) = default;
};

namespace detail {

template <typename T>
void expect_shape(const Matrix<T>& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ContractViolation("tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                            "x" + std::to_string(cols));
}

template <typename T>
void expect_length(const std::vector<T>& v, std::size_t n, const std::string& name) {
  if (v.size() != n)
    throw ContractViolation("tensor " + name + " has length " + std::to_string(v.size()) +
                            ", expected " + std::to_string(n));
}

}  // namespace detail

template <typename T>
void EncoderModel<T>::validate() const {
  config.validate();
  const std::size_t d = config.embed_dim;
  const std::size_t dh = config.head_dim;
  if (layers.size() != config.num_layers)
    throw ContractViolation("model has " + std::to_string(layers.size()) + " layers, config says " +
                            std::to_string(config.num_layers));
  detail::expect_shape(token_embeddings, config.vocab_size, d, "embed.token");
  detail::expect_shape(position_embeddings, config.max_seq_len, d, "embed.pos");
  detail::expect_length(embed_ln.gain, d, "embed.ln.gain");
  detail::expect_length(embed_ln.shift, d, "embed.ln.shift");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    if (layer.heads.size() > config.num_heads)
      throw ContractViolation(p + "attn has more heads than the config allows");
    if (layer.num_neurons() > config.ffn_neurons)
      throw ContractViolation(p + "ffn has more neurons than the config allows");
    for (std::size_t i = 0; i < layer.heads.size(); ++i) {
      const auto& h = layer.heads[i];
      const std::string hp = p + "attn.head." + std::to_string(i) + ".";
      detail::expect_shape(h.query, dh, d, hp + "q");
      detail::expect_shape(h.key, dh, d, hp + "k");
      detail::expect_shape(h.value, dh, d, hp + "v");
      detail::expect_length(h.query_bias, dh, hp + "q.bias");
      detail::expect_length(h.key_bias, dh, hp + "k.bias");
      detail::expect_length(h.value_bias, dh, hp + "v.bias");
      detail::expect_shape(h.output, d, dh, hp + "out");
    }
    detail::expect_length(layer.attn_out_bias, d, p + "attn.out.bias");
    detail::expect_length(layer.attn_ln.gain, d, p + "attn.ln.gain");
    detail::expect_length(layer.attn_ln.shift, d, p + "attn.ln.shift");
    const std::size_t n = layer.num_neurons();
    detail::expect_shape(layer.ffn_in, n, d, p + "ffn.in.weight");
    detail::expect_length(layer.ffn_in_bias, n, p + "ffn.in.bias");
    detail::expect_shape(layer.ffn_out, d, n, p + "ffn.out.weight");
    detail::expect_length(layer.ffn_out_bias, d, p + "ffn.out.bias");
    detail::expect_length(layer.ffn_ln.gain, d, p + "ffn.ln.gain");
    detail::expect_length(layer.ffn_ln.shift, d, p + "ffn.ln.shift");
  }
  detail::expect_shape(pool_weight, d, d, "head.pool.weight");
  detail::expect_length(pool_bias, d, "head.pool.bias");
  detail::expect_shape(cls_weight, config.num_classes, d, "head.cls.weight");
  detail::expect_length(cls_bias, config.num_classes, "head.cls.bias");
}

template <typename U, typename T>
EncoderModel<U> cast_model(const EncoderModel<T>& m) {
  auto ln = [](const LayerNormParams<T>& p) {
    return LayerNormParams<U>{cast<U>(p.gain), cast<U>(p.shift)};
  };
  EncoderModel<U> out;
  out.config = m.config;
  out.token_embeddings = cast<U>(m.token_embeddings);
  out.position_embeddings = cast<U>(m.position_embeddings);
  out.embed_ln = ln(m.embed_ln);
  for (const auto& layer : m.layers) {
    EncoderLayer<U> nl;
    for (const auto& h : layer.heads) {
      nl.heads.push_back({cast<U>(h.query), cast<U>(h.key), cast<U>(h.value),
                          cast<U>(h.query_bias), cast<U>(h.key_bias), cast<U>(h.value_bias),
                          cast<U>(h.output)});
    }
    nl.attn_out_bias = cast<U>(layer.attn_out_bias);
    nl.attn_ln = ln(layer.attn_ln);
    nl.ffn_in = cast<U>(layer.ffn_in);
    nl.ffn_in_bias = cast<U>(layer.ffn_in_bias);
    nl.ffn_out = cast<U>(layer.ffn_out);
    nl.ffn_out_bias = cast<U>(layer.ffn_out_bias);
    nl.ffn_ln = ln(layer.ffn_ln);
    out.layers.push_back(std::move(nl));
  }
  out.pool_weight = cast<U>(m.pool_weight);
  out.pool_bias = cast<U>(m.pool_bias);
  out.cls_weight = cast<U>(m.cls_weight);
  out.cls_bias = cast<U>(m.cls_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Sub-layers and masks

enum class SublayerKind { attention, ffn };

inline const char* to_string(SublayerKind kind) {
  return kind == SublayerKind::attention ? "mha" : "ffn";
}

/// Sub-layers are numbered in network order: MHA_0, FFN_0, MHA_1, FFN_1, ...
inline SublayerKind sublayer_kind(std::size_t sublayer) {
  return sublayer % 2 == 0 ? SublayerKind::attention : SublayerKind::ffn;
}
inline std::size_t sublayer_layer(std::size_t sublayer) { return sublayer / 2; }
inline std::size_t sublayer_index(std::size_t layer, SublayerKind kind) {
  return 2 * layer + (kind == SublayerKind::ffn ? 1 : 0);
}

/// Head masks (zeta) and neuron masks (xi) per layer. Values are real so
/// that derivatives with respect to them are well defined; pruning uses 0/1.
struct MaskState {
  std::vector<std::vector<double>> heads;
  std::vector<std::vector<double>> neurons;
  std::vector<bool> processed;  // one flag per sub-layer

  template <typename T>
  static MaskState all_ones(const EncoderModel<T>& model) {
    MaskState m;
    for (const auto& layer : model.layers) {
      m.heads.emplace_back(layer.num_heads(), 1.0);
      m.neurons.emplace_back(layer.num_neurons(), 1.0);
    }
    m.processed.assign(model.num_sublayers(), false);
    return m;
  }

  std::vector<double>& sublayer(std::size_t k) {
    return sublayer_kind(k) == SublayerKind::attention ? heads[sublayer_layer(k)]
                                                       : neurons[sublayer_layer(k)];
  }
  const std::vector<double>& sublayer(std::size_t k) const {
    return sublayer_kind(k) == SublayerKind::attention ? heads[sublayer_layer(k)]
                                                       : neurons[sublayer_layer(k)];
  }

  bool is_processed(std::size_t k) const { return k < processed.size() && processed[k]; }

  template <typename T>
  void check_against(const EncoderModel<T>& model) const {
    detail::require(heads.size() == model.layers.size() && neurons.size() == model.layers.size(),
                    "MaskState: layer count does not match model");
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      detail::require(heads[l].size() == model.layers[l].num_heads(),
                      "MaskState: head mask length mismatch in layer " + std::to_string(l));
      detail::require(neurons[l].size() == model.layers[l].num_neurons(),
                      "MaskState: neuron mask length mismatch in layer " + std::to_string(l));
    }
    detail::require(processed.empty() || processed.size() == model.num_sublayers(),
                    "MaskState: processed flags do not match sub-layer count");
  }

  friend bool operator==(const MaskState&, const MaskState&) = default;
};

// ---------------------------------------------------------------------------
// Materialization

namespace detail {

template <typename T>
void prune_mha(EncoderLayer<T>& layer, const std::vector<double>& mask) {
  std::vector<AttentionHead<T>> kept;
  for (std::size_t i = 0; i < layer.heads.size(); ++i) {
    if (mask[i] == 0.0) continue;
    AttentionHead<T> h = std::move(layer.heads[i]);
    if (mask[i] != 1.0)
      for (auto& v : h.output.values()) v = static_cast<T>(v * mask[i]);
    kept.push_back(std::move(h));
  }
  layer.heads = std::move(kept);
}

template <typename T>
void prune_ffn(EncoderLayer<T>& layer, const std::vector<double>& mask) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0) keep.push_back(i);
  const std::size_t d = layer.ffn_in.cols();
  Matrix<T> in(keep.size(), d), out(layer.ffn_out.rows(), keep.size());
  std::vector<T> bias(keep.size());
  for (std::size_t j = 0; j < keep.size(); ++j) {
    const std::size_t i = keep[j];
    std::copy(layer.ffn_in.row(i).begin(), layer.ffn_in.row(i).end(), in.row(j).begin());
    bias[j] = layer.ffn_in_bias[i];
    for (std::size_t r = 0; r < out.rows(); ++r)
      out(r, j) = mask[i] == 1.0 ? layer.ffn_out(r, i)
                                 : static_cast<T>(layer.ffn_out(r, i) * mask[i]);
  }
  layer.ffn_in = std::move(in);
  layer.ffn_in_bias = std::move(bias);
  layer.ffn_out = std::move(out);
}

}  // namespace detail

/// Physically removes every unit whose mask is 0. Non-binary mask values are
/// folded into the surviving output projection so outputs are unchanged.
template <typename T>
EncoderModel<T> materialize(const EncoderModel<T>& model, const MaskState& masks) {
  masks.check_against(model);
  EncoderModel<T> out = model;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    detail::prune_mha(out.layers[l], masks.heads[l]);
    detail::prune_ffn(out.layers[l], masks.neurons[l]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// FLOPs accounting (one multiply-add = 2 FLOPs)

using Flops = std::uint64_t;

/// Q/K/V projections, score matrix, weighted sum and output projection of
/// one head at the configured average sequence length.
inline Flops flops_per_head(const ModelConfig& c) {
  const Flops s = c.avg_seq_len, d = c.embed_dim, dh = c.head_dim;
  return 2 * s * d * dh * 3 + 2 * s * s * dh + 2 * s * s * dh + 2 * s * dh * d;
}

/// Input row, activation and output column of one FFN neuron.
inline Flops flops_per_neuron(const ModelConfig& c) {
  const Flops s = c.avg_seq_len, d = c.embed_dim;
  return 2 * s * d + s + 2 * s * d;
}

template <typename T>
Flops prunable_flops(const EncoderModel<T>& model) {
  return model.total_heads() * flops_per_head(model.config) +
         model.total_neurons() * flops_per_neuron(model.config);
}

/// FLOPs of the heads and neurons whose mask is nonzero.
template <typename T>
Flops prunable_flops(const EncoderModel<T>& model, const MaskState& masks) {
  masks.check_against(model);
  Flops heads = 0, neurons = 0;
  for (const auto& layer : masks.heads)
    for (double m : layer) heads += m != 0.0;
  for (const auto& layer : masks.neurons)
    for (double m : layer) neurons += m != 0.0;
  return heads * flops_per_head(model.config) + neurons * flops_per_neuron(model.config);
}

/// Whole-model FLOPs for reporting: prunable units plus the classification
/// head (pooling projection and classifier on the first token).
template <typename T>
Flops model_flops(const EncoderModel<T>& model) {
  const Flops d = model.config.embed_dim, c = model.config.num_classes;
  return prunable_flops(model) + 2 * d * d + 2 * c * d;
}

inline double compression_rate(Flops before, Flops after) {
  if (before == 0) return 0.0;
  return 1.0 - static_cast<double>(after) / static_cast<double>(before);
}

template <typename T>
double compression_rate(const EncoderModel<T>& before, const EncoderModel<T>& after) {
  detail::require(before.config == after.config, "compression_rate: configs differ");
  return compression_rate(prunable_flops(before), prunable_flops(after));
}

}  // namespace kprune
