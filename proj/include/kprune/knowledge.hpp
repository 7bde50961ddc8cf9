// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Per-unit predictive knowledge (Fisher approximation of the distillation
// loss incurred by zeroing a mask) and representational knowledge (squared
// norm of the unit's output) over a sample dataset.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "kprune/dataset.hpp"
#include "kprune/model.hpp"
#include "kprune/parallel.hpp"
#include "kprune/runtime.hpp"

namespace kprune {

enum class Criterion {
  kpruning,            // K_pred = mean of 1/2 (dK/dm)^2 on the distillation loss
  magnitude_gradient,  // K_pred = |mean dCE/dm| against sample labels, K_rep unused
};

inline const char* to_string(Criterion c) {
  return c == Criterion::kpruning ? "kpruning" : "magnitude-gradient";
}

/// Maps (layer, unit) pairs to flat indices over all heads / all neurons.
struct UnitIndex {
  std::vector<std::size_t> head_offset;    // L + 1 entries
  std::vector<std::size_t> neuron_offset;  // L + 1 entries

  template <typename T>
  static UnitIndex of(const EncoderModel<T>& model) {
    UnitIndex u;
    u.head_offset.push_back(0);
    u.neuron_offset.push_back(0);
    for (const auto& layer : model.layers) {
      u.head_offset.push_back(u.head_offset.back() + layer.num_heads());
      u.neuron_offset.push_back(u.neuron_offset.back() + layer.num_neurons());
    }
    return u;
  }

  std::size_t num_layers() const { return head_offset.empty() ? 0 : head_offset.size() - 1; }
  std::size_t num_heads() const { return head_offset.back(); }
  std::size_t num_neurons() const { return neuron_offset.back(); }

  std::size_t head(std::size_t layer, std::size_t unit) const { return head_offset[layer] + unit; }
  std::size_t neuron(std::size_t layer, std::size_t unit) const {
    return neuron_offset[layer] + unit;
  }

  /// (layer, unit) of a flat head index.
  std::pair<std::size_t, std::size_t> head_at(std::size_t flat) const {
    return locate(head_offset, flat);
  }
  std::pair<std::size_t, std::size_t> neuron_at(std::size_t flat) const {
    return locate(neuron_offset, flat);
  }

 private:
  static std::pair<std::size_t, std::size_t> locate(const std::vector<std::size_t>& off,
                                                    std::size_t flat) {
    std::size_t l = 0;
    while (l + 1 < off.size() && off[l + 1] <= flat) ++l;
    return {l, flat - off[l]};
  }
};

struct KnowledgeTable {
  UnitIndex index;
  std::vector<double> pred_head;
  std::vector<double> rep_head;
  std::vector<double> pred_neuron;
  std::vector<double> rep_neuron;
  std::vector<bool> head_processed;  // unit belongs to an already-pruned sub-layer
  std::vector<bool> neuron_processed;
};

/// Inputs and unit features of one sub-layer for every sample, gathered
/// during measurement for the reconstruction step.
template <typename T>
struct SublayerCapture {
  std::size_t sublayer = 0;
  std::vector<Matrix<T>> inputs;                      // per sample, s x d
  std::vector<std::vector<Matrix<T>>> head_features;  // per sample, per head, s x d_h
  std::vector<Matrix<T>> activations;                 // per sample, s x N
};

struct MeasureOptions {
  double gamma = 2.0;
  Criterion criterion = Criterion::kpruning;
  unsigned threads = 1;
};

using LogitCache = std::vector<std::vector<double>>;

/// Logits of the unpruned model for every sample.
template <typename T>
LogitCache teacher_logits(const EncoderModel<T>& model, const std::vector<Sample>& samples,
                          unsigned threads = 1) {
  LogitCache out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto z = logits(model, samples[i]);
    out[i].assign(z.begin(), z.end());
  });
  return out;
}

/// One forward + backward per sample. Entries for units in processed
/// sub-layers are exactly 0. When `capture` is non-null the inputs and
/// features of sub-layer capture->sublayer are retained.
template <typename T>
KnowledgeTable measure_knowledge(const EncoderModel<T>& model, const MaskState& masks,
                                 const std::vector<Sample>& samples, const LogitCache& teacher,
                                 const MeasureOptions& options,
                                 SublayerCapture<T>* capture = nullptr) {
  if (samples.empty()) throw InputError("knowledge measurement needs at least one sample");
  detail::require(teacher.size() == samples.size(),
                  "measure_knowledge: teacher logits missing for some samples");
  masks.check_against(model);

  KnowledgeTable table;
  table.index = UnitIndex::of(model);
  const std::size_t nh = table.index.num_heads(), nn = table.index.num_neurons();
  table.head_processed.assign(nh, false);
  table.neuron_processed.assign(nn, false);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t i = 0; i < model.layers[l].num_heads(); ++i)
      table.head_processed[table.index.head(l, i)] =
          masks.is_processed(sublayer_index(l, SublayerKind::attention));
    for (std::size_t i = 0; i < model.layers[l].num_neurons(); ++i)
      table.neuron_processed[table.index.neuron(l, i)] =
          masks.is_processed(sublayer_index(l, SublayerKind::ffn));
  }

  if (capture) {
    capture->inputs.assign(samples.size(), {});
    capture->head_features.assign(samples.size(), {});
    capture->activations.assign(samples.size(), {});
  }

  // Per-sample layout: [pred heads | pred neurons | rep heads | rep neurons].
  const std::size_t width = 2 * (nh + nn);
  std::vector<std::vector<double>> per_sample(samples.size());
  parallel_for(samples.size(), options.threads, [&](std::size_t s) {
    const Sample& sample = samples[s];
    auto trace = forward(model, sample, &masks, true);
    const std::span<const T> z(trace.logits);
    std::vector<double> dl;
    if (options.criterion == Criterion::kpruning) {
      dl = kl_distill_grad(z, std::span<const double>(teacher[s]), options.gamma);
    } else {
      if (sample.label < 0)
        throw InputError("magnitude-gradient criterion needs labeled samples");
      dl = cross_entropy_grad(z, sample.label);
    }
    const auto g = mask_gradients(model, trace, &masks, std::span<const double>(dl));
    std::vector<double> row(width, 0.0);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      for (std::size_t i = 0; i < model.layers[l].num_heads(); ++i) {
        const std::size_t h = table.index.head(l, i);
        if (table.head_processed[h]) continue;
        const double gi = g.heads[l][i];
        row[h] = options.criterion == Criterion::kpruning ? 0.5 * gi * gi : gi;
        row[nh + nn + h] = trace.sublayers[sublayer_index(l, SublayerKind::attention)]
                               .heads[i]
                               .output_norm_sq;
      }
      for (std::size_t i = 0; i < model.layers[l].num_neurons(); ++i) {
        const std::size_t n = table.index.neuron(l, i);
        if (table.neuron_processed[n]) continue;
        const double gi = g.neurons[l][i];
        row[nh + n] = options.criterion == Criterion::kpruning ? 0.5 * gi * gi : gi;
        row[2 * nh + nn + n] =
            trace.sublayers[sublayer_index(l, SublayerKind::ffn)].neuron_norm_sq[i];
      }
    }
    per_sample[s] = std::move(row);
    if (capture) {
      auto& tr = trace.sublayers[capture->sublayer];
      capture->inputs[s] = std::move(tr.input);
      if (tr.kind == SublayerKind::attention) {
        for (auto& ht : tr.heads) capture->head_features[s].push_back(std::move(ht.features));
      } else {
        capture->activations[s] = std::move(tr.activation);
      }
    }
  });

  auto total = pairwise_sum(per_sample);
  const double inv = 1.0 / static_cast<double>(samples.size());
  auto slice = [&](std::size_t begin, std::size_t n, bool absolute) {
    std::vector<double> v(total.begin() + begin, total.begin() + begin + n);
    for (auto& x : v) x = absolute ? std::abs(x * inv) : x * inv;
    return v;
  };
  const bool magnitude = options.criterion == Criterion::magnitude_gradient;
  table.pred_head = slice(0, nh, magnitude);
  table.pred_neuron = slice(nh, nn, magnitude);
  table.rep_head = slice(nh + nn, nh, false);
  table.rep_neuron = slice(2 * nh + nn, nn, false);
  return table;
}

/// (K_pred heads, K_pred neurons).
template <typename T>
std::pair<std::vector<double>, std::vector<double>> measure_predictive(
    const EncoderModel<T>& model, const MaskState& masks, const std::vector<Sample>& samples,
    const LogitCache& teacher, double gamma, unsigned threads = 1) {
  auto t = measure_knowledge(model, masks, samples, teacher,
                             MeasureOptions{gamma, Criterion::kpruning, threads});
  return {std::move(t.pred_head), std::move(t.pred_neuron)};
}

/// (K_rep heads, K_rep neurons): mean squared Frobenius norm of each unit's
/// output over non-padded tokens.
template <typename T>
std::pair<std::vector<double>, std::vector<double>> measure_representational(
    const EncoderModel<T>& model, const MaskState& masks, const std::vector<Sample>& samples,
    unsigned threads = 1) {
  if (samples.empty()) throw InputError("knowledge measurement needs at least one sample");
  masks.check_against(model);
  const UnitIndex index = UnitIndex::of(model);
  const std::size_t nh = index.num_heads(), nn = index.num_neurons();
  std::vector<std::vector<double>> per_sample(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t s) {
    const auto trace = forward(model, samples[s], &masks, true);
    std::vector<double> row(nh + nn, 0.0);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const std::size_t ka = sublayer_index(l, SublayerKind::attention);
      const std::size_t kf = sublayer_index(l, SublayerKind::ffn);
      if (!masks.is_processed(ka))
        for (std::size_t i = 0; i < model.layers[l].num_heads(); ++i)
          row[index.head(l, i)] = trace.sublayers[ka].heads[i].output_norm_sq;
      if (!masks.is_processed(kf))
        for (std::size_t i = 0; i < model.layers[l].num_neurons(); ++i)
          row[nh + index.neuron(l, i)] = trace.sublayers[kf].neuron_norm_sq[i];
    }
    per_sample[s] = std::move(row);
  });
  auto total = pairwise_sum(per_sample);
  for (auto& v : total) v /= static_cast<double>(samples.size());
  return {std::vector<double>(total.begin(), total.begin() + nh),
          std::vector<double>(total.begin() + nh, total.end())};
}

}  // namespace kprune
