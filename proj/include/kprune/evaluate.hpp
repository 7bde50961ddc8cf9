// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "kprune/dataset.hpp"
#include "kprune/knowledge.hpp"
#include "kprune/parallel.hpp"
#include "kprune/runtime.hpp"

namespace kprune {

struct EvalResult {
  double accuracy = 0.0;   // over labeled samples
  double mean_loss = 0.0;  // cross-entropy over labeled samples
  double mean_kl = 0.0;    // KL(model || reference) at temperature 1, when a reference is given
  std::size_t labeled = 0;
};

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

template <typename T>
EvalResult evaluate(const EncoderModel<T>& model, const std::vector<Sample>& samples,
                    const LogitCache* reference = nullptr, unsigned threads = 1) {
  if (samples.empty()) throw InputError("evaluation needs at least one sample");
  const LogitCache z = teacher_logits(model, samples, threads);
  EvalResult r;
  double correct = 0.0, loss = 0.0, kl = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::span<const double> zi(z[i]);
    if (samples[i].label >= 0) {
      ++r.labeled;
      correct += argmax(zi) == static_cast<std::size_t>(samples[i].label);
      loss += cross_entropy(zi, samples[i].label);
    }
    if (reference) kl += kl_distill_loss(zi, std::span<const double>((*reference)[i]), 1.0);
  }
  if (r.labeled) {
    r.accuracy = correct / static_cast<double>(r.labeled);
    r.mean_loss = loss / static_cast<double>(r.labeled);
  }
  r.mean_kl = kl / static_cast<double>(samples.size());
  return r;
}

}  // namespace kprune
