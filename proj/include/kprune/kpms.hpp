// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Knowledge-preserving mask search: FLOPs-normalized unit scores and the
// ascending threshold sweep that picks the pruning sets under a budget.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <tuple>
#include <vector>

#include "kprune/knowledge.hpp"
#include "kprune/model.hpp"

namespace kprune {

struct ScoreTable {
  std::vector<double> head;
  std::vector<double> neuron;
  std::vector<bool> head_candidate;
  std::vector<bool> neuron_candidate;
  double lambda = 0.0;
  double mu = 1.0;
  Flops f_head = 0;
  Flops f_neuron = 0;
};

/// S_neuron = (K_pred + lambda K_rep) / F_neuron and
/// S_head = mu (K_pred + lambda K_rep) / F_head. Units of processed
/// sub-layers are not candidates unless `include_processed` is set, in which
/// case they keep their (zero) knowledge and take part in the sweep.
inline ScoreTable score(const KnowledgeTable& k, double lambda, double mu, Flops f_head,
                        Flops f_neuron, bool include_processed = false) {
  detail::require(lambda >= 0.0, "score: lambda must be nonnegative");
  detail::require(mu > 0.0, "score: mu must be positive");
  detail::require(f_head > 0 && f_neuron > 0, "score: FLOPs per unit must be positive");
  ScoreTable s;
  s.lambda = lambda;
  s.mu = mu;
  s.f_head = f_head;
  s.f_neuron = f_neuron;
  s.head.resize(k.pred_head.size());
  s.neuron.resize(k.pred_neuron.size());
  s.head_candidate.resize(s.head.size());
  s.neuron_candidate.resize(s.neuron.size());
  for (std::size_t i = 0; i < s.head.size(); ++i) {
    s.head[i] = mu * (k.pred_head[i] + lambda * k.rep_head[i]) / static_cast<double>(f_head);
    s.head_candidate[i] = include_processed || !k.head_processed[i];
  }
  for (std::size_t i = 0; i < s.neuron.size(); ++i) {
    s.neuron[i] = (k.pred_neuron[i] + lambda * k.rep_neuron[i]) / static_cast<double>(f_neuron);
    s.neuron_candidate[i] = include_processed || !k.neuron_processed[i];
  }
  return s;
}

struct Selection {
  std::vector<std::size_t> heads;    // flat head indices to prune, ascending
  std::vector<std::size_t> neurons;  // flat neuron indices to prune, ascending
  double nu_star = -std::numeric_limits<double>::infinity();
  Flops projected_flops = 0;  // FLOPs of the surviving candidates
  bool no_pruning = false;    // the budget already held
};

namespace detail {

struct ScoredUnit {
  double score;
  int kind;  // 0 = neuron, 1 = head
  std::size_t index;
};

}  // namespace detail

/// Ascending threshold sweep. The candidate threshold walks the sorted
/// scores until the candidates scoring >= nu fit in tau; units scoring
/// strictly below nu* are selected. After the last score the threshold is
/// +inf, which selects every candidate.
inline Selection search_threshold(const ScoreTable& s, Flops tau) {
  std::vector<detail::ScoredUnit> sorted;
  std::size_t n_neurons = 0, n_heads = 0;
  for (std::size_t i = 0; i < s.neuron.size(); ++i)
    if (s.neuron_candidate[i]) {
      sorted.push_back({s.neuron[i], 0, i});
      ++n_neurons;
    }
  for (std::size_t i = 0; i < s.head.size(); ++i)
    if (s.head_candidate[i]) {
      sorted.push_back({s.head[i], 1, i});
      ++n_heads;
    }
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return std::tie(a.score, a.kind, a.index) < std::tie(b.score, b.kind, b.index);
  });

  Selection sel;
  Flops f = n_neurons * s.f_neuron + n_heads * s.f_head;
  if (f <= tau) {
    sel.no_pruning = true;
    sel.projected_flops = f;
    return sel;
  }
  // suffix[q]: FLOPs of sorted[q..]. A threshold equal to sorted[p].score
  // keeps everything from the first position holding that score.
  std::vector<Flops> suffix(sorted.size() + 1, 0);
  for (std::size_t q = sorted.size(); q-- > 0;)
    suffix[q] = suffix[q + 1] + (sorted[q].kind == 0 ? s.f_neuron : s.f_head);
  std::size_t p = 0, first = 0;
  double nu = -std::numeric_limits<double>::infinity();
  while (f > tau) {
    if (p == sorted.size()) {
      nu = std::numeric_limits<double>::infinity();
      f = 0;
      break;
    }
    if (p == 0 || sorted[p - 1].score != sorted[p].score) first = p;
    nu = sorted[p].score;
    f = suffix[first];
    ++p;
  }
  sel.nu_star = nu;
  sel.projected_flops = f;
  for (std::size_t i = 0; i < s.neuron.size(); ++i)
    if (s.neuron_candidate[i] && s.neuron[i] < nu) sel.neurons.push_back(i);
  for (std::size_t i = 0; i < s.head.size(); ++i)
    if (s.head_candidate[i] && s.head[i] < nu) sel.heads.push_back(i);
  return sel;
}

}  // namespace kprune
