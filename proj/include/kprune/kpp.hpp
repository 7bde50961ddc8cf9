// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Knowledge-preserving pruning: sub-layer by sub-layer from the bottom,
// measure knowledge on the current model, search the pruning sets under the
// remaining budget, commit only the current sub-layer's selection, retune
// its output projections by least squares against cached teacher outputs,
// then charge the survivors to the budget.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "kprune/dataset.hpp"
#include "kprune/knowledge.hpp"
#include "kprune/kpms.hpp"
#include "kprune/model.hpp"
#include "kprune/runtime.hpp"
#include "kprune/tensor.hpp"

namespace kprune {

/// Pre-layernorm residual outputs X + Sub(X) of the unpruned model for every
/// sample and sub-layer, plus its logits. Built once, never modified.
template <typename T>
struct TeacherCache {
  std::vector<std::vector<Matrix<T>>> targets;  // [sample][sublayer], s x d
  LogitCache logits;

  static TeacherCache build(const EncoderModel<T>& model, const std::vector<Sample>& samples,
                            unsigned threads = 1) {
    TeacherCache c;
    c.targets.resize(samples.size());
    c.logits.resize(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t s) {
      auto trace = forward(model, samples[s], nullptr, true);
      for (auto& sub : trace.sublayers) c.targets[s].push_back(std::move(sub.residual));
      c.logits[s].assign(trace.logits.begin(), trace.logits.end());
    });
    return c;
  }

  std::vector<Matrix<T>> sublayer_targets(std::size_t k) const {
    std::vector<Matrix<T>> out;
    out.reserve(targets.size());
    for (const auto& per_sample : targets) out.push_back(per_sample[k]);
    return out;
  }
};

enum class ReconstructionStatus {
  solved,             // least-squares weights written back
  kept_original,      // solved, but the original weights fit at least as well
  skipped_unchanged,  // nothing pruned here or below: residual already minimal
  skipped_empty,      // no surviving units: output is residual + bias
};

inline const char* to_string(ReconstructionStatus s) {
  switch (s) {
    case ReconstructionStatus::solved: return "solved";
    case ReconstructionStatus::kept_original: return "kept_original";
    case ReconstructionStatus::skipped_unchanged: return "skipped_unchanged";
    case ReconstructionStatus::skipped_empty: return "skipped_empty";
  }
  return "unknown";
}

struct ReconstructionResult {
  double residual_before = 0.0;  // pruned units removed, survivors untouched
  double residual_after = 0.0;
  ReconstructionStatus status = ReconstructionStatus::solved;
  bool rank_deficient = false;
};

namespace detail {

/// Stacks per-sample token rows: P gets the kept unit features side by side,
/// Q = target - input - bias.
template <typename T, typename FeatureFn>
void build_system(const std::vector<Matrix<T>>& inputs, const std::vector<Matrix<T>>& targets,
                  std::span<const T> bias, std::size_t width, FeatureFn&& features,
                  Matrix<double>& p, Matrix<double>& q) {
  std::size_t rows = 0;
  for (const auto& x : inputs) rows += x.rows();
  const std::size_t d = bias.size();
  p = Matrix<double>(rows, width);
  q = Matrix<double>(rows, d);
  std::size_t r0 = 0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const auto& x = inputs[s];
    const auto& t = targets[s];
    detail::require(t.rows() == x.rows() && t.cols() == d, "reconstruct: target shape mismatch");
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j)
        q(r0 + r, j) = static_cast<double>(t(r, j)) - static_cast<double>(x(r, j)) -
                       static_cast<double>(bias[j]);
    features(s, r0, p);
    r0 += x.rows();
  }
}

inline double residual_sq(const Matrix<double>& p, const Matrix<double>& q,
                          const Matrix<double>& w) {
  if (p.cols() == 0) return frobenius_sq(q);
  return (to_eigen(q) - to_eigen(p) * to_eigen(w)).squaredNorm();
}

template <typename T>
ReconstructionResult solve_and_write(const Matrix<double>& p, const Matrix<double>& q,
                                     const Matrix<double>& w0, bool solve,
                                     const std::function<void(const Matrix<double>&)>& write) {
  ReconstructionResult res;
  res.residual_before = residual_sq(p, q, w0);
  res.residual_after = res.residual_before;
  if (p.cols() == 0) {
    res.status = ReconstructionStatus::skipped_empty;
    return res;
  }
  if (!solve) {
    res.status = ReconstructionStatus::skipped_unchanged;
    return res;
  }
  const LstsqSolution sol = lstsq_solve(p, q);
  res.rank_deficient = sol.rank_deficient;
  // Evaluate what will actually be stored.
  const Matrix<double> stored = cast<double>(cast<T>(sol.solution));
  const double after = residual_sq(p, q, stored);
  if (after <= res.residual_before) {
    write(stored);
    res.residual_after = after;
    res.status = ReconstructionStatus::solved;
  } else {
    res.status = ReconstructionStatus::kept_original;
  }
  return res;
}

}  // namespace detail

/// Retunes the output projections of the kept heads of an MHA sub-layer so
/// that X_S + sum_i W_i f_i(X_S) + B best matches the teacher target. Pruned
/// heads are left in place (callers remove them); their blocks are ignored.
/// `solve == false` only reports the residual.
template <typename T>
ReconstructionResult reconstruct_mha(EncoderLayer<T>& layer, const std::vector<bool>& keep,
                                     const SublayerCapture<T>& capture,
                                     const std::vector<Matrix<T>>& targets, bool solve = true) {
  detail::require(keep.size() == layer.heads.size(), "reconstruct_mha: keep mask length mismatch");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) kept.push_back(i);
  const std::size_t dh = kept.empty() ? 0 : layer.heads[kept[0]].output.cols();
  const std::size_t d = layer.attn_out_bias.size();

  Matrix<double> p, q;
  detail::build_system(
      capture.inputs, targets, std::span<const T>(layer.attn_out_bias), kept.size() * dh,
      [&](std::size_t s, std::size_t r0, Matrix<double>& pm) {
        for (std::size_t j = 0; j < kept.size(); ++j) {
          const auto& f = capture.head_features[s][kept[j]];
          for (std::size_t r = 0; r < f.rows(); ++r)
            for (std::size_t c = 0; c < dh; ++c) pm(r0 + r, j * dh + c) = f(r, c);
        }
      },
      p, q);
  Matrix<double> w0(kept.size() * dh, d);
  for (std::size_t j = 0; j < kept.size(); ++j) {
    const auto& out = layer.heads[kept[j]].output;  // d x d_h
    for (std::size_t c = 0; c < dh; ++c)
      for (std::size_t e = 0; e < d; ++e) w0(j * dh + c, e) = out(e, c);
  }
  return detail::solve_and_write<T>(p, q, w0, solve, [&](const Matrix<double>& w) {
    for (std::size_t j = 0; j < kept.size(); ++j) {
      auto& out = layer.heads[kept[j]].output;
      for (std::size_t c = 0; c < dh; ++c)
        for (std::size_t e = 0; e < d; ++e) out(e, c) = static_cast<T>(w(j * dh + c, e));
    }
  });
}

/// FFN counterpart of reconstruct_mha: retunes the output columns v_i of
/// the kept neurons.
template <typename T>
ReconstructionResult reconstruct_ffn(EncoderLayer<T>& layer, const std::vector<bool>& keep,
                                     const SublayerCapture<T>& capture,
                                     const std::vector<Matrix<T>>& targets, bool solve = true) {
  detail::require(keep.size() == layer.num_neurons(), "reconstruct_ffn: keep mask length mismatch");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) kept.push_back(i);
  const std::size_t d = layer.ffn_out_bias.size();

  Matrix<double> p, q;
  detail::build_system(
      capture.inputs, targets, std::span<const T>(layer.ffn_out_bias), kept.size(),
      [&](std::size_t s, std::size_t r0, Matrix<double>& pm) {
        const auto& g = capture.activations[s];
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < kept.size(); ++j) pm(r0 + r, j) = g(r, kept[j]);
      },
      p, q);
  Matrix<double> w0(kept.size(), d);
  for (std::size_t j = 0; j < kept.size(); ++j)
    for (std::size_t e = 0; e < d; ++e) w0(j, e) = layer.ffn_out(e, kept[j]);
  return detail::solve_and_write<T>(p, q, w0, solve, [&](const Matrix<double>& w) {
    for (std::size_t j = 0; j < kept.size(); ++j)
      for (std::size_t e = 0; e < d; ++e) layer.ffn_out(e, kept[j]) = static_cast<T>(w(j, e));
  });
}

// ---------------------------------------------------------------------------
// Driver

struct PruneSettings {
  double gamma = 2.0;
  double lambda = 0.00025;
  double mu = 64.0;
  Criterion criterion = Criterion::kpruning;
  bool kpms_global = false;  // literal single-budget accounting over all units
  bool one_shot = false;     // one global selection, no per-sub-layer reconstruction
  unsigned threads = 1;
};

struct IterationRecord {
  long sublayer = -1;  // -1 for the one-shot pass
  std::string kind;    // "mha", "ffn" or "all"
  double nu_star = 0.0;
  bool no_pruning = false;
  std::size_t pruned_heads = 0;
  std::size_t pruned_neurons = 0;
  std::vector<std::size_t> pruned_heads_per_layer;
  std::vector<std::size_t> pruned_neurons_per_layer;
  double residual_before = 0.0;
  double residual_after = 0.0;
  std::string reconstruction;
  Flops budget_remaining = 0;
};

struct PruneReport {
  PruneSettings settings;
  Flops tau = 0;
  std::size_t num_samples = 0;
  std::vector<IterationRecord> iterations;
  Flops flops_before = 0;
  Flops flops_after = 0;
  Flops total_flops_before = 0;
  Flops total_flops_after = 0;
  double compression_rate = 0.0;
  bool budget_satisfied = true;
};

template <typename T>
struct PruneResult {
  EncoderModel<T> model;
  PruneReport report;
};

namespace detail {

inline Flops saturating_sub(Flops a, Flops b) { return a > b ? a - b : 0; }

/// Zero-mask vectors for the flat indices a selection picked.
template <typename T>
MaskState selection_masks(const EncoderModel<T>& model, const UnitIndex& index,
                          const Selection& sel) {
  MaskState m = MaskState::all_ones(model);
  for (std::size_t h : sel.heads) {
    auto [l, i] = index.head_at(h);
    m.heads[l][i] = 0.0;
  }
  for (std::size_t n : sel.neurons) {
    auto [l, i] = index.neuron_at(n);
    m.neurons[l][i] = 0.0;
  }
  return m;
}

}  // namespace detail

template <typename T>
PruneResult<T> prune_model(const EncoderModel<T>& model, const std::vector<Sample>& samples,
                           Flops tau, const PruneSettings& settings) {
  if (samples.empty()) throw InputError("pruning needs at least one sample");
  for (const auto& s : samples) check_sample(s, model.config);
  model.validate();

  const Flops f_head = flops_per_head(model.config);
  const Flops f_neuron = flops_per_neuron(model.config);
  const double lambda = settings.criterion == Criterion::magnitude_gradient ? 0.0 : settings.lambda;
  const MeasureOptions measure{settings.gamma, settings.criterion, settings.threads};

  PruneReport report;
  report.settings = settings;
  report.tau = tau;
  report.num_samples = samples.size();
  report.flops_before = prunable_flops(model);
  report.total_flops_before = model_flops(model);

  const auto teacher = TeacherCache<T>::build(model, samples, settings.threads);
  EncoderModel<T> student = model;

  if (settings.one_shot) {
    MaskState masks = MaskState::all_ones(student);
    const auto table = measure_knowledge(student, masks, samples, teacher.logits, measure);
    const auto sel = search_threshold(score(table, lambda, settings.mu, f_head, f_neuron), tau);
    const MaskState pruned = detail::selection_masks(student, table.index, sel);
    IterationRecord rec;
    rec.kind = "all";
    rec.nu_star = sel.nu_star;
    rec.no_pruning = sel.no_pruning;
    rec.pruned_heads = sel.heads.size();
    rec.pruned_neurons = sel.neurons.size();
    for (std::size_t l = 0; l < student.layers.size(); ++l) {
      std::size_t h = 0, n = 0;
      for (double m : pruned.heads[l]) h += m == 0.0;
      for (double m : pruned.neurons[l]) n += m == 0.0;
      rec.pruned_heads_per_layer.push_back(h);
      rec.pruned_neurons_per_layer.push_back(n);
    }
    rec.reconstruction = "none";
    student = materialize(student, pruned);
    rec.budget_remaining = detail::saturating_sub(tau, prunable_flops(student));
    report.iterations.push_back(std::move(rec));
  } else {
    Flops remaining = tau;
    bool input_changed = false;
    std::vector<bool> processed(student.num_sublayers(), false);
    for (std::size_t k = 0; k < student.num_sublayers(); ++k) {
      const std::size_t l = sublayer_layer(k);
      const SublayerKind kind = sublayer_kind(k);
      MaskState masks = MaskState::all_ones(student);
      masks.processed = processed;

      SublayerCapture<T> capture;
      capture.sublayer = k;
      const auto table =
          measure_knowledge(student, masks, samples, teacher.logits, measure, &capture);
      const auto scores =
          score(table, lambda, settings.mu, f_head, f_neuron, settings.kpms_global);
      const auto sel = search_threshold(scores, settings.kpms_global ? tau : remaining);

      // Commit only this sub-layer's part of the selection.
      auto& layer = student.layers[l];
      const std::size_t units =
          kind == SublayerKind::attention ? layer.num_heads() : layer.num_neurons();
      std::vector<bool> keep(units, true);
      const auto& picked = kind == SublayerKind::attention ? sel.heads : sel.neurons;
      for (std::size_t flat : picked) {
        auto [pl, pi] = kind == SublayerKind::attention ? table.index.head_at(flat)
                                                        : table.index.neuron_at(flat);
        if (pl == l) keep[pi] = false;
      }
      std::size_t pruned = 0;
      for (bool kpt : keep) pruned += !kpt;

      const auto targets = teacher.sublayer_targets(k);
      const bool solve = pruned > 0 || input_changed;
      const ReconstructionResult rec_result =
          kind == SublayerKind::attention ? reconstruct_mha(layer, keep, capture, targets, solve)
                                          : reconstruct_ffn(layer, keep, capture, targets, solve);

      std::vector<double> mask(keep.begin(), keep.end());
      if (kind == SublayerKind::attention)
        detail::prune_mha(layer, mask);
      else
        detail::prune_ffn(layer, mask);
      processed[k] = true;
      input_changed = input_changed || pruned > 0 ||
                      rec_result.status == ReconstructionStatus::solved;

      const Flops survivors = (units - pruned) *
                              (kind == SublayerKind::attention ? f_head : f_neuron);
      remaining = detail::saturating_sub(remaining, survivors);

      IterationRecord rec;
      rec.sublayer = static_cast<long>(k);
      rec.kind = to_string(kind);
      rec.nu_star = sel.nu_star;
      rec.no_pruning = sel.no_pruning;
      rec.pruned_heads = kind == SublayerKind::attention ? pruned : 0;
      rec.pruned_neurons = kind == SublayerKind::ffn ? pruned : 0;
      rec.pruned_heads_per_layer.assign(student.layers.size(), 0);
      rec.pruned_neurons_per_layer.assign(student.layers.size(), 0);
      (kind == SublayerKind::attention ? rec.pruned_heads_per_layer
                                       : rec.pruned_neurons_per_layer)[l] = pruned;
      rec.residual_before = rec_result.residual_before;
      rec.residual_after = rec_result.residual_after;
      rec.reconstruction = to_string(rec_result.status);
      rec.budget_remaining = remaining;
      report.iterations.push_back(std::move(rec));
    }
  }

  report.flops_after = prunable_flops(student);
  report.total_flops_after = model_flops(student);
  report.compression_rate = compression_rate(report.flops_before, report.flops_after);
  report.budget_satisfied = report.flops_after <= tau;
  if (!report.budget_satisfied && !settings.kpms_global)
    throw Error("internal: pruned model exceeds the FLOPs budget");
  return {std::move(student), std::move(report)};
}

/// Converts a kept fraction of the prunable FLOPs into an absolute budget.
template <typename T>
Flops budget_from_keep_ratio(const EncoderModel<T>& model, double keep) {
  if (!(keep >= 0.0 && keep <= 1.0)) throw InputError("kept FLOPs fraction must lie in [0, 1]");
  return static_cast<Flops>(std::floor(keep * static_cast<double>(prunable_flops(model))));
}

// ---------------------------------------------------------------------------
// Report serialization

/// Rounds to 9 significant digits so reports diff cleanly.
inline double round9(double v) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline nlohmann::ordered_json to_json(const PruneReport& r) {
  using nlohmann::ordered_json;
  auto number = [](double v) -> ordered_json {
    if (std::isinf(v)) return v < 0 ? "-inf" : "inf";
    return round9(v);
  };
  ordered_json j;
  auto& hp = j["hyperparameters"];
  hp["gamma"] = round9(r.settings.gamma);
  hp["lambda"] = round9(r.settings.lambda);
  hp["mu"] = round9(r.settings.mu);
  hp["tau"] = r.tau;
  hp["criterion"] = to_string(r.settings.criterion);
  hp["kpms_global"] = r.settings.kpms_global;
  hp["one_shot"] = r.settings.one_shot;
  hp["kl_direction"] = "KL(student || teacher)";
  hp["num_samples"] = r.num_samples;
  j["iterations"] = ordered_json::array();
  for (const auto& it : r.iterations) {
    ordered_json e;
    e["sublayer"] = it.sublayer;
    e["kind"] = it.kind;
    e["nu_star"] = number(it.nu_star);
    e["pruned_heads"] = it.pruned_heads;
    e["pruned_neurons"] = it.pruned_neurons;
    e["residual_before"] = number(it.residual_before);
    e["residual_after"] = number(it.residual_after);
    e["budget_remaining"] = it.budget_remaining;
    e["no_pruning"] = it.no_pruning;
    e["reconstruction"] = it.reconstruction;
    e["pruned_heads_per_layer"] = it.pruned_heads_per_layer;
    e["pruned_neurons_per_layer"] = it.pruned_neurons_per_layer;
    j["iterations"].push_back(std::move(e));
  }
  auto& s = j["summary"];
  s["flops_before"] = r.flops_before;
  s["flops_after"] = r.flops_after;
  s["compression_rate"] = round9(r.compression_rate);
  s["total_flops_before"] = r.total_flops_before;
  s["total_flops_after"] = r.total_flops_after;
  s["budget_satisfied"] = r.budget_satisfied;
  return j;
}

}  // namespace kprune
