// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <random>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using kprune::EncoderModel;
using kprune::MaskState;
using kprune::Sample;

struct Outcome {
  bool ok;
  std::string detail;
};

std::vector<double> as_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1 -------------------------------------------------------------------------
Outcome mask_identity() {
  const auto m = fixture::toy_model(101);
  const auto masks = MaskState::all_ones(m);
  std::size_t mismatches = 0;
  for (const auto& s : fixture::toy_samples(m.config, 16, 102)) {
    const auto a = kprune::logits(m, s, &masks), b = kprune::logits(m, s);
    mismatches += a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * 4) != 0;
  }
  return {mismatches == 0, std::to_string(mismatches) + "/16 inputs differ bitwise"};
}

// 2 -------------------------------------------------------------------------
Outcome materialization() {
  const auto m = fixture::toy_model(201);
  const auto samples = fixture::toy_samples(m.config, 16, 202);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto masks = fixture::random_masks(m, 300 + seed, 0.3 + 0.03 * static_cast<double>(seed));
    const auto mm = kprune::materialize(m, masks);
    for (const auto& s : samples)
      worst = std::max(worst, oracle::max_rel(as_double(kprune::logits(m, s, &masks)),
                                              as_double(kprune::logits(mm, s))));
  }
  return {worst <= 1e-5, "max relative logit difference " + fmt("%.3g", worst)};
}

// 3 -------------------------------------------------------------------------
Outcome gradients() {
  const auto c = fixture::tiny_config();
  double worst = 0, worst_fine = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = kprune::random_model<double>(c, 400 + seed);
    const auto teacher = kprune::random_model<double>(c, 500 + seed);
    const auto samples = kprune::random_samples<double>(c, 2, 2, c.max_seq_len, 600 + seed);
    for (const auto& s : samples) {
      const auto t = kprune::logits(teacher, s);
      for (auto masks : {MaskState::all_ones(m), fixture::random_masks(m, 700 + seed)}) {
        const auto g = kprune::mask_gradients(m, s, masks, std::span<const double>(t), 2.0).grads;
        auto central = [&](double& slot, double h) {
          const double v = slot;
          slot = v + h;
          const double up = oracle::kl(oracle::forward(m, s, masks), t, 2.0);
          slot = v - h;
          const double down = oracle::kl(oracle::forward(m, s, masks), t, 2.0);
          slot = v;
          return (up - down) / (2 * h);
        };
        auto check = [&](double& slot, double analytic) {
          if (std::abs(analytic) <= 1e-8) return;
          worst = std::max(worst, oracle::rel(analytic, central(slot, 1e-3)));
          worst_fine = std::max(worst_fine, oracle::rel(analytic, central(slot, 1e-5)));
          ++checked;
        };
        for (std::size_t l = 0; l < c.num_layers; ++l) {
          for (std::size_t i = 0; i < masks.heads[l].size(); ++i) check(masks.heads[l][i], g.heads[l][i]);
          for (std::size_t i = 0; i < masks.neurons[l].size(); ++i)
            check(masks.neurons[l][i], g.neurons[l][i]);
        }
      }
    }
  }
  // The h=1e-5 figure is diagnostic only; it separates step truncation from
  // gradient errors and does not affect the verdict.
  return {worst <= 1e-4 && checked > 0,
          std::to_string(checked) + " gradients, max relative error " + fmt("%.3g", worst) +
              " at h=1e-3 (diagnostic: " + fmt("%.3g", worst_fine) + " at h=1e-5)"};
}

// 4 -------------------------------------------------------------------------
Outcome representational() {
  const auto m = fixture::toy_model<double>(801);
  const auto samples = fixture::toy_samples(m.config, 4, 802);
  const auto masks = MaskState::all_ones(m);
  const auto [rh, rn] = kprune::measure_representational(m, masks, samples);
  const auto idx = kprune::UnitIndex::of(m);
  double worst = 0;
  for (std::size_t k = 0; k < m.num_sublayers(); ++k) {
    const auto& mask = masks.sublayer(k);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      double direct = 0;
      for (const auto& s : samples) {
        const auto trace = kprune::forward(m, s, &masks, true);
        const auto x = oracle::from(trace.sublayers[k].input);
        auto ablated = mask;
        ablated[i] = 0.0;
        const auto a = oracle::sublayer_residual(m, k, x, mask);
        const auto b = oracle::sublayer_residual(m, k, x, ablated);
        for (std::size_t r = 0; r < a.size(); ++r)
          for (std::size_t j = 0; j < a[r].size(); ++j) direct += (a[r][j] - b[r][j]) * (a[r][j] - b[r][j]);
      }
      direct /= static_cast<double>(samples.size());
      const double ours = k % 2 == 0 ? rh[idx.head(k / 2, i)] : rn[idx.neuron(k / 2, i)];
      worst = std::max(worst, oracle::rel(ours, direct));
    }
  }
  return {worst <= 1e-10, "max relative error " + fmt("%.3g", worst) + " over " +
                              std::to_string(rh.size() + rn.size()) + " units"};
}

// 5 -------------------------------------------------------------------------
struct Instance {
  kprune::KnowledgeTable k;
  kprune::Flops fh, fn;
  double lambda, mu;
};

std::vector<bool> flat(const kprune::Selection& sel, std::size_t nn, std::size_t nh) {
  std::vector<bool> out(nn + nh, false);
  for (auto i : sel.neurons) out[i] = true;
  for (auto i : sel.heads) out[nn + i] = true;
  return out;
}

Outcome kpms_oracle() {
  std::mt19937_64 rng(901);
  std::uniform_int_distribution<int> units(1, 12), fl(1, 20), level(0, 5);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::size_t failures = 0;
  std::string first;
  auto fail = [&](int trial, const std::string& what) {
    if (!failures++) first = "instance " + std::to_string(trial) + ": " + what;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const int total = units(rng);
    const int nh = std::uniform_int_distribution<int>(0, total)(rng), nn = total - nh;
    Instance in;
    in.fh = static_cast<kprune::Flops>(fl(rng));
    in.fn = static_cast<kprune::Flops>(fl(rng));
    in.lambda = trial % 2 ? 0.5 : 0.0;
    in.mu = trial % 3 ? 1.0 : 4.0;
    const bool coarse = trial % 4 == 0;  // coarse values produce ties
    auto value = [&] { return coarse ? 0.25 * level(rng) : u(rng); };
    for (int i = 0; i < nh; ++i) {
      in.k.pred_head.push_back(value());
      in.k.rep_head.push_back(value());
    }
    for (int i = 0; i < nn; ++i) {
      in.k.pred_neuron.push_back(value());
      in.k.rep_neuron.push_back(value());
    }
    in.k.head_processed.assign(static_cast<std::size_t>(nh), false);
    in.k.neuron_processed.assign(static_cast<std::size_t>(nn), false);
    const auto s = kprune::score(in.k, in.lambda, in.mu, in.fh, in.fn);
    std::vector<oracle::Unit> all;
    for (double v : s.neuron) all.push_back({v, in.fn});
    for (double v : s.head) all.push_back({v, in.fh});
    kprune::Flops full = 0;
    for (const auto& x : all) full += x.flops;

    std::vector<kprune::Flops> taus;
    for (int t = 0; t < 6; ++t)
      taus.push_back(std::uniform_int_distribution<kprune::Flops>(0, full + 5)(rng));
    taus.push_back(0);
    taus.push_back(full);
    std::sort(taus.begin(), taus.end());
    std::vector<bool> previous;
    for (auto tau : taus) {
      const auto sel = kprune::search_threshold(s, tau);
      const auto ours = flat(sel, static_cast<std::size_t>(nn), static_cast<std::size_t>(nh));
      const auto brute = oracle::brute_threshold(all, tau);
      if (ours != brute.pruned || sel.nu_star != brute.nu) fail(trial, "differs from exhaustive search");
      kprune::Flops survivors = 0;
      for (std::size_t i = 0; i < all.size(); ++i) survivors += ours[i] ? 0 : all[i].flops;
      if (survivors > tau) fail(trial, "infeasible");
      if (!sel.no_pruning) {
        double prev = -std::numeric_limits<double>::infinity();
        for (const auto& x : all)
          if (x.score < sel.nu_star) prev = std::max(prev, x.score);
        kprune::Flops at_prev = 0;
        for (const auto& x : all) at_prev += x.score >= prev ? x.flops : 0;
        if (at_prev <= tau) fail(trial, "not minimal");
      }
      if (!previous.empty())
        for (std::size_t i = 0; i < ours.size(); ++i)
          if (ours[i] && !previous[i]) fail(trial, "not monotone in tau");
      previous = ours;
      for (double c : {0.1, 3.7, 100.0}) {
        auto scaled = in.k;
        for (auto* v : {&scaled.pred_head, &scaled.rep_head, &scaled.pred_neuron, &scaled.rep_neuron})
          for (auto& x : *v) x *= c;
        const auto sel_c =
            kprune::search_threshold(kprune::score(scaled, in.lambda, in.mu, in.fh, in.fn), tau);
        if (flat(sel_c, static_cast<std::size_t>(nn), static_cast<std::size_t>(nh)) != ours)
          fail(trial, "selection changes when knowledge is scaled by " + fmt("%g", c));
      }
    }
  }
  return {failures == 0, failures == 0 ? "200 instances agree with exhaustive search; feasible, "
                                         "minimal, monotone, scale invariant"
                                       : std::to_string(failures) + " violations, first: " + first};
}

// 6 -------------------------------------------------------------------------
Outcome reconstruction() {
  const auto m = fixture::toy_model<double>(1001);
  const auto samples = fixture::toy_samples(m.config, 16, 1002);
  const auto cache = kprune::TeacherCache<double>::build(m, samples);
  double worst = 0;
  std::size_t increases = 0, solves = 0;
  for (std::uint64_t pattern = 0; pattern < 10; ++pattern) {
    const auto masks = fixture::random_masks(m, 1100 + pattern, 0.7);
    for (std::size_t k = 0; k < m.num_sublayers(); ++k) {
      // Lower sub-layers pruned per the pattern, sub-layer k and above intact.
      auto lower = MaskState::all_ones(m);
      for (std::size_t j = 0; j < k; ++j) lower.sublayer(j) = masks.sublayer(j);
      const auto student = kprune::materialize(m, lower);
      std::vector<bool> keep(masks.sublayer(k).size());
      for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = masks.sublayer(k)[i] != 0.0;
      keep[pattern % keep.size()] = true;  // at least one survivor

      kprune::SublayerCapture<double> cap;
      cap.sublayer = k;
      kprune::measure_knowledge(student, MaskState::all_ones(student), samples, cache.logits,
                                {}, &cap);
      auto layer = student.layers[k / 2];
      const auto targets = cache.sublayer_targets(k);
      const auto r = k % 2 == 0 ? kprune::reconstruct_mha(layer, keep, cap, targets)
                                : kprune::reconstruct_ffn(layer, keep, cap, targets);
      increases += r.residual_after > r.residual_before;

      oracle::Mat p, q;
      const auto& bias = k % 2 == 0 ? layer.attn_out_bias : layer.ffn_out_bias;
      for (std::size_t s = 0; s < samples.size(); ++s)
        for (std::size_t t = 0; t < cap.inputs[s].rows(); ++t) {
          std::vector<double> prow, qrow;
          for (std::size_t i = 0; i < keep.size(); ++i) {
            if (!keep[i]) continue;
            if (k % 2 == 0) {
              for (std::size_t c = 0; c < m.config.head_dim; ++c)
                prow.push_back(cap.head_features[s][i](t, c));
            } else {
              prow.push_back(cap.activations[s](t, i));
            }
          }
          for (std::size_t j = 0; j < m.config.embed_dim; ++j)
            qrow.push_back(targets[s](t, j) - cap.inputs[s](t, j) - bias[j]);
          p.push_back(std::move(prow));
          q.push_back(std::move(qrow));
        }
      const double ref = oracle::residual(p, oracle::normal_equations(p, q), q);
      // Residuals at roundoff level (nothing pruned) are compared against the
      // problem scale rather than each other.
      double scale = 0;
      for (const auto& row : q)
        for (double v : row) scale += v * v;
      worst = std::max(worst, oracle::rel(r.residual_after, ref, 1e-12 * scale));
      if (std::getenv("KPRUNE_DEBUG"))
        std::fprintf(stderr, "pattern %lu k %zu: before %.6g after %.6g oracle %.6g rows %zu cols %zu status %s\n",
                     static_cast<unsigned long>(pattern), k, r.residual_before, r.residual_after, ref, p.size(),
                     p.empty() ? 0 : p[0].size(), kprune::to_string(r.status));
      ++solves;
    }
  }
  return {increases == 0 && worst <= 1e-8,
          std::to_string(solves) + " solves, " + std::to_string(increases) +
              " residual increases, max relative gap to normal equations " + fmt("%.3g", worst)};
}

// 7 -------------------------------------------------------------------------
EncoderModel<float> planted_model(std::uint64_t seed) {
  const auto c = fixture::toy_config();
  kprune::SynthOptions opt;
  opt.heads = c.num_heads / 2;
  opt.neurons = c.ffn_neurons / 2;
  return kprune::plant_redundancy(kprune::random_model<float>(c, seed, opt));
}

double accuracy(const EncoderModel<float>& m, const std::vector<Sample>& samples) {
  return kprune::evaluate(m, samples).accuracy;
}

struct PlantedRun {
  double worst = 0, acc_teacher = 0, acc_pruned = 0, compression = 0;
  bool within_budget = false;
};

PlantedRun run_planted(const EncoderModel<float>& teacher) {
  const auto& c = teacher.config;
  const auto train = kprune::random_samples(c, 64, 1, c.max_seq_len, 1202, &teacher);
  const auto held = kprune::random_samples(c, 64, 1, c.max_seq_len, 1203, &teacher);
  const auto tau = kprune::budget_from_keep_ratio(teacher, 0.5);
  const auto r = kprune::prune_model(teacher, train, tau, {});
  PlantedRun out;
  for (const auto& s : held)
    out.worst = std::max(out.worst, oracle::max_rel(as_double(kprune::logits(teacher, s)),
                                                    as_double(kprune::logits(r.model, s))));
  out.acc_teacher = accuracy(teacher, held);
  out.acc_pruned = accuracy(r.model, held);
  out.compression = r.report.compression_rate;
  out.within_budget = kprune::prunable_flops(r.model) <= tau;
  return out;
}

Outcome planted_redundancy() {
  const auto c = fixture::toy_config();
  kprune::SynthOptions opt;
  opt.heads = c.num_heads / 2;
  opt.neurons = c.ffn_neurons / 2;
  const auto base = kprune::random_model<float>(c, 1201, opt);
  const auto teacher = kprune::plant_redundancy(base);
  const auto r = run_planted(teacher);

  // Diagnostics, not part of the verdict: how many duplicate pairs share a
  // bitwise-equal representational score (they can only be pruned together),
  // and the same run with a 0.45/0.55 split that breaks the ties.
  const auto samples = kprune::random_samples(c, 64, 1, c.max_seq_len, 1202, &teacher);
  const auto [rh, rn] = kprune::measure_representational(teacher, MaskState::all_ones(teacher), samples);
  std::size_t pairs = 0, tied = 0;
  const std::size_t h2 = opt.heads, n2 = opt.neurons;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (std::size_t i = 0; i < h2; ++i, ++pairs)
      tied += rh[l * 2 * h2 + i] == rh[l * 2 * h2 + h2 + i];
    for (std::size_t i = 0; i < n2; ++i, ++pairs)
      tied += rn[l * 2 * n2 + i] == rn[l * 2 * n2 + n2 + i];
  }
  const auto split = run_planted(kprune::plant_redundancy(base, 0.45));

  return {r.worst <= 1e-3 && r.acc_pruned == r.acc_teacher && r.within_budget,
          "compression " + fmt("%.4f", r.compression) + ", max relative logit error " +
              fmt("%.3g", r.worst) + ", accuracy " + fmt("%.4f", r.acc_pruned) + " vs teacher " +
              fmt("%.4f", r.acc_teacher) + " [diagnostic: " + std::to_string(tied) + "/" +
              std::to_string(pairs) + " duplicate pairs tied; 0.45/0.55 split gives error " +
              fmt("%.3g", split.worst) + ", accuracy " + fmt("%.4f", split.acc_pruned) + "]"};
}

// 8 -------------------------------------------------------------------------
Outcome budget_exactness() {
  std::size_t runs = 0, violations = 0;
  for (int variant = 0; variant < 2; ++variant) {
    const auto m = variant == 0 ? fixture::toy_model(1301) : planted_model(1302);
    const auto samples = kprune::random_samples(m.config, 48, 1, m.config.max_seq_len, 1303, &m);
    for (double keep : {0.8, 0.6, 0.4, 0.25}) {
      const auto tau = kprune::budget_from_keep_ratio(m, keep);
      const auto r = kprune::prune_model(m, samples, tau, {});
      ++runs;
      bool ok = kprune::prunable_flops(r.model) <= tau;
      kprune::Flops prev = tau;
      for (const auto& it : r.report.iterations) {
        ok = ok && it.budget_remaining <= prev;
        prev = it.budget_remaining;
      }
      violations += !ok;
    }
  }
  return {violations == 0, std::to_string(runs) + " runs, " + std::to_string(violations) +
                               " over budget or with an increasing budget trace"};
}

// 9 -------------------------------------------------------------------------
Outcome ablation() {
  struct Variant {
    const char* name;
    kprune::PruneSettings settings;
  };
  std::vector<Variant> variants(4);
  variants[0].name = "magnitude-gradient one-shot";
  variants[0].settings.criterion = kprune::Criterion::magnitude_gradient;
  variants[0].settings.one_shot = true;
  variants[1].name = "+KPP";
  variants[1].settings.criterion = kprune::Criterion::magnitude_gradient;
  variants[2].name = "+K_pred";
  variants[2].settings.lambda = 0.0;
  variants[3].name = "+K_rep";  // full method, default hyperparameters

  auto c = fixture::toy_config();
  std::vector<std::vector<double>> kl(variants.size());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    kprune::SynthOptions opt;
    opt.heads = 1;
    opt.neurons = 12;
    const auto base = kprune::random_model<float>(c, 1400 + seed, opt);
    const auto teacher = kprune::add_noise_units(kprune::plant_redundancy(base), 2, 8, 0.05,
                                                 1500 + seed);
    const auto train = kprune::random_samples(c, 64, 1, c.max_seq_len, 1600 + seed, &teacher);
    const auto held = kprune::random_samples(c, 64, 1, c.max_seq_len, 1700 + seed, &teacher);
    const auto reference = kprune::teacher_logits(teacher, held);
    const auto tau = kprune::budget_from_keep_ratio(teacher, 0.4);
    for (std::size_t v = 0; v < variants.size(); ++v) {
      const auto r = kprune::prune_model(teacher, train, tau, variants[v].settings);
      kl[v].push_back(kprune::evaluate(r.model, held, &reference).mean_kl);
    }
    if (std::getenv("KPRUNE_DEBUG"))
      std::fprintf(stderr, "seed %lu: %.4g %.4g %.4g %.4g\n", static_cast<unsigned long>(seed),
                   kl[0].back(), kl[1].back(), kl[2].back(), kl[3].back());
  }
  std::vector<double> med;
  std::string detail = "median KL:";
  for (std::size_t v = 0; v < variants.size(); ++v) {
    auto x = kl[v];
    std::sort(x.begin(), x.end());
    med.push_back(0.5 * (x[4] + x[5]));
    detail += std::string(" ") + variants[v].name + "=" + fmt("%.4g", med.back());
  }
  const bool ok = med[0] >= med[1] && med[1] >= med[2] && med[2] >= med[3];
  return {ok, detail};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "all-ones mask equals mask-free forward", 1, mask_identity},
      {2, "materialization equivalence", 5, materialization},
      {3, "mask gradients vs finite differences", 30, gradients},
      {4, "representational knowledge closed form", 10, representational},
      {5, "mask search vs exhaustive oracle", 10, kpms_oracle},
      {6, "least-squares reconstruction", 30, reconstruction},
      {7, "planted redundancy end-to-end", 120, planted_redundancy},
      {8, "budget exactness", 120, budget_exactness},
      {9, "ablation direction", 300, ablation},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_s;
    const bool pass = o.ok && in_time;
    failed += !pass;
    std::printf("[%s] %d %s: %s (%.2fs, limit %.0fs%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", too slow");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
