// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. run_cli() is separate from main() so tests can
// drive it with captured streams.

#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "kprune/container.hpp"
#include "kprune/dataset.hpp"
#include "kprune/evaluate.hpp"
#include "kprune/knowledge.hpp"
#include "kprune/kpms.hpp"
#include "kprune/kpp.hpp"
#include "kprune/model.hpp"
#include "kprune/synth.hpp"

namespace kprune {

namespace detail {

inline std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void check_hyper(double gamma, double lambda, double mu) {
  if (!(gamma > 0)) throw InputError("gamma must be positive, got " + fmt9(gamma));
  if (!(lambda >= 0)) throw InputError("lambda must be nonnegative, got " + fmt9(lambda));
  if (!(mu > 0)) throw InputError("mu must be positive, got " + fmt9(mu));
}

struct PruneFlags {
  std::string model, samples, out, report;
  std::optional<double> keep_flops, target_compression;
  double gamma = 2.0, lambda = 0.00025, mu = 64.0;
  std::uint64_t seed = 0;
  std::size_t max_samples = 0;  // 0 = all
  bool kpms_global = false, one_shot = false;
  std::string criterion = "kpruning";
  unsigned threads = 1;

  PruneSettings settings() const {
    check_hyper(gamma, lambda, mu);
    PruneSettings s;
    s.gamma = gamma;
    s.lambda = lambda;
    s.mu = mu;
    s.criterion = criterion == "magnitude-gradient" ? Criterion::magnitude_gradient
                                                    : Criterion::kpruning;
    s.kpms_global = kpms_global;
    s.one_shot = one_shot;
    s.threads = threads;
    return s;
  }

  Flops budget(const EncoderModel<float>& m) const {
    if (keep_flops) return budget_from_keep_ratio(m, *keep_flops);
    if (!(*target_compression >= 0.0 && *target_compression <= 1.0))
      throw InputError("--target-compression must lie in [0, 1]");
    return budget_from_keep_ratio(m, 1.0 - *target_compression);
  }
};

inline void add_model_flags(CLI::App* cmd, std::string& model, std::string& samples) {
  cmd->add_option("--model", model, "input .kpz container")->required();
  cmd->add_option("--samples", samples, "JSONL samples")->required();
}

inline void add_hyper_flags(CLI::App* cmd, PruneFlags& f) {
  cmd->add_option("--gamma", f.gamma, "distillation temperature")->capture_default_str();
  cmd->add_option("--lambda", f.lambda, "weight of representational knowledge")
      ->capture_default_str();
  cmd->add_option("--mu", f.mu, "head score multiplier")->capture_default_str();
  cmd->add_option("--criterion", f.criterion, "unit scoring criterion")
      ->check(CLI::IsMember({"kpruning", "magnitude-gradient"}))
      ->capture_default_str();
  cmd->add_option("--threads", f.threads, "worker threads for per-sample work")
      ->check(CLI::Range(1u, 1024u));
  cmd->add_option("--seed", f.seed, "seed for sample subsetting");
  cmd->add_option("--max-samples", f.max_samples, "use a random subset of this many samples");
}

inline void add_prune_flags(CLI::App* cmd, PruneFlags& f) {
  add_model_flags(cmd, f.model, f.samples);
  add_hyper_flags(cmd, f);
  auto* keep = cmd->add_option("--keep-flops", f.keep_flops,
                               "budget as a kept fraction of prunable FLOPs");
  auto* target = cmd->add_option("--target-compression", f.target_compression,
                                 "fraction of prunable FLOPs to remove");
  keep->excludes(target);
  target->excludes(keep);
  cmd->add_flag("--kpms-global", f.kpms_global, "one budget over all units every iteration");
  cmd->add_flag("--one-shot", f.one_shot, "single global selection without reconstruction");
}

inline void require_budget(const PruneFlags& f) {
  if (!f.keep_flops && !f.target_compression)
    throw CLI::ValidationError("exactly one of --keep-flops or --target-compression is required");
}

/// Samples restricted to a seeded random subset when --max-samples is set;
/// the subset keeps file order.
inline std::vector<Sample> load_subset(const PruneFlags& f, const ModelConfig& c) {
  auto all = load_samples(f.samples, c);
  if (f.max_samples == 0 || f.max_samples >= all.size()) return all;
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(f.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(f.max_samples);
  std::sort(idx.begin(), idx.end());
  std::vector<Sample> out;
  for (std::size_t i : idx) out.push_back(std::move(all[i]));
  return out;
}

inline std::ostream& open_or(std::ofstream& file, const std::string& path, std::ostream& fallback) {
  if (path.empty() || path == "-") return fallback;
  file.open(path, std::ios::binary);
  if (!file) throw InputError("cannot open " + path + " for writing");
  return file;
}

inline int cmd_prune(const PruneFlags& f, std::ostream& out) {
  require_budget(f);
  const auto model = load_container(f.model);
  const auto samples = load_subset(f, model.config);
  const Flops tau = f.budget(model);
  auto result = prune_model(model, samples, tau, f.settings());
  save_container(result.model, f.out);
  if (!f.report.empty()) {
    std::ofstream r(f.report, std::ios::binary);
    if (!r) throw InputError("cannot open " + f.report + " for writing");
    r << to_json(result.report).dump(2) << "\n";
  }
  out << "compression=" << fmt9(result.report.compression_rate)
      << " flops=" << result.report.flops_after << "/" << result.report.flops_before
      << " sublayers=" << result.report.iterations.size() << "\n";
  return 0;
}

inline int cmd_eval(const std::string& model_path, const std::string& samples_path,
                    const std::string& teacher_path, unsigned threads, std::ostream& out) {
  const auto model = load_container(model_path);
  const auto samples = load_samples(samples_path, model.config);
  std::optional<LogitCache> ref;
  if (!teacher_path.empty()) {
    const auto teacher = load_container(teacher_path);
    ref = teacher_logits(teacher, samples, threads);
  }
  const auto r = evaluate(model, samples, ref ? &*ref : nullptr, threads);
  if (r.labeled == 0) throw InputError("no labeled samples in " + samples_path);
  out << "accuracy=" << fmt9(r.accuracy) << " loss=" << fmt9(r.mean_loss);
  if (ref) out << " kl=" << fmt9(r.mean_kl);
  out << " samples=" << r.labeled << "\n";
  return 0;
}

inline int cmd_sweep(const PruneFlags& f, const std::string& param,
                     const std::vector<double>& values, const std::string& csv_path,
                     std::ostream& out) {
  require_budget(f);
  if (values.empty()) throw CLI::ValidationError("--values: the sweep grid is empty");
  const auto model = load_container(f.model);
  const auto samples = load_subset(f, model.config);
  const Flops tau = f.budget(model);
  const auto reference = teacher_logits(model, samples, f.threads);
  std::ofstream file;
  std::ostream& csv = open_or(file, csv_path, out);
  csv << "param,value,compression,accuracy,mean_kl\n";
  for (double v : values) {
    PruneSettings s = f.settings();
    (param == "gamma" ? s.gamma : param == "lambda" ? s.lambda : s.mu) = v;
    check_hyper(s.gamma, s.lambda, s.mu);
    const auto result = prune_model(model, samples, tau, s);
    const auto e = evaluate(result.model, samples, &reference, f.threads);
    csv << param << "," << fmt9(v) << "," << fmt9(result.report.compression_rate) << ","
        << fmt9(e.accuracy) << "," << fmt9(e.mean_kl) << "\n";
  }
  return 0;
}

inline int cmd_flops(const std::string& model_path, std::ostream& out) {
  const auto model = load_container(model_path);
  const Flops fh = flops_per_head(model.config), fn = flops_per_neuron(model.config);
  out << "F_head=" << fh << "\nF_neuron=" << fn << "\n";
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    out << "layer " << l << ": heads=" << layer.num_heads() << " neurons=" << layer.num_neurons()
        << " flops=" << layer.num_heads() * fh + layer.num_neurons() * fn << "\n";
  }
  out << "prunable=" << prunable_flops(model) << "\ntotal=" << model_flops(model) << "\n";
  return 0;
}

inline int cmd_score(const PruneFlags& f, const std::string& csv_path, std::ostream& out) {
  const auto model = load_container(f.model);
  const auto samples = load_subset(f, model.config);
  const auto settings = f.settings();
  const double lambda = settings.criterion == Criterion::magnitude_gradient ? 0.0 : f.lambda;
  const auto teacher = teacher_logits(model, samples, f.threads);
  const auto masks = MaskState::all_ones(model);
  const auto k = measure_knowledge(model, masks, samples, teacher,
                                   MeasureOptions{f.gamma, settings.criterion, f.threads});
  const auto s = score(k, lambda, f.mu, flops_per_head(model.config),
                       flops_per_neuron(model.config));
  std::ofstream file;
  std::ostream& csv = open_or(file, csv_path, out);
  csv << "layer,sublayer_kind,unit_index,k_pred,k_rep,score\n";
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (std::size_t i = 0; i < model.layers[l].num_heads(); ++i) {
      const std::size_t h = k.index.head(l, i);
      csv << l << ",mha," << i << "," << fmt9(k.pred_head[h]) << "," << fmt9(k.rep_head[h])
          << "," << fmt9(s.head[h]) << "\n";
    }
    for (std::size_t i = 0; i < model.layers[l].num_neurons(); ++i) {
      const std::size_t n = k.index.neuron(l, i);
      csv << l << ",ffn," << i << "," << fmt9(k.pred_neuron[n]) << "," << fmt9(k.rep_neuron[n])
          << "," << fmt9(s.neuron[n]) << "\n";
    }
  }
  return 0;
}

struct SynthFlags {
  ModelConfig config{.num_layers = 2,
                     .num_heads = 4,
                     .head_dim = 8,
                     .ffn_neurons = 32,
                     .embed_dim = 32,
                     .vocab_size = 64,
                     .max_seq_len = 16,
                     .num_classes = 3,
                     .avg_seq_len = 16};
  std::string model_out, samples_out;
  std::size_t count = 64, min_len = 4;
  std::uint64_t seed = 1;
  bool planted = false;
};

inline int cmd_synth(SynthFlags f, std::ostream& out) {
  auto& c = f.config;
  c.embed_dim = c.num_heads * c.head_dim;
  if (c.avg_seq_len == 0 || c.avg_seq_len > c.max_seq_len) c.avg_seq_len = c.max_seq_len;
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw InputError(e.what());
  }
  EncoderModel<float> model;
  if (f.planted) {
    if (c.num_heads % 2 || c.ffn_neurons % 2)
      throw InputError("--planted needs an even number of heads and neurons");
    SynthOptions opt;
    opt.heads = c.num_heads / 2;
    opt.neurons = c.ffn_neurons / 2;
    model = plant_redundancy(random_model<float>(c, f.seed, opt));
  } else {
    model = random_model<float>(c, f.seed);
  }
  save_container(model, f.model_out);
  if (!f.samples_out.empty()) {
    const auto samples = random_samples(c, f.count, std::min(f.min_len, c.max_seq_len),
                                        c.max_seq_len, f.seed + 1, &model);
    save_samples(samples, f.samples_out);
  }
  out << "wrote " << f.model_out << " heads=" << model.total_heads()
      << " neurons=" << model.total_neurons() << "\n";
  return 0;
}

}  // namespace detail

/// Exit codes: 0 success, 1 internal error, 2 usage or input error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured pruning of encoder classifiers"};
  app.require_subcommand(1);

  detail::PruneFlags prune;
  auto* c_prune = app.add_subcommand("prune", "prune a model under a FLOPs budget");
  detail::add_prune_flags(c_prune, prune);
  c_prune->add_option("--out", prune.out, "output .kpz")->required();
  c_prune->add_option("--report", prune.report, "report JSON path");

  std::string eval_model, eval_samples, eval_teacher;
  unsigned eval_threads = 1;
  auto* c_eval = app.add_subcommand("eval", "accuracy and loss on labeled samples");
  detail::add_model_flags(c_eval, eval_model, eval_samples);
  c_eval->add_option("--teacher", eval_teacher, "also report mean KL to this model");
  c_eval->add_option("--threads", eval_threads)->check(CLI::Range(1u, 1024u));

  detail::PruneFlags sweep;
  std::string sweep_param, sweep_csv;
  std::vector<double> sweep_values;
  auto* c_sweep = app.add_subcommand("sweep", "prune + eval over a hyperparameter grid");
  detail::add_prune_flags(c_sweep, sweep);
  c_sweep->add_option("--param", sweep_param, "swept hyperparameter")
      ->required()
      ->check(CLI::IsMember({"gamma", "lambda", "mu"}));
  c_sweep->add_option("--values", sweep_values, "comma-separated grid")->delimiter(',');
  c_sweep->add_option("--csv", sweep_csv, "CSV output path (default stdout)");

  std::string flops_model;
  auto* c_flops = app.add_subcommand("flops", "FLOPs breakdown");
  c_flops->add_option("--model", flops_model)->required();

  detail::PruneFlags scoring;
  std::string score_csv;
  auto* c_score = app.add_subcommand("score", "per-unit knowledge and scores as CSV");
  detail::add_model_flags(c_score, scoring.model, scoring.samples);
  detail::add_hyper_flags(c_score, scoring);
  c_score->add_option("--csv", score_csv, "CSV output path (default stdout)");

  detail::SynthFlags synth;
  auto* c_synth = app.add_subcommand("synth", "write a random toy model and samples");
  c_synth->add_option("--model-out", synth.model_out)->required();
  c_synth->add_option("--samples-out", synth.samples_out);
  c_synth->add_option("--layers", synth.config.num_layers);
  c_synth->add_option("--heads", synth.config.num_heads);
  c_synth->add_option("--head-dim", synth.config.head_dim);
  c_synth->add_option("--neurons", synth.config.ffn_neurons);
  c_synth->add_option("--vocab", synth.config.vocab_size);
  c_synth->add_option("--max-len", synth.config.max_seq_len);
  c_synth->add_option("--classes", synth.config.num_classes);
  c_synth->add_option("--avg-len", synth.config.avg_seq_len, "sequence length for FLOPs");
  c_synth->add_option("--count", synth.count, "number of samples");
  c_synth->add_option("--min-len", synth.min_len);
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_flag("--planted", synth.planted, "duplicate every unit with halved outputs");

  try {
    app.parse(argc, argv);
    if (*c_prune) return detail::cmd_prune(prune, out);
    if (*c_eval) return detail::cmd_eval(eval_model, eval_samples, eval_teacher, eval_threads, out);
    if (*c_sweep) return detail::cmd_sweep(sweep, sweep_param, sweep_values, sweep_csv, out);
    if (*c_flops) return detail::cmd_flops(flops_model, out);
    if (*c_score) return detail::cmd_score(scoring, score_csv, out);
    if (*c_synth) return detail::cmd_synth(synth, out);
    return 2;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const LoadError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace kprune
