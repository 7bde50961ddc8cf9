// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <limits>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

kprune::KnowledgeTable table(std::vector<double> pred_head, std::vector<double> rep_head,
                             std::vector<double> pred_neuron, std::vector<double> rep_neuron) {
  kprune::KnowledgeTable t;
  t.head_processed.assign(pred_head.size(), false);
  t.neuron_processed.assign(pred_neuron.size(), false);
  t.pred_head = std::move(pred_head);
  t.rep_head = std::move(rep_head);
  t.pred_neuron = std::move(pred_neuron);
  t.rep_neuron = std::move(rep_neuron);
  return t;
}

kprune::ScoreTable heads_only(const std::vector<double>& scores, kprune::Flops f_head) {
  kprune::ScoreTable s;
  s.head = scores;
  s.head_candidate.assign(scores.size(), true);
  s.f_head = f_head;
  s.f_neuron = 1;
  return s;
}

}  // namespace

TEST(Score, Formulas) {
  const auto s = kprune::score(table({2.0}, {4.0}, {1.0}, {3.0}), 0.5, 64.0, 8, 5);
  EXPECT_DOUBLE_EQ(s.head[0], 32.0);
  EXPECT_DOUBLE_EQ(s.neuron[0], (1.0 + 1.5) / 5.0);
}

TEST(Score, LambdaZeroUsesPredictiveOnly) {
  const auto s = kprune::score(table({1.0, 3.0}, {100.0, 0.0}, {2.0}, {7.0}), 0.0, 2.0, 4, 2);
  EXPECT_DOUBLE_EQ(s.head[1] / s.head[0], 3.0);
  EXPECT_DOUBLE_EQ(s.neuron[0], 1.0);
}

TEST(Score, EqualKnowledgeTies) {
  const auto s = kprune::score(table({1.5, 1.5}, {2.0, 2.0}, {}, {}), 0.25, 64.0, 10, 1);
  EXPECT_EQ(s.head[0], s.head[1]);
}

TEST(Score, ContractViolations) {
  const auto t = table({1.0}, {1.0}, {1.0}, {1.0});
  EXPECT_THROW(kprune::score(t, -1.0, 1.0, 1, 1), kprune::ContractViolation);
  EXPECT_THROW(kprune::score(t, 0.0, 0.0, 1, 1), kprune::ContractViolation);
  EXPECT_THROW(kprune::score(t, 0.0, 1.0, 0, 1), kprune::ContractViolation);
  EXPECT_THROW(kprune::score(t, 0.0, 1.0, 1, 0), kprune::ContractViolation);
}

TEST(Score, ProcessedUnitsAreNotCandidates) {
  auto t = table({1.0, 2.0}, {0.0, 0.0}, {1.0}, {0.0});
  t.head_processed[0] = true;
  const auto s = kprune::score(t, 0.0, 1.0, 1, 1);
  EXPECT_FALSE(s.head_candidate[0]);
  EXPECT_TRUE(s.head_candidate[1]);
  EXPECT_TRUE(kprune::score(t, 0.0, 1.0, 1, 1, true).head_candidate[0]);
}

TEST(Search, LooseBudgetPrunesNothing) {
  const auto sel = kprune::search_threshold(heads_only({1, 2, 3}, 10), 30);
  EXPECT_TRUE(sel.no_pruning);
  EXPECT_TRUE(sel.heads.empty());
  EXPECT_EQ(sel.nu_star, -std::numeric_limits<double>::infinity());
}

TEST(Search, ZeroBudgetPrunesEverything) {
  const auto sel = kprune::search_threshold(heads_only({1, 2, 3}, 10), 0);
  EXPECT_EQ(sel.heads, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(sel.projected_flops, 0u);
}

TEST(Search, SixHeadsExample) {
  const auto s = heads_only({1, 2, 3, 4, 5, 6}, 10);
  const auto sel = kprune::search_threshold(s, 35);
  EXPECT_EQ(sel.nu_star, 4.0);
  EXPECT_EQ(sel.heads, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(sel.projected_flops, 30u);
  std::vector<oracle::Unit> units;
  for (double v : s.head) units.push_back({v, 10});
  const auto brute = oracle::brute_threshold(units, 35);
  EXPECT_EQ(brute.nu, sel.nu_star);
}

TEST(Search, TiedUnitsShareFate) {
  const auto sel = kprune::search_threshold(heads_only({1, 2, 2, 3}, 10), 25);
  // Threshold 2 keeps three units (30 > 25); threshold 3 keeps one.
  EXPECT_EQ(sel.nu_star, 3.0);
  EXPECT_EQ(sel.heads, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Search, MixedKinds) {
  kprune::ScoreTable s;
  s.head = {0.5, 4.0};
  s.head_candidate = {true, true};
  s.neuron = {1.0, 2.0, 3.0};
  s.neuron_candidate = {true, true, true};
  s.f_head = 10;
  s.f_neuron = 3;
  const auto sel = kprune::search_threshold(s, 13);
  EXPECT_EQ(sel.heads, (std::vector<std::size_t>{0}));
  EXPECT_EQ(sel.neurons, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.projected_flops, 13u);
}

TEST(Search, RandomInstancesMatchBruteForce) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> count(0, 6), level(0, 4), fl(1, 9);
  for (int trial = 0; trial < 300; ++trial) {
    kprune::ScoreTable s;
    s.f_head = static_cast<kprune::Flops>(fl(rng));
    s.f_neuron = static_cast<kprune::Flops>(fl(rng));
    const int nh = count(rng), nn = count(rng);
    std::vector<oracle::Unit> units;
    for (int i = 0; i < nn; ++i) {
      s.neuron.push_back(level(rng) * 0.5);  // coarse levels force ties
      s.neuron_candidate.push_back(true);
      units.push_back({s.neuron.back(), s.f_neuron});
    }
    for (int i = 0; i < nh; ++i) {
      s.head.push_back(level(rng) * 0.5);
      s.head_candidate.push_back(true);
      units.push_back({s.head.back(), s.f_head});
    }
    kprune::Flops total = 0;
    for (const auto& u : units) total += u.flops;
    const kprune::Flops tau = std::uniform_int_distribution<kprune::Flops>(0, total + 2)(rng);
    const auto sel = kprune::search_threshold(s, tau);
    const auto brute = oracle::brute_threshold(units, tau);
    std::vector<bool> ours(units.size(), false);
    for (auto i : sel.neurons) ours[i] = true;
    for (auto i : sel.heads) ours[static_cast<std::size_t>(nn) + i] = true;
    EXPECT_EQ(ours, brute.pruned) << "trial " << trial;
    EXPECT_EQ(sel.nu_star, brute.nu) << "trial " << trial;
    EXPECT_LE(sel.projected_flops, tau);
  }
}
