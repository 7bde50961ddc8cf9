// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace kprune {

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled exactly once; results must be written to per-index slots.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Fixed-order pairwise sum of equally sized vectors. The result depends only
/// on the order of `parts`, never on how they were produced.
inline std::vector<double> pairwise_sum(const std::vector<std::vector<double>>& parts,
                                        std::size_t begin, std::size_t end) {
  if (end - begin == 1) return parts[begin];
  const std::size_t mid = begin + (end - begin) / 2;
  auto left = pairwise_sum(parts, begin, mid);
  const auto right = pairwise_sum(parts, mid, end);
  for (std::size_t i = 0; i < left.size(); ++i) left[i] += right[i];
  return left;
}

inline std::vector<double> pairwise_sum(const std::vector<std::vector<double>>& parts) {
  if (parts.empty()) return {};
  return pairwise_sum(parts, 0, parts.size());
}

}  // namespace kprune
