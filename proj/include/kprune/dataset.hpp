// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kprune/error.hpp"
#include "kprune/model.hpp"

namespace kprune {

/// A token sequence padded with id 0 up to some length; only the first
/// valid_len positions carry signal.
struct Sample {
  std::vector<std::int32_t> ids;
  std::size_t valid_len = 0;
  int label = -1;  // -1 when unlabeled

  static Sample unpadded(std::vector<std::int32_t> ids, int label = -1) {
    Sample s;
    s.valid_len = ids.size();
    s.ids = std::move(ids);
    s.label = label;
    return s;
  }

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline void check_sample(const Sample& s, const ModelConfig& c) {
  if (s.valid_len == 0) throw InputError("sample has no tokens");
  if (s.valid_len > s.ids.size()) throw InputError("sample valid_len exceeds its ids");
  if (s.valid_len > c.max_seq_len)
    throw InputError("sample length " + std::to_string(s.valid_len) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  for (std::size_t t = 0; t < s.valid_len; ++t)
    if (s.ids[t] < 0 || static_cast<std::size_t>(s.ids[t]) >= c.vocab_size)
      throw InputError("token id " + std::to_string(s.ids[t]) + " outside vocabulary of size " +
                       std::to_string(c.vocab_size));
  if (s.label >= static_cast<int>(c.num_classes))
    throw InputError("label " + std::to_string(s.label) + " outside " +
                     std::to_string(c.num_classes) + " classes");
}

/// Reads {"ids": [...], "label": c} lines. Sequences are padded with id 0
/// to max_seq_len; longer ones are rejected.
inline std::vector<Sample> load_samples(const std::filesystem::path& path, const ModelConfig& c) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open samples file " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sample s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.ids = j.at("ids").get<std::vector<std::int32_t>>();
      s.label = j.contains("label") ? j.at("label").get<int>() : -1;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    s.valid_len = s.ids.size();
    try {
      check_sample(s, c);
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    s.ids.resize(c.max_seq_len, 0);
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_samples(const std::vector<Sample>& samples, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["ids"] = std::vector<std::int32_t>(s.ids.begin(), s.ids.begin() + s.valid_len);
    if (s.label >= 0) j["label"] = s.label;
    f << j.dump() << '\n';
  }
}

}  // namespace kprune
