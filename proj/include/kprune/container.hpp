// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// .kpz container:
//   bytes 0-3   magic "KPRZ"
//   bytes 4-7   version, u32 little-endian (1)
//   bytes 8-15  manifest length, u64 little-endian
//   manifest    UTF-8 JSON {"config": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
//   payload     little-endian f32, row-major; starts at the first 64-byte
//               aligned file offset after the manifest, tensor offsets are
//               relative to it and 64-byte aligned.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kprune/error.hpp"
#include "kprune/model.hpp"

namespace kprune {

inline constexpr char kContainerMagic[4] = {'K', 'P', 'R', 'Z'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace detail {

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  const std::vector<float>* data;
};

inline std::string head_name(std::size_t l, const char* proj, std::size_t i, const char* what) {
  return "layer." + std::to_string(l) + ".attn." + proj + ".head." + std::to_string(i) + "." + what;
}

/// Canonical tensor order used when writing.
inline std::vector<TensorRef> canonical_tensors(const EncoderModel<float>& m) {
  std::vector<TensorRef> out;
  auto mat = [&](std::string name, const Matrix<float>& t) {
    out.push_back({std::move(name), {t.rows(), t.cols()}, &t.values()});
  };
  auto vec = [&](std::string name, const std::vector<float>& v) {
    out.push_back({std::move(name), {v.size()}, &v});
  };
  mat("embed.token", m.token_embeddings);
  mat("embed.pos", m.position_embeddings);
  vec("embed.ln.gain", m.embed_ln.gain);
  vec("embed.ln.shift", m.embed_ln.shift);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    for (std::size_t i = 0; i < layer.heads.size(); ++i) {
      const auto& h = layer.heads[i];
      mat(head_name(l, "q", i, "weight"), h.query);
      vec(head_name(l, "q", i, "bias"), h.query_bias);
      mat(head_name(l, "k", i, "weight"), h.key);
      vec(head_name(l, "k", i, "bias"), h.key_bias);
      mat(head_name(l, "v", i, "weight"), h.value);
      vec(head_name(l, "v", i, "bias"), h.value_bias);
      mat(head_name(l, "out", i, "weight"), h.output);
    }
    vec(p + "attn.out.bias", layer.attn_out_bias);
    vec(p + "attn.ln.gain", layer.attn_ln.gain);
    vec(p + "attn.ln.shift", layer.attn_ln.shift);
    mat(p + "ffn.in.weight", layer.ffn_in);
    vec(p + "ffn.in.bias", layer.ffn_in_bias);
    mat(p + "ffn.out.weight", layer.ffn_out);
    vec(p + "ffn.out.bias", layer.ffn_out_bias);
    vec(p + "ffn.ln.gain", layer.ffn_ln.gain);
    vec(p + "ffn.ln.shift", layer.ffn_ln.shift);
  }
  mat("head.pool.weight", m.pool_weight);
  vec("head.pool.bias", m.pool_bias);
  mat("head.cls.weight", m.cls_weight);
  vec("head.cls.bias", m.cls_bias);
  return out;
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& c,
                                             const std::vector<std::size_t>& heads,
                                             const std::vector<std::size_t>& neurons) {
  nlohmann::ordered_json j;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["head_dim"] = c.head_dim;
  j["ffn_neurons"] = c.ffn_neurons;
  j["embed_dim"] = c.embed_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["num_classes"] = c.num_classes;
  j["layernorm_eps"] = c.layernorm_eps;
  j["avg_seq_len"] = c.avg_seq_len;
  j["heads_per_layer"] = heads;
  j["neurons_per_layer"] = neurons;
  return j;
}

template <typename Int>
void put_le(std::string& out, Int v) {
  for (std::size_t i = 0; i < sizeof(Int); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename Int>
Int get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<Int>(v);
}

}  // namespace detail

/// Serializes a model to the container byte layout. Output is a pure
/// function of the model.
inline std::string encode_container(const EncoderModel<float>& model) {
  if (model.config.num_layers == 0 || model.layers.empty())
    throw LoadError(LoadErrorKind::validation, "model has no layers");
  try {
    model.validate();
  } catch (const ContractViolation& e) {
    throw LoadError(LoadErrorKind::validation, e.what());
  }
  for (const auto& t : detail::canonical_tensors(model))
    if (!all_finite(std::span<const float>(*t.data)))
      throw LoadError(LoadErrorKind::non_finite, "tensor " + t.name + " holds non-finite values");

  const auto tensors = detail::canonical_tensors(model);
  nlohmann::ordered_json manifest;
  manifest["config"] =
      detail::config_to_json(model.config, model.heads_per_layer(), model.neurons_per_layer());
  manifest["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    const std::size_t nbytes = t.data->size() * sizeof(float);
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["dtype"] = "f32";
    e["offset"] = offset;
    e["nbytes"] = nbytes;
    manifest["tensors"].push_back(std::move(e));
    offset = detail::align_up(offset + nbytes, kPayloadAlignment);
  }
  const std::string text = manifest.dump();

  std::string out(kContainerMagic, 4);
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out.resize(detail::align_up(out.size(), kPayloadAlignment), '\0');
  const std::size_t payload = out.size();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::size_t at = payload + manifest["tensors"][i]["offset"].get<std::size_t>();
    out.resize(at, '\0');
    const auto& v = *tensors[i].data;
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  out.resize(detail::align_up(out.size(), kPayloadAlignment), '\0');
  return out;
}

inline void save_container(const EncoderModel<float>& model, const std::filesystem::path& path) {
  const std::string bytes = encode_container(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw LoadError(LoadErrorKind::io, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw LoadError(LoadErrorKind::io, "write failed for " + path.string());
}

namespace detail {

struct ManifestEntry {
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t nbytes = 0;
};

class ContainerReader {
 public:
  ContainerReader(std::string_view bytes, std::map<std::string, ManifestEntry> entries,
                  std::size_t payload)
      : bytes_(bytes), entries_(std::move(entries)), payload_(payload) {}

  Matrix<float> matrix(const std::string& name, std::size_t rows, std::size_t cols) {
    auto v = take(name, {rows, cols});
    return Matrix<float>(rows, cols, std::move(v));
  }
  std::vector<float> vector(const std::string& name, std::size_t n) { return take(name, {n}); }

  void finish() const {
    for (const auto& [name, _] : entries_)
      if (!used_.contains(name))
        throw LoadError(LoadErrorKind::bad_manifest, "unexpected tensor " + name);
  }

 private:
  std::vector<float> take(const std::string& name, std::vector<std::size_t> shape) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw LoadError(LoadErrorKind::bad_manifest, "missing tensor " + name);
    const ManifestEntry& e = it->second;
    auto shape_str = [](const std::vector<std::size_t>& s) {
      std::string out;
      for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
      return out;
    };
    std::size_t numel = 1;
    for (auto s : e.shape) numel *= s;
    if (numel * sizeof(float) != e.nbytes)
      throw LoadError(LoadErrorKind::shape_mismatch,
                      "tensor " + name + ": manifest shape " + shape_str(e.shape) + " needs " +
                          std::to_string(numel * sizeof(float)) + " bytes but payload holds " +
                          std::to_string(e.nbytes));
    if (e.shape != shape)
      throw LoadError(LoadErrorKind::shape_mismatch, "tensor " + name + ": manifest shape " +
                                                         shape_str(e.shape) + ", config implies " +
                                                         shape_str(shape));
    const std::size_t begin = payload_ + e.offset;
    const std::size_t end = begin + e.nbytes;
    if (end > bytes_.size())
      throw LoadError(LoadErrorKind::truncated,
                      "tensor " + name + " needs bytes [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") but the file has " +
                          std::to_string(bytes_.size()) + " bytes");
    std::vector<float> v(numel);
    if (numel) std::memcpy(v.data(), bytes_.data() + begin, e.nbytes);
    if (!all_finite(std::span<const float>(v)))
      throw LoadError(LoadErrorKind::non_finite, "tensor " + name + " holds non-finite values");
    used_.insert(name);
    return v;
  }

  std::string_view bytes_;
  std::map<std::string, ManifestEntry> entries_;
  std::set<std::string> used_;
  std::size_t payload_;
};

}  // namespace detail

inline EncoderModel<float> decode_container(std::string_view bytes) {
  using detail::get_le;
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw LoadError(LoadErrorKind::bad_magic, "missing KPRZ magic");
  if (bytes.size() < 16)
    throw LoadError(LoadErrorKind::truncated, "header needs bytes [0, 16) but the file has " +
                                                  std::to_string(bytes.size()) + " bytes");
  const auto version = get_le<std::uint32_t>(raw + 4);
  if (version != kContainerVersion)
    throw LoadError(LoadErrorKind::unsupported_version,
                    "container version " + std::to_string(version) + " (supported: 1)");
  const auto manifest_len = get_le<std::uint64_t>(raw + 8);
  if (manifest_len > bytes.size() - 16)
    throw LoadError(LoadErrorKind::truncated,
                    "manifest needs bytes [16, " + std::to_string(16 + manifest_len) +
                        ") but the file has " + std::to_string(bytes.size()) + " bytes");

  nlohmann::json manifest;
  ModelConfig c;
  std::vector<std::size_t> heads, neurons;
  std::map<std::string, detail::ManifestEntry> entries;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, manifest_len));
    const auto& jc = manifest.at("config");
    c.num_layers = jc.at("num_layers").get<std::size_t>();
    c.num_heads = jc.at("num_heads").get<std::size_t>();
    c.head_dim = jc.at("head_dim").get<std::size_t>();
    c.ffn_neurons = jc.at("ffn_neurons").get<std::size_t>();
    c.embed_dim = jc.at("embed_dim").get<std::size_t>();
    c.vocab_size = jc.at("vocab_size").get<std::size_t>();
    c.max_seq_len = jc.at("max_seq_len").get<std::size_t>();
    c.num_classes = jc.at("num_classes").get<std::size_t>();
    c.layernorm_eps = jc.at("layernorm_eps").get<double>();
    c.avg_seq_len = jc.at("avg_seq_len").get<std::size_t>();
    heads = jc.value("heads_per_layer", std::vector<std::size_t>(c.num_layers, c.num_heads));
    neurons =
        jc.value("neurons_per_layer", std::vector<std::size_t>(c.num_layers, c.ffn_neurons));
    for (const auto& t : manifest.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f32")
        throw LoadError(LoadErrorKind::bad_manifest,
                        "tensor " + t.at("name").get<std::string>() + " has unsupported dtype");
      detail::ManifestEntry e{t.at("shape").get<std::vector<std::size_t>>(),
                              t.at("offset").get<std::size_t>(),
                              t.at("nbytes").get<std::size_t>()};
      entries.emplace(t.at("name").get<std::string>(), std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrorKind::bad_manifest, e.what());
  }
  try {
    c.validate();
  } catch (const ContractViolation& e) {
    throw LoadError(LoadErrorKind::validation, e.what());
  }
  if (heads.size() != c.num_layers || neurons.size() != c.num_layers)
    throw LoadError(LoadErrorKind::validation, "per-layer unit counts do not match num_layers");

  const std::size_t payload = detail::align_up(16 + manifest_len, kPayloadAlignment);
  detail::ContainerReader r(bytes, std::move(entries), payload);
  const std::size_t d = c.embed_dim, dh = c.head_dim;
  EncoderModel<float> m;
  m.config = c;
  m.token_embeddings = r.matrix("embed.token", c.vocab_size, d);
  m.position_embeddings = r.matrix("embed.pos", c.max_seq_len, d);
  m.embed_ln = {r.vector("embed.ln.gain", d), r.vector("embed.ln.shift", d)};
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    EncoderLayer<float> layer;
    const std::string p = "layer." + std::to_string(l) + ".";
    for (std::size_t i = 0; i < heads[l]; ++i) {
      AttentionHead<float> h;
      h.query = r.matrix(detail::head_name(l, "q", i, "weight"), dh, d);
      h.query_bias = r.vector(detail::head_name(l, "q", i, "bias"), dh);
      h.key = r.matrix(detail::head_name(l, "k", i, "weight"), dh, d);
      h.key_bias = r.vector(detail::head_name(l, "k", i, "bias"), dh);
      h.value = r.matrix(detail::head_name(l, "v", i, "weight"), dh, d);
      h.value_bias = r.vector(detail::head_name(l, "v", i, "bias"), dh);
      h.output = r.matrix(detail::head_name(l, "out", i, "weight"), d, dh);
      layer.heads.push_back(std::move(h));
    }
    layer.attn_out_bias = r.vector(p + "attn.out.bias", d);
    layer.attn_ln = {r.vector(p + "attn.ln.gain", d), r.vector(p + "attn.ln.shift", d)};
    layer.ffn_in = r.matrix(p + "ffn.in.weight", neurons[l], d);
    layer.ffn_in_bias = r.vector(p + "ffn.in.bias", neurons[l]);
    layer.ffn_out = r.matrix(p + "ffn.out.weight", d, neurons[l]);
    layer.ffn_out_bias = r.vector(p + "ffn.out.bias", d);
    layer.ffn_ln = {r.vector(p + "ffn.ln.gain", d), r.vector(p + "ffn.ln.shift", d)};
    m.layers.push_back(std::move(layer));
  }
  m.pool_weight = r.matrix("head.pool.weight", d, d);
  m.pool_bias = r.vector("head.pool.bias", d);
  m.cls_weight = r.matrix("head.cls.weight", c.num_classes, d);
  m.cls_bias = r.vector("head.cls.bias", c.num_classes);
  r.finish();
  try {
    m.validate();
  } catch (const ContractViolation& e) {
    throw LoadError(LoadErrorKind::validation, e.what());
  }
  return m;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline EncoderModel<float> load_container(const std::filesystem::path& path) {
  return decode_container(read_file(path));
}

}  // namespace kprune
