// Copyright 2026 The kprune Authors
// SPDX-License-Identifier: Apache-2.0

// Masked encoder forward pass with feature capture, distillation and
// cross-entropy losses, and reverse-mode derivatives of a loss with respect
// to every head and neuron mask.
//
// Activations are stored token-major: a sub-layer input is an s x d matrix
// whose rows are tokens. Only the first valid_len tokens of a sample are
// processed; this is exactly the additive -inf key masking of padded
// positions as seen from every valid query, and padded queries never reach
// the pooled output.

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kprune/dataset.hpp"
#include "kprune/model.hpp"
#include "kprune/tensor.hpp"

namespace kprune {

template <typename T>
struct HeadTrace {
  Matrix<T> query;     // s x d_h
  Matrix<T> key;       // s x d_h
  Matrix<T> value;     // s x d_h
  Matrix<T> probs;     // s x s attention weights
  Matrix<T> features;  // s x d_h, f_i(X) stored transposed
  double output_norm_sq = 0.0;  // ||h_i(X)||_F^2, unmasked
};

template <typename T>
struct SublayerTrace {
  SublayerKind kind = SublayerKind::attention;
  Matrix<T> input;  // s x d
  std::vector<HeadTrace<T>> heads;
  Matrix<T> preactivation;  // s x N
  Matrix<T> activation;     // s x N, column i is g_i(X)
  std::vector<double> neuron_norm_sq;  // ||n_i(X)||_F^2, unmasked
  Matrix<T> residual;    // X + Sub(X), before layer normalization
  Matrix<T> normalized;  // (residual - mean) * inv_std
  std::vector<double> inv_std;
};

template <typename T>
struct ForwardTrace {
  std::vector<SublayerTrace<T>> sublayers;  // empty unless captured
  std::vector<T> pooled;
  std::vector<T> logits;
  std::size_t valid_len = 0;
};

namespace detail {

template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<T>(static_cast<double>(m(i, j)) + static_cast<double>(bias[j]));
}

/// Layer normalization that also records what the backward pass needs.
template <typename T>
Matrix<T> normalize_rows(const Matrix<T>& y, const LayerNormParams<T>& p, double eps,
                         Matrix<T>* normalized, std::vector<double>* inv_std) {
  const std::size_t s = y.rows(), d = y.cols();
  Matrix<T> out(s, d);
  if (normalized) *normalized = Matrix<T>(s, d);
  if (inv_std) inv_std->assign(s, 0.0);
  for (std::size_t t = 0; t < s; ++t) {
    auto r = y.row(t);
    double mean = 0.0;
    for (T v : r) mean += static_cast<double>(v);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (T v : r) {
      const double c = static_cast<double>(v) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (static_cast<double>(r[j]) - mean) * rstd;
      if (normalized) (*normalized)(t, j) = static_cast<T>(xhat);
      out(t, j) = static_cast<T>(static_cast<double>(p.gain[j]) * xhat +
                                 static_cast<double>(p.shift[j]));
    }
    if (inv_std) (*inv_std)[t] = rstd;
  }
  return out;
}

template <typename T>
Matrix<T> project(const Matrix<T>& x, const Matrix<T>& weight, std::span<const T> bias) {
  Matrix<T> out = matmul_nt(x, weight);
  add_row_bias(out, bias);
  return out;
}

/// MHA sub-layer. Fills `trace` (kind, heads, residual inputs) and returns
/// X + M(X; zeta).
template <typename T>
Matrix<T> attention_residual(const EncoderLayer<T>& layer, const Matrix<T>& x,
                             const std::vector<double>* mask, std::size_t head_dim,
                             SublayerTrace<T>* trace) {
  const std::size_t s = x.rows(), d = x.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix<double> acc(s, d);
  for (std::size_t i = 0; i < layer.heads.size(); ++i) {
    const auto& head = layer.heads[i];
    HeadTrace<T> ht;
    ht.query = project(x, head.query, std::span<const T>(head.query_bias));
    ht.key = project(x, head.key, std::span<const T>(head.key_bias));
    ht.value = project(x, head.value, std::span<const T>(head.value_bias));
    Matrix<T> scores = matmul_nt(ht.query, ht.key);
    for (auto& v : scores.values()) v = static_cast<T>(static_cast<double>(v) * scale);
    ht.probs = softmax_rows(scores);
    ht.features = matmul(ht.probs, ht.value);
    const Matrix<T> out = matmul_nt(ht.features, head.output);  // h_i(X)^T
    ht.output_norm_sq = frobenius_sq(out);
    if (mask) {
      const double m = (*mask)[i];
      for (std::size_t k = 0; k < out.size(); ++k)
        acc.values()[k] += m * static_cast<double>(out.values()[k]);
    } else {
      for (std::size_t k = 0; k < out.size(); ++k)
        acc.values()[k] += static_cast<double>(out.values()[k]);
    }
    if (trace) trace->heads.push_back(std::move(ht));
  }
  Matrix<T> y(s, d);
  for (std::size_t t = 0; t < s; ++t)
    for (std::size_t j = 0; j < d; ++j)
      y(t, j) = static_cast<T>(static_cast<double>(x(t, j)) +
                               (acc(t, j) + static_cast<double>(layer.attn_out_bias[j])));
  return y;
}

/// FFN sub-layer; returns X + F(X; xi).
template <typename T>
Matrix<T> ffn_residual(const EncoderLayer<T>& layer, const Matrix<T>& x,
                       const std::vector<double>* mask, SublayerTrace<T>* trace) {
  const std::size_t s = x.rows(), d = x.cols(), n = layer.num_neurons();
  Matrix<T> z = project(x, layer.ffn_in, std::span<const T>(layer.ffn_in_bias));
  Matrix<T> g(s, n);
  for (std::size_t k = 0; k < z.size(); ++k)
    g.values()[k] = static_cast<T>(gelu(static_cast<double>(z.values()[k])));
  Matrix<T> gm = g;
  if (mask)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t i = 0; i < n; ++i)
        gm(t, i) = static_cast<T>(static_cast<double>(g(t, i)) * (*mask)[i]);
  const Matrix<T> f = matmul_nt(gm, layer.ffn_out);
  Matrix<T> y(s, d);
  for (std::size_t t = 0; t < s; ++t)
    for (std::size_t j = 0; j < d; ++j)
      y(t, j) = static_cast<T>(static_cast<double>(x(t, j)) +
                               (static_cast<double>(f(t, j)) +
                                static_cast<double>(layer.ffn_out_bias[j])));
  if (trace) {
    trace->neuron_norm_sq.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double gsq = 0.0, vsq = 0.0;
      for (std::size_t t = 0; t < s; ++t) gsq += static_cast<double>(g(t, i)) * g(t, i);
      for (std::size_t j = 0; j < d; ++j)
        vsq += static_cast<double>(layer.ffn_out(j, i)) * layer.ffn_out(j, i);
      trace->neuron_norm_sq[i] = gsq * vsq;  // n_i = v_i g_i^T is rank one
    }
    trace->preactivation = std::move(z);
    trace->activation = std::move(g);
  }
  return y;
}

}  // namespace detail

/// Token and position embeddings followed by layer normalization.
template <typename T>
Matrix<T> embed(const EncoderModel<T>& model, const Sample& sample) {
  check_sample(sample, model.config);
  const std::size_t s = sample.valid_len, d = model.config.embed_dim;
  Matrix<T> x(s, d);
  for (std::size_t t = 0; t < s; ++t) {
    auto tok = model.token_embeddings.row(static_cast<std::size_t>(sample.ids[t]));
    auto pos = model.position_embeddings.row(t);
    for (std::size_t j = 0; j < d; ++j)
      x(t, j) = static_cast<T>(static_cast<double>(tok[j]) + static_cast<double>(pos[j]));
  }
  return detail::normalize_rows<T>(x, model.embed_ln, model.config.layernorm_eps, nullptr, nullptr);
}

/// Runs one sub-layer (residual + layer normalization) on x.
template <typename T>
Matrix<T> run_sublayer(const EncoderModel<T>& model, std::size_t sublayer, const Matrix<T>& x,
                       const MaskState* masks, SublayerTrace<T>* trace) {
  const auto& layer = model.layers[sublayer_layer(sublayer)];
  const auto kind = sublayer_kind(sublayer);
  const std::vector<double>* mask = masks ? &masks->sublayer(sublayer) : nullptr;
  if (trace) {
    trace->kind = kind;
    trace->input = x;
  }
  Matrix<T> y = kind == SublayerKind::attention
                    ? detail::attention_residual(layer, x, mask, model.config.head_dim, trace)
                    : detail::ffn_residual(layer, x, mask, trace);
  const auto& ln = kind == SublayerKind::attention ? layer.attn_ln : layer.ffn_ln;
  Matrix<T> out = detail::normalize_rows<T>(y, ln, model.config.layernorm_eps,
                                         trace ? &trace->normalized : nullptr,
                                         trace ? &trace->inv_std : nullptr);
  if (trace) trace->residual = std::move(y);
  return out;
}

/// Pooling (first token) -> tanh projection -> classifier.
template <typename T>
void classify(const EncoderModel<T>& model, const Matrix<T>& x, ForwardTrace<T>& trace) {
  const std::size_t d = model.config.embed_dim;
  auto first = x.row(0);
  trace.pooled.assign(d, T(0));
  for (std::size_t j = 0; j < d; ++j)
    trace.pooled[j] = static_cast<T>(std::tanh(
        dot(model.pool_weight.row(j), first) + static_cast<double>(model.pool_bias[j])));
  trace.logits.assign(model.config.num_classes, T(0));
  for (std::size_t c = 0; c < model.config.num_classes; ++c)
    trace.logits[c] = static_cast<T>(dot(model.cls_weight.row(c), std::span<const T>(trace.pooled)) +
                                     static_cast<double>(model.cls_bias[c]));
}

/// Masked forward pass. masks == nullptr runs the mask-free network.
template <typename T>
ForwardTrace<T> forward(const EncoderModel<T>& model, const Sample& sample,
                        const MaskState* masks = nullptr, bool capture = false) {
  if (masks) masks->check_against(model);
  ForwardTrace<T> trace;
  trace.valid_len = sample.valid_len;
  Matrix<T> x = embed(model, sample);
  if (capture) trace.sublayers.resize(model.num_sublayers());
  for (std::size_t k = 0; k < model.num_sublayers(); ++k)
    x = run_sublayer(model, k, x, masks, capture ? &trace.sublayers[k] : nullptr);
  classify(model, x, trace);
  return trace;
}

template <typename T>
std::vector<T> logits(const EncoderModel<T>& model, const Sample& sample,
                      const MaskState* masks = nullptr) {
  return forward(model, sample, masks, false).logits;
}

// ---------------------------------------------------------------------------
// Losses

/// gamma^2 * KL(softmax(student/gamma) || softmax(teacher/gamma)).
template <typename A, typename B>
double kl_distill_loss(std::span<const A> student, std::span<const B> teacher, double gamma) {
  detail::require(student.size() == teacher.size(), "kl_distill_loss: logit length mismatch");
  detail::require(gamma > 0.0, "kl_distill_loss: gamma must be positive");
  const auto ls = log_softmax(student, gamma);
  const auto lt = log_softmax(teacher, gamma);
  double kl = 0.0;
  for (std::size_t c = 0; c < ls.size(); ++c) kl += std::exp(ls[c]) * (ls[c] - lt[c]);
  return gamma * gamma * std::max(kl, 0.0);
}

template <typename A, typename B>
double kl_distill_loss(const std::vector<A>& student, const std::vector<B>& teacher,
                       double gamma) {
  return kl_distill_loss(std::span<const A>(student), std::span<const B>(teacher), gamma);
}

/// d/d(student logits) of kl_distill_loss: gamma * q_j (a_j - KL), where
/// q = softmax(student/gamma) and a_j = log q_j - log p_j.
template <typename A, typename B>
std::vector<double> kl_distill_grad(std::span<const A> student, std::span<const B> teacher,
                                    double gamma) {
  detail::require(student.size() == teacher.size(), "kl_distill_grad: logit length mismatch");
  detail::require(gamma > 0.0, "kl_distill_grad: gamma must be positive");
  const auto ls = log_softmax(student, gamma);
  const auto lt = log_softmax(teacher, gamma);
  double kl = 0.0;
  for (std::size_t c = 0; c < ls.size(); ++c) kl += std::exp(ls[c]) * (ls[c] - lt[c]);
  std::vector<double> g(ls.size());
  for (std::size_t c = 0; c < ls.size(); ++c)
    g[c] = gamma * std::exp(ls[c]) * ((ls[c] - lt[c]) - kl);
  return g;
}

template <typename A>
double cross_entropy(std::span<const A> logits, int label) {
  detail::require(label >= 0 && static_cast<std::size_t>(label) < logits.size(),
                  "cross_entropy: label out of range");
  return -log_softmax(logits)[static_cast<std::size_t>(label)];
}

template <typename A>
std::vector<double> cross_entropy_grad(std::span<const A> logits, int label) {
  detail::require(label >= 0 && static_cast<std::size_t>(label) < logits.size(),
                  "cross_entropy_grad: label out of range");
  auto g = log_softmax(logits);
  for (auto& v : g) v = std::exp(v);
  g[static_cast<std::size_t>(label)] -= 1.0;
  return g;
}

// ---------------------------------------------------------------------------
// Reverse mode

/// d loss / d zeta and d loss / d xi, laid out like MaskState.
struct MaskGradients {
  std::vector<std::vector<double>> heads;
  std::vector<std::vector<double>> neurons;
};

namespace detail {

/// Gradient through out = gain * xhat + shift, xhat = (y - mean) * inv_std.
template <typename T>
Matrix<T> layernorm_backward(const Matrix<T>& dout, const SublayerTrace<T>& tr,
                             const LayerNormParams<T>& ln) {
  const std::size_t s = dout.rows(), d = dout.cols();
  Matrix<T> dy(s, d);
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < s; ++t) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = static_cast<double>(dout(t, j)) * static_cast<double>(ln.gain[j]);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * static_cast<double>(tr.normalized(t, j));
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dy(t, j) = static_cast<T>(tr.inv_std[t] *
                                (dxhat[j] - mean_dxhat -
                                 static_cast<double>(tr.normalized(t, j)) * mean_dxhat_xhat));
  }
  return dy;
}

template <typename T>
void accumulate(Matrix<T>& into, const Matrix<T>& add) {
  for (std::size_t k = 0; k < into.size(); ++k)
    into.values()[k] = static_cast<T>(static_cast<double>(into.values()[k]) +
                                      static_cast<double>(add.values()[k]));
}

template <typename T>
double sum_product(const Matrix<T>& a, const Matrix<T>& b) {
  return dot(std::span<const T>(a.values()), std::span<const T>(b.values()));
}

}  // namespace detail

/// Backpropagates d loss / d logits through a captured trace and returns the
/// derivative with respect to every mask. Because each mask scales its unit's
/// output linearly, d/d zeta_i = <dL/dM, h_i(X)> and d/d xi_i = <dL/dF, n_i(X)>.
///
/// Sub-layers below the lowest unprocessed one are not visited; their
/// gradients are reported as 0.
template <typename T>
MaskGradients mask_gradients(const EncoderModel<T>& model, const ForwardTrace<T>& trace,
                             const MaskState* masks, std::span<const double> dlogits) {
  detail::require(trace.sublayers.size() == model.num_sublayers(),
                  "mask_gradients: forward trace was not captured");
  detail::require(dlogits.size() == model.config.num_classes,
                  "mask_gradients: dlogits length mismatch");
  const std::size_t d = model.config.embed_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(model.config.head_dim));

  MaskGradients grads;
  for (const auto& layer : model.layers) {
    grads.heads.emplace_back(layer.num_heads(), 0.0);
    grads.neurons.emplace_back(layer.num_neurons(), 0.0);
  }
  std::size_t lowest = 0;
  while (masks && lowest < model.num_sublayers() && masks->is_processed(lowest)) ++lowest;
  if (lowest == model.num_sublayers()) return grads;

  // Classifier head.
  std::vector<double> dpre(d);
  for (std::size_t j = 0; j < d; ++j) {
    double dp = 0.0;
    for (std::size_t c = 0; c < dlogits.size(); ++c)
      dp += dlogits[c] * static_cast<double>(model.cls_weight(c, j));
    const double p = static_cast<double>(trace.pooled[j]);
    dpre[j] = dp * (1.0 - p * p);
  }
  Matrix<T> dout(trace.valid_len, d);
  for (std::size_t k = 0; k < d; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += dpre[j] * static_cast<double>(model.pool_weight(j, k));
    dout(0, k) = static_cast<T>(acc);
  }

  for (std::size_t k = model.num_sublayers(); k-- > lowest;) {
    const auto& tr = trace.sublayers[k];
    const auto& layer = model.layers[sublayer_layer(k)];
    const bool need_input_grad = k > lowest;
    const std::vector<double>* mask = masks ? &masks->sublayer(k) : nullptr;

    if (tr.kind == SublayerKind::ffn) {
      const Matrix<T> dsub = detail::layernorm_backward(dout, tr, layer.ffn_ln);
      const Matrix<T> dgm = matmul(dsub, layer.ffn_out);  // s x N
      const std::size_t s = dgm.rows(), n = dgm.cols();
      auto& g = grads.neurons[sublayer_layer(k)];
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t t = 0; t < s; ++t)
          acc += static_cast<double>(dgm(t, i)) * static_cast<double>(tr.activation(t, i));
        g[i] = acc;
      }
      if (!need_input_grad) break;
      Matrix<T> dz(s, n);
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t i = 0; i < n; ++i) {
          const double m = mask ? (*mask)[i] : 1.0;
          dz(t, i) = static_cast<T>(static_cast<double>(dgm(t, i)) * m *
                                    gelu_grad(static_cast<double>(tr.preactivation(t, i))));
        }
      Matrix<T> dx = dsub;
      detail::accumulate(dx, matmul(dz, layer.ffn_in));
      dout = std::move(dx);
    } else {
      const Matrix<T> dsub = detail::layernorm_backward(dout, tr, layer.attn_ln);
      Matrix<T> dx = dsub;
      auto& g = grads.heads[sublayer_layer(k)];
      for (std::size_t i = 0; i < layer.heads.size(); ++i) {
        const auto& head = layer.heads[i];
        const auto& ht = tr.heads[i];
        Matrix<T> dfeat = matmul(dsub, head.output);  // s x d_h
        g[i] = detail::sum_product(dfeat, ht.features);
        if (!need_input_grad) continue;
        const double m = mask ? (*mask)[i] : 1.0;
        if (m == 0.0) continue;
        if (m != 1.0)
          for (auto& v : dfeat.values()) v = static_cast<T>(static_cast<double>(v) * m);
        const Matrix<T> dprobs = matmul_nt(dfeat, ht.value);  // s x s
        const Matrix<T> dvalue = matmul_tn(ht.probs, dfeat);  // s x d_h
        Matrix<T> dscores(dprobs.rows(), dprobs.cols());
        for (std::size_t t = 0; t < dprobs.rows(); ++t) {
          const double inner = dot(dprobs.row(t), ht.probs.row(t));
          for (std::size_t u = 0; u < dprobs.cols(); ++u)
            dscores(t, u) = static_cast<T>(static_cast<double>(ht.probs(t, u)) *
                                           (static_cast<double>(dprobs(t, u)) - inner) * scale);
        }
        const Matrix<T> dquery = matmul(dscores, ht.key);
        const Matrix<T> dkey = matmul_tn(dscores, ht.query);
        detail::accumulate(dx, matmul(dquery, head.query));
        detail::accumulate(dx, matmul(dkey, head.key));
        detail::accumulate(dx, matmul(dvalue, head.value));
      }
      if (!need_input_grad) break;
      dout = std::move(dx);
    }
  }
  return grads;
}

struct LossAndGradients {
  double loss = 0.0;
  MaskGradients grads;
};

/// Forward, distillation loss against teacher logits, and mask gradients.
template <typename T, typename L>
LossAndGradients mask_gradients(const EncoderModel<T>& model, const Sample& sample,
                                const MaskState& masks, std::span<const L> teacher_logits,
                                double gamma) {
  const auto trace = forward(model, sample, &masks, true);
  const std::span<const T> student(trace.logits);
  const auto dl = kl_distill_grad(student, teacher_logits, gamma);
  return {kl_distill_loss(student, teacher_logits, gamma),
          mask_gradients(model, trace, &masks, std::span<const double>(dl))};
}

}  // namespace kprune
