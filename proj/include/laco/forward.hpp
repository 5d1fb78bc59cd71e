#pragma once

// Teacher-forced Llama forward pass: RMSNorm, rotary attention with grouped KV heads,
// SwiGLU MLP. No KV cache; every call processes the full sequence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "laco/checkpoint.hpp"
#include "laco/corpus.hpp"
#include "laco/error.hpp"
#include "laco/kernels.hpp"
#include "laco/parallel.hpp"
#include "laco/tensor.hpp"

namespace laco {

inline void validate_tokens(const ModelConfig& cfg, std::span<const std::int32_t> tokens) {
  if (tokens.empty()) throw RangeError("token sequence is empty");
  if (tokens.size() > cfg.max_position_embeddings) {
    throw RangeError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_position_embeddings " +
                     std::to_string(cfg.max_position_embeddings));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || std::size_t(tokens[i]) >= cfg.vocab_size) {
      throw RangeError("token id " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

namespace detail {

// Rotates consecutive pairs (2i, 2i+1) of every head in place.
inline void apply_rope(Tensor& x, std::size_t n_heads, std::size_t head_dim, float theta) {
  const std::size_t half = head_dim / 2;
  std::vector<float> inv_freq(half);
  for (std::size_t i = 0; i < half; ++i) {
    inv_freq[i] = std::pow(theta, -float(2 * i) / float(head_dim));
  }
  for (std::size_t pos = 0; pos < x.rows(); ++pos) {
    float* row = x.raw() + pos * x.cols();
    for (std::size_t i = 0; i < half; ++i) {
      const float angle = float(pos) * inv_freq[i];
      const float c = std::cos(angle), s = std::sin(angle);
      for (std::size_t h = 0; h < n_heads; ++h) {
        float* pair = row + h * head_dim + 2 * i;
        const float x0 = pair[0], x1 = pair[1];
        pair[0] = x0 * c - x1 * s;
        pair[1] = x0 * s + x1 * c;
      }
    }
  }
}

inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& weight, float eps) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) rmsnorm_into(x.row(r), weight.data(), eps, out.row(r));
  return out;
}

inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const ModelConfig& cfg) {
  const std::size_t n = q.rows(), hd = cfg.head_dim();
  const std::size_t group = cfg.num_attention_heads / cfg.num_key_value_heads;
  const float scale = 1.0f / std::sqrt(float(hd));
  Tensor out = Tensor::matrix(n, cfg.hidden_size);
  std::vector<float> scores(n);
  for (std::size_t h = 0; h < cfg.num_attention_heads; ++h) {
    const std::size_t kvh = h / group;
    for (std::size_t i = 0; i < n; ++i) {
      const float* qi = q.raw() + i * q.cols() + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = detail::dot(qi, k.raw() + j * k.cols() + kvh * hd, hd) * scale;
      }
      softmax_inplace(std::span<float>(scores.data(), i + 1));
      float* dst = out.raw() + i * out.cols() + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        const float* vj = v.raw() + j * v.cols() + kvh * hd;
        for (std::size_t d = 0; d < hd; ++d) dst[d] += scores[j] * vj[d];
      }
    }
  }
  return out;
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// One decoder layer applied to the residual stream `x` (len x hidden), in place.
inline void apply_layer(const ModelConfig& cfg, const LayerParams& layer, Tensor& x) {
  const float eps = float(cfg.norm_eps);
  const float theta = float(cfg.rope_theta);

  Tensor normed = detail::rmsnorm_rows(x, layer.input_norm_weight(), eps);
  Tensor q = matmul_transposed(normed, layer.q_proj());
  Tensor k = matmul_transposed(normed, layer.k_proj());
  Tensor v = matmul_transposed(normed, layer.v_proj());
  detail::apply_rope(q, cfg.num_attention_heads, cfg.head_dim(), theta);
  detail::apply_rope(k, cfg.num_key_value_heads, cfg.head_dim(), theta);
  Tensor attn = detail::causal_attention(q, k, v, cfg);
  detail::add_inplace(x, matmul_transposed(attn, layer.o_proj()));

  normed = detail::rmsnorm_rows(x, layer.post_attn_norm_weight(), eps);
  Tensor gate = matmul_transposed(normed, layer.gate_proj());
  const Tensor up = matmul_transposed(normed, layer.up_proj());
  for (std::size_t i = 0; i < gate.numel(); ++i) {
    const float g = gate[i];
    gate[i] = g / (1.0f + std::exp(-g)) * up[i];
  }
  detail::add_inplace(x, matmul_transposed(gate, layer.down_proj()));
}

inline Tensor embed(const ModelCheckpoint& model, std::span<const std::int32_t> tokens) {
  const std::size_t h = model.config.hidden_size;
  Tensor x = Tensor::matrix(tokens.size(), h);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto src = model.embed_tokens->row(std::size_t(tokens[i]));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

/// Post-final-RMSNorm hidden states of the last layer, shape (len x hidden_size).
inline Tensor forward_hidden(const ModelCheckpoint& model, std::span<const std::int32_t> tokens) {
  validate_tokens(model.config, tokens);
  Tensor x = embed(model, tokens);
  for (const auto& layer : model.layers) apply_layer(model.config, layer, x);
  return detail::rmsnorm_rows(x, *model.final_norm_weight, float(model.config.norm_eps));
}

/// Residual stream after every layer (pre-final-norm), one (len x hidden) matrix per layer.
inline std::vector<Tensor> forward_layer_outputs(const ModelCheckpoint& model,
                                                 std::span<const std::int32_t> tokens) {
  validate_tokens(model.config, tokens);
  Tensor x = embed(model, tokens);
  std::vector<Tensor> outputs;
  outputs.reserve(model.layers.size());
  for (const auto& layer : model.layers) {
    apply_layer(model.config, layer, x);
    outputs.push_back(x);
  }
  return outputs;
}

/// forward_hidden times lm_head^T, shape (len x vocab_size).
inline Tensor forward_logits(const ModelCheckpoint& model, std::span<const std::int32_t> tokens) {
  return matmul_transposed(forward_hidden(model, tokens), model.head());
}

/// Summed next-token NLL and the number of predicted positions for one sequence.
struct NllSum {
  double nll = 0.0;
  std::size_t tokens = 0;
};

inline NllSum sequence_nll(const ModelCheckpoint& model, std::span<const std::int32_t> tokens) {
  if (tokens.size() < 2) {
    throw RangeError("perplexity needs sequences of at least 2 tokens, got " +
                     std::to_string(tokens.size()));
  }
  const Tensor logits = forward_logits(model, tokens);
  NllSum out;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = logits.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (float v : row) sum += std::exp(double(v) - mx);
    const double log_z = mx + std::log(sum);
    out.nll += log_z - double(row[std::size_t(tokens[t + 1])]);
    ++out.tokens;
  }
  return out;
}

/// exp of the token-weighted mean next-token NLL pooled over the whole corpus.
inline double perplexity(const ModelCheckpoint& model, const Corpus& corpus) {
  if (corpus.empty()) throw RangeError("perplexity of an empty corpus");
  std::vector<NllSum> parts(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { parts[i] = sequence_nll(model, corpus.sentences[i]); });
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& p : parts) {
    nll += p.nll;
    count += p.tokens;
  }
  return std::exp(nll / double(count));
}

}  // namespace laco
