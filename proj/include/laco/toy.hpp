#pragma once

// Seeded toy Llama checkpoints and corpora for tests, fixtures and demos.
// Sampling uses mt19937_64 (fully specified by the standard) with an explicit
// Box-Muller transform, so the same seed gives the same bits on every platform.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>

#include "laco/checkpoint.hpp"
#include "laco/corpus.hpp"
#include "laco/tensor.hpp"

namespace laco {

class ToyRng {
 public:
  explicit ToyRng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in (0, 1), 53-bit resolution.
  double uniform() { return (double(engine_() >> 11) + 0.5) * 0x1.0p-53; }

  double normal() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double phi = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(phi);
    return r * std::cos(phi);
  }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

struct ToyOptions {
  ModelConfig config{
      .hidden_size = 32,
      .num_layers = 8,
      .num_attention_heads = 4,
      .num_key_value_heads = 2,
      .intermediate_size = 64,
      .vocab_size = 128,
      .rope_theta = 10000.0,
      .norm_eps = 1e-5,
      .max_position_embeddings = 64,
  };
  std::uint64_t seed = 0;
  /// Projection std is weight_scale / sqrt(fan_in).
  double weight_scale = 1.0;
  /// Std of norm weights around 1.
  double norm_jitter = 0.1;
  /// When set, every layer above the pivot is a copy of the pivot plus noise.
  std::optional<std::size_t> duplicate_pivot;
  /// Noise std relative to each tensor's init std.
  double duplicate_noise = 0.0;
  bool tied_head = false;
};

inline ModelCheckpoint make_toy_model(const ToyOptions& opt) {
  const ModelConfig& cfg = opt.config;
  cfg.validate();
  ToyRng rng(opt.seed);

  auto init_std = [&](LayerTensor t) {
    if (t == LayerTensor::input_norm || t == LayerTensor::post_attn_norm) return opt.norm_jitter;
    const Shape s = expected_shape(cfg, t);
    return opt.weight_scale / std::sqrt(double(s[1]));
  };
  auto fill = [&](Shape shape, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (float& v : t.data()) v = float(mean + stddev * rng.normal());
    return t;
  };

  ModelCheckpoint m;
  m.config = cfg;
  m.embed_tokens = share(fill({cfg.vocab_size, cfg.hidden_size}, 0.0, 1.0));
  m.layers.resize(cfg.num_layers);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    m.layers[i].index = i;
    const bool dup = opt.duplicate_pivot && i > *opt.duplicate_pivot;
    for (LayerTensor t : kAllLayerTensors) {
      const bool norm = t == LayerTensor::input_norm || t == LayerTensor::post_attn_norm;
      if (dup) {
        const Tensor& base = m.layers[*opt.duplicate_pivot][t];
        Tensor copy = base;
        const double sd = opt.duplicate_noise * init_std(t);
        if (sd > 0.0) {
          for (float& v : copy.data()) v = float(double(v) + sd * rng.normal());
        }
        m.layers[i].ptr(t) = share(std::move(copy));
      } else {
        m.layers[i].ptr(t) = share(fill(expected_shape(cfg, t), norm ? 1.0 : 0.0, init_std(t)));
      }
    }
  }
  m.final_norm_weight = share(fill({cfg.hidden_size}, 1.0, opt.norm_jitter));
  if (!opt.tied_head) {
    m.lm_head = share(fill({cfg.vocab_size, cfg.hidden_size}, 0.0, 1.0 / std::sqrt(double(cfg.hidden_size))));
  }
  m.validate();
  return m;
}

/// `count` sequences of `length` uniform token ids.
inline Corpus make_toy_corpus(std::uint64_t seed, std::size_t count, std::size_t length,
                              std::size_t vocab_size) {
  ToyRng rng(seed ^ 0x9e3779b97f4a7c15ull);
  Corpus c;
  for (std::size_t s = 0; s < count; ++s) {
    TokenSequence ids(length);
    for (auto& id : ids) id = std::int32_t(rng.next() % vocab_size);
    c.sentences.push_back(std::move(ids));
  }
  return c;
}

}  // namespace laco
