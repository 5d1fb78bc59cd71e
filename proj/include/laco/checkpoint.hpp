#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "laco/error.hpp"
#include "laco/tensor.hpp"

namespace laco {

struct ModelConfig {
  std::size_t hidden_size = 0;
  std::size_t num_layers = 0;
  std::size_t num_attention_heads = 0;
  std::size_t num_key_value_heads = 0;
  std::size_t intermediate_size = 0;
  std::size_t vocab_size = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  std::size_t max_position_embeddings = 0;

  std::size_t head_dim() const { return hidden_size / num_attention_heads; }
  std::size_t kv_dim() const { return head_dim() * num_key_value_heads; }

  /// Throws ConfigError naming the first violated field.
  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("config field ") + name + " must be positive");
    };
    positive(hidden_size, "hidden_size");
    positive(num_layers, "num_layers");
    positive(num_attention_heads, "num_attention_heads");
    positive(num_key_value_heads, "num_key_value_heads");
    positive(intermediate_size, "intermediate_size");
    positive(vocab_size, "vocab_size");
    positive(max_position_embeddings, "max_position_embeddings");
    if (!(rope_theta > 0.0)) throw ConfigError("config field rope_theta must be positive");
    if (!(norm_eps > 0.0)) throw ConfigError("config field norm_eps must be positive");
    if (hidden_size % num_attention_heads != 0) {
      throw ConfigError("config field hidden_size must be divisible by num_attention_heads");
    }
    if (num_attention_heads % num_key_value_heads != 0) {
      throw ConfigError("config field num_attention_heads must be divisible by num_key_value_heads");
    }
    if (head_dim() % 2 != 0) {
      throw ConfigError("config field hidden_size / num_attention_heads must be even for rotary embeddings");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The nine tensors of one decoder layer, in canonical order.
enum class LayerTensor : std::uint8_t {
  q_proj,
  k_proj,
  v_proj,
  o_proj,
  gate_proj,
  up_proj,
  down_proj,
  input_norm,
  post_attn_norm,
};

inline constexpr std::size_t kLayerTensorCount = 9;

inline constexpr std::array<LayerTensor, kLayerTensorCount> kAllLayerTensors = {
    LayerTensor::q_proj,    LayerTensor::k_proj,  LayerTensor::v_proj,
    LayerTensor::o_proj,    LayerTensor::gate_proj, LayerTensor::up_proj,
    LayerTensor::down_proj, LayerTensor::input_norm, LayerTensor::post_attn_norm,
};

/// Suffix after `model.layers.{i}.` in the canonical Llama naming scheme.
inline constexpr std::string_view tensor_suffix(LayerTensor t) {
  switch (t) {
    case LayerTensor::q_proj: return "self_attn.q_proj.weight";
    case LayerTensor::k_proj: return "self_attn.k_proj.weight";
    case LayerTensor::v_proj: return "self_attn.v_proj.weight";
    case LayerTensor::o_proj: return "self_attn.o_proj.weight";
    case LayerTensor::gate_proj: return "mlp.gate_proj.weight";
    case LayerTensor::up_proj: return "mlp.up_proj.weight";
    case LayerTensor::down_proj: return "mlp.down_proj.weight";
    case LayerTensor::input_norm: return "input_layernorm.weight";
    case LayerTensor::post_attn_norm: return "post_attention_layernorm.weight";
  }
  return "";
}

/// Short name used in reports and CSV output.
inline constexpr std::string_view tensor_short_name(LayerTensor t) {
  switch (t) {
    case LayerTensor::q_proj: return "q_proj";
    case LayerTensor::k_proj: return "k_proj";
    case LayerTensor::v_proj: return "v_proj";
    case LayerTensor::o_proj: return "o_proj";
    case LayerTensor::gate_proj: return "gate_proj";
    case LayerTensor::up_proj: return "up_proj";
    case LayerTensor::down_proj: return "down_proj";
    case LayerTensor::input_norm: return "input_layernorm";
    case LayerTensor::post_attn_norm: return "post_attention_layernorm";
  }
  return "";
}

inline std::string layer_tensor_name(std::size_t layer, LayerTensor t) {
  return "model.layers." + std::to_string(layer) + "." + std::string(tensor_suffix(t));
}

inline constexpr std::string_view kEmbedName = "model.embed_tokens.weight";
inline constexpr std::string_view kFinalNormName = "model.norm.weight";
inline constexpr std::string_view kLmHeadName = "lm_head.weight";

/// Expected on-disk shape of a layer tensor (HF layout: projections are out x in).
inline Shape expected_shape(const ModelConfig& cfg, LayerTensor t) {
  const std::size_t h = cfg.hidden_size;
  switch (t) {
    case LayerTensor::q_proj:
    case LayerTensor::o_proj: return {h, h};
    case LayerTensor::k_proj:
    case LayerTensor::v_proj: return {cfg.kv_dim(), h};
    case LayerTensor::gate_proj:
    case LayerTensor::up_proj: return {cfg.intermediate_size, h};
    case LayerTensor::down_proj: return {h, cfg.intermediate_size};
    case LayerTensor::input_norm:
    case LayerTensor::post_attn_norm: return {h};
  }
  return {};
}

struct LayerParams {
  std::array<TensorPtr, kLayerTensorCount> tensors;
  std::size_t index = 0;

  const Tensor& operator[](LayerTensor t) const { return *tensors[static_cast<std::size_t>(t)]; }
  TensorPtr& ptr(LayerTensor t) { return tensors[static_cast<std::size_t>(t)]; }
  const TensorPtr& ptr(LayerTensor t) const { return tensors[static_cast<std::size_t>(t)]; }

  const Tensor& q_proj() const { return (*this)[LayerTensor::q_proj]; }
  const Tensor& k_proj() const { return (*this)[LayerTensor::k_proj]; }
  const Tensor& v_proj() const { return (*this)[LayerTensor::v_proj]; }
  const Tensor& o_proj() const { return (*this)[LayerTensor::o_proj]; }
  const Tensor& gate_proj() const { return (*this)[LayerTensor::gate_proj]; }
  const Tensor& up_proj() const { return (*this)[LayerTensor::up_proj]; }
  const Tensor& down_proj() const { return (*this)[LayerTensor::down_proj]; }
  const Tensor& input_norm_weight() const { return (*this)[LayerTensor::input_norm]; }
  const Tensor& post_attn_norm_weight() const { return (*this)[LayerTensor::post_attn_norm]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t->numel();
    return n;
  }

  bool bit_equal(const LayerParams& other) const {
    for (std::size_t i = 0; i < kLayerTensorCount; ++i) {
      if (!tensors[i]->bit_equal(*other.tensors[i])) return false;
    }
    return true;
  }
};

/// An immutable decoder-only checkpoint. lm_head == nullptr means the head is tied to embed_tokens.
struct ModelCheckpoint {
  ModelConfig config;
  TensorPtr embed_tokens;
  TensorPtr final_norm_weight;
  TensorPtr lm_head;
  std::vector<LayerParams> layers;

  bool tied_head() const { return lm_head == nullptr; }
  const Tensor& head() const { return lm_head ? *lm_head : *embed_tokens; }
  std::size_t layer_count() const { return layers.size(); }

  /// Checks every structural invariant; throws ShapeError / StructuralError.
  void validate() const {
    config.validate();
    if (layers.size() != config.num_layers) {
      throw StructuralError("checkpoint has " + std::to_string(layers.size()) +
                            " layers but config declares " + std::to_string(config.num_layers));
    }
    auto check = [](const TensorPtr& t, const Shape& want, const std::string& name) {
      if (!t) throw StructuralError("missing tensor " + name);
      if (t->shape() != want) {
        throw ShapeError("tensor " + name + " has shape " + shape_str(t->shape()) +
                         ", expected " + shape_str(want));
      }
      if (!t->all_finite()) throw ShapeError("tensor " + name + " has non-finite entries");
    };
    check(embed_tokens, {config.vocab_size, config.hidden_size}, std::string(kEmbedName));
    check(final_norm_weight, {config.hidden_size}, std::string(kFinalNormName));
    if (lm_head) check(lm_head, {config.vocab_size, config.hidden_size}, std::string(kLmHeadName));
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].index != i) {
        throw StructuralError("layer at position " + std::to_string(i) + " carries index " +
                              std::to_string(layers[i].index));
      }
      for (LayerTensor t : kAllLayerTensors) {
        check(layers[i].ptr(t), expected_shape(config, t), layer_tensor_name(i, t));
      }
    }
  }

  /// Bitwise equality over config, head tying and every tensor.
  bool bit_equal(const ModelCheckpoint& other) const {
    if (!(config == other.config) || layers.size() != other.layers.size()) return false;
    if (tied_head() != other.tied_head()) return false;
    if (!embed_tokens->bit_equal(*other.embed_tokens)) return false;
    if (!final_norm_weight->bit_equal(*other.final_norm_weight)) return false;
    if (lm_head && !lm_head->bit_equal(*other.lm_head)) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].index != other.layers[i].index || !layers[i].bit_equal(other.layers[i])) {
        return false;
      }
    }
    return true;
  }
};

/// Re-stamps layer indices 0..n-1 and syncs config.num_layers.
inline void renumber_layers(ModelCheckpoint& model) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) model.layers[i].index = i;
  model.config.num_layers = model.layers.size();
}

/// Element count of every tensor; a tied head is counted once.
inline std::uint64_t count_parameters(const ModelCheckpoint& model) {
  std::uint64_t n = model.embed_tokens->numel() + model.final_norm_weight->numel();
  if (model.lm_head) n += model.lm_head->numel();
  for (const auto& layer : model.layers) n += layer.numel();
  return n;
}

/// Parameter count implied by shape constants alone.
inline std::uint64_t count_parameters(const ModelConfig& cfg, std::size_t layers, bool tied_head) {
  std::uint64_t per_layer = 0;
  for (LayerTensor t : kAllLayerTensors) per_layer += shape_numel(expected_shape(cfg, t));
  const std::uint64_t embed = std::uint64_t(cfg.vocab_size) * cfg.hidden_size;
  return embed + (tied_head ? 0 : embed) + cfg.hidden_size + per_layer * layers;
}

/// 1 - |pruned| / |original|, counting all tensors.
inline double pruning_ratio(std::uint64_t pruned_params, std::uint64_t original_params) {
  return 1.0 - double(pruned_params) / double(original_params);
}

inline double pruning_ratio(const ModelCheckpoint& pruned, const ModelCheckpoint& original) {
  return pruning_ratio(count_parameters(pruned), count_parameters(original));
}

}  // namespace laco
