#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "laco/checkpoint.hpp"
#include "laco/error.hpp"
#include "laco/safetensors.hpp"

namespace laco {

inline constexpr const char* kConfigFileName = "config.json";
inline constexpr const char* kWeightsFileName = "model.safetensors";

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"hidden_size", c.hidden_size},
      {"num_layers", c.num_layers},
      {"num_attention_heads", c.num_attention_heads},
      {"num_key_value_heads", c.num_key_value_heads},
      {"intermediate_size", c.intermediate_size},
      {"vocab_size", c.vocab_size},
      {"rope_theta", c.rope_theta},
      {"norm_eps", c.norm_eps},
      {"max_position_embeddings", c.max_position_embeddings},
  };
}

/// Parses a config object. HF aliases (num_hidden_layers, rms_norm_eps) are accepted as fallbacks.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("model config is not a JSON object");
  auto pick = [&j](std::initializer_list<const char*> keys) -> const nlohmann::json* {
    for (const char* k : keys) {
      if (j.contains(k) && !j.at(k).is_null()) return &j.at(k);
    }
    return nullptr;
  };
  auto required_uint = [&](const char* name, std::initializer_list<const char*> keys) {
    const nlohmann::json* v = pick(keys);
    if (!v) throw FormatError(std::string("model config is missing ") + name);
    if (!v->is_number_integer() || v->get<long long>() <= 0) {
      throw ConfigError(std::string("config field ") + name + " must be a positive integer");
    }
    return v->get<std::size_t>();
  };
  auto optional_real = [&](const char* name, std::initializer_list<const char*> keys, double dflt) {
    const nlohmann::json* v = pick(keys);
    if (!v) return dflt;
    if (!v->is_number()) throw ConfigError(std::string("config field ") + name + " must be a number");
    return v->get<double>();
  };

  ModelConfig c;
  c.hidden_size = required_uint("hidden_size", {"hidden_size"});
  c.num_layers = required_uint("num_layers", {"num_layers", "num_hidden_layers"});
  c.num_attention_heads = required_uint("num_attention_heads", {"num_attention_heads"});
  c.num_key_value_heads = pick({"num_key_value_heads"})
                              ? required_uint("num_key_value_heads", {"num_key_value_heads"})
                              : c.num_attention_heads;
  c.intermediate_size = required_uint("intermediate_size", {"intermediate_size"});
  c.vocab_size = required_uint("vocab_size", {"vocab_size"});
  c.max_position_embeddings = required_uint("max_position_embeddings", {"max_position_embeddings"});
  c.rope_theta = optional_real("rope_theta", {"rope_theta"}, 10000.0);
  c.norm_eps = optional_real("norm_eps", {"norm_eps", "rms_norm_eps"}, 1e-5);
  c.validate();
  return c;
}

namespace detail {

inline bool is_layer_tensor_name(const std::string& name, std::size_t& layer_out) {
  static const std::string prefix = "model.layers.";
  if (name.rfind(prefix, 0) != 0) return false;
  std::size_t pos = prefix.size(), idx = 0;
  bool any = false;
  while (pos < name.size() && name[pos] >= '0' && name[pos] <= '9') {
    idx = idx * 10 + std::size_t(name[pos] - '0');
    ++pos;
    any = true;
  }
  if (!any || pos >= name.size() || name[pos] != '.') return false;
  layer_out = idx;
  return true;
}

}  // namespace detail

/// Loads config.json plus every *.safetensors file in `dir` (concatenated, sorted by file name).
inline ModelCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("checkpoint directory not found: " + dir.string());

  const fs::path config_path = dir / kConfigFileName;
  std::ifstream cin(config_path);
  if (!cin) throw IoError("cannot open " + config_path.string());
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(cin);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(config_path.string() + ": " + e.what());
  }

  ModelCheckpoint model;
  model.config = config_from_json(cj);
  const ModelConfig& cfg = model.config;

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".safetensors") {
      files.push_back(entry.path());
    }
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  if (files.empty()) throw StructuralError("no .safetensors files in " + dir.string());
  std::sort(files.begin(), files.end());

  std::vector<std::unique_ptr<safetensors::File>> opened;
  std::map<std::string, const safetensors::File*> owner;
  for (const auto& f : files) {
    opened.push_back(std::make_unique<safetensors::File>(f));
    for (const auto& [name, info] : opened.back()->tensors()) {
      if (!owner.emplace(name, opened.back().get()).second) {
        throw FormatError("tensor " + name + " appears in more than one safetensors file");
      }
    }
  }

  auto fetch = [&](const std::string& name, const Shape& want) -> TensorPtr {
    const auto it = owner.find(name);
    if (it == owner.end()) throw StructuralError("missing tensor " + name);
    Tensor t = it->second->read(name);
    if (t.shape() != want) {
      throw ShapeError("tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(want));
    }
    return share(std::move(t));
  };

  // Missing layers are reported before unexpected ones so the message names the gap.
  model.layers.resize(cfg.num_layers);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    model.layers[i].index = i;
    for (LayerTensor t : kAllLayerTensors) {
      model.layers[i].ptr(t) = fetch(layer_tensor_name(i, t), expected_shape(cfg, t));
    }
  }
  for (const auto& [name, file] : owner) {
    std::size_t layer = 0;
    if (detail::is_layer_tensor_name(name, layer)) {
      if (name.find(".bias") != std::string::npos) {
        throw StructuralError("unsupported bias tensor " + name);
      }
      if (layer >= cfg.num_layers) {
        throw StructuralError("unexpected tensor " + name + " beyond declared num_layers " +
                              std::to_string(cfg.num_layers));
      }
    }
  }

  model.embed_tokens = fetch(std::string(kEmbedName), {cfg.vocab_size, cfg.hidden_size});
  model.final_norm_weight = fetch(std::string(kFinalNormName), {cfg.hidden_size});
  if (owner.count(std::string(kLmHeadName))) {
    model.lm_head = fetch(std::string(kLmHeadName), {cfg.vocab_size, cfg.hidden_size});
  }
  model.validate();
  return model;
}

/// Writes config.json and model.safetensors (F32) into `dir`, creating it if needed.
/// A tied head is not written.
inline void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  model.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::vector<std::pair<std::string, const Tensor*>> entries;
  entries.emplace_back(std::string(kEmbedName), model.embed_tokens.get());
  for (const auto& layer : model.layers) {
    for (LayerTensor t : kAllLayerTensors) {
      entries.emplace_back(layer_tensor_name(layer.index, t), layer.ptr(t).get());
    }
  }
  entries.emplace_back(std::string(kFinalNormName), model.final_norm_weight.get());
  if (model.lm_head) entries.emplace_back(std::string(kLmHeadName), model.lm_head.get());
  safetensors::write(dir / kWeightsFileName, entries);

  const fs::path config_path = dir / kConfigFileName;
  std::ofstream out(config_path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + config_path.string() + " for writing");
  out << config_to_json(model.config).dump(2) << "\n";
  if (!out) throw IoError("write failed for " + config_path.string());
}

}  // namespace laco
