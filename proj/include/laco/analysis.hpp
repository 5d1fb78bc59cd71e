#pragma once

// Layer-similarity diagnostics and pruning reports.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "laco/checkpoint.hpp"
#include "laco/corpus.hpp"
#include "laco/error.hpp"
#include "laco/forward.hpp"
#include "laco/kernels.hpp"
#include "laco/merge.hpp"
#include "laco/parallel.hpp"
#include "laco/prune.hpp"

namespace laco {

struct ParamL2Row {
  std::size_t layer_index = 0;  ///< distance between this layer and the next
  std::string tensor;
  double value = 0.0;
};

struct HiddenCosineRow {
  std::size_t layer_index = 0;
  double mean_cosine = 0.0;
};

/// Tensors compared by default: attention q/k/v and the MLP up/down projections.
inline constexpr std::array<LayerTensor, 5> kDefaultL2Tensors = {
    LayerTensor::q_proj, LayerTensor::k_proj, LayerTensor::v_proj,
    LayerTensor::up_proj, LayerTensor::down_proj,
};

/// Frobenius distance of each tensor between layer i and i+1. Empty for < 2 layers.
inline std::vector<ParamL2Row> adjacent_param_l2(const ModelCheckpoint& model, bool all_tensors = false) {
  std::vector<ParamL2Row> rows;
  if (model.layer_count() < 2) return rows;
  std::vector<LayerTensor> which(kDefaultL2Tensors.begin(), kDefaultL2Tensors.end());
  if (all_tensors) which.assign(kAllLayerTensors.begin(), kAllLayerTensors.end());
  for (std::size_t i = 0; i + 1 < model.layer_count(); ++i) {
    for (LayerTensor t : which) {
      rows.push_back({i, std::string(tensor_short_name(t)),
                      l2_distance(model.layers[i][t], model.layers[i + 1][t])});
    }
  }
  return rows;
}

namespace detail {

inline double mean_row_cosine(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    try {
      acc += cosine_similarity(a.row(r), b.row(r));
    } catch (const DegenerateInputError&) {
    }
  }
  return acc / double(a.rows());
}

}  // namespace detail

/// Mean per-token cosine between the outputs of layer i and layer i+1, averaged over `calib`.
inline std::vector<HiddenCosineRow> adjacent_hidden_cosine(const ModelCheckpoint& model,
                                                           const CalibrationSet& calib) {
  std::vector<HiddenCosineRow> rows;
  if (model.layer_count() < 2) return rows;
  if (calib.empty()) throw ConfigError("calibration set is empty");
  const std::size_t pairs = model.layer_count() - 1;
  std::vector<std::vector<double>> per_sentence(calib.size(), std::vector<double>(pairs));
  parallel_for(calib.size(), [&](std::size_t s) {
    const auto outs = forward_layer_outputs(model, calib.sentences[s]);
    for (std::size_t i = 0; i < pairs; ++i) per_sentence[s][i] = detail::mean_row_cosine(outs[i], outs[i + 1]);
  });
  for (std::size_t i = 0; i < pairs; ++i) {
    double acc = 0.0;
    for (const auto& v : per_sentence) acc += v[i];
    rows.push_back({i, acc / double(calib.size())});
  }
  return rows;
}

/// Folds the `count` consecutive layers starting at `start` into one and returns the
/// calibration cosine of final hidden states against the unmerged model. Windows of
/// 0 or 1 layers change nothing and score 1.
inline double merged_window_fidelity(const ModelCheckpoint& model, std::size_t start,
                                     std::size_t count, const CalibrationSet& calib) {
  if (start + count > model.layer_count()) {
    throw RangeError("window " + std::to_string(start) + "+" + std::to_string(count) +
                     " out of range for a " + std::to_string(model.layer_count()) + "-layer model");
  }
  if (count <= 1) return 1.0;
  const ModelCheckpoint merged = merge_layers(model, {start, count - 1});
  return avg_similarity(merged, model, calib, Metric::cosine, Pooling::mean_tokens);
}

/// Pruning summary plus optional diagnostic tables.
struct Report {
  std::size_t original_layers = 0;
  std::size_t pruned_layers = 0;
  std::uint64_t original_params = 0;
  std::uint64_t pruned_params = 0;
  double ratio = 0.0;
  std::optional<PruneTrace> trace;
  std::vector<ParamL2Row> param_l2;
  std::vector<HiddenCosineRow> hidden_cosine;
  std::optional<double> window_fidelity;
  std::string calib_hash;
};

inline Report report(const ModelCheckpoint& original, const ModelCheckpoint& pruned,
                     const std::optional<PruneTrace>& trace = std::nullopt) {
  Report r;
  r.original_layers = original.layer_count();
  r.pruned_layers = pruned.layer_count();
  r.original_params = count_parameters(original);
  r.pruned_params = count_parameters(pruned);
  r.ratio = pruning_ratio(r.pruned_params, r.original_params);
  r.trace = trace;
  return r;
}

inline nlohmann::json report_to_json(const Report& r) {
  nlohmann::json j = {
      {"schema", "laco-report/1"},
      {"original_layers", r.original_layers},
      {"pruned_layers", r.pruned_layers},
      {"original_params", r.original_params},
      {"pruned_params", r.pruned_params},
      {"pruning_ratio", r.ratio},
  };
  if (r.trace) j["trace"] = trace_to_json(*r.trace);
  if (!r.calib_hash.empty()) j["calib_fnv1a64"] = r.calib_hash;
  if (!r.param_l2.empty()) {
    auto& arr = j["param_l2"] = nlohmann::json::array();
    for (const auto& row : r.param_l2) {
      arr.push_back({{"layer_index", row.layer_index}, {"tensor", row.tensor}, {"value", row.value}});
    }
  }
  if (!r.hidden_cosine.empty()) {
    auto& arr = j["hidden_cosine"] = nlohmann::json::array();
    for (const auto& row : r.hidden_cosine) {
      arr.push_back({{"layer_index", row.layer_index}, {"mean_cosine", row.mean_cosine}});
    }
  }
  if (r.window_fidelity) j["window_fidelity"] = *r.window_fidelity;
  return j;
}

namespace detail {

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.precision(17);
  return out;
}

}  // namespace detail

/// CSV: layer_index,tensor,metric,value
inline void write_param_l2_csv(const std::vector<ParamL2Row>& rows, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << "layer_index,tensor,metric,value\n";
  for (const auto& r : rows) out << r.layer_index << "," << r.tensor << ",l2," << r.value << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

/// CSV: layer_index,mean_cosine
inline void write_hidden_cosine_csv(const std::vector<HiddenCosineRow>& rows,
                                    const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << "layer_index,mean_cosine\n";
  for (const auto& r : rows) out << r.layer_index << "," << r.mean_cosine << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_report_json(const Report& r, const std::filesystem::path& path) {
  auto out = detail::open_for_write(path);
  out << report_to_json(r).dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace laco
