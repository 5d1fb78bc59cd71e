#pragma once

// Layer merging by parameter differencing, plus the drop and fixed-schedule variants.
//
// Merging layers l+1..l+m into anchor l rewrites every tensor of l as
//   t* = t_l + sum_k (t_{l+k} - t_l) = sum_k t_{l+k} - (m - 1) t_l
// and removes the absorbed layers. Only the anchor's tensors are reallocated; every
// other tensor is shared with the input checkpoint, which is never modified.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "laco/checkpoint.hpp"
#include "laco/error.hpp"
#include "laco/parallel.hpp"
#include "laco/tensor.hpp"

namespace laco {

struct MergeSpec {
  std::size_t anchor = 0;
  std::size_t count = 0;  ///< followers absorbed into the anchor (m)

  friend bool operator==(const MergeSpec&, const MergeSpec&) = default;
};

inline void validate_merge(const ModelCheckpoint& model, const MergeSpec& range) {
  if (range.count == 0) throw RangeError("merge count must be positive");
  if (range.anchor + range.count >= model.layer_count()) {
    throw RangeError("merge of layers " + std::to_string(range.anchor) + ".." +
                     std::to_string(range.anchor + range.count) + " out of range for a " +
                     std::to_string(model.layer_count()) + "-layer model");
  }
}

/// Merged value of one tensor across the window. Accumulates in double and rounds
/// once, so identical inputs telescope back to the anchor and m = 1 reproduces the
/// successor exactly.
inline Tensor merge_tensor(const std::vector<const Tensor*>& window) {
  const Tensor& anchor = *window.front();
  const std::size_t m = window.size() - 1;
  const double anchor_coeff = double(m) - 1.0;
  Tensor out(anchor.shape());
  for (std::size_t i = 0; i < anchor.numel(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 1; k <= m; ++k) acc += double((*window[k])[i]);
    if (m > 1) acc -= anchor_coeff * double(anchor[i]);
    out[i] = float(acc);
  }
  return out;
}

inline LayerParams merge_layer_params(std::span<const LayerParams> window) {
  LayerParams merged;
  merged.index = window.front().index;
  parallel_for(kLayerTensorCount, [&](std::size_t slot) {
    std::vector<const Tensor*> ts;
    ts.reserve(window.size());
    for (const auto& layer : window) ts.push_back(layer.tensors[slot].get());
    merged.tensors[slot] = share(merge_tensor(ts));
  });
  return merged;
}

/// New checkpoint with layers anchor+1..anchor+count folded into the anchor.
inline ModelCheckpoint merge_layers(const ModelCheckpoint& model, const MergeSpec& range) {
  validate_merge(model, range);
  ModelCheckpoint out = model;
  const std::span<const LayerParams> window(model.layers.data() + range.anchor, range.count + 1);
  out.layers[range.anchor] = merge_layer_params(window);
  const auto first = out.layers.begin() + std::ptrdiff_t(range.anchor + 1);
  out.layers.erase(first, first + std::ptrdiff_t(range.count));
  renumber_layers(out);
  return out;
}

/// New checkpoint with layers start..start+count-1 removed verbatim.
inline ModelCheckpoint drop_layers(const ModelCheckpoint& model, std::size_t start, std::size_t count) {
  if (start + count > model.layer_count()) {
    throw RangeError("drop of layers " + std::to_string(start) + ".." +
                     std::to_string(start + count) + " out of range for a " +
                     std::to_string(model.layer_count()) + "-layer model");
  }
  ModelCheckpoint out = model;
  const auto first = out.layers.begin() + std::ptrdiff_t(start);
  out.layers.erase(first, first + std::ptrdiff_t(count));
  renumber_layers(out);
  return out;
}

/// Applies a fixed merge schedule. Groups index the ORIGINAL layers, must not overlap,
/// and are applied from the top down so lower anchors stay valid.
inline ModelCheckpoint rule_based_merge(const ModelCheckpoint& model, std::vector<MergeSpec> groups) {
  for (const auto& g : groups) validate_merge(model, g);
  std::sort(groups.begin(), groups.end(),
            [](const MergeSpec& a, const MergeSpec& b) { return a.anchor > b.anchor; });
  for (std::size_t i = 1; i < groups.size(); ++i) {
    if (groups[i].anchor + groups[i].count >= groups[i - 1].anchor) {
      throw RangeError("merge groups at anchors " + std::to_string(groups[i].anchor) + " and " +
                       std::to_string(groups[i - 1].anchor) + " overlap");
    }
  }
  ModelCheckpoint out = model;
  for (const auto& g : groups) out = merge_layers(out, g);
  return out;
}

}  // namespace laco
