#pragma once

// Layer Collapse: iterative top-down layer merging gated by calibration-set similarity.
//
//   M* <- M;  l <- H - C
//   while l >= L:
//     K     <- min(C - 1, layers(M*) - l - 1)      (0-based: layers strictly after l)
//     M_tmp <- merge(M*, l, K)
//     s     <- similarity(M_tmp, M, D)              (always against the original M)
//     if s > T: M* <- M_tmp; l <- l - I; if l > layers(M*) - C: l <- layers(M*) - C
//     else:     l <- l - 1

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "laco/checkpoint.hpp"
#include "laco/corpus.hpp"
#include "laco/error.hpp"
#include "laco/forward.hpp"
#include "laco/kernels.hpp"
#include "laco/merge.hpp"
#include "laco/parallel.hpp"

namespace laco {

enum class Metric { cosine, kl, linear_cka, kernel_cka };
enum class Strategy { laco, rule_based, drop };
/// How per-token scores reduce to one score per sentence (cosine and KL only).
enum class Pooling { mean_tokens, last_token };

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::cosine: return "cosine";
    case Metric::kl: return "kl";
    case Metric::linear_cka: return "linear_cka";
    case Metric::kernel_cka: return "kernel_cka";
  }
  return "";
}

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::laco: return "laco";
    case Strategy::rule_based: return "rule_based";
    case Strategy::drop: return "drop";
  }
  return "";
}

inline std::string_view to_string(Pooling p) {
  return p == Pooling::mean_tokens ? "mean_tokens" : "last_token";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "kl") return Metric::kl;
  if (s == "linear_cka") return Metric::linear_cka;
  if (s == "kernel_cka") return Metric::kernel_cka;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "laco") return Strategy::laco;
  if (s == "rule_based") return Strategy::rule_based;
  if (s == "drop") return Strategy::drop;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean_tokens") return Pooling::mean_tokens;
  if (s == "last_token") return Pooling::last_token;
  throw ConfigError("unknown pooling '" + std::string(s) + "'");
}

/// Pruning hyperparameters. Defaults are the Llama2-7B setting (C=4, L=1, H=32, I=2, T=0.65).
struct PruneConfig {
  std::size_t merge_count = 4;   ///< C: layers combined per merge (anchor + C-1 followers)
  std::size_t layer_low = 1;     ///< L: lowest anchor the pointer may reach
  std::size_t layer_high = 32;   ///< H: pointer starts at H - C
  std::size_t min_interval = 2;  ///< I: pointer step after an accepted merge
  double threshold = 0.65;       ///< T: accept iff similarity > T
  Metric metric = Metric::cosine;
  Strategy strategy = Strategy::laco;
  Pooling pooling = Pooling::mean_tokens;
  /// Fixed schedule for rule_based (anchor, followers) and drop (start, count), original indexing.
  std::vector<MergeSpec> groups;

  /// Throws ConfigError naming the offending field.
  void validate(std::size_t num_layers) const {
    if (strategy == Strategy::laco) {
      if (merge_count < 2) throw ConfigError("C must be at least 2, got " + std::to_string(merge_count));
      if (min_interval < 1) throw ConfigError("I must be at least 1");
      if (layer_high > num_layers) {
        throw ConfigError("H (" + std::to_string(layer_high) + ") exceeds the model's " +
                          std::to_string(num_layers) + " layers");
      }
      if (layer_low > layer_high) {
        throw ConfigError("L (" + std::to_string(layer_low) + ") exceeds H (" +
                          std::to_string(layer_high) + ")");
      }
    }
    if (!(threshold > -1.0 && threshold <= 1.0)) {
      throw ConfigError("T must lie in (-1, 1], got " + std::to_string(threshold));
    }
  }
};

struct PruneStep {
  std::int64_t pointer = 0;  ///< l
  std::size_t merged = 0;    ///< K
  double similarity = 0.0;   ///< s
  bool accepted = false;
  std::size_t layers_after = 0;

  friend bool operator==(const PruneStep&, const PruneStep&) = default;
};

struct PruneTrace {
  std::vector<PruneStep> steps;
  std::uint64_t forward_calls = 0;            ///< sentence forwards of candidate models
  std::uint64_t reference_forward_calls = 0;  ///< sentence forwards of the original model
  std::chrono::nanoseconds wall_time{0};

  std::size_t accepted_count() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.accepted;
    return n;
  }
};

inline nlohmann::json trace_to_json(const PruneTrace& trace) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : trace.steps) {
    steps.push_back({{"l", s.pointer}, {"k", s.merged}, {"s", s.similarity},
                     {"accepted", s.accepted}, {"layers_after", s.layers_after}});
  }
  return {{"steps", std::move(steps)},
          {"forward_calls", trace.forward_calls},
          {"wall_ms", std::chrono::duration_cast<std::chrono::milliseconds>(trace.wall_time).count()}};
}

inline PruneTrace trace_from_json(const nlohmann::json& j) {
  PruneTrace t;
  try {
    for (const auto& s : j.at("steps")) {
      t.steps.push_back({s.at("l").get<std::int64_t>(), s.at("k").get<std::size_t>(),
                         s.at("s").get<double>(), s.at("accepted").get<bool>(),
                         s.at("layers_after").get<std::size_t>()});
    }
    t.forward_calls = j.at("forward_calls").get<std::uint64_t>();
    t.wall_time = std::chrono::milliseconds(j.at("wall_ms").get<std::int64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed trace JSON: ") + e.what());
  }
  return t;
}

/// Cached outputs of the original model on the calibration set; computed once per run.
class SimilarityReference {
 public:
  SimilarityReference(const ModelCheckpoint& original, const CalibrationSet& calib, Metric metric,
                      Pooling pooling)
      : calib_(&calib), metric_(metric), pooling_(pooling) {
    if (calib.empty()) throw ConfigError("calibration set is empty");
    if (metric == Metric::linear_cka || metric == Metric::kernel_cka) {
      for (const auto& s : calib.sentences) {
        if (s.size() < 2) throw ConfigError("CKA metrics need calibration sentences of at least 2 tokens");
      }
    }
    outputs_.resize(calib.size());
    parallel_for(calib.size(), [&](std::size_t i) { outputs_[i] = represent(original, calib.sentences[i]); });
    forward_calls_ = calib.size();
  }

  /// Mean per-sentence similarity of `candidate` against the cached original outputs.
  double score(const ModelCheckpoint& candidate) const {
    std::vector<double> per_sentence(calib_->size());
    parallel_for(calib_->size(), [&](std::size_t i) {
      per_sentence[i] = compare(outputs_[i], represent(candidate, calib_->sentences[i]));
    });
    double total = 0.0;
    for (double v : per_sentence) total += v;
    return total / double(per_sentence.size());
  }

  std::size_t sentence_count() const { return calib_->size(); }
  std::uint64_t forward_calls() const { return forward_calls_; }

 private:
  // Hidden states for cosine/CKA, per-position next-token distributions for KL.
  Tensor represent(const ModelCheckpoint& model, const TokenSequence& tokens) const {
    if (metric_ != Metric::kl) return forward_hidden(model, tokens);
    Tensor logits = forward_logits(model, tokens);
    for (std::size_t r = 0; r < logits.rows(); ++r) softmax_inplace(logits.row(r));
    return logits;
  }

  double compare(const Tensor& ref, const Tensor& cand) const {
    switch (metric_) {
      case Metric::cosine:
      case Metric::kl: {
        const std::size_t n = ref.rows();
        const std::size_t first = pooling_ == Pooling::last_token ? n - 1 : 0;
        double acc = 0.0;
        for (std::size_t r = first; r < n; ++r) {
          if (metric_ == Metric::cosine) {
            try {
              acc += cosine_similarity(cand.row(r), ref.row(r));
            } catch (const DegenerateInputError&) {
              // zero-norm row scores 0
            }
          } else {
            acc += kl_divergence(ref.row(r), cand.row(r));
          }
        }
        const double mean = acc / double(n - first);
        // KL is a divergence; exp(-KL) maps it onto (0, 1] so the same "s > T" gate applies.
        return metric_ == Metric::cosine ? mean : std::exp(-mean);
      }
      case Metric::linear_cka:
      case Metric::kernel_cka:
        try {
          return cka(ref, cand, metric_ == Metric::linear_cka ? CkaKind::linear : CkaKind::rbf_kernel);
        } catch (const DegenerateInputError&) {
          return 0.0;
        }
    }
    return 0.0;
  }

  const CalibrationSet* calib_;
  Metric metric_;
  Pooling pooling_;
  std::vector<Tensor> outputs_;
  std::uint64_t forward_calls_ = 0;
};

/// Calibration similarity between a pruned model and the original.
inline double avg_similarity(const ModelCheckpoint& pruned, const ModelCheckpoint& original,
                             const CalibrationSet& calib, Metric metric = Metric::cosine,
                             Pooling pooling = Pooling::mean_tokens) {
  if (pruned.config.hidden_size != original.config.hidden_size ||
      pruned.config.vocab_size != original.config.vocab_size) {
    throw ShapeError("avg_similarity: models differ in hidden or vocab size");
  }
  return SimilarityReference(original, calib, metric, pooling).score(pruned);
}

struct PruneResult {
  ModelCheckpoint model;
  PruneTrace trace;
};

namespace detail {

inline PruneResult run_laco(const ModelCheckpoint& original, const PruneConfig& cfg,
                            const SimilarityReference& ref) {
  PruneResult out{original, {}};
  const auto C = std::int64_t(cfg.merge_count);
  const auto L = std::int64_t(cfg.layer_low);
  const auto I = std::int64_t(cfg.min_interval);
  std::int64_t l = std::int64_t(cfg.layer_high) - C;
  while (l >= L) {
    const auto count = std::int64_t(out.model.layer_count());
    const std::int64_t k = std::min(C - 1, count - l - 1);
    if (k < 1) throw InvariantError("pointer " + std::to_string(l) + " leaves no layer to merge");
    ModelCheckpoint candidate = merge_layers(out.model, {std::size_t(l), std::size_t(k)});
    const double s = ref.score(candidate);
    out.trace.forward_calls += ref.sentence_count();
    PruneStep step{l, std::size_t(k), s, s > cfg.threshold, 0};
    if (step.accepted) {
      out.model = std::move(candidate);
      l -= I;
      const std::int64_t limit = std::int64_t(out.model.layer_count()) - C;
      if (l > limit) l = limit;
    } else {
      l -= 1;
    }
    step.layers_after = out.model.layer_count();
    out.trace.steps.push_back(step);
  }
  return out;
}

// Fixed schedules bypass the gate; each step's similarity is still recorded.
inline PruneResult run_schedule(const ModelCheckpoint& original, const PruneConfig& cfg,
                                const SimilarityReference& ref) {
  std::vector<MergeSpec> groups = cfg.groups;
  if (cfg.strategy == Strategy::rule_based) {
    rule_based_merge(original, groups);  // validates range and overlap up front
  }
  std::sort(groups.begin(), groups.end(),
            [](const MergeSpec& a, const MergeSpec& b) { return a.anchor > b.anchor; });
  PruneResult out{original, {}};
  for (const auto& g : groups) {
    out.model = cfg.strategy == Strategy::rule_based ? merge_layers(out.model, g)
                                                     : drop_layers(out.model, g.anchor, g.count);
    const double s = ref.score(out.model);
    out.trace.forward_calls += ref.sentence_count();
    out.trace.steps.push_back({std::int64_t(g.anchor), g.count, s, true, out.model.layer_count()});
  }
  return out;
}

}  // namespace detail

/// Runs the configured pruning strategy. Only the pruning loop is timed (wall_time).
inline PruneResult laco_prune(const ModelCheckpoint& model, const PruneConfig& cfg,
                              const CalibrationSet& calib) {
  cfg.validate(model.layer_count());
  if (cfg.strategy == Strategy::drop) {
    for (std::size_t i = 0; i < cfg.groups.size(); ++i) {
      for (std::size_t j = 0; j < cfg.groups.size(); ++j) {
        const auto& a = cfg.groups[i];
        const auto& b = cfg.groups[j];
        if (i != j && a.anchor < b.anchor + b.count && b.anchor < a.anchor + a.count) {
          throw RangeError("drop ranges overlap");
        }
      }
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const SimilarityReference ref(model, calib, cfg.metric, cfg.pooling);
  PruneResult result = cfg.strategy == Strategy::laco ? detail::run_laco(model, cfg, ref)
                                                      : detail::run_schedule(model, cfg, ref);
  result.trace.reference_forward_calls = ref.forward_calls();
  result.trace.wall_time = std::chrono::steady_clock::now() - start;
  return result;
}

/// Wall time of the pruning loop alone (no checkpoint or corpus I/O).
inline std::chrono::nanoseconds measure_prune_time(const ModelCheckpoint& model,
                                                   const PruneConfig& cfg,
                                                   const CalibrationSet& calib) {
  return laco_prune(model, cfg, calib).trace.wall_time;
}

/// Candidate-side forward calls stay within (H - L + 1) * |D|.
inline bool inference_budget(const PruneTrace& trace, const PruneConfig& cfg,
                             const CalibrationSet& calib) {
  const std::uint64_t span = cfg.layer_high >= cfg.layer_low ? cfg.layer_high - cfg.layer_low + 1 : 0;
  return trace.forward_calls <= span * calib.size();
}

}  // namespace laco
