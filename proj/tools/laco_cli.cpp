// laco: layer-collapse pruning and checkpoint surgery for Llama-style models.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "laco/laco.hpp"

namespace fs = std::filesystem;
using namespace laco;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kInternal = 4 };

// "a:m,b:m" -> {{a, m}, {b, m}}
std::vector<MergeSpec> parse_groups(const std::string& text) {
  std::vector<MergeSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("groups entry '" + item + "' is not START:M");
    try {
      out.push_back({std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("groups entry '" + item + "' is not START:M");
    }
  }
  return out;
}

// "START,COUNT"
MergeSpec parse_window(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos || text.find(',', comma + 1) != std::string::npos) {
    throw ConfigError("window must be START,COUNT, got '" + text + "'");
  }
  return parse_groups(text.substr(0, comma) + ":" + text.substr(comma + 1)).at(0);
}

std::string percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", ratio * 100.0);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

struct PruneArgs {
  std::string model, calib, out, trace, metric = "cosine", strategy = "laco", pooling = "mean_tokens", groups;
  PruneConfig cfg;
};

int run_prune(const PruneArgs& a) {
  PruneConfig cfg = a.cfg;
  cfg.metric = parse_metric(a.metric);
  cfg.strategy = parse_strategy(a.strategy);
  cfg.pooling = parse_pooling(a.pooling);
  cfg.groups = parse_groups(a.groups);
  if (cfg.strategy != Strategy::laco && cfg.groups.empty()) {
    throw ConfigError("groups: strategy " + a.strategy + " needs --groups");
  }

  const ModelCheckpoint model = load_checkpoint(a.model);
  const Corpus calib = load_corpus(a.calib);
  const PruneResult result = laco_prune(model, cfg, calib);

  ensure_dir(a.out);
  save_checkpoint(result.model, a.out);
  const fs::path trace_path = a.trace.empty() ? fs::path(a.out) / "trace.json" : fs::path(a.trace);
  {
    std::ofstream out(trace_path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + trace_path.string() + " for writing");
    out << trace_to_json(result.trace).dump(2) << "\n";
  }
  Report r = report(model, result.model, result.trace);
  r.calib_hash = file_fnv1a64(a.calib);
  write_report_json(r, fs::path(a.out) / "report.json");

  char time_buf[32];
  std::snprintf(time_buf, sizeof time_buf, "%.2f",
                std::chrono::duration<double>(result.trace.wall_time).count());
  std::cout << "layers: " << r.original_layers << " -> " << r.pruned_layers << ", ratio: " << percent(r.ratio)
            << ", time: " << time_buf << "s\n";
  return kOk;
}

struct AnalyzeArgs {
  std::string model, calib, out, window;
  bool all_tensors = false;
};

int run_analyze(const AnalyzeArgs& a) {
  const ModelCheckpoint model = load_checkpoint(a.model);
  const Corpus calib = load_corpus(a.calib);
  Report r = report(model, model);
  r.calib_hash = file_fnv1a64(a.calib);
  r.param_l2 = adjacent_param_l2(model, a.all_tensors);
  r.hidden_cosine = adjacent_hidden_cosine(model, calib);
  if (!a.window.empty()) {
    const MergeSpec w = parse_window(a.window);
    r.window_fidelity = merged_window_fidelity(model, w.anchor, w.count, calib);
  }
  ensure_dir(a.out);
  write_param_l2_csv(r.param_l2, fs::path(a.out) / "param_l2.csv");
  write_hidden_cosine_csv(r.hidden_cosine, fs::path(a.out) / "hidden_cosine.csv");
  write_report_json(r, fs::path(a.out) / "report.json");
  if (r.window_fidelity) std::cout << "window fidelity: " << *r.window_fidelity << "\n";
  return kOk;
}

struct ToyArgs {
  std::string out, corpus;
  std::uint64_t seed = 0;
  std::size_t layers = 8, hidden = 32, heads = 4, kv_heads = 2, inter = 64, vocab = 128, max_pos = 64;
  std::optional<std::size_t> pivot;
  double noise = 0.05;
  bool tied = false;
  std::size_t sentences = 4, length = 16;
};

int run_gen_toy(const ToyArgs& a) {
  ToyOptions o;
  o.seed = a.seed;
  o.config.num_layers = a.layers;
  o.config.hidden_size = a.hidden;
  o.config.num_attention_heads = a.heads;
  o.config.num_key_value_heads = a.kv_heads;
  o.config.intermediate_size = a.inter;
  o.config.vocab_size = a.vocab;
  o.config.max_position_embeddings = a.max_pos;
  o.duplicate_pivot = a.pivot;
  o.duplicate_noise = a.pivot ? a.noise : 0.0;
  o.tied_head = a.tied;
  try {
    o.config.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  ensure_dir(a.out);
  save_checkpoint(make_toy_model(o), a.out);
  if (!a.corpus.empty()) save_corpus(make_toy_corpus(a.seed, a.sentences, a.length, a.vocab), a.corpus);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-collapse pruning for Llama-style checkpoints"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  unsigned threads = 0;
  app.add_option("--threads", threads, "Worker threads (0: LACO_THREADS or 1)")->default_val(0);

  PruneArgs prune;
  auto* p = app.add_subcommand("prune", "Merge similar rear layers into earlier anchors");
  p->add_option("--model", prune.model, "Checkpoint directory")->required();
  p->add_option("--calib", prune.calib, "Calibration JSONL")->required();
  p->add_option("--out", prune.out, "Output checkpoint directory")->required();
  p->add_option("--C", prune.cfg.merge_count, "Layers combined per merge")->capture_default_str();
  p->add_option("--L", prune.cfg.layer_low, "Lowest anchor layer (0-based)")->capture_default_str();
  p->add_option("--H", prune.cfg.layer_high, "Upper layer bound; pointer starts at H-C")->capture_default_str();
  p->add_option("--I", prune.cfg.min_interval, "Pointer step after a merge")->capture_default_str();
  p->add_option("--T", prune.cfg.threshold, "Accept a merge iff similarity > T")->capture_default_str();
  p->add_option("--metric", prune.metric, "cosine | kl | linear_cka | kernel_cka")->capture_default_str();
  p->add_option("--strategy", prune.strategy, "laco | rule_based | drop")->capture_default_str();
  p->add_option("--pooling", prune.pooling, "mean_tokens | last_token")->capture_default_str();
  p->add_option("--groups", prune.groups, "Fixed schedule START:M,... for rule_based and drop");
  p->add_option("--trace", prune.trace, "Trace JSON path (default OUT/trace.json)");

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "Adjacent-layer similarity tables");
  an->add_option("--model", analyze.model, "Checkpoint directory")->required();
  an->add_option("--calib", analyze.calib, "Calibration JSONL")->required();
  an->add_option("--out", analyze.out, "Output directory")->required();
  an->add_option("--window", analyze.window, "START,COUNT window to fold and score");
  an->add_flag("--all-tensors", analyze.all_tensors, "Include o/gate projections and norms in the L2 table");

  std::string ppl_model, ppl_corpus;
  auto* ev = app.add_subcommand("eval-ppl", "Token-weighted perplexity");
  ev->add_option("--model", ppl_model, "Checkpoint directory")->required();
  ev->add_option("--corpus", ppl_corpus, "Evaluation JSONL")->required();

  std::string mg_model, mg_out;
  std::size_t mg_anchor = 0, mg_m = 1;
  auto* mg = app.add_subcommand("merge", "Fold layers anchor+1..anchor+m into the anchor");
  mg->add_option("--model", mg_model, "Checkpoint directory")->required();
  mg->add_option("--out", mg_out, "Output checkpoint directory")->required();
  mg->add_option("--anchor", mg_anchor, "Anchor layer (0-based)")->required();
  mg->add_option("--m", mg_m, "Followers absorbed")->capture_default_str();

  std::string dr_model, dr_out;
  std::size_t dr_start = 0, dr_m = 1;
  auto* dr = app.add_subcommand("drop", "Remove layers start..start+m-1");
  dr->add_option("--model", dr_model, "Checkpoint directory")->required();
  dr->add_option("--out", dr_out, "Output checkpoint directory")->required();
  dr->add_option("--start", dr_start, "First removed layer (0-based)")->required();
  dr->add_option("--m", dr_m, "Layers removed")->capture_default_str();

  ToyArgs toy;
  auto* gt = app.add_subcommand("gen-toy", "Write a small random checkpoint (and corpus)");
  gt->add_option("--out", toy.out, "Output checkpoint directory")->required();
  gt->add_option("--seed", toy.seed, "RNG seed")->capture_default_str();
  gt->add_option("--layers", toy.layers, "Decoder layers")->capture_default_str();
  gt->add_option("--hidden", toy.hidden, "Hidden size")->capture_default_str();
  gt->add_option("--heads", toy.heads, "Attention heads")->capture_default_str();
  gt->add_option("--kv-heads", toy.kv_heads, "Key/value heads")->capture_default_str();
  gt->add_option("--intermediate", toy.inter, "MLP width")->capture_default_str();
  gt->add_option("--vocab", toy.vocab, "Vocabulary size")->capture_default_str();
  gt->add_option("--max-pos", toy.max_pos, "Maximum sequence length")->capture_default_str();
  gt->add_option("--duplicate-pivot", toy.pivot, "Layers above this copy it plus noise");
  gt->add_option("--noise", toy.noise, "Duplicate noise relative to init std")->capture_default_str();
  gt->add_flag("--tied", toy.tied, "Share embedding and output head");
  gt->add_option("--corpus", toy.corpus, "Also write a random JSONL corpus here");
  gt->add_option("--sentences", toy.sentences, "Corpus sentences")->capture_default_str();
  gt->add_option("--length", toy.length, "Tokens per sentence")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (threads > 0) set_num_threads(threads);
    if (p->parsed()) return run_prune(prune);
    if (an->parsed()) return run_analyze(analyze);
    if (ev->parsed()) {
      const double ppl = perplexity(load_checkpoint(ppl_model), load_corpus(ppl_corpus));
      std::printf("%.2f\n", ppl);
      return kOk;
    }
    if (mg->parsed()) {
      ModelCheckpoint out = merge_layers(load_checkpoint(mg_model), {mg_anchor, mg_m});
      ensure_dir(mg_out);
      save_checkpoint(out, mg_out);
      return kOk;
    }
    if (dr->parsed()) {
      ModelCheckpoint out = drop_layers(load_checkpoint(dr_model), dr_start, dr_m);
      ensure_dir(dr_out);
      save_checkpoint(out, dr_out);
      return kOk;
    }
    if (gt->parsed()) return run_gen_toy(toy);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const InvariantError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
