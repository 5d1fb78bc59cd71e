#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "test_util.hpp"

using namespace laco;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

CliRun laco_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + LACO_CLI_PATH + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// Toy checkpoint plus calibration corpus written through the CLI itself.
struct ToyFixture {
  fs::path dir, model, calib;
  explicit ToyFixture(const std::string& name, const std::string& extra = "--duplicate-pivot 3") {
    dir = testutil::scratch_dir(name);
    model = dir / "model";
    calib = dir / "calib.jsonl";
    const CliRun r = laco_cli("gen-toy --seed 3 --out \"" + model.string() + "\" --corpus \"" + calib.string() +
                               "\" --sentences 3 --length 10 " + extra,
                           dir);
    EXPECT_EQ(r.code, 0) << r.err;
  }
  std::string paths() const { return "--model \"" + model.string() + "\" --calib \"" + calib.string() + "\""; }
};

std::string strip_wall(const std::string& trace_json) {
  auto j = nlohmann::json::parse(trace_json);
  j.erase("wall_ms");
  return j.dump();
}

}  // namespace

TEST(Cli, UnattainableThresholdSummaryLine) {
  const ToyFixture f("cli_t1");
  const CliRun r = laco_cli("prune " + f.paths() + " --out \"" + (f.dir / "out").string() +
                             "\" --C 3 --L 0 --H 8 --I 1 --T 1.0",
                         f.dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("layers: 8 -> 8, ratio: 0.0%, time: ", 0), 0u) << r.out;
  EXPECT_TRUE(fs::exists(f.dir / "out" / "trace.json"));
  EXPECT_TRUE(fs::exists(f.dir / "out" / "report.json"));
  EXPECT_TRUE(load_checkpoint(f.dir / "out").bit_equal(load_checkpoint(f.model)));
}

TEST(Cli, PruneIsDeterministicAcrossInvocations) {
  const ToyFixture f("cli_det");
  std::string ckpt[2], trace[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path out = f.dir / ("out" + std::to_string(i));
    const CliRun r = laco_cli("prune " + f.paths() + " --out \"" + out.string() + "\" --C 3 --L 0 --H 8 --I 1 --T 0.9",
                           f.dir);
    ASSERT_EQ(r.code, 0) << r.err;
    ckpt[i] = slurp(out / "model.safetensors") + slurp(out / "config.json");
    trace[i] = strip_wall(slurp(out / "trace.json"));
  }
  EXPECT_EQ(ckpt[0], ckpt[1]);
  EXPECT_EQ(trace[0], trace[1]);
  EXPECT_LT(load_checkpoint(f.dir / "out0").layer_count(), 8u);
}

TEST(Cli, EvalPplOnUniformHeadPrintsVocabSize) {
  const auto dir = testutil::scratch_dir("cli_ppl");
  ModelCheckpoint m = make_toy_model(testutil::toy_options(4, 2));
  m.lm_head = share(Tensor::matrix(m.config.vocab_size, m.config.hidden_size));
  save_checkpoint(m, dir / "model");
  save_corpus(make_toy_corpus(4, 3, 8, m.config.vocab_size), dir / "eval.jsonl");
  const CliRun r = laco_cli("eval-ppl --model \"" + (dir / "model").string() + "\" --corpus \"" +
                             (dir / "eval.jsonl").string() + "\"",
                         dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "128.00\n");
}

TEST(Cli, EvalPplMatchesOracle) {
  const auto dir = testutil::scratch_dir("cli_ppl_oracle");
  const ModelCheckpoint m = make_toy_model(testutil::toy_options(5, 3));
  const Corpus c = make_toy_corpus(5, 4, 12, m.config.vocab_size);
  save_checkpoint(m, dir / "model");
  save_corpus(c, dir / "eval.jsonl");
  const CliRun r = laco_cli("eval-ppl --model \"" + (dir / "model").string() + "\" --corpus \"" +
                             (dir / "eval.jsonl").string() + "\"",
                         dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const double want = oracle::perplexity(oracle::from_checkpoint(m), c);
  EXPECT_NEAR(std::stod(r.out), want, 1e-3 * want + 0.005);
}

TEST(Cli, MergeOfOneEqualsDrop) {
  const ToyFixture f("cli_merge");
  const auto base = "--model \"" + f.model.string() + "\" --out \"";
  ASSERT_EQ(laco_cli("merge " + base + (f.dir / "m").string() + "\" --anchor 2 --m 1", f.dir).code, 0);
  ASSERT_EQ(laco_cli("drop " + base + (f.dir / "d").string() + "\" --start 2 --m 1", f.dir).code, 0);
  EXPECT_EQ(slurp(f.dir / "m" / "model.safetensors"), slurp(f.dir / "d" / "model.safetensors"));
  ASSERT_EQ(laco_cli("merge " + base + (f.dir / "m3").string() + "\" --anchor 3 --m 3", f.dir).code, 0);
  const ModelCheckpoint merged = load_checkpoint(f.dir / "m3");
  EXPECT_EQ(merged.layer_count(), 5u);
}

TEST(Cli, AnalyzeWritesTables) {
  const ToyFixture f("cli_analyze");
  const fs::path out = f.dir / "an";
  const CliRun r = laco_cli("analyze " + f.paths() + " --out \"" + out.string() + "\" --window 3,4", f.dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out / "hidden_cosine.csv").rfind("layer_index,mean_cosine\n", 0), 0u);
  EXPECT_EQ(slurp(out / "param_l2.csv").rfind("layer_index,tensor,metric,value\n", 0), 0u);
  const auto j = nlohmann::json::parse(slurp(out / "report.json"));
  EXPECT_TRUE(j.contains("window_fidelity"));
  EXPECT_EQ(j["calib_fnv1a64"], file_fnv1a64(f.calib));
}

TEST(Cli, ExitCodes) {
  const ToyFixture f("cli_codes");
  const std::string out = " --out \"" + (f.dir / "x").string() + "\"";
  EXPECT_EQ(laco_cli("", f.dir).code, 2);
  EXPECT_EQ(laco_cli("prune --bogus", f.dir).code, 2);
  CliRun r = laco_cli("prune " + f.paths() + out + " --C 1", f.dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("C "), std::string::npos) << r.err;
  r = laco_cli("prune " + f.paths() + out + " --H 9", f.dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("H "), std::string::npos) << r.err;
  EXPECT_EQ(laco_cli("prune " + f.paths() + out + " --metric nope", f.dir).code, 2);
  EXPECT_EQ(laco_cli("prune --model \"" + (f.dir / "nowhere").string() + "\" --calib \"" + f.calib.string() +
                         "\"" + out,
                     f.dir)
                .code,
            3);
  fs::remove(f.model / "config.json");
  EXPECT_EQ(laco_cli("eval-ppl --model \"" + f.model.string() + "\" --corpus \"" + f.calib.string() + "\"", f.dir)
                .code,
            3);
  EXPECT_EQ(laco_cli("merge --model \"" + f.model.string() + "\"" + out + " --anchor 7 --m 1", f.dir).code, 3);
}

TEST(Cli, HelpListsFlagsWithDefaults) {
  const auto dir = testutil::scratch_dir("cli_help");
  const CliRun r = laco_cli("prune --help", dir);
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--model", "--calib", "--out", "--C", "--L", "--H", "--I", "--T", "--metric",
                           "--strategy", "--trace", "--groups", "--pooling"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
  for (const char* def : {"[4]", "[1]", "[32]", "[2]", "[0.65]", "[cosine]", "[laco]"}) {
    EXPECT_NE(r.out.find(def), std::string::npos) << def << "\n" << r.out;
  }
}

TEST(Cli, ThreadsFlagDoesNotChangeOutput) {
  const ToyFixture f("cli_threads");
  std::string ckpt[2];
  const char* extra[2] = {"", " --threads 3"};
  for (int i = 0; i < 2; ++i) {
    const fs::path out = f.dir / ("o" + std::to_string(i));
    const CliRun r = laco_cli("prune " + f.paths() + " --out \"" + out.string() + "\" --C 3 --L 0 --H 8 --I 1 --T 0.9" +
                               extra[i],
                           f.dir);
    ASSERT_EQ(r.code, 0) << r.err;
    ckpt[i] = slurp(out / "model.safetensors");
  }
  EXPECT_EQ(ckpt[0], ckpt[1]);
}
