#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "colongpt/checkpoint.hpp"
#include "colongpt/cli.hpp"
#include "colongpt/error.hpp"
#include "colongpt/parity.hpp"
#include "support.hpp"

using namespace colongpt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int rc = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "colongpt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// 10 positives (6 boxed) and 4 negatives.
fs::path small_fixture(const std::string& name) {
  const fs::path d = testing_support::scratch_dir(name);
  const Result r = run({"--out", d.string(), "--seed", "3", "fixtures", "--images", "10", "--categories", "2",
                        "--boxed-fraction", "0.6", "--negatives", "4"});
  EXPECT_EQ(r.rc, 0) << r.err;
  return d;
}

}  // namespace

TEST(CliFixtures, WritesManifestImagesAndConfig) {
  const fs::path d = small_fixture("cli_fx");
  EXPECT_EQ(lines(d / "manifest.jsonl"), 14u);
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(d / "images")) images += e.path().extension() == ".ppm";
  EXPECT_EQ(images, 14u);
  EXPECT_TRUE(fs::exists(d / "taxonomy.json"));
  EXPECT_TRUE(fs::exists(d / "config.json"));

  const fs::path d2 = small_fixture("cli_fx2");
  EXPECT_EQ(slurp(d / "manifest.jsonl"), slurp(d2 / "manifest.jsonl"));
  EXPECT_EQ(slurp(d / "images" / "img_00003.ppm"), slurp(d2 / "images" / "img_00003.ppm"));
}

TEST(CliFixtures, OneCategoryIsAUsageError) {
  const fs::path d = testing_support::scratch_dir("cli_fx_bad");
  EXPECT_EQ(run({"--out", d.string(), "fixtures", "--categories", "1"}).rc, 1);
}

TEST(CliCompile, ThirtyTwoDialoguesAndIdentity) {
  const fs::path d = small_fixture("cli_compile");
  const Result r = run({"--out", d.string(), "--config", (d / "config.json").string(), "compile"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("compiled 32 dialogues"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("holds"), std::string::npos);
  std::size_t total = 0;
  for (const char* s : {"train", "val", "test"}) total += lines(d / "instructions" / (std::string(s) + ".jsonl"));
  EXPECT_EQ(total, 32u);
  const auto j = nlohmann::json::parse(slurp(d / "compile_summary.json"));
  EXPECT_EQ(j["records"], 32);
  EXPECT_EQ(j["identity"]["holds"], true);

  // Same inputs, same bytes, any thread count.
  const fs::path again = d / "again";
  ASSERT_EQ(run({"--out", again.string(), "--threads", "3", "--config", (d / "config.json").string(), "compile"}).rc, 0);
  EXPECT_EQ(slurp(d / "instructions" / "train.jsonl"), slurp(again / "instructions" / "train.jsonl"));
}

TEST(CliCompile, TaskSubset) {
  const fs::path d = small_fixture("cli_compile_cls");
  const Result r = run({"--out", d.string(), "--config", (d / "config.json").string(), "compile", "--tasks", "CLS"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("compiled 10 dialogues"), std::string::npos) << r.out;
  EXPECT_EQ(run({"--out", d.string(), "--config", (d / "config.json").string(), "compile", "--tasks", "XYZ"}).rc, 1);
}

TEST(CliCompile, MissingInputsAreUsageErrors) {
  const fs::path d = small_fixture("cli_compile_missing");
  EXPECT_EQ(run({"--out", d.string(), "compile"}).rc, 1);
  auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
  cfg["data"]["taxonomy"] = "nowhere.json";
  std::ofstream(d / "bad.json") << cfg.dump();
  const Result r = run({"--out", d.string(), "--config", (d / "bad.json").string(), "compile"});
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("nowhere.json"), std::string::npos) << r.err;
}

TEST(CliTrain, SftWithoutCheckpointAndEvalWithoutCheckpoint) {
  const fs::path d = small_fixture("cli_train_missing");
  const std::string cfg = (d / "config.json").string();
  ASSERT_EQ(run({"--out", d.string(), "--config", cfg, "compile"}).rc, 0);
  const Result sft = run({"--out", d.string(), "--config", cfg, "train", "sft"});
  EXPECT_EQ(sft.rc, 1);
  EXPECT_NE(sft.err.find("pre_align"), std::string::npos) << sft.err;
  EXPECT_EQ(run({"--out", d.string(), "--config", cfg, "eval"}).rc, 1);
  EXPECT_EQ(run({"--out", d.string(), "--config", cfg, "train", "stage9"}).rc, 1);
}

TEST(CliTrain, StagesChainAndRespectTheFreezeContract) {
  const fs::path d = small_fixture("cli_train");
  const std::string cfg = (d / "config.json").string();
  ASSERT_EQ(run({"--out", d.string(), "--config", cfg, "compile"}).rc, 0);
  const Result pre = run({"--out", d.string(), "--config", cfg, "train", "pre_align", "--max-steps", "2"});
  ASSERT_EQ(pre.rc, 0) << pre.err;
  const auto s = nlohmann::json::parse(slurp(d / "pre_align.summary.json"));
  EXPECT_EQ(s["groups"]["encoder"]["changed"], false);
  EXPECT_EQ(s["groups"]["lm"]["changed"], false);
  EXPECT_EQ(s["groups"]["adapter"]["changed"], true);
  EXPECT_DOUBLE_EQ(s["initial_lr"]["adapter"].get<double>(), 2e-4);
  EXPECT_EQ(lines(d / "pre_align.log.jsonl"), 2u);

  const Result sft = run({"--out", d.string(), "--config", cfg, "train", "sft", "--max-steps", "2"});
  ASSERT_EQ(sft.rc, 0) << sft.err;
  const auto t = nlohmann::json::parse(slurp(d / "sft.summary.json"));
  EXPECT_EQ(t["groups"]["lm"]["changed"], false);
  EXPECT_EQ(t["groups"]["lora"]["changed"], true);
  EXPECT_DOUBLE_EQ(t["initial_lr"]["adapter"].get<double>(), 2e-3);
  EXPECT_DOUBLE_EQ(t["initial_lr"]["lora"].get<double>(), 2e-4);
  // The stage-1 adapter is the stage-2 starting point.
  EXPECT_EQ(t["groups"]["adapter"]["before"], s["groups"]["adapter"]["after"]);

  const Result ev = run({"--out", d.string(), "--config", cfg, "eval", "--label", "tiny"});
  ASSERT_EQ(ev.rc, 0) << ev.err;
  EXPECT_EQ(ev.out.rfind("Model", 0), 0u);
  EXPECT_TRUE(fs::exists(d / "eval" / "predictions.jsonl"));
  EXPECT_TRUE(fs::exists(d / "eval" / "report.csv"));
}

TEST(CliTrain, DivergenceExitsWithThree) {
  const fs::path d = small_fixture("cli_diverge");
  auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
  cfg["train"]["pre_align"]["adapter_lr"] = 1e300;
  cfg["train"]["pre_align"]["max_steps"] = 6;
  cfg["train"]["grad_accum"] = 1;
  std::ofstream(d / "hot.json") << cfg.dump();
  const std::string path = (d / "hot.json").string();
  ASSERT_EQ(run({"--out", d.string(), "--config", path, "compile"}).rc, 0);
  const Result r = run({"--out", d.string(), "--config", path, "train", "pre_align"});
  EXPECT_EQ(r.rc, 3) << r.err;
  EXPECT_NE(r.err.find("diverged at step"), std::string::npos) << r.err;
}

TEST(CliEval, GoldEchoIsPerfect) {
  const fs::path d = testing_support::scratch_dir("cli_gold");
  ASSERT_EQ(run({"--out", d.string(), "fixtures", "--images", "20", "--categories", "2", "--negatives", "3"}).rc, 0);
  const std::string cfg = (d / "config.json").string();
  ASSERT_EQ(run({"--out", d.string(), "--config", cfg, "compile"}).rc, 0);
  const Result r = run({"--out", d.string(), "--config", cfg, "eval", "--gold-echo"});
  ASSERT_EQ(r.rc, 0) << r.err;
  const std::string csv = slurp(d / "eval" / "report.csv");
  EXPECT_NE(csv.find("gold-echo,100.00%,100.00%,100.00%,100.00%,100.00%,100.00%"), std::string::npos) << csv;

  // Two saved reports side by side.
  fs::copy_file(d / "eval" / "report.json", d / "a.json");
  const Result m = run({"report", "models", (d / "a.json").string(), (d / "eval" / "report.json").string(),
                        "--format", "csv"});
  ASSERT_EQ(m.rc, 0) << m.err;
  EXPECT_EQ(std::count(m.out.begin(), m.out.end(), '\n'), 3);
}

TEST(CliReport, TokenBudgetAndLoraGrid) {
  const Result t = run({"report", "tokens"});
  ASSERT_EQ(t.rc, 0);
  EXPECT_NE(t.out.find("246"), std::string::npos);
  EXPECT_NE(t.out.find("33.74%"), std::string::npos);
  EXPECT_NE(t.out.find("729"), std::string::npos);
  const Result g = run({"report", "lora-grid"});
  ASSERT_EQ(g.rc, 0);
  EXPECT_NE(g.out.find("1024"), std::string::npos);
  EXPECT_EQ(run({"report", "bogus"}).rc, 1);
}

TEST(CliUsage, BadInvocationsExitOne) {
  EXPECT_EQ(run({}).rc, 1);
  EXPECT_EQ(run({"frobnicate"}).rc, 1);
  EXPECT_EQ(run({"--threads", "0", "report", "tokens"}).rc, 1);
  EXPECT_EQ(run({"--help"}).rc, 0);
}

// ---- parity dump ------------------------------------------------------------------

TEST(ParityDump, FormatIsCompleteAndSelfConsistent) {
  const fs::path d = testing_support::scratch_dir("cli_parity");
  ASSERT_EQ(run({"--dump-parity", d.string()}).rc, 0);
  const auto manifest = nlohmann::json::parse(slurp(d / "cases.json"));
  EXPECT_EQ(manifest["arrays"], "arrays.ckpt");
  const auto arrays = checkpoint::read(d / "arrays.ckpt");
  std::set<std::string> ops;
  for (const auto& c : manifest["cases"]) {
    for (const char* key : {"name", "operator", "inputs", "output", "attrs", "tolerance"}) {
      EXPECT_TRUE(c.contains(key)) << key;
    }
    for (const auto& in : c["inputs"]) EXPECT_TRUE(arrays.count(in.get<std::string>())) << in;
    EXPECT_TRUE(arrays.count(c["output"].get<std::string>()));
    EXPECT_LE(c["tolerance"].get<double>(), 1e-10);
    ops.insert(c["operator"].get<std::string>());
  }
  EXPECT_EQ(manifest["cases"].size(), 9u);
  EXPECT_GE(ops.size(), 6u);

  const parity::Dump dump = parity::read(d);
  for (const auto& [name, dev] : parity::self_check(dump)) EXPECT_LT(dev, 1e-12) << name;
}

TEST(ParityDump, CorruptedDumpIsDetected) {
  const fs::path d = testing_support::scratch_dir("cli_parity_bad");
  parity::write(parity::build(0), d);
  parity::Dump dump = parity::read(d);
  auto& out = dump.arrays.at(dump.cases.front().output);
  out[0] += 1e-6;
  bool flagged = false;
  for (const auto& [name, dev] : parity::self_check(dump))
    if (name == dump.cases.front().name) flagged = dev > dump.cases.front().tolerance;
  EXPECT_TRUE(flagged);

  std::filesystem::resize_file(d / "arrays.ckpt", fs::file_size(d / "arrays.ckpt") / 2);
  EXPECT_THROW(parity::read(d), ParseError);
}
