#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "colongpt/checkpoint.hpp"
#include "colongpt/error.hpp"
#include "colongpt/train.hpp"
#include "support.hpp"

using namespace colongpt;
using namespace colongpt::train;

namespace {

lm::Bundle small_bundle(std::uint64_t seed) {
  lm::Bundle b;
  b.encoder = {8, 8, 4, 6};
  b.adapter.kernels = {2, 1};
  b.adapter.in_dim = 6;
  b.adapter.out_dim = 16;
  b.lm.layers = 1;
  b.lm.heads = 2;
  b.lm.model_dim = 16;
  b.lm.context_len = 96;
  b.params = vision::init_encoder(b.encoder, seed);
  b.params.merge(vision::init_adapter(b.adapter, seed + 1));
  b.params.merge(lm::init_lm(b.lm, seed + 2));
  return b;
}

std::vector<TrainExample> corpus(std::size_t n, std::uint64_t seed, std::string_view instr = "Describe.") {
  SplitMix64 rng(seed);
  const char* words[] = {"polyp", "ulcer", "tumor", "erosion"};
  std::vector<TrainExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    TrainExample ex;
    ex.embedding = testing_support::random_tensor({4, 6}, rng);
    ex.prompt = lm::prompt_ids("<image>\n" + std::string(instr));
    ex.response = lm::Tokenizer::tokenize(words[i % 4]);
    out.push_back(std::move(ex));
  }
  return out;
}

TrainPlan quick(Stage stage, std::size_t steps) {
  TrainPlan p = TrainPlan::recipe(stage);
  p.batch = 4;
  p.max_steps = steps;
  p.seed = 3;
  return p;
}

}  // namespace

TEST(Recipe, PublishedDefaults) {
  const TrainPlan pre = TrainPlan::recipe(Stage::kPreAlign);
  const TrainPlan sft = TrainPlan::recipe(Stage::kSft);
  EXPECT_EQ(pre.epochs, 3u);
  EXPECT_EQ(pre.batch, 16u);
  EXPECT_EQ(pre.grad_accum, 2u);
  EXPECT_DOUBLE_EQ(pre.adapter_lr, 2e-4);
  EXPECT_DOUBLE_EQ(sft.adapter_lr, 2e-3);
  EXPECT_DOUBLE_EQ(sft.lora_lr, 2e-4);
  EXPECT_EQ(sft.weight_decay, 0.0);
  EXPECT_EQ(pre.total_steps(33), 9u);
  EXPECT_EQ(pre.total_updates(33), 5u);
}

TEST(Recipe, StageParsing) {
  EXPECT_EQ(parse_stage("pre_align"), Stage::kPreAlign);
  EXPECT_EQ(parse_stage("sft"), Stage::kSft);
  EXPECT_THROW(parse_stage("stage3"), UsageError);
}

TEST(Cosine, DecaysToZeroWithoutWarmup) {
  EXPECT_DOUBLE_EQ(cosine_lr(2e-3, 0, 10), 2e-3);
  EXPECT_NEAR(cosine_lr(2e-3, 5, 10), 1e-3, 1e-18);
  EXPECT_NEAR(cosine_lr(2e-3, 10, 10), 0.0, 1e-18);
  for (std::size_t u = 0; u <= 7; ++u)
    EXPECT_NEAR(cosine_lr(1.0, u, 7), 0.5 * (1 + std::cos(std::numbers::pi * u / 7.0)), 1e-15);
}

TEST(Groups, NamePrefixAndTrainableSets) {
  EXPECT_EQ(group_of("lm.layers.0.attn.q.weight"), "lm");
  EXPECT_EQ(group_of("adapter"), "adapter");
  lm::Bundle b = small_bundle(1);
  attach_lora(b, {4, 8.0}, 2);
  for (const auto& n : trainable_names(b, Stage::kPreAlign)) EXPECT_EQ(group_of(n), "adapter");
  std::set<std::string> groups;
  for (const auto& n : trainable_names(b, Stage::kSft)) groups.insert(group_of(n));
  EXPECT_EQ(groups, (std::set<std::string>{"adapter", "lora"}));
}

TEST(Freeze, PreAlignTouchesOnlyTheAdapter) {
  lm::Bundle b = small_bundle(4);
  const auto data = corpus(8, 5);
  const TrainResult r = train::train(quick(Stage::kPreAlign, 10), data, b);
  EXPECT_EQ(r.log.size(), 10u);
  EXPECT_EQ(r.updates, 5u);
  EXPECT_EQ(r.hashes_before.at("encoder"), r.hashes_after.at("encoder"));
  EXPECT_EQ(r.hashes_before.at("lm"), r.hashes_after.at("lm"));
  EXPECT_NE(r.hashes_before.at("adapter"), r.hashes_after.at("adapter"));
  EXPECT_EQ(r.hashes_after, group_hashes(b.params));
}

TEST(Freeze, SftTouchesAdapterAndLoraOnly) {
  lm::Bundle b = small_bundle(6);
  attach_lora(b, {4, 8.0}, 7);
  const auto data = corpus(8, 8);
  const TrainResult r = train::train(quick(Stage::kSft, 6), data, b);
  EXPECT_EQ(r.hashes_before.at("encoder"), r.hashes_after.at("encoder"));
  EXPECT_EQ(r.hashes_before.at("lm"), r.hashes_after.at("lm"));
  EXPECT_NE(r.hashes_before.at("adapter"), r.hashes_after.at("adapter"));
  EXPECT_NE(r.hashes_before.at("lora"), r.hashes_after.at("lora"));
}

TEST(Sft, RequiresLora) {
  lm::Bundle b = small_bundle(9);
  const auto data = corpus(4, 1);
  EXPECT_THROW(train::train(quick(Stage::kSft, 2), data, b), PreconditionError);
}

TEST(Determinism, SameSeedSameCheckpoint) {
  const auto data = corpus(6, 10);
  lm::Bundle a = small_bundle(11), b = small_bundle(11);
  attach_lora(a, {4, 8.0}, 12);
  attach_lora(b, {4, 8.0}, 12);
  const TrainResult ra = train::train(quick(Stage::kSft, 5), data, a);
  const TrainResult rb = train::train(quick(Stage::kSft, 5), data, b);
  EXPECT_EQ(a.params, b.params);
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(log_line(ra.log[i]), log_line(rb.log[i]));

  lm::Bundle c = small_bundle(11);
  attach_lora(c, {4, 8.0}, 12);
  TrainPlan other = quick(Stage::kSft, 5);
  other.seed = 4;
  train::train(other, data, c);
  EXPECT_NE(checkpoint::content_hash(c.params, "adapter."), checkpoint::content_hash(a.params, "adapter."));
}

TEST(Log, LineFormatAndSchedule) {
  lm::Bundle b = small_bundle(13);
  attach_lora(b, {4, 8.0}, 14);
  const auto data = corpus(8, 15);
  std::vector<std::size_t> seen;
  const TrainResult r = train::train(quick(Stage::kSft, 4), data, b, [&](const StepRecord& s) { seen.push_back(s.step); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
  // Two updates over four steps: lr holds for a pair, then follows the cosine.
  EXPECT_DOUBLE_EQ(r.log[0].lr.at("adapter"), 2e-3);
  EXPECT_DOUBLE_EQ(r.log[1].lr.at("adapter"), 2e-3);
  EXPECT_NEAR(r.log[2].lr.at("adapter"), 1e-3, 1e-18);
  EXPECT_NEAR(r.log[2].lr.at("lora"), 1e-4, 1e-18);

  StepRecord rec{7, Stage::kSft, 0.5, {{"adapter", 0.25}, {"lora", 0.125}}};
  EXPECT_EQ(log_line(rec), R"({"step":7,"stage":"sft","loss":0.5,"lr":{"adapter":0.25,"lora":0.125}})");

  const auto dir = testing_support::scratch_dir("train_log");
  write_log(r.log, dir / "log.jsonl");
  std::ifstream in(dir / "log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) EXPECT_EQ(line, log_line(r.log[n++]));
  EXPECT_EQ(n, 4);
}

TEST(Training, LossFallsOnATinyCorpus) {
  lm::Bundle b = small_bundle(16);
  attach_lora(b, {4, 8.0}, 17);
  const auto data = corpus(4, 18);
  TrainPlan p = quick(Stage::kSft, 60);
  p.adapter_lr = 3e-2;
  p.lora_lr = 3e-2;
  const TrainResult r = train::train(p, data, b);
  EXPECT_LT(r.log.back().loss, 0.7 * r.log.front().loss);
}

TEST(Divergence, NonFiniteLossNamesTheStep) {
  lm::Bundle b = small_bundle(19);
  b.params.at("adapter.linear2.bias")[0] = std::nan("");
  const auto data = corpus(4, 20);
  try {
    train::train(quick(Stage::kPreAlign, 3), data, b);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
  }
}

TEST(Plan, Validation) {
  TrainPlan p;
  p.batch = 0;
  EXPECT_THROW(p.validate(), UsageError);
  p = TrainPlan{};
  p.adapter_lr = -1;
  EXPECT_THROW(p.validate(), UsageError);
}
