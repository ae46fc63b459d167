#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "colongpt/error.hpp"
#include "colongpt/fixtures.hpp"
#include "colongpt/instruct.hpp"
#include "support.hpp"

using namespace colongpt;
using namespace colongpt::instruct;
using taxonomy::Task;

namespace {

taxonomy::ImageRecord boxed_record() {
  taxonomy::ImageRecord r;
  r.image_id = "im1";
  r.dataset = "ds";
  r.rel_path = "im1.ppm";
  r.width = r.height = 1000;
  r.child_category = "child.c0";
  r.bbox = taxonomy::BBox{100, 250, 300, 500};
  r.split = taxonomy::Split::kTrain;
  return r;
}

struct Fixture {
  taxonomy::Taxonomy tax;
  std::vector<taxonomy::DatasetManifest> manifests;
};

// 10 positives, 6 boxed, 4 negatives.
Fixture small_fixture() {
  fixtures::FixtureSpec spec;
  spec.n_images = 10;
  spec.n_categories = 2;
  spec.boxed_fraction = 0.6;
  spec.n_negatives = 4;
  auto set = fixtures::generate(spec);
  return {set.taxonomy, {taxonomy::assign_splits(set.manifest, 5)}};
}

class FailingProvider final : public CaptionProvider {
 public:
  std::string caption(const ImageRef& image, std::string_view category, std::string_view) const override {
    if (image.image_id == "img_00003") throw ProviderError("backend unavailable");
    return std::string(category);
  }
};

}  // namespace

TEST(Templates, DefaultsAreThePublishedRows) {
  const auto bank = TemplateBank::defaults();
  EXPECT_EQ(bank.get(Task::kCLS, 0), "Categorize the object.");
  EXPECT_EQ(bank.get(Task::kREC, 0), "Where is the location of {object category}?");
  EXPECT_TRUE(bank.matches_defaults());
}

TEST(Templates, ShippedFileMatchesDefaults) {
  const auto bank = TemplateBank::read(std::filesystem::path(COLONGPT_DATA_DIR) / "templates.json");
  EXPECT_TRUE(bank.matches_defaults());
}

TEST(Templates, SlotRulesEnforced) {
  auto t = TemplateBank::Templates{};
  for (auto& row : t) row.fill("Describe.");
  for (auto& s : t[1]) s = "What is {object coordinates}?";
  for (auto& s : t[2]) s = "Find {object category}.";
  EXPECT_NO_THROW(TemplateBank{t});
  auto bad = t;
  bad[1][3] = "What is it?";
  EXPECT_THROW(TemplateBank{bad}, DataError);
  bad = t;
  bad[0][0] = "Categorize {object category}.";
  EXPECT_THROW(TemplateBank{bad}, DataError);
}

TEST(Templates, FileRoundTripAndWrongCount) {
  const auto dir = testing_support::scratch_dir("templates");
  TemplateBank::defaults().write(dir / "t.json");
  EXPECT_TRUE(TemplateBank::read(dir / "t.json").matches_defaults());
  std::ofstream(dir / "short.json") << R"({"CLS":["a"],"REG":[],"REC":[],"CAP":[]})";
  EXPECT_THROW(TemplateBank::read(dir / "short.json"), DataError);
}

TEST(Templates, SelectionIsUniform) {
  const auto bank = TemplateBank::defaults();
  SplitMix64 rng(42);
  std::array<int, 5> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto c = select_template(bank, Task::kCLS, rng);
    EXPECT_EQ(c.text, bank.get(Task::kCLS, c.index));
    ++counts[c.index];
  }
  double chi2 = 0.0;
  for (int c : counts) {
    EXPECT_GE(c / double(n), 0.18);
    EXPECT_LE(c / double(n), 0.22);
    chi2 += (c - n / 5.0) * (c - n / 5.0) / (n / 5.0);
  }
  // 4 degrees of freedom, p = 0.01.
  EXPECT_LT(chi2, 13.277);
}

TEST(CaptionPrompt, ConditionedOnCategoryOnly) {
  const auto tax = fixtures::make_taxonomy(3);
  const std::string a = build_caption_prompt(tax, "polyp");
  const std::string b = build_caption_prompt(tax, "adenoma");
  EXPECT_NE(a.find("polyp"), std::string::npos);
  EXPECT_EQ(a, build_caption_prompt(tax, "polyp"));
  std::string a2 = a;
  for (std::size_t p = a2.find("polyp"); p != std::string::npos; p = a2.find("polyp", p + 7)) a2.replace(p, 5, "adenoma");
  EXPECT_EQ(a2, b);
  EXPECT_THROW(build_caption_prompt(tax, "volcano"), DataError);
}

TEST(RenderDialogue, ClsExample) {
  const auto r = render_dialogue(Task::kCLS, boxed_record(), "polyp", "Categorize the object.", 0);
  EXPECT_EQ(r.instruction, "<image>\nCategorize the object.");
  EXPECT_EQ(r.response, "polyp");
  EXPECT_EQ(r.record_id, "ds/im1/CLS");
}

TEST(RenderDialogue, RegAndRecSubstituteSlots) {
  const auto rec = render_dialogue(Task::kREC, boxed_record(), "polyp", "Where is {object category}?", 2);
  EXPECT_EQ(rec.response, "[100, 250, 300, 500]");
  EXPECT_EQ(rec.instruction, "<image>\nWhere is polyp?");
  const auto reg = render_dialogue(Task::kREG, boxed_record(), "polyp", "What is {object coordinates}?", 1);
  EXPECT_EQ(reg.instruction, "<image>\nWhat is [100, 250, 300, 500]?");
  EXPECT_EQ(reg.response, "polyp");
  EXPECT_EQ(reg.bbox_text, rec.bbox_text);
}

TEST(RenderDialogue, Preconditions) {
  auto r = boxed_record();
  r.bbox.reset();
  EXPECT_THROW(render_dialogue(Task::kREG, r, "polyp", "{object coordinates}", 0), PreconditionError);
  EXPECT_THROW(render_dialogue(Task::kCAP, r, "polyp", "Describe.", 0), PreconditionError);
  r.polarity = taxonomy::Polarity::kNegative;
  EXPECT_THROW(render_dialogue(Task::kCLS, r, "normal", "Categorize.", 0), PreconditionError);
}

TEST(Compile, CountingRuleOnSmallFixture) {
  const auto f = small_fixture();
  const auto res = compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, {});
  EXPECT_EQ(res.records.size(), 32u);
  std::map<Task, int> per_task;
  for (const auto& r : res.records) ++per_task[r.task];
  EXPECT_EQ(per_task[Task::kCLS], 10);
  EXPECT_EQ(per_task[Task::kCAP], 10);
  EXPECT_EQ(per_task[Task::kREG], 6);
  EXPECT_EQ(per_task[Task::kREC], 6);
  EXPECT_EQ(res.summary.dialogue_total(), 32u);
  EXPECT_TRUE(res.summary.identity_violations().empty());
  for (const auto& r : res.records) {
    EXPECT_EQ(r.instruction.rfind("<image>\n", 0), 0u);
    if (r.task == Task::kREG) EXPECT_TRUE(taxonomy::try_decode_bbox(r.instruction, 56, 56));
    if (r.task == Task::kREC) EXPECT_TRUE(taxonomy::try_decode_bbox(r.response, 56, 56));
    if (r.task == Task::kCAP) EXPECT_EQ(r.response, "A colonoscopy image showing " + r.category + ".");
  }
}

TEST(Compile, TaskFilterAndCaptionToggle) {
  const auto f = small_fixture();
  CompileConfig cls;
  cls.tasks = {Task::kCLS};
  EXPECT_EQ(compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, cls).records.size(), 10u);
  CompileConfig nocap;
  nocap.include_captions = false;
  EXPECT_EQ(compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, nocap).records.size(), 22u);
  CompileConfig none;
  none.tasks.clear();
  EXPECT_THROW(compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, none), UsageError);
}

TEST(Compile, DeterministicAcrossThreadsAndOrdered) {
  const auto f = small_fixture();
  CompileConfig one, four;
  one.seed = four.seed = 11;
  four.threads = 4;
  const auto a = compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, one);
  const auto b = compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, four);
  EXPECT_EQ(a.records, b.records);
  for (std::size_t i = 1; i < a.records.size(); ++i) {
    EXPECT_LE(a.records[i - 1].image.image_id, a.records[i].image.image_id);
  }
}

TEST(Compile, ProviderFailureIsLoggedNotSilent) {
  const auto f = small_fixture();
  const auto res = compile(f.manifests, f.tax, TemplateBank::defaults(), FailingProvider{}, {});
  ASSERT_EQ(res.errors.size(), 1u);
  EXPECT_NE(res.errors[0].find("img_00003/CAP"), std::string::npos);
  EXPECT_EQ(res.records.size(), 31u);
}

TEST(Compile, UnassignedSplitRejected) {
  auto f = small_fixture();
  f.manifests[0].records[0].split = taxonomy::Split::kUnassigned;
  EXPECT_THROW(compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, {}), PolicyError);
}

TEST(Records, RoundTripEmptyAndTruncated) {
  const auto f = small_fixture();
  const auto res = compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, {});
  const auto dir = testing_support::scratch_dir("records");
  write_records(res.records, dir / "r.jsonl");
  EXPECT_EQ(read_records(dir / "r.jsonl"), res.records);

  write_records({}, dir / "empty.jsonl");
  EXPECT_EQ(std::filesystem::file_size(dir / "empty.jsonl"), 0u);
  EXPECT_TRUE(read_records(dir / "empty.jsonl").empty());

  std::filesystem::resize_file(dir / "r.jsonl", std::filesystem::file_size(dir / "r.jsonl") - 10);
  try {
    read_records(dir / "r.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 32"), std::string::npos) << e.what();
  }
}

TEST(Corpora, StageSelection) {
  const auto f = small_fixture();
  const auto res = compile(f.manifests, f.tax, TemplateBank::defaults(), StubCaptionProvider{}, {});
  for (const auto& r : pre_align_corpus(res.records)) {
    EXPECT_EQ(r.task, Task::kCAP);
    EXPECT_NE(r.split, taxonomy::Split::kTest);
  }
  for (const auto& r : sft_corpus(res.records)) {
    EXPECT_NE(r.task, Task::kCAP);
    EXPECT_NE(r.split, taxonomy::Split::kTest);
  }
}
