#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "colongpt/error.hpp"
#include "colongpt/eval.hpp"
#include "colongpt/fixtures.hpp"
#include "support.hpp"

using namespace colongpt;
using namespace colongpt::eval;

namespace {

Prediction cls(const std::string& id, const std::string& text) {
  Prediction p = parse_prediction(Task::kCLS, text, 100, 100);
  p.record_id = id;
  return p;
}

std::vector<InstructionRecord> compiled_fixture() {
  fixtures::FixtureSpec spec;
  spec.n_images = 40;
  spec.n_categories = 2;
  spec.boxed_fraction = 0.5;
  spec.n_negatives = 5;
  auto set = fixtures::generate(spec);
  const taxonomy::DatasetManifest m[] = {taxonomy::assign_splits(set.manifest, 2)};
  return instruct::compile(m, set.taxonomy, instruct::TemplateBank::defaults(), instruct::StubCaptionProvider{}, {})
      .records;
}

class EmptyModel final : public Model {
 public:
  std::string generate(const InstructionRecord&) const override { return ""; }
};

class ThrowingModel final : public Model {
 public:
  std::string generate(const InstructionRecord& r) const override {
    if (r.task == Task::kCLS) throw std::runtime_error("backend down");
    return r.response;
  }
};

TaskMetrics metric(Task t, double v) { return {t, 10, v, 0}; }

}  // namespace

TEST(Normalize, Examples) {
  EXPECT_EQ(normalize_category(" Polyp "), "polyp");
  EXPECT_EQ(normalize_category("Low grade   adenoma"), "low grade adenoma");
  EXPECT_EQ(normalize_category("DYED-LIFTED-POLYPS"), "dyed-lifted-polyps");
}

TEST(Accuracy, HandCases) {
  const std::vector<GoldLabel> gold = {{"a", "polyp"}, {"b", "ulcer"}, {"c", "polyp"}, {"d", "tumor"}};
  const std::vector<Prediction> three = {cls("a", "Polyp"), cls("b", " ulcer"), cls("c", "POLYP"), cls("d", "erosion")};
  EXPECT_EQ(score_accuracy(three, gold), 0.75);
  const std::vector<Prediction> all = {cls("a", "polyp"), cls("b", "ulcer"), cls("c", "polyp"), cls("d", "tumor")};
  EXPECT_EQ(score_accuracy(all, gold), 1.0);
}

TEST(Accuracy, ConstantPredictorScoresMajorityFrequency) {
  std::vector<GoldLabel> gold;
  std::vector<Prediction> preds;
  for (int i = 0; i < 10; ++i) {
    const std::string id = "r" + std::to_string(i);
    gold.push_back({id, i < 6 ? "a" : "b"});
    preds.push_back(cls(id, "a"));
  }
  EXPECT_EQ(score_accuracy(preds, gold), 0.6);
}

TEST(Accuracy, AlignmentErrors) {
  const std::vector<GoldLabel> gold = {{"a", "x"}, {"b", "y"}};
  const std::vector<Prediction> one = {cls("a", "x")};
  EXPECT_THROW(score_accuracy(one, gold), AlignmentError);
  const std::vector<Prediction> swapped = {cls("b", "y"), cls("a", "x")};
  EXPECT_THROW(score_accuracy(swapped, gold), AlignmentError);
  EXPECT_THROW(score_accuracy({}, {}), AlignmentError);
}

TEST(Accuracy, FailedPredictionsAreWrong) {
  const std::vector<GoldLabel> gold = {{"a", "x"}, {"b", "y"}};
  const std::vector<Prediction> preds = {cls("a", "x"), cls("b", "")};
  EXPECT_TRUE(preds[1].failed());
  EXPECT_EQ(score_accuracy(preds, gold), 0.5);
}

TEST(Iou, HandCases) {
  EXPECT_NEAR(score_iou({0, 0, 2, 2}, {0, 0, 2, 2}), 1.0, 1e-9);
  EXPECT_NEAR(score_iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0, 1e-9);
  EXPECT_NEAR(score_iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0, 1e-9);
  EXPECT_EQ(score_iou({0, 0, 1, 1}, {1, 0, 2, 1}), 0.0);  // touching edges
}

TEST(Iou, SymmetricAndBounded) {
  SplitMix64 rng(3);
  for (int i = 0; i < 500; ++i) {
    auto box = [&] {
      const double x = rng.uniform() * 10, y = rng.uniform() * 10;
      return BBox{x, y, x + 0.1 + rng.uniform() * 5, y + 0.1 + rng.uniform() * 5};
    };
    const BBox a = box(), b = box();
    const double ab = score_iou(a, b);
    EXPECT_EQ(ab, score_iou(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_EQ(score_iou(a, a), 1.0);
  }
}

TEST(Parse, Examples) {
  const Prediction rec = parse_prediction(Task::kREC, "the polyp is at [100, 250, 300, 500]", 999, 999);
  ASSERT_TRUE(rec.box);
  EXPECT_EQ(*rec.box, (BBox{100, 250, 300, 500}));
  const Prediction miss = parse_prediction(Task::kREC, "I cannot find it", 999, 999);
  EXPECT_TRUE(miss.failed());
  EXPECT_FALSE(miss.box);
  EXPECT_EQ(parse_prediction(Task::kCLS, "Polyp", 1, 1).category, "polyp");
  EXPECT_EQ(parse_prediction(Task::kREG, "  Adenoma ", 1, 1).category, "adenoma");
  EXPECT_TRUE(parse_prediction(Task::kREC, "[9, 9, 1, 1]", 999, 999).failed());
}

TEST(Benchmark, GoldEchoIsPerfect) {
  const auto records = compiled_fixture();
  const BenchmarkRun run = run_benchmark(GoldEchoModel{}, records, "gold");
  for (Task t : {Task::kCLS, Task::kREG, Task::kREC}) {
    for (Column c : {Column::kSeen, Column::kUnseen}) {
      ASSERT_TRUE(run.report.get(t, c));
      EXPECT_EQ(run.report.get(t, c)->value, 1.0);
      EXPECT_EQ(run.report.get(t, c)->parse_errors, 0u);
      EXPECT_GT(run.report.get(t, c)->samples, 0u);
    }
  }
  ASSERT_TRUE(run.report.caption_keyword[0]);
  EXPECT_EQ(run.report.caption_keyword[0]->value, 1.0);
  for (std::size_t i = 1; i < run.predictions.size(); ++i)
    EXPECT_LT(run.predictions[i - 1].record_id, run.predictions[i].record_id);
  for (const auto& p : run.predictions) EXPECT_NE(p.split, taxonomy::Split::kTrain);
}

TEST(Benchmark, EmptyModelScoresZero) {
  const auto records = compiled_fixture();
  const BenchmarkRun run = run_benchmark(EmptyModel{}, records, "empty");
  for (Column c : {Column::kSeen, Column::kUnseen}) {
    EXPECT_EQ(run.report.get(Task::kCLS, c)->value, 0.0);
    const auto& rec = *run.report.get(Task::kREC, c);
    EXPECT_EQ(rec.value, 0.0);
    EXPECT_EQ(rec.parse_errors, rec.samples);
  }
}

TEST(Benchmark, ModelFailuresBecomeParseErrors) {
  const auto records = compiled_fixture();
  const BenchmarkRun run = run_benchmark(ThrowingModel{}, records, "flaky", {}, 3);
  const auto& m = *run.report.get(Task::kCLS, Column::kSeen);
  EXPECT_EQ(m.parse_errors, m.samples);
  EXPECT_EQ(run.report.get(Task::kREG, Column::kSeen)->value, 1.0);
}

TEST(Benchmark, ThreadCountDoesNotChangeResults) {
  const auto records = compiled_fixture();
  const auto a = run_benchmark(GoldEchoModel{}, records, "g", {}, 1);
  const auto b = run_benchmark(GoldEchoModel{}, records, "g", {}, 4);
  EXPECT_EQ(report_to_json(a.report), report_to_json(b.report));
}

TEST(Report, PercentCells) {
  EXPECT_EQ(format_percent(0.9406), "94.06%");
  EXPECT_EQ(format_percent(1.0), "100.00%");
  EXPECT_EQ(format_percent(0.0), "0.00%");
}

TEST(Report, TwoModelGoldenFile) {
  BenchmarkReport a, b;
  a.label = "colongpt-toy";
  a.get(Task::kCLS, Column::kSeen) = metric(Task::kCLS, 0.9406);
  a.get(Task::kCLS, Column::kUnseen) = metric(Task::kCLS, 0.8575);
  a.get(Task::kREG, Column::kSeen) = metric(Task::kREG, 0.9602);
  a.get(Task::kREG, Column::kUnseen) = metric(Task::kREG, 0.8421);
  a.get(Task::kREC, Column::kSeen) = metric(Task::kREC, 0.6612);
  a.get(Task::kREC, Column::kUnseen) = metric(Task::kREC, 0.5031);
  b.label = "mlp-baseline";
  b.get(Task::kCLS, Column::kSeen) = metric(Task::kCLS, 0.5);
  b.get(Task::kREG, Column::kSeen) = metric(Task::kREG, 0.25);
  b.get(Task::kREG, Column::kUnseen) = metric(Task::kREG, 0.125);
  b.get(Task::kREC, Column::kSeen) = metric(Task::kREC, 1.0);
  b.get(Task::kREC, Column::kUnseen) = metric(Task::kREC, 0.0);
  const BenchmarkReport both[] = {a, b};

  std::ifstream in(std::filesystem::path(COLONGPT_TEST_DATA) / "two_models_report.txt");
  std::stringstream golden;
  golden << in.rdbuf();
  EXPECT_EQ(emit_report(both, Format::kTable), golden.str());

  EXPECT_EQ(emit_report(both, Format::kCsv),
            "model,CLS_A_seen,CLS_A_unseen,REG_A_seen,REG_A_unseen,REC_IoU_seen,REC_IoU_unseen\n"
            "colongpt-toy,94.06%,85.75%,96.02%,84.21%,66.12%,50.31%\n"
            "mlp-baseline,50.00%,-,25.00%,12.50%,100.00%,0.00%\n");

  // Round trip through JSON keeps the rendering.
  const BenchmarkReport back[] = {report_from_json(report_to_json(a)), report_from_json(report_to_json(b))};
  EXPECT_EQ(emit_report(back, Format::kTable), golden.str());
}

TEST(Report, EmptyIsHeaderOnly) {
  const std::string t = emit_report({}, Format::kTable);
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 3);
  EXPECT_EQ(t.rfind("Model", 0), 0u);
  EXPECT_EQ(parse_format("csv"), Format::kCsv);
  EXPECT_THROW(parse_format("xml"), UsageError);
}
