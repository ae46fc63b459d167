#include <gtest/gtest.h>

#include <fstream>

#include "colongpt/error.hpp"
#include "colongpt/fixtures.hpp"
#include "colongpt/taxonomy.hpp"
#include "support.hpp"

using namespace colongpt;
using namespace colongpt::taxonomy;

namespace {

std::vector<CategoryNode> small_nodes() {
  return {
      {"r1", "Pathological findings", Level::kRoot, std::nullopt},
      {"p1", "Polyps", Level::kParent, "r1"},
      {"c1", "Adenoma", Level::kChild, "p1"},
      {"c2", "Hyperplastic polyp", Level::kChild, "p1"},
      {"rn", "Negative", Level::kRoot, std::nullopt},
      {"pn", "Normal", Level::kParent, "rn"},
      {"cn", "Normal mucosa", Level::kChild, "pn"},
  };
}

DatasetManifest single_category(std::size_t n) {
  DatasetManifest m;
  m.dataset = "ds";
  for (std::size_t i = 0; i < n; ++i) {
    ImageRecord r;
    r.image_id = "im" + std::to_string(i);
    r.dataset = "ds";
    r.rel_path = r.image_id + ".ppm";
    r.width = r.height = 64;
    r.child_category = "c1";
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

TEST(Taxonomy, ValidForestIndexes) {
  const Taxonomy t(small_nodes());
  EXPECT_EQ(t.children().size(), 3u);
  EXPECT_EQ(t.root_of("c1").id, "r1");
  EXPECT_EQ(t.polarity_of("c1"), Polarity::kPositive);
  EXPECT_EQ(t.polarity_of("cn"), Polarity::kNegative);
  ASSERT_NE(t.find_child_by_name("  hyperplastic   POLYP "), nullptr);
  EXPECT_EQ(t.find_child_by_name("  hyperplastic   POLYP ")->id, "c2");
}

TEST(Taxonomy, ChildUnderRootIsReported) {
  auto nodes = small_nodes();
  nodes.push_back({"bad", "Orphan", Level::kChild, "r1"});
  const ValidationReport r = validate_taxonomy(nodes);
  ASSERT_FALSE(r.ok());
  EXPECT_NE(r.violations.front().find("child attached to root: 'bad'"), std::string::npos);
  EXPECT_THROW(Taxonomy{nodes}, DataError);
}

TEST(Taxonomy, DuplicateChildNameIsReported) {
  auto nodes = small_nodes();
  nodes.push_back({"c3", "ADENOMA", Level::kChild, "p1"});
  EXPECT_FALSE(validate_taxonomy(nodes).ok());
}

TEST(Taxonomy, ShippedTaxonomyHasDocumentedShape) {
  const Taxonomy t = read_taxonomy(std::filesystem::path(COLONGPT_DATA_DIR) / "coloninst_taxonomy.json");
  const ValidationReport r = validate_taxonomy(t.nodes());
  EXPECT_TRUE(r.ok());
  EXPECT_EQ(r.roots, 4u);
  EXPECT_EQ(r.parents, 13u);
  EXPECT_EQ(r.children, 62u);
}

TEST(Taxonomy, JsonRoundTrip) {
  const Taxonomy t(small_nodes());
  const auto dir = testing_support::scratch_dir("tax_rt");
  write_taxonomy(t, dir / "t.json");
  EXPECT_EQ(read_taxonomy(dir / "t.json").nodes(), t.nodes());
}

TEST(NormalizeName, CollapsesCaseAndWhitespace) {
  EXPECT_EQ(normalize_name("  Low   grade\tadenoma "), "low grade adenoma");
  EXPECT_EQ(normalize_name(""), "");
}

// ---- box codec -----------------------------------------------------------------

TEST(BoxCodec, EncodesPermilleGrid) {
  EXPECT_EQ(encode_bbox({0, 0, 100, 50}, 100, 100), "[0, 0, 999, 500]");
  EXPECT_EQ(encode_bbox({10, 20, 30, 40}, 200, 100), "[50, 200, 150, 400]");
}

TEST(BoxCodec, DecodeInvertsWithinHalfAPermille) {
  SplitMix64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const int w = 50 + static_cast<int>(rng.below(500)), h = 50 + static_cast<int>(rng.below(500));
    const double x1 = rng.uniform() * w * 0.5, y1 = rng.uniform() * h * 0.5;
    const BBox b{x1, y1, x1 + 5 + rng.uniform() * w * 0.4, y1 + 5 + rng.uniform() * h * 0.4};
    const BBox d = decode_bbox("at " + encode_bbox(b, w, h) + " here", w, h);
    EXPECT_LE(std::abs(d.x1 - b.x1), 0.5 * w / 999.0 + 1e-9);
    EXPECT_LE(std::abs(d.y2 - b.y2), 0.5 * h / 999.0 + 1e-9);
  }
}

TEST(BoxCodec, ErrorsAreTyped) {
  EXPECT_THROW(encode_bbox({5, 5, 5.0001, 9}, 1000, 1000), DegenerateBoxError);
  EXPECT_THROW(encode_bbox({5, 5, 3, 9}, 100, 100), MalformedBoxError);
  EXPECT_THROW(encode_bbox({0, 0, 120, 9}, 100, 100), MalformedBoxError);
  EXPECT_THROW(decode_bbox("no box", 100, 100), ParseError);
  EXPECT_THROW(decode_bbox("[500, 10, 100, 20]", 100, 100), MalformedBoxError);
  EXPECT_FALSE(try_decode_bbox("[1,2,3,4]", 100, 100).has_value());
}

// ---- splits ------------------------------------------------------------------------

TEST(Splits, ThousandSingleCategoryRecordsCutSixOneThree) {
  const DatasetManifest out = assign_splits(single_category(1000), 42);
  std::array<int, 3> n{};
  for (const auto& r : out.records) ++n[static_cast<std::size_t>(r.split)];
  EXPECT_EQ(n, (std::array<int, 3>{600, 100, 300}));
}

TEST(Splits, IndependentOfThreadsAndInputOrder) {
  DatasetManifest m = single_category(257);
  const DatasetManifest a = assign_splits(m, 7, 1);
  std::reverse(m.records.begin(), m.records.end());
  const DatasetManifest b = assign_splits(m, 7, 4);
  EXPECT_EQ(a, b);
  const DatasetManifest c = assign_splits(m, 8, 1);
  EXPECT_NE(a, c);
}

TEST(Splits, ProportionalCutsOracle) {
  // Per-stratum counts follow floor(0.6n) and floor(0.7n) - floor(0.6n).
  for (std::size_t n : {1, 2, 5, 6, 9, 10, 11, 37}) {
    const DatasetManifest out = assign_splits(single_category(n), 1);
    std::array<std::size_t, 3> got{};
    for (const auto& r : out.records) ++got[static_cast<std::size_t>(r.split)];
    const auto train = static_cast<std::size_t>(std::floor(0.6 * n + 1e-9));
    const auto trval = static_cast<std::size_t>(std::floor(0.7 * n + 1e-9));
    EXPECT_EQ(got[0], train) << n;
    EXPECT_EQ(got[1], trval - train) << n;
    EXPECT_EQ(got[2], n - trval) << n;
  }
}

TEST(Splits, PredefinedRequiresEveryRecordAssigned) {
  DatasetManifest m = single_category(3);
  m.split_policy = SplitPolicy::kPredefined;
  EXPECT_THROW(assign_splits(m, 1), PolicyError);
  for (auto& r : m.records) r.split = Split::kTest;
  EXPECT_EQ(assign_splits(m, 1), m);
}

TEST(Splits, DuplicateImageIdsRejected) {
  DatasetManifest m = single_category(3);
  m.records[2].image_id = m.records[0].image_id;
  EXPECT_THROW(assign_splits(m, 1), DataError);
}

// ---- counting -----------------------------------------------------------------------

TEST(Counts, PublishedCountsSatisfyEveryIdentity) {
  const std::array<SplitCounts, 3> splits = {{{74407, 106570, 54237}, {8929, 17328, 4874}, {45284, 50483, 37631}}};
  const CountSummary s = CountSummary::from_split_counts(splits);
  EXPECT_EQ(s.positives(), 128620u);
  EXPECT_EQ(s.boxed_positives(), 96742u);
  EXPECT_EQ(s.dialogue_total(), 450724u);
  EXPECT_EQ(s.images_in(Split::kTrain), 180977u);
  EXPECT_EQ(s.images_in(Split::kVal), 26257u);
  EXPECT_EQ(s.images_in(Split::kTest), 95767u);
  EXPECT_EQ(s.images_total(), 303001u);
  EXPECT_EQ(s.pre_align_corpus(), 83336u);
  EXPECT_EQ(s.sft_corpus(), 201558u);
  EXPECT_TRUE(s.identity_violations().empty());
}

TEST(Counts, SummarizeCountsPerSplit) {
  fixtures::FixtureSpec spec;
  spec.n_images = 30;
  spec.n_categories = 3;
  spec.boxed_fraction = 0.5;
  spec.n_negatives = 7;
  const auto set = fixtures::generate(spec);
  const DatasetManifest m = assign_splits(set.manifest, 1);
  const DatasetManifest ms[] = {m};
  const CountSummary s = summarize(ms);
  EXPECT_EQ(s.positives(), 30u);
  EXPECT_EQ(s.negatives(), 7u);
  EXPECT_EQ(s.boxed_positives(), 15u);
  EXPECT_TRUE(s.identity_violations().empty());
  EXPECT_THROW(summarize(std::span<const DatasetManifest>(&set.manifest, 1)), PolicyError);
}

// ---- manifest io --------------------------------------------------------------------

TEST(Manifest, RoundTripAndPolicyInference) {
  const Taxonomy t(small_nodes());
  DatasetManifest m = single_category(4);
  m.records[1].bbox = BBox{1, 2, 30, 40};
  m.records[3].child_category = "cn";
  m.records[3].polarity = Polarity::kNegative;
  const auto dir = testing_support::scratch_dir("manifest_rt");
  const DatasetManifest ms[] = {m};
  write_manifest(ms, dir / "m.jsonl");
  auto back = read_manifest(dir / "m.jsonl", t);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].split_policy, SplitPolicy::kProportional);
  EXPECT_EQ(back[0].records, m.records);

  DatasetManifest assigned = assign_splits(m, 3);
  const DatasetManifest as[] = {assigned};
  write_manifest(as, dir / "a.jsonl");
  EXPECT_EQ(read_manifest(dir / "a.jsonl", t)[0].split_policy, SplitPolicy::kPredefined);
  EXPECT_EQ(read_manifest(dir / "a.jsonl", t, SplitPolicy::kProportional)[0].split_policy,
            SplitPolicy::kProportional);
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  const Taxonomy t(small_nodes());
  const auto dir = testing_support::scratch_dir("manifest_bad");
  {
    std::ofstream os(dir / "m.jsonl");
    os << R"({"image_id":"a","dataset":"d","rel_path":"a.ppm","width":4,"height":4,"child_category":"c1"})" << "\n";
    os << R"({"image_id":"b","dataset":"d","rel_path":"b.ppm","width":4,"height":4,"child_category":"nope"})"
       << "\n";
  }
  try {
    read_manifest(dir / "m.jsonl", t);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}
