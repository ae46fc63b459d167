#pragma once

// Category hierarchy, per-image annotations, split assignment, count
// summaries, and the textual bounding-box codec.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "colongpt/error.hpp"

namespace colongpt::taxonomy {

class DegenerateBoxError : public DataError {
  using DataError::DataError;
};
class MalformedBoxError : public DataError {
  using DataError::DataError;
};

enum class Level { kRoot, kParent, kChild };
enum class Polarity { kPositive, kNegative };
enum class Split { kTrain, kVal, kTest, kUnassigned };
enum class SplitPolicy { kPredefined, kProportional };

std::string_view to_string(Level l);
std::string_view to_string(Split s);
Level parse_level(std::string_view s);
Split parse_split(std::string_view s);

inline constexpr std::array<Split, 3> kSplits = {Split::kTrain, Split::kVal, Split::kTest};

/// Lowercase, trim, and collapse internal whitespace runs to one space.
std::string normalize_name(std::string_view text);

struct CategoryNode {
  std::string id;
  std::string name;
  Level level = Level::kChild;
  std::optional<std::string> parent_id;

  friend bool operator==(const CategoryNode&, const CategoryNode&) = default;
};

struct ValidationReport {
  std::vector<std::string> violations;
  std::size_t roots = 0;
  std::size_t parents = 0;
  std::size_t children = 0;

  bool ok() const noexcept { return violations.empty(); }
};

ValidationReport validate_taxonomy(std::span<const CategoryNode> nodes);

/// Indexed, validated hierarchy. The root whose normalised name is
/// "negative" carries negative polarity; all other roots are positive.
class Taxonomy {
 public:
  Taxonomy() = default;
  /// Throws DataError listing the violations when the forest is invalid.
  explicit Taxonomy(std::vector<CategoryNode> nodes);

  const std::vector<CategoryNode>& nodes() const noexcept { return nodes_; }
  const CategoryNode* find(std::string_view id) const;
  const CategoryNode& at(std::string_view id) const;
  /// Child node by (normalised) display name.
  const CategoryNode* find_child_by_name(std::string_view name) const;
  const CategoryNode& root_of(std::string_view id) const;
  Polarity polarity_of(std::string_view child_id) const;
  std::vector<const CategoryNode*> children() const;

 private:
  std::vector<CategoryNode> nodes_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
  std::map<std::string, std::size_t, std::less<>> child_by_name_;
};

Taxonomy read_taxonomy(const std::filesystem::path& path);
void write_taxonomy(const Taxonomy& tax, const std::filesystem::path& path);

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid_in(double width, double height) const {
    return 0 <= x1 && x1 < x2 && x2 <= width && 0 <= y1 && y1 < y2 && y2 <= height;
  }
  double area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// "[x1, y1, x2, y2]" on the 0..999 permille grid, half away from zero.
std::string encode_bbox(const BBox& b, int width, int height);
/// Parses the first "[int, int, int, int]" in `text` back to pixel space.
BBox decode_bbox(std::string_view text, int width, int height);
/// Non-throwing variant used where failures are data.
std::optional<BBox> try_decode_bbox(std::string_view text, int width, int height);

struct ImageRecord {
  std::string image_id;
  std::string dataset;
  std::string rel_path;
  int width = 0;
  int height = 0;
  std::string child_category;
  Polarity polarity = Polarity::kPositive;
  std::optional<BBox> bbox;
  Split split = Split::kUnassigned;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::string dataset;
  SplitPolicy split_policy = SplitPolicy::kProportional;
  std::vector<ImageRecord> records;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Fraction cut points for the proportional policy, in tenths.
inline constexpr int kTrainTenths = 6;
inline constexpr int kValTenths = 1;
inline constexpr int kTestTenths = 3;

/// Predefined: identity (every record must already carry a split).
/// Proportional: per child category, order by keyed hash of
/// (seed, dataset, image_id) and cut at floor(0.6n) / floor(0.7n).
DatasetManifest assign_splits(const DatasetManifest& manifest, std::uint64_t seed, std::size_t threads = 1);

enum class Task { kCLS, kREG, kREC, kCAP };
inline constexpr std::array<Task, 4> kTasks = {Task::kCLS, Task::kREG, Task::kREC, Task::kCAP};
std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct SplitCounts {
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
  std::uint64_t boxed_positives = 0;
};

struct CountSummary {
  // Indexed by Split (train, val, test).
  std::array<SplitCounts, 3> splits{};
  // dialogues[split][task]
  std::array<std::array<std::uint64_t, 4>, 3> dialogues{};

  /// Counts implied by the four-task rendering rule.
  static CountSummary from_split_counts(const std::array<SplitCounts, 3>& splits);

  std::uint64_t images_total() const { return positives() + negatives(); }
  std::uint64_t positives() const;
  std::uint64_t negatives() const;
  std::uint64_t boxed_positives() const;
  std::uint64_t images_in(Split s) const;
  std::uint64_t task_total(Task t) const;
  std::uint64_t dialogue_total() const;
  std::uint64_t dialogues_in(Split s) const;

  /// CAP dialogues in train+val.
  std::uint64_t pre_align_corpus() const;
  /// CLS+REG+REC dialogues in train+val.
  std::uint64_t sft_corpus() const;

  /// Empty when every counting identity holds.
  std::vector<std::string> identity_violations() const;
};

CountSummary summarize(std::span<const DatasetManifest> manifests);

/// Reads line-delimited records, resolving polarity via `tax`. Records are
/// grouped by their dataset field. When `policy` is absent it is inferred:
/// all records carry a split -> Predefined, otherwise Proportional.
std::vector<DatasetManifest> read_manifest(const std::filesystem::path& path, const Taxonomy& tax,
                                           std::optional<SplitPolicy> policy = std::nullopt);
void write_manifest(std::span<const DatasetManifest> manifests, const std::filesystem::path& path);

}  // namespace colongpt::taxonomy
