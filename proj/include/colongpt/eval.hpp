#pragma once

// Output parsing, CLS/REG accuracy, REC IoU, seen/unseen benchmark runs and
// report rendering.

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "colongpt/instruct.hpp"
#include "colongpt/taxonomy.hpp"

namespace colongpt::eval {

using instruct::InstructionRecord;
using taxonomy::BBox;
using taxonomy::Split;
using taxonomy::Task;

class AlignmentError : public DataError {
  using DataError::DataError;
};

/// Lowercase, trimmed, internal whitespace runs collapsed to one space.
std::string normalize_category(std::string_view text);

struct Prediction {
  std::string record_id;
  Task task = Task::kCLS;
  Split split = Split::kUnassigned;
  std::string raw;
  std::optional<std::string> category;
  std::optional<BBox> box;
  /// Set iff parsing (or generation) failed; the payload is then absent.
  std::optional<std::string> error;

  bool failed() const { return error.has_value(); }
};

/// CLS/REG/CAP: the whole text normalised. REC: first box match decoded in
/// a width x height frame. Never throws.
Prediction parse_prediction(Task task, std::string_view raw, int width, int height);

struct GoldLabel {
  std::string record_id;
  std::string category;
};

/// Fraction of normalised exact matches; failed predictions are wrong.
/// Throws AlignmentError on empty input, length or record_id mismatch.
double score_accuracy(std::span<const Prediction> predictions, std::span<const GoldLabel> gold);

double score_iou(const BBox& a, const BBox& b);

struct TaskMetrics {
  Task task = Task::kCLS;
  std::size_t samples = 0;
  /// Accuracy for CLS/REG, mean IoU for REC.
  double value = 0.0;
  std::size_t parse_errors = 0;
};

enum class Column { kSeen = 0, kUnseen = 1 };

/// Benchmark row for one model. Seen = validation records, unseen = test.
struct BenchmarkReport {
  std::string label;
  // metrics[task][column] for CLS, REG, REC.
  std::array<std::array<std::optional<TaskMetrics>, 2>, 3> metrics{};
  /// Fraction of captions that mention the gold category; diagnostic only.
  std::array<std::optional<TaskMetrics>, 2> caption_keyword{};

  const std::optional<TaskMetrics>& get(Task t, Column c) const;
  std::optional<TaskMetrics>& get(Task t, Column c);
};

class Model {
 public:
  virtual ~Model() = default;
  /// Must be safe to call concurrently.
  virtual std::string generate(const InstructionRecord& record) const = 0;
};

/// Returns the gold response verbatim.
class GoldEchoModel final : public Model {
 public:
  std::string generate(const InstructionRecord& record) const override { return record.response; }
};

using FrameLookup = std::function<std::pair<int, int>(const InstructionRecord&)>;

struct BenchmarkRun {
  BenchmarkReport report;
  /// Ordered by record_id.
  std::vector<Prediction> predictions;
};

/// Generates once per val/test record (train records are skipped), parses,
/// and aggregates. Generation failures become parse errors. When `frame` is
/// empty boxes are read in the 999 x 999 permille frame, which leaves IoU
/// unchanged.
BenchmarkRun run_benchmark(const Model& model, std::span<const InstructionRecord> records, const std::string& label,
                           const FrameLookup& frame = {}, std::size_t threads = 1);

enum class Format { kTable, kCsv };
Format parse_format(std::string_view s);

/// "94.06%" style cells; absent cells are "-".
std::string format_percent(double fraction);
std::string emit_report(std::span<const BenchmarkReport> reports, Format format);

std::string report_to_json(const BenchmarkReport& report);
BenchmarkReport report_from_json(std::string_view text);

/// Line-delimited {record_id, task, split, raw, parsed?, error?}.
void write_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path);

}  // namespace colongpt::eval
