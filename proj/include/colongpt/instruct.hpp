#pragma once

// Turns annotated images into single-round instruction dialogues for the four
// tasks (CLS, REG, REC, CAP).

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "colongpt/rng.hpp"
#include "colongpt/taxonomy.hpp"

namespace colongpt::instruct {

using taxonomy::Split;
using taxonomy::Task;

inline constexpr std::string_view kImageToken = "<image>";
inline constexpr std::string_view kCoordinatesSlot = "{object coordinates}";
inline constexpr std::string_view kCategorySlot = "{object category}";
inline constexpr std::size_t kTemplatesPerTask = 5;

class TemplateBank {
 public:
  using Templates = std::array<std::array<std::string, kTemplatesPerTask>, 4>;

  /// Throws DataError if a REG/REC template lacks its slot or a CLS/CAP
  /// template contains one.
  explicit TemplateBank(Templates templates);

  /// The built-in instruction templates.
  static TemplateBank defaults();
  static TemplateBank read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  const std::string& get(Task task, std::size_t index) const;
  bool matches_defaults() const;

 private:
  Templates templates_;
};

struct TemplateChoice {
  std::size_t index;
  std::string_view text;
};

/// Draws an index uniformly from {0..4}; only advances `rng`.
TemplateChoice select_template(const TemplateBank& bank, Task task, SplitMix64& rng);

/// Category-conditioned prompt for a caption provider. Throws DataError when
/// `category` is not a child category of `tax`.
std::string build_caption_prompt(const taxonomy::Taxonomy& tax, std::string_view category);

struct ImageRef {
  std::string dataset;
  std::string image_id;
  std::string rel_path;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

struct InstructionRecord {
  std::string record_id;
  ImageRef image;
  Task task = Task::kCLS;
  std::string instruction;
  std::string response;
  Split split = Split::kUnassigned;
  std::size_t template_index = 0;
  std::string category;
  std::optional<std::string> bbox_text;

  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

class ProviderError : public DataError {
  using DataError::DataError;
};

class CaptionProvider {
 public:
  virtual ~CaptionProvider() = default;
  /// Returns a caption or throws ProviderError. Must be reentrant.
  virtual std::string caption(const ImageRef& image, std::string_view category, std::string_view prompt) const = 0;
};

/// Deterministic stand-in for a chat-completion backend.
class StubCaptionProvider final : public CaptionProvider {
 public:
  std::string caption(const ImageRef& image, std::string_view category, std::string_view prompt) const override;
};

struct CompileConfig {
  std::uint64_t seed = 0;
  std::set<Task> tasks = {Task::kCLS, Task::kREG, Task::kREC, Task::kCAP};
  bool include_captions = true;
  std::size_t threads = 1;
};

/// Renders one dialogue. REG substitutes the encoded box into the
/// coordinates slot; REC substitutes the category name.
InstructionRecord render_dialogue(Task task, const taxonomy::ImageRecord& record, std::string_view category,
                                  std::string_view template_text, std::size_t template_index,
                                  const std::optional<std::string>& caption = std::nullopt);

struct CompileResult {
  std::vector<InstructionRecord> records;
  taxonomy::CountSummary summary;
  /// Provider failures; each names the skipped record.
  std::vector<std::string> errors;
};

CompileResult compile(std::span<const taxonomy::DatasetManifest> manifests, const taxonomy::Taxonomy& tax,
                      const TemplateBank& bank, const CaptionProvider& provider, const CompileConfig& config);

void write_records(std::span<const InstructionRecord> records, const std::filesystem::path& path);
std::vector<InstructionRecord> read_records(const std::filesystem::path& path);

/// CAP dialogues from train+val.
std::vector<InstructionRecord> pre_align_corpus(std::span<const InstructionRecord> records);
/// CLS/REG/REC dialogues from train+val.
std::vector<InstructionRecord> sft_corpus(std::span<const InstructionRecord> records);

}  // namespace colongpt::instruct
