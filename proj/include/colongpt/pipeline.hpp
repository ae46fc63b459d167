#pragma once

// Run configuration and the glue between the modules used by the CLI.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "colongpt/eval.hpp"
#include "colongpt/instruct.hpp"
#include "colongpt/lm.hpp"
#include "colongpt/taxonomy.hpp"
#include "colongpt/train.hpp"

namespace colongpt::pipeline {

struct DataConfig {
  std::filesystem::path taxonomy;
  std::vector<std::filesystem::path> manifests;
  std::filesystem::path image_root;
  std::optional<std::filesystem::path> templates;
  std::optional<taxonomy::SplitPolicy> split_policy;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  vision::EncoderConfig encoder{56, 56, 7, 48};
  vision::AdapterConfig adapter{vision::AdapterKind::kMultigranularity, {4, 2}, true, true, 48, 64,
                                vision::Activation::kGelu};
  lm::LMConfig lm;
  lm::LoraConfig lora;
  std::uint64_t seed = 0;
};

struct StageOverrides {
  std::optional<double> adapter_lr;
  std::optional<double> lora_lr;
  std::optional<std::size_t> max_steps;
  std::optional<std::size_t> epochs;
};

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t batch = 16;
  std::size_t grad_accum = 2;
  std::uint64_t seed = 0;
  StageOverrides pre_align;
  StageOverrides sft;

  train::TrainPlan plan(train::Stage stage) const;
};

struct EvalConfig {
  std::set<taxonomy::Task> tasks = {taxonomy::Task::kCLS, taxonomy::Task::kREG, taxonomy::Task::kREC};
  std::size_t max_new_tokens = 48;
  std::string label = "toy";
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  /// Cross-section checks: adapter D = LM D, kernels fit the encoder grid.
  void validate() const;
};

/// Relative paths are resolved against `base`.
RunConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
nlohmann::ordered_json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);

lm::Bundle init_bundle(const ModelConfig& cfg);
/// Bundle shell from config with parameters taken from a checkpoint. Throws
/// DataError when a required tensor is missing or has the wrong shape.
lm::Bundle load_bundle(const ModelConfig& cfg, const std::filesystem::path& checkpoint);

struct LoadedData {
  taxonomy::Taxonomy taxonomy;
  std::vector<taxonomy::DatasetManifest> manifests;  // splits assigned
};
LoadedData load_data(const DataConfig& cfg, std::size_t threads);

/// Per-split instruction files: <dir>/{train,val,test}.jsonl.
void write_split_files(std::span<const instruct::InstructionRecord> records, const std::filesystem::path& dir);
std::vector<instruct::InstructionRecord> read_split_files(const std::filesystem::path& dir);

/// Encodes each distinct image once and pairs it with the dialogue tokens.
std::vector<train::TrainExample> build_examples(std::span<const instruct::InstructionRecord> records,
                                                const std::filesystem::path& image_root, const lm::Bundle& bundle);

/// Greedy-decoding model over a bundle; images are encoded lazily and
/// cached by construction-time preloading.
class BundleModel final : public eval::Model {
 public:
  BundleModel(const lm::Bundle& bundle, std::span<const instruct::InstructionRecord> records,
              const std::filesystem::path& image_root, std::size_t max_new_tokens);
  std::string generate(const instruct::InstructionRecord& record) const override;

 private:
  const lm::Bundle& bundle_;
  std::size_t max_new_tokens_;
  std::map<std::string, Tensor> visual_;  // keyed by dataset/image_id
};

std::string image_key(const instruct::ImageRef& ref);

}  // namespace colongpt::pipeline
