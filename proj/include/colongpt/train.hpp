#pragma once

// Two-stage recipe: pre-alignment trains only the adapter; instruction tuning
// trains the adapter plus LoRA factors on the LM attention projections.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "colongpt/lm.hpp"

namespace colongpt::train {

enum class Stage { kPreAlign, kSft };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct TrainPlan {
  Stage stage = Stage::kPreAlign;
  std::size_t epochs = 3;
  std::size_t batch = 16;
  std::size_t grad_accum = 2;
  /// Overrides epochs when set.
  std::optional<std::size_t> max_steps;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double adapter_lr = 2e-4;
  double lora_lr = 0.0;
  std::uint64_t seed = 0;

  /// pre_align: adapter 2e-4. sft: adapter 2e-3, LoRA 2e-4.
  static TrainPlan recipe(Stage stage);
  /// One step is one micro-batch of `batch` examples.
  std::size_t total_steps(std::size_t corpus_size) const;
  std::size_t total_updates(std::size_t corpus_size) const;
  void validate() const;
};

struct TrainExample {
  Tensor embedding;  // frozen encoder output for the image
  std::vector<lm::Token> prompt;
  std::vector<lm::Token> response;
};

/// Parameter group: the name up to the first dot.
std::string group_of(const std::string& name);
std::map<std::string, std::uint64_t> group_hashes(const ag::ParamMap& params);
std::set<std::string> trainable_names(const lm::Bundle& bundle, Stage stage);

/// Adds zero-initialised LoRA factors when the bundle has none.
void attach_lora(lm::Bundle& bundle, const lm::LoraConfig& cfg, std::uint64_t seed);

/// Cosine decay from `base` to 0 over `total` updates, no warmup.
double cosine_lr(double base, std::size_t update, std::size_t total);

struct StepRecord {
  std::size_t step = 0;  // 1-based
  Stage stage = Stage::kPreAlign;
  double loss = 0.0;
  std::map<std::string, double> lr;
};
std::string log_line(const StepRecord& r);
void write_log(std::span<const StepRecord> log, const std::filesystem::path& path);

struct TrainResult {
  std::vector<StepRecord> log;
  std::map<std::string, std::uint64_t> hashes_before;
  std::map<std::string, std::uint64_t> hashes_after;
  std::size_t updates = 0;
};

/// Mutates bundle.params in place. Throws DivergenceError on a non-finite
/// loss, naming the 1-based step.
TrainResult train(const TrainPlan& plan, std::span<const TrainExample> corpus, lm::Bundle& bundle,
                  const std::function<void(const StepRecord&)>& on_step = {});

/// Mean masked cross-entropy of a micro-batch, built on `binder`.
ag::Var batch_loss(ag::ParamBinder& binder, std::span<const TrainExample* const> batch, const lm::Bundle& bundle,
                   lm::LoraMode mode);

}  // namespace colongpt::train
