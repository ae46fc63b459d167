#pragma once

// Visual-token budget and LoRA grid presets for the diagnostic reports.

#include <string>
#include <vector>

#include "colongpt/lm.hpp"
#include "colongpt/vision.hpp"

namespace colongpt::budget {

struct TokenRow {
  std::string label;
  vision::AdapterConfig adapter;
  std::size_t tokens = 0;
  /// tokens / baseline tokens.
  double ratio = 0.0;
};

/// MLP baseline plus the pooling variants {16,8,1} {14,7,1} {14,7} {12,6,1}
/// {10,5,1} {8,4,1} and the no-positional-encoding variant, on a 27x27 grid.
std::vector<TokenRow> token_budget(const vision::EncoderConfig& encoder = {});

/// 1 - tokens / baseline.
double reduction(std::size_t tokens, std::size_t baseline);

struct LoraRow {
  std::size_t rank = 0;
  double alpha = 0.0;
  double scale = 0.0;
  /// LoRA parameters for the given LM config.
  std::size_t parameters = 0;
};

/// r/alpha presets 8/16 through 512/1024.
std::vector<LoraRow> lora_grid(const lm::LMConfig& cfg);

std::string render_token_budget(const std::vector<TokenRow>& rows);
std::string render_lora_grid(const std::vector<LoraRow>& rows);

}  // namespace colongpt::budget
