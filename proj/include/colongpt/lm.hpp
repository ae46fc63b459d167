#pragma once

// Toy decoder-only causal LM over a byte vocabulary plus five special tokens,
// with visual-token splicing and optional LoRA on the attention projections.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "colongpt/autograd.hpp"
#include "colongpt/error.hpp"
#include "colongpt/vision.hpp"

namespace colongpt::lm {

using ag::ParamMap;
using Token = std::size_t;

inline constexpr Token kImageId = 256;
inline constexpr Token kBosId = 257;
inline constexpr Token kEosId = 258;
inline constexpr Token kHumanId = 259;
inline constexpr Token kAssistantId = 260;
inline constexpr std::size_t kVocabSize = 261;

class DecodeError : public DataError {
  using DataError::DataError;
};
class SpliceError : public DataError {
  using DataError::DataError;
};
class LengthError : public DataError {
  using DataError::DataError;
};

/// Bytes map to ids 0..255; the special-token spellings are matched
/// atomically wherever they appear in the text.
struct Tokenizer {
  static std::vector<Token> tokenize(std::string_view text);
  static std::string detokenize(std::span<const Token> ids);
  static std::string_view special_text(Token id);
};

/// <bos><human>{instruction}<assistant>
std::vector<Token> prompt_ids(std::string_view instruction);

struct LMConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t model_dim = 64;
  std::size_t context_len = 512;
  std::size_t vocab_size = kVocabSize;
  std::size_t ffn_mult = 4;

  void validate() const;
};

struct LoraConfig {
  std::size_t rank = 128;
  double alpha = 256.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate() const;
};

/// Names of the LoRA-targeted base matrices: q, k, v, o of every layer.
std::vector<std::string> lora_targets(const LMConfig& cfg);
std::string lora_a_name(const std::string& target);
std::string lora_b_name(const std::string& target);

ParamMap init_lm(const LMConfig& cfg, std::uint64_t seed);
/// A ~ N(0, 1/in), B = 0 for every target.
ParamMap init_lora(const LMConfig& cfg, const LoraConfig& lora, std::uint64_t seed);

/// W' = W + scale * B * A.
Tensor lora_merge(const Tensor& w, const Tensor& a, const Tensor& b, double scale);
/// Copy of `params` with every LoRA pair folded into its base matrix and the
/// LoRA tensors removed.
ParamMap merge_all(const ParamMap& params, const LMConfig& cfg, const LoraConfig& lora);

struct MultimodalSample {
  Tensor visual;                   // N_v x D
  std::vector<Token> instruction;  // contains exactly one kImageId
  std::vector<Token> response;
  /// When set, the closing <eos> is a supervised target.
  bool terminated = true;
};

/// Flattened sequence after splicing. Position t predicts targets[t] when
/// mask[t] is set.
struct AssembledSequence {
  std::size_t length = 0;
  std::size_t visual_offset = 0;
  std::size_t visual_count = 0;
  /// Text token at each non-visual position (kImageId marks visual rows).
  std::vector<Token> tokens;
  std::vector<Token> targets;
  std::vector<bool> mask;

  std::size_t mask_count() const;
  std::vector<std::size_t> masked_positions() const;
};

AssembledSequence assemble(const MultimodalSample& sample);
/// Dense input rows (embedding or visual row, plus positional encoding).
Tensor assemble_inputs(const MultimodalSample& sample, const AssembledSequence& seq, const ParamMap& params,
                       const LMConfig& cfg);

Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

enum class LoraMode {
  kNone,
  /// x (W + sBA)^T: one fused weight per target.
  kEffective,
  /// x W^T + s (x A^T) B^T: the adapter kept separate from the base.
  kFactored,
};

struct ForwardOptions {
  LoraMode lora = LoraMode::kNone;
  double lora_scale = 0.0;
  /// Rows of the final hidden state to project; empty means all.
  std::span<const std::size_t> positions = {};
};

/// Graph form: inputs are the already-assembled rows (L x D).
ag::Var lm_graph(ag::ParamBinder& params, ag::Var inputs, const LMConfig& cfg, const ForwardOptions& opt);

/// Embedded input graph with the visual rows supplied as a var.
ag::Var input_graph(ag::ParamBinder& params, ag::Var visual, const AssembledSequence& seq, const LMConfig& cfg);

/// L x V logits. Throws LengthError past the context window.
Tensor forward_logits(const MultimodalSample& sample, const ParamMap& params, const LMConfig& cfg,
                      LoraMode lora = LoraMode::kNone, double lora_scale = 0.0);

/// Mean over masked positions of -log softmax(logits[t])[targets[t]].
/// Throws DataError when no position is masked.
double masked_ce_loss(const Tensor& logits, std::span<const Token> targets, const std::vector<bool>& mask);

std::vector<double> log_softmax_row(std::span<const double> logits);

/// Everything needed to run the model end to end.
struct Bundle {
  vision::EncoderConfig encoder;
  vision::AdapterConfig adapter;
  LMConfig lm;
  std::optional<LoraConfig> lora;
  ParamMap params;

  bool has_lora() const;
  LoraMode inference_mode() const { return has_lora() ? LoraMode::kFactored : LoraMode::kNone; }
  double lora_scale() const { return lora ? lora->scale() : 0.0; }
  /// Throws UsageError on config mismatch (adapter D vs LM D, grid fit).
  void validate() const;
};

/// Encoder embedding for an H x W x 3 image.
Tensor encode_image(const Bundle& bundle, const Tensor& image);
/// Visual tokens from a precomputed encoder embedding.
Tensor visual_tokens(const Bundle& bundle, const Tensor& embedding);

double sequence_logprob(const Bundle& bundle, const MultimodalSample& sample);

struct DecodeResult {
  std::vector<Token> tokens;  // excludes the closing <eos>
  bool stopped_on_eos = false;
  /// Chosen token's log-probability at each step, <eos> included.
  std::vector<double> step_logprobs;
};

/// Greedy argmax decoding, ties to the lowest id, until <eos> or max_len
/// tokens. `prompt` must contain exactly one kImageId.
DecodeResult greedy_decode(const Bundle& bundle, const Tensor& visual, std::span<const Token> prompt,
                           std::size_t max_len);

}  // namespace colongpt::lm
