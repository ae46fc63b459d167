#include "colongpt/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "colongpt/kernels.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::lm {
namespace {

struct Special {
  Token id;
  std::string_view text;
};

constexpr std::array<Special, 5> kSpecials = {{
    {kImageId, "<image>"},
    {kBosId, "<bos>"},
    {kEosId, "<eos>"},
    {kHumanId, "<human>"},
    {kAssistantId, "<assistant>"},
}};

std::string layer_prefix(std::size_t l) { return "lm.layers." + std::to_string(l) + "."; }

Tensor normal_tensor(std::vector<std::size_t> shape, double stddev, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

void add_linear(ParamMap& p, const std::string& name, std::size_t in, std::size_t out, SplitMix64& rng) {
  p[name + ".weight"] = normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p[name + ".bias"] = Tensor({out}, 0.0);
}

void add_norm(ParamMap& p, const std::string& name, std::size_t dim) {
  p[name + ".gain"] = Tensor({dim}, 1.0);
  p[name + ".bias"] = Tensor({dim}, 0.0);
}

ag::Var projection(ag::ParamBinder& p, ag::Var x, const std::string& base, const ForwardOptions& opt) {
  const std::string w = base + ".weight";
  const ag::Var bias = p(base + ".bias");
  switch (opt.lora) {
    case LoraMode::kNone:
      return ag::linear(x, p(w), bias);
    case LoraMode::kEffective:
      return ag::linear(x, ag::lora_weight(p(w), p(lora_a_name(w)), p(lora_b_name(w)), opt.lora_scale), bias);
    case LoraMode::kFactored: {
      const ag::Var base_out = ag::linear(x, p(w), bias);
      const ag::Var low = ag::linear(ag::linear(x, p(lora_a_name(w))), p(lora_b_name(w)));
      return ag::add(base_out, ag::scale(low, opt.lora_scale));
    }
  }
  return {};
}

const std::set<std::string>& frozen_set() {
  static const std::set<std::string> none;
  return none;
}

}  // namespace

// ---- tokenizer ----------------------------------------------------------------

std::vector<Token> Tokenizer::tokenize(std::string_view text) {
  std::vector<Token> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (const Special& s : kSpecials) {
        if (text.substr(i, s.text.size()) == s.text) {
          out.push_back(s.id);
          i += s.text.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) out.push_back(static_cast<unsigned char>(text[i++]));
  }
  return out;
}

std::string Tokenizer::detokenize(std::span<const Token> ids) {
  std::string out;
  out.reserve(ids.size());
  for (Token id : ids) {
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else {
      out += special_text(id);
    }
  }
  return out;
}

std::string_view Tokenizer::special_text(Token id) {
  for (const Special& s : kSpecials) {
    if (s.id == id) return s.text;
  }
  throw DecodeError("unknown token id " + std::to_string(id));
}

std::vector<Token> prompt_ids(std::string_view instruction) {
  std::vector<Token> ids = {kBosId, kHumanId};
  const auto body = Tokenizer::tokenize(instruction);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(kAssistantId);
  return ids;
}

// ---- config and parameters -------------------------------------------------------

void LMConfig::validate() const {
  if (layers == 0 || heads == 0 || model_dim == 0 || context_len == 0 || ffn_mult == 0) {
    throw UsageError("lm sizes must be positive");
  }
  if (model_dim % heads != 0) throw UsageError("lm model_dim must be divisible by heads");
  if (vocab_size != kVocabSize) throw UsageError("lm vocab_size must be " + std::to_string(kVocabSize));
}

void LoraConfig::validate() const {
  if (rank == 0) throw UsageError("lora rank must be positive");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw UsageError("lora alpha must be positive");
}

std::vector<std::string> lora_targets(const LMConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (const char* m : {"q", "k", "v", "o"}) out.push_back(layer_prefix(l) + "attn." + m + ".weight");
  }
  return out;
}

namespace {
std::string lora_stem(const std::string& target) {
  constexpr std::string_view kSuffix = ".weight";
  if (target.rfind("lm.", 0) != 0 || target.size() <= kSuffix.size() ||
      target.compare(target.size() - kSuffix.size(), kSuffix.size(), kSuffix) != 0) {
    throw UsageError("not a lora target: '" + target + "'");
  }
  return "lora." + target.substr(3, target.size() - 3 - kSuffix.size());
}
}  // namespace

std::string lora_a_name(const std::string& target) { return lora_stem(target) + ".A"; }
std::string lora_b_name(const std::string& target) { return lora_stem(target) + ".B"; }

ParamMap init_lm(const LMConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(keyed_hash(seed, "lm"));
  const std::size_t d = cfg.model_dim;
  ParamMap p;
  p["lm.embed"] = normal_tensor({cfg.vocab_size, d}, 1.0, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = layer_prefix(l);
    add_norm(p, pre + "ln1", d);
    for (const char* m : {"q", "k", "v", "o"}) add_linear(p, pre + "attn." + m, d, d, rng);
    add_norm(p, pre + "ln2", d);
    add_linear(p, pre + "mlp.fc1", d, cfg.ffn_mult * d, rng);
    add_linear(p, pre + "mlp.fc2", cfg.ffn_mult * d, d, rng);
  }
  add_norm(p, "lm.ln_f", d);
  p["lm.head"] = normal_tensor({cfg.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return p;
}

ParamMap init_lora(const LMConfig& cfg, const LoraConfig& lora, std::uint64_t seed) {
  cfg.validate();
  lora.validate();
  SplitMix64 rng(keyed_hash(seed, "lora"));
  const std::size_t d = cfg.model_dim;
  ParamMap p;
  for (const std::string& t : lora_targets(cfg)) {
    p[lora_a_name(t)] = normal_tensor({lora.rank, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    p[lora_b_name(t)] = Tensor({d, lora.rank}, 0.0);
  }
  return p;
}

Tensor lora_merge(const Tensor& w, const Tensor& a, const Tensor& b, double scale) {
  if (w.rank() != 2 || a.rank() != 2 || b.rank() != 2 || a.cols() != w.cols() || b.rows() != w.rows() ||
      b.cols() != a.rows()) {
    throw ShapeError("lora_merge: W" + shape_string(w.shape()) + " A" + shape_string(a.shape()) + " B" +
                     shape_string(b.shape()));
  }
  Tensor out = w;
  const Tensor ba = matmul(b, a);
  kernels::axpy(scale, ba.span(), out.span());
  return out;
}

ParamMap merge_all(const ParamMap& params, const LMConfig& cfg, const LoraConfig& lora) {
  ParamMap out;
  for (const auto& [name, t] : params) {
    if (name.rfind("lora.", 0) != 0) out.emplace(name, t);
  }
  for (const std::string& target : lora_targets(cfg)) {
    out[target] = lora_merge(params.at(target), params.at(lora_a_name(target)), params.at(lora_b_name(target)),
                             lora.scale());
  }
  return out;
}

// ---- splicing ----------------------------------------------------------------

std::size_t AssembledSequence::mask_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

std::vector<std::size_t> AssembledSequence::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) out.push_back(t);
  }
  return out;
}

AssembledSequence assemble(const MultimodalSample& sample) {
  const auto n_img = std::count(sample.instruction.begin(), sample.instruction.end(), kImageId);
  if (n_img != 1) {
    throw SpliceError("instruction must contain exactly one image placeholder, found " + std::to_string(n_img));
  }
  if (std::count(sample.response.begin(), sample.response.end(), kImageId) != 0) {
    throw SpliceError("response must not contain an image placeholder");
  }
  const std::size_t nv = sample.visual.rows();
  if (sample.visual.size() == 0 || nv == 0) throw SpliceError("no visual tokens to splice");

  AssembledSequence seq;
  seq.visual_count = nv;
  for (Token id : sample.instruction) {
    if (id == kImageId) {
      seq.visual_offset = seq.tokens.size();
      seq.tokens.insert(seq.tokens.end(), nv, kImageId);
    } else {
      seq.tokens.push_back(id);
    }
  }
  const std::size_t prompt_len = seq.tokens.size();
  seq.tokens.insert(seq.tokens.end(), sample.response.begin(), sample.response.end());
  seq.length = seq.tokens.size();
  seq.targets.assign(seq.length, 0);
  seq.mask.assign(seq.length, false);
  // Last prompt position predicts the first response token; the last
  // response position predicts <eos>.
  for (std::size_t i = 0; i < sample.response.size(); ++i) {
    seq.targets[prompt_len - 1 + i] = sample.response[i];
    seq.mask[prompt_len - 1 + i] = true;
  }
  if (sample.terminated) {
    seq.targets[seq.length - 1] = kEosId;
    seq.mask[seq.length - 1] = true;
  }
  return seq;
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  Tensor pe = Tensor::matrix(length, dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe.at(p, i) = std::sin(static_cast<double>(p) * freq);
      if (i + 1 < dim) pe.at(p, i + 1) = std::cos(static_cast<double>(p) * freq);
    }
  }
  return pe;
}

ag::Var input_graph(ag::ParamBinder& params, ag::Var visual, const AssembledSequence& seq, const LMConfig& cfg) {
  if (seq.length > cfg.context_len) {
    throw LengthError("sequence length " + std::to_string(seq.length) + " exceeds context " +
                      std::to_string(cfg.context_len));
  }
  const Tensor& vis = visual.value();
  if (vis.rows() != seq.visual_count || vis.cols() != cfg.model_dim) {
    throw ShapeError("visual tokens " + shape_string(vis.shape()) + " do not fit model dim " +
                     std::to_string(cfg.model_dim));
  }
  const ag::Var table = params("lm.embed");
  std::vector<ag::Var> parts;
  const std::span<const Token> all(seq.tokens);
  if (seq.visual_offset > 0) parts.push_back(ag::gather_rows(table, all.first(seq.visual_offset)));
  parts.push_back(visual);
  const std::size_t tail = seq.visual_offset + seq.visual_count;
  if (tail < seq.length) parts.push_back(ag::gather_rows(table, all.subspan(tail)));
  const ag::Var rows = ag::concat_rows(parts);
  return ag::add(rows, params.tape().constant(sinusoidal_positions(seq.length, cfg.model_dim)));
}

Tensor assemble_inputs(const MultimodalSample& sample, const AssembledSequence& seq, const ParamMap& params,
                       const LMConfig& cfg) {
  ag::Tape tape;
  ag::ParamBinder frozen(tape, params, &frozen_set());
  return input_graph(frozen, tape.external(sample.visual, false), seq, cfg).value();
}

// ---- forward -----------------------------------------------------------------

ag::Var lm_graph(ag::ParamBinder& p, ag::Var inputs, const LMConfig& cfg, const ForwardOptions& opt) {
  ag::Var h = inputs;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = layer_prefix(l);
    const ag::Var n1 = ag::layer_norm(h, p(pre + "ln1.gain"), p(pre + "ln1.bias"));
    const ag::Var q = projection(p, n1, pre + "attn.q", opt);
    const ag::Var k = projection(p, n1, pre + "attn.k", opt);
    const ag::Var v = projection(p, n1, pre + "attn.v", opt);
    const ag::Var att = ag::causal_attention(q, k, v, cfg.heads);
    h = ag::add(h, projection(p, att, pre + "attn.o", opt));
    const ag::Var n2 = ag::layer_norm(h, p(pre + "ln2.gain"), p(pre + "ln2.bias"));
    const ag::Var f = ag::gelu(ag::linear(n2, p(pre + "mlp.fc1.weight"), p(pre + "mlp.fc1.bias")));
    h = ag::add(h, ag::linear(f, p(pre + "mlp.fc2.weight"), p(pre + "mlp.fc2.bias")));
  }
  if (!opt.positions.empty()) h = ag::gather_rows(h, opt.positions);
  h = ag::layer_norm(h, p("lm.ln_f.gain"), p("lm.ln_f.bias"));
  return ag::linear(h, p("lm.head"));
}

Tensor forward_logits(const MultimodalSample& sample, const ParamMap& params, const LMConfig& cfg, LoraMode lora,
                      double lora_scale) {
  const AssembledSequence seq = assemble(sample);
  ag::Tape tape;
  ag::ParamBinder frozen(tape, params, &frozen_set());
  const ag::Var x = input_graph(frozen, tape.external(sample.visual, false), seq, cfg);
  ForwardOptions opt;
  opt.lora = lora;
  opt.lora_scale = lora_scale;
  return lm_graph(frozen, x, cfg, opt).value();
}

std::vector<double> log_softmax_row(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] - lse;
  return out;
}

double masked_ce_loss(const Tensor& logits, std::span<const Token> targets, const std::vector<bool>& mask) {
  if (targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw ShapeError("masked_ce_loss: logits " + shape_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) + " mask");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (!mask[t]) continue;
    if (targets[t] >= logits.cols()) throw ShapeError("masked_ce_loss: target id out of range");
    total -= log_softmax_row(logits.row(t))[targets[t]];
    ++count;
  }
  if (count == 0) throw DataError("masked_ce_loss: empty mask, loss undefined");
  return total / static_cast<double>(count);
}

// ---- bundle ------------------------------------------------------------------

bool Bundle::has_lora() const {
  if (!lora) return false;
  const auto targets = lora_targets(lm);
  return !targets.empty() && params.count(lora_a_name(targets.front())) != 0;
}

void Bundle::validate() const {
  encoder.validate();
  adapter.validate(encoder.grid_h(), encoder.grid_w());
  lm.validate();
  if (lora) lora->validate();
  if (adapter.in_dim != encoder.dim) {
    throw UsageError("adapter in_dim " + std::to_string(adapter.in_dim) + " != encoder dim " +
                     std::to_string(encoder.dim));
  }
  if (adapter.out_dim != lm.model_dim) {
    throw UsageError("adapter out_dim " + std::to_string(adapter.out_dim) + " != lm model_dim " +
                     std::to_string(lm.model_dim));
  }
}

Tensor encode_image(const Bundle& bundle, const Tensor& image) {
  return vision::patch_embed(image, bundle.encoder, bundle.params);
}

Tensor visual_tokens(const Bundle& bundle, const Tensor& embedding) {
  if (bundle.adapter.kind == vision::AdapterKind::kMlp) {
    return vision::mlp_adapter_forward(embedding, bundle.adapter, bundle.params);
  }
  return vision::adapter_forward(embedding, bundle.encoder.grid_h(), bundle.encoder.grid_w(), bundle.adapter,
                                 bundle.params);
}

double sequence_logprob(const Bundle& bundle, const MultimodalSample& sample) {
  const AssembledSequence seq = assemble(sample);
  const Tensor logits = forward_logits(sample, bundle.params, bundle.lm, bundle.inference_mode(), bundle.lora_scale());
  double total = 0.0;
  for (std::size_t t = 0; t < seq.length; ++t) {
    if (seq.mask[t]) total += log_softmax_row(logits.row(t))[seq.targets[t]];
  }
  return total;
}

DecodeResult greedy_decode(const Bundle& bundle, const Tensor& visual, std::span<const Token> prompt,
                           std::size_t max_len) {
  MultimodalSample sample;
  sample.visual = visual;
  sample.instruction.assign(prompt.begin(), prompt.end());
  sample.terminated = false;
  DecodeResult out;
  ForwardOptions opt;
  opt.lora = bundle.inference_mode();
  opt.lora_scale = bundle.lora_scale();
  while (out.tokens.size() < max_len) {
    sample.response = out.tokens;
    const AssembledSequence seq = assemble(sample);
    const std::size_t last[] = {seq.length - 1};
    opt.positions = last;
    ag::Tape tape;
    ag::ParamBinder frozen(tape, bundle.params, &frozen_set());
    const ag::Var x = input_graph(frozen, tape.external(sample.visual, false), seq, bundle.lm);
    const Tensor logits = lm_graph(frozen, x, bundle.lm, opt).value();
    const auto row = logits.row(0);
    // The placeholder cannot appear in a response, so it is never chosen.
    Token best = kImageId == 0 ? 1 : 0;
    for (Token j = 0; j < row.size(); ++j) {
      if (j != kImageId && row[j] > row[best]) best = j;
    }
    out.step_logprobs.push_back(log_softmax_row(row)[best]);
    if (best == kEosId) {
      out.stopped_on_eos = true;
      break;
    }
    out.tokens.push_back(best);
  }
  return out;
}

}  // namespace colongpt::lm
