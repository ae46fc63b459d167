#include "colongpt/budget.hpp"

#include <cstdio>
#include <sstream>

#include "colongpt/eval.hpp"

namespace colongpt::budget {
namespace {

std::string kernel_label(const vision::AdapterConfig& a) {
  std::string s = "{";
  for (std::size_t i = 0; i < a.kernels.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(a.kernels[i]);
  }
  if (a.include_global) s += a.kernels.empty() ? "1" : ",1";
  return s + "}";
}

}  // namespace

std::vector<TokenRow> token_budget(const vision::EncoderConfig& encoder) {
  const std::size_t gh = encoder.grid_h(), gw = encoder.grid_w();
  std::vector<TokenRow> rows;
  vision::AdapterConfig mlp;
  mlp.kind = vision::AdapterKind::kMlp;
  const std::size_t baseline = vision::output_token_count(mlp, gh, gw);
  rows.push_back({"MLP baseline", mlp, baseline, 1.0});
  const std::vector<std::pair<std::vector<std::size_t>, bool>> variants = {
      {{16, 8}, true}, {{14, 7}, true}, {{14, 7}, false}, {{12, 6}, true}, {{10, 5}, true}, {{8, 4}, true},
  };
  for (const auto& [kernels, global] : variants) {
    vision::AdapterConfig a;
    a.kernels = kernels;
    a.include_global = global;
    a.validate(gh, gw);
    const std::size_t n = vision::output_token_count(a, gh, gw);
    rows.push_back({kernel_label(a), a, n, static_cast<double>(n) / static_cast<double>(baseline)});
  }
  vision::AdapterConfig no_pe;
  no_pe.positional_encoding = false;
  const std::size_t n = vision::output_token_count(no_pe, gh, gw);
  rows.push_back({"w/o pos. enc.", no_pe, n, static_cast<double>(n) / static_cast<double>(baseline)});
  return rows;
}

double reduction(std::size_t tokens, std::size_t baseline) {
  return 1.0 - static_cast<double>(tokens) / static_cast<double>(baseline);
}

std::vector<LoraRow> lora_grid(const lm::LMConfig& cfg) {
  std::vector<LoraRow> rows;
  const std::size_t targets = lm::lora_targets(cfg).size();
  for (std::size_t r = 8; r <= 512; r *= 2) {
    LoraRow row;
    row.rank = r;
    row.alpha = 2.0 * static_cast<double>(r);
    row.scale = row.alpha / static_cast<double>(r);
    row.parameters = targets * r * (2 * cfg.model_dim);
    rows.push_back(row);
  }
  return rows;
}

std::string render_token_budget(const std::vector<TokenRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-16s %8s %9s %10s\n", "adapter", "tokens", "ratio", "reduction");
  os << buf;
  const std::size_t baseline = rows.empty() ? 1 : rows.front().tokens;
  for (const TokenRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-16s %8zu %9s %10s\n", r.label.c_str(), r.tokens,
                  eval::format_percent(r.ratio).c_str(), eval::format_percent(reduction(r.tokens, baseline)).c_str());
    os << buf;
  }
  return os.str();
}

std::string render_lora_grid(const std::vector<LoraRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%6s %7s %6s %12s\n", "rank", "alpha", "scale", "parameters");
  os << buf;
  for (const LoraRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%6zu %7.0f %6.2f %12zu\n", r.rank, r.alpha, r.scale, r.parameters);
    os << buf;
  }
  return os.str();
}

}  // namespace colongpt::budget
