#include "colongpt/vision.hpp"

#include <algorithm>
#include <cmath>

#include "colongpt/error.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::vision {

void EncoderConfig::validate() const {
  if (height == 0 || width == 0 || patch == 0 || dim == 0) throw UsageError("encoder sizes must be positive");
  if (height < patch || width < patch) throw UsageError("encoder patch larger than the image");
}

void AdapterConfig::validate(std::size_t grid_h, std::size_t grid_w) const {
  if (in_dim == 0 || out_dim == 0) throw UsageError("adapter dims must be positive");
  if (kind == AdapterKind::kMlp) return;
  if (kernels.empty() && !include_global) throw UsageError("adapter needs at least one pooling view");
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    if (kernels[i] == 0) throw UsageError("pooling side must be positive");
    if (kernels[i] > std::min(grid_h, grid_w)) {
      throw UsageError("pooling side " + std::to_string(kernels[i]) + " exceeds the " + std::to_string(grid_h) + "x" +
                       std::to_string(grid_w) + " grid");
    }
    if (i > 0 && kernels[i] >= kernels[i - 1]) throw UsageError("pooling sides must be strictly decreasing");
  }
}

std::size_t visual_token_count(const AdapterConfig& cfg) {
  std::size_t n = cfg.include_global ? 1 : 0;
  for (std::size_t s : cfg.kernels) n += s * s;
  return n;
}

std::size_t output_token_count(const AdapterConfig& cfg, std::size_t grid_h, std::size_t grid_w) {
  return cfg.kind == AdapterKind::kMlp ? grid_h * grid_w : visual_token_count(cfg);
}

FeatureGrid adaptive_avg_pool2d(const FeatureGrid& grid, std::size_t side) {
  ag::Tape tape;
  const Tensor tokens = grid.as_tokens();
  const ag::Var out = ag::adaptive_avg_pool(tape.constant(tokens), grid.height, grid.width, side);
  FeatureGrid g(side, side, grid.channels);
  g.data = out.value().values();
  return g;
}

FeatureGrid positional_conv(const FeatureGrid& grid, const ConvParams& params) {
  ag::Tape tape;
  const ag::Var out = ag::conv3x3(tape.constant(grid.as_tokens()), grid.height, grid.width,
                                  tape.external(params.weight, false), tape.external(params.bias, false));
  FeatureGrid g(grid.height, grid.width, params.weight.dim(0));
  g.data = out.value().values();
  return g;
}

namespace {

Tensor normal_tensor(std::vector<std::size_t> shape, double stddev, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

void add_linear(ParamMap& p, const std::string& name, std::size_t in, std::size_t out, SplitMix64& rng) {
  p[name + ".weight"] = normal_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p[name + ".bias"] = Tensor({out}, 0.0);
}

ag::Var activate(ag::Var x, Activation a) { return a == Activation::kGelu ? ag::gelu(x) : x; }

ag::Var mlp_graph(ag::ParamBinder& p, ag::Var x, const AdapterConfig& cfg) {
  ag::Var h = activate(ag::linear(x, p("adapter.mlp1.weight"), p("adapter.mlp1.bias")), cfg.activation);
  h = activate(ag::linear(h, p("adapter.mlp2.weight"), p("adapter.mlp2.bias")), cfg.activation);
  return ag::linear(h, p("adapter.mlp3.weight"), p("adapter.mlp3.bias"));
}

}  // namespace

ParamMap init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(mix64(seed ^ 0xe1c0de7ULL));
  ParamMap p;
  p[kEncoderWeight] = normal_tensor({cfg.dim, 3 * cfg.patch * cfg.patch}, 0.02, rng);
  p[kEncoderBias] = Tensor({cfg.dim}, 0.0);
  return p;
}

ParamMap init_adapter(const AdapterConfig& cfg, std::uint64_t seed) {
  SplitMix64 rng(mix64(seed ^ 0xada97e7ULL));
  ParamMap p;
  const std::size_t d = cfg.in_dim, D = cfg.out_dim;
  if (cfg.kind == AdapterKind::kMlp) {
    add_linear(p, "adapter.mlp1", d, D, rng);
    add_linear(p, "adapter.mlp2", D, D, rng);
    add_linear(p, "adapter.mlp3", D, D, rng);
    return p;
  }
  add_linear(p, "adapter.linear1", d, D, rng);
  if (cfg.positional_encoding && !cfg.kernels.empty()) {
    p["adapter.pos_conv.weight"] = normal_tensor({D, D, 3, 3}, 1.0 / std::sqrt(9.0 * static_cast<double>(D)), rng);
    p["adapter.pos_conv.bias"] = Tensor({D}, 0.0);
  }
  add_linear(p, "adapter.linear2", D, D, rng);
  return p;
}

Tensor patch_embed(const Tensor& image, const EncoderConfig& cfg, const ParamMap& params) {
  cfg.validate();
  if (image.rank() != 3 || image.dim(0) != cfg.height || image.dim(1) != cfg.width || image.dim(2) != 3) {
    throw ShapeError("patch_embed: image " + shape_string(image.shape()) + " does not match encoder " +
                     std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "x3");
  }
  const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w(), P = cfg.patch;
  Tensor patches = Tensor::matrix(gh * gw, 3 * P * P);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* dst = patches.row(gy * gw + gx).data();
      for (std::size_t py = 0; py < P; ++py) {
        const double* src = image.data() + ((gy * P + py) * cfg.width + gx * P) * 3;
        std::copy_n(src, 3 * P, dst + py * 3 * P);
      }
    }
  }
  ag::Tape tape;
  const std::set<std::string> none;
  ag::ParamBinder frozen(tape, params, &none);
  return ag::linear(tape.constant(std::move(patches)), frozen(kEncoderWeight), frozen(kEncoderBias)).value();
}

ag::Var adapter_graph(ag::ParamBinder& p, ag::Var embedding, std::size_t grid_h, std::size_t grid_w,
                      const AdapterConfig& cfg) {
  cfg.validate(grid_h, grid_w);
  const Tensor& e = embedding.value();
  if (e.rows() != grid_h * grid_w || e.cols() != cfg.in_dim) {
    throw ShapeError("adapter: embedding " + shape_string(e.shape()) + " vs grid " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w) + " and d=" + std::to_string(cfg.in_dim));
  }
  if (cfg.kind == AdapterKind::kMlp) return mlp_graph(p, embedding, cfg);

  const ag::Var features =
      activate(ag::linear(embedding, p("adapter.linear1.weight"), p("adapter.linear1.bias")), cfg.activation);
  std::vector<ag::Var> blocks;
  for (std::size_t s : cfg.kernels) {
    ag::Var pooled = ag::adaptive_avg_pool(features, grid_h, grid_w, s);
    if (cfg.positional_encoding) {
      pooled = ag::conv3x3(pooled, s, s, p("adapter.pos_conv.weight"), p("adapter.pos_conv.bias"));
    }
    blocks.push_back(pooled);
  }
  if (cfg.include_global) blocks.push_back(ag::adaptive_avg_pool(features, grid_h, grid_w, 1));
  const ag::Var tokens = ag::concat_rows(blocks);
  return ag::linear(tokens, p("adapter.linear2.weight"), p("adapter.linear2.bias"));
}

Tensor adapter_forward(const Tensor& embedding, std::size_t grid_h, std::size_t grid_w, const AdapterConfig& cfg,
                       const ParamMap& params) {
  if (cfg.kind != AdapterKind::kMultigranularity) throw UsageError("adapter_forward: config is not multigranularity");
  ag::Tape tape;
  const std::set<std::string> none;
  ag::ParamBinder frozen(tape, params, &none);
  return adapter_graph(frozen, tape.external(embedding, false), grid_h, grid_w, cfg).value();
}

Tensor mlp_adapter_forward(const Tensor& embedding, const AdapterConfig& cfg, const ParamMap& params) {
  if (cfg.kind != AdapterKind::kMlp) throw UsageError("mlp_adapter_forward: config is not an MLP adapter");
  if (embedding.cols() != cfg.in_dim) throw ShapeError("mlp adapter: embedding width != in_dim");
  ag::Tape tape;
  const std::set<std::string> none;
  ag::ParamBinder frozen(tape, params, &none);
  return mlp_graph(frozen, tape.external(embedding, false), cfg).value();
}

}  // namespace colongpt::vision
