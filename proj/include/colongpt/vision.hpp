#pragma once

// Toy frozen patch encoder and the two visual adapters: the multigranularity
// pooling adapter and the token-preserving MLP baseline.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "colongpt/autograd.hpp"
#include "colongpt/tensor.hpp"

namespace colongpt::vision {

using ag::ParamMap;

struct EncoderConfig {
  std::size_t height = 384;
  std::size_t width = 384;
  std::size_t patch = 14;
  std::size_t dim = 1152;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  /// Throws UsageError on non-positive sizes or patch larger than the image.
  void validate() const;
};

enum class AdapterKind { kMultigranularity, kMlp };
enum class Activation { kGelu, kIdentity };

struct AdapterConfig {
  AdapterKind kind = AdapterKind::kMultigranularity;
  /// Pooling sides, strictly decreasing.
  std::vector<std::size_t> kernels = {14, 7};
  bool include_global = true;
  bool positional_encoding = true;
  std::size_t in_dim = 1152;
  std::size_t out_dim = 2048;
  Activation activation = Activation::kGelu;

  static constexpr std::size_t kConvKernel = 3;
  static constexpr std::size_t kConvPadding = 1;

  /// Throws UsageError unless the config is admissible for a
  /// grid_h x grid_w feature grid.
  void validate(std::size_t grid_h, std::size_t grid_w) const;
};

/// Sum of squared pooling sides plus one for the global view.
std::size_t visual_token_count(const AdapterConfig& cfg);
/// Tokens produced for a given grid (the MLP keeps every input token).
std::size_t output_token_count(const AdapterConfig& cfg, std::size_t grid_h, std::size_t grid_w);

struct FeatureGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> data;  // (h, w, c) row-major

  FeatureGrid() = default;
  FeatureGrid(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t i, std::size_t j, std::size_t c) { return data[(i * width + j) * channels + c]; }
  double at(std::size_t i, std::size_t j, std::size_t c) const { return data[(i * width + j) * channels + c]; }
  /// (h*w) x c token matrix view of the same data.
  Tensor as_tokens() const { return Tensor({height * width, channels}, data); }
};

FeatureGrid adaptive_avg_pool2d(const FeatureGrid& grid, std::size_t side);

struct ConvParams {
  Tensor weight;  // (out, in, 3, 3)
  Tensor bias;    // (out)
};
/// 3x3 stride-1 convolution with a one-cell zero border; replaces the input.
FeatureGrid positional_conv(const FeatureGrid& grid, const ConvParams& params);

// Parameter names.
inline constexpr const char* kEncoderWeight = "encoder.proj.weight";
inline constexpr const char* kEncoderBias = "encoder.proj.bias";

/// Frozen random patch projection, N(0, 0.02^2), zero bias.
ParamMap init_encoder(const EncoderConfig& cfg, std::uint64_t seed);
ParamMap init_adapter(const AdapterConfig& cfg, std::uint64_t seed);

/// Image [H x W x 3] -> (g_h * g_w) x d embedding, patches in row-major order.
Tensor patch_embed(const Tensor& image, const EncoderConfig& cfg, const ParamMap& params);

/// Graph form of the adapter; `embedding` is an (g_h*g_w) x d var.
ag::Var adapter_graph(ag::ParamBinder& params, ag::Var embedding, std::size_t grid_h, std::size_t grid_w,
                      const AdapterConfig& cfg);

/// Multigranularity adapter: linear+act, reshape, per-kernel pool then shared
/// positional conv, global mean, concatenate, linear.
Tensor adapter_forward(const Tensor& embedding, std::size_t grid_h, std::size_t grid_w, const AdapterConfig& cfg,
                       const ParamMap& params);
/// Three linear layers with activations between them; keeps all tokens.
Tensor mlp_adapter_forward(const Tensor& embedding, const AdapterConfig& cfg, const ParamMap& params);

}  // namespace colongpt::vision
