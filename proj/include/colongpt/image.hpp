#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "colongpt/tensor.hpp"

namespace colongpt::image {

/// 8-bit RGB, row-major, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
  std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* pixel(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary PPM (P6, maxval 255).
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// H x W x 3 tensor scaled to [0, 1].
Tensor to_tensor(const Image& img);

}  // namespace colongpt::image
