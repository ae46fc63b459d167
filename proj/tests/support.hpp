#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "colongpt/autograd.hpp"
#include "colongpt/rng.hpp"

namespace testing_support {

inline colongpt::Tensor random_tensor(std::vector<std::size_t> shape, colongpt::SplitMix64& rng, double scale = 1.0) {
  colongpt::Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("colongpt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_support
