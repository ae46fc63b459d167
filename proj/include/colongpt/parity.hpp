#pragma once

// Operator dumps for cross-checking against an external framework: one
// checkpoint container holding every input and output array, plus a
// cases.json manifest naming operator, inputs, output, attributes and
// tolerance per case.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "colongpt/autograd.hpp"

namespace colongpt::parity {

struct Case {
  std::string name;
  std::string op;
  std::vector<std::string> inputs;
  std::string output;
  nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
  double tolerance = 1e-10;
};

struct Dump {
  std::vector<Case> cases;
  ag::ParamMap arrays;
};

/// Adaptive pooling (even, uneven, identity), 3x3 padded conv, GELU, linear,
/// LoRA merge and masked cross-entropy on seeded random inputs.
Dump build(std::uint64_t seed);

/// Writes <dir>/arrays.ckpt and <dir>/cases.json.
void write(const Dump& dump, const std::filesystem::path& dir);
Dump read(const std::filesystem::path& dir);

/// Re-evaluates every case with this library and returns the largest
/// absolute deviation from the stored output per case.
std::vector<std::pair<std::string, double>> self_check(const Dump& dump);

}  // namespace colongpt::parity
