#pragma once

// Flat binary container of named arrays.
//
// Layout (little-endian):
//   magic "CGPTCKPT", u32 version, u32 entry count
//   per entry, in lexicographic name order:
//     u32 name length, name bytes, u8 dtype (0 = f64, 1 = f32),
//     u32 rank, u64 dims[rank], payload (numel * sizeof(dtype))

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "colongpt/autograd.hpp"

namespace colongpt::checkpoint {

enum class DType : std::uint8_t { kF64 = 0, kF32 = 1 };

void write(const ag::ParamMap& tensors, const std::filesystem::path& path, DType dtype = DType::kF64);
ag::ParamMap read(const std::filesystem::path& path);

/// 64-bit FNV-1a over names, shapes, and exact value bits. Entries are
/// restricted to names starting with `prefix` (empty matches all).
std::uint64_t content_hash(const ag::ParamMap& tensors, const std::string& prefix = "");
std::string hex(std::uint64_t h);

}  // namespace colongpt::checkpoint
