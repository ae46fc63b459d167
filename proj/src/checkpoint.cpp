#include "colongpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

#include "colongpt/error.hpp"
#include "colongpt/rng.hpp"

namespace colongpt::checkpoint {
namespace {

constexpr char kMagic[8] = {'C', 'G', 'P', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& where) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError(where + ": truncated checkpoint");
  return v;
}

}  // namespace

void write(const ag::ParamMap& tensors, const std::filesystem::path& path, DType dtype) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write checkpoint '" + path.string() + "'");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {  // std::map iterates in lexicographic order
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    if (dtype == DType::kF64) {
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
      for (double v : t.values()) put<float>(os, static_cast<float>(v));
    }
  }
  if (!os) throw UsageError("failed writing checkpoint '" + path.string() + "'");
}

ag::ParamMap read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint '" + path.string() + "'");
  const std::string where = path.string();
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(where + ": not a checkpoint container");
  }
  if (get<std::uint32_t>(is, where) != kVersion) throw ParseError(where + ": unsupported checkpoint version");
  const auto count = get<std::uint32_t>(is, where);
  ag::ParamMap out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = get<std::uint32_t>(is, where);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError(where + ": truncated checkpoint");
    const auto dtype = static_cast<DType>(get<std::uint8_t>(is, where));
    const auto rank = get<std::uint32_t>(is, where);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, where));
    Tensor t(shape);
    if (dtype == DType::kF64) {
      if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw ParseError(where + ": truncated tensor '" + name + "'");
      }
    } else if (dtype == DType::kF32) {
      for (double& v : t.values()) v = get<float>(is, where);
    } else {
      throw ParseError(where + ": unknown dtype for '" + name + "'");
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

std::uint64_t content_hash(const ag::ParamMap& tensors, const std::string& prefix) {
  std::uint64_t h = fnv1a("");
  for (const auto& [name, t] : tensors) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    h = fnv1a(name, h);
    for (std::size_t d : t.shape()) h = fnv1a(std::string_view(reinterpret_cast<const char*>(&d), sizeof(d)), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double)), h);
  }
  return h;
}

std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace colongpt::checkpoint
