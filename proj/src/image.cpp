#include "colongpt/image.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "colongpt/error.hpp"

namespace colongpt::image {

void write_ppm(const Image& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write image '" + path.string() + "'");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image '" + path.string() + "'");
  const std::string where = path.string();
  if (header_token(is) != "P6") throw ParseError(where + ": not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(header_token(is));
    h = std::stoi(header_token(is));
    maxval = std::stoi(header_token(is));
  } catch (const std::exception&) {
    throw ParseError(where + ": bad PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw ParseError(where + ": unsupported PPM geometry or depth");
  Image img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw ParseError(where + ": truncated pixel data");
  }
  return img;
}

Tensor to_tensor(const Image& img) {
  Tensor t({static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width), 3});
  for (std::size_t i = 0; i < img.rgb.size(); ++i) t[i] = img.rgb[i] / 255.0;
  return t;
}

}  // namespace colongpt::image
