#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vswu {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline std::uint8_t quantize_unit(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Binary 8-bit PGM (P5, maxval 255).
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.height * img.width) throw std::invalid_argument("write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace detail {

inline std::string pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      tok.push_back(c);
      break;
    }
  }
  while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) tok.push_back(c);
  return tok;
}

}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  if (detail::pgm_token(in) != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  try {
    img.width = std::stoul(detail::pgm_token(in));
    img.height = std::stoul(detail::pgm_token(in));
    if (std::stoul(detail::pgm_token(in)) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

}  // namespace vswu
