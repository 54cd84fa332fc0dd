#include "ecd/image_io.hpp"

#include <cmath>
#include <fstream>
#include <string>

namespace ecd {

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

struct Header {
  std::string magic;
  Index width = 0;
  Index height = 0;
  int maxval = 0;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
  Header h;
  h.magic = next_token(in);
  h.width = std::stol(next_token(in));
  h.height = std::stol(next_token(in));
  h.maxval = std::stoi(next_token(in));
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) {
    throw std::runtime_error("unsupported netpbm header in " + path.string());
  }
  return h;
}

}  // namespace

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  std::string row(static_cast<std::size_t>(img.width() * 3), '\0');
  for (Index y = 0; y < img.height(); ++y) {
    for (Index x = 0; x < img.width(); ++x) {
      for (Index c = 0; c < 3; ++c) {
        row[static_cast<std::size_t>(x * 3 + c)] =
            static_cast<char>(quantize(img.at(c, y, x)));
      }
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const Header h = read_header(in, path);
  if (h.magic != "P6") throw std::runtime_error("not a P6 image: " + path.string());
  Image img(h.height, h.width);
  std::string row(static_cast<std::size_t>(h.width * 3), '\0');
  for (Index y = 0; y < h.height; ++y) {
    if (!in.read(row.data(), static_cast<std::streamsize>(row.size()))) {
      throw std::runtime_error("truncated image " + path.string());
    }
    for (Index x = 0; x < h.width; ++x) {
      for (Index c = 0; c < 3; ++c) {
        img.at(c, y, x) =
            static_cast<float>(static_cast<std::uint8_t>(row[static_cast<std::size_t>(x * 3 + c)])) /
            255.0f;
      }
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << mask.cols() << " " << mask.rows() << "\n255\n";
  std::string row(static_cast<std::size_t>(mask.cols()), '\0');
  for (Index y = 0; y < mask.rows(); ++y) {
    for (Index x = 0; x < mask.cols(); ++x) {
      row[static_cast<std::size_t>(x)] = static_cast<char>(mask(y, x) ? 255 : 0);
    }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

Mask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const Header h = read_header(in, path);
  if (h.magic != "P5") throw std::runtime_error("not a P5 mask: " + path.string());
  Mask m(h.height, h.width);
  std::string row(static_cast<std::size_t>(h.width), '\0');
  for (Index y = 0; y < h.height; ++y) {
    if (!in.read(row.data(), static_cast<std::streamsize>(row.size()))) {
      throw std::runtime_error("truncated mask " + path.string());
    }
    for (Index x = 0; x < h.width; ++x) {
      m(y, x) = row[static_cast<std::size_t>(x)] != 0 ? 1 : 0;
    }
  }
  return m;
}

}  // namespace ecd
