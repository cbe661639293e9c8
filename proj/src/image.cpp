#include "xrefine/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace xrefine {
namespace {

// Skips whitespace and '#' comment lines between header tokens.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) continue;
    break;
  }
  if (c == EOF) throw DataError("pnm: truncated header");
  do {
    tok.push_back(static_cast<char>(c));
  } while ((c = is.get()) != EOF && !std::isspace(c) && c != '#');
  if (c == '#') is.unget();
  return tok;
}

int header_int(std::istream& is, const char* what) {
  const std::string tok = next_token(is);
  try {
    size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw DataError(std::string("pnm: bad ") + what + " '" + tok + "'");
  }
}

}  // namespace

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image: " + path.string());
  char m0 = 0, m1 = 0;
  is.get(m0).get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw DataError("unsupported image format (need binary PGM P5 or PPM P6): " + path.string());
  const int channels = m1 == '5' ? 1 : 3;
  const int width = header_int(is, "width");
  const int height = header_int(is, "height");
  const int maxval = header_int(is, "maxval");
  if (width <= 0 || height <= 0) throw DataError("pnm: non-positive dimensions");
  if (maxval != 255) throw DataError("pnm: only maxval 255 supported");
  // next_token consumed the single whitespace byte after the maxval, so the
  // stream now sits on the first pixel.

  Image im = Image::zeros(width, height, channels);
  std::vector<unsigned char> raw(im.pixels.size());
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DataError("pnm: truncated pixel data in " + path.string());
  for (size_t i = 0; i < raw.size(); ++i) im.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  return im;
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 1) throw ShapeError("write_pgm: single-channel images only");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open image for writing: " + path.string());
  os << "P5\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> raw(image.pixels.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw DataError("failed writing image: " + path.string());
}

Image to_grayscale(const Image& rgb) {
  if (rgb.channels == 1) return rgb;
  if (rgb.channels != 3) throw ShapeError("to_grayscale: need a 1- or 3-channel image");
  Image gray = Image::zeros(rgb.width, rgb.height, 1);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      const float v = 0.299f * rgb.at(x, y, 0) + 0.587f * rgb.at(x, y, 1) + 0.114f * rgb.at(x, y, 2);
      gray.at(x, y) = std::clamp(v, 0.0f, 1.0f);
    }
  return gray;
}

}  // namespace xrefine
