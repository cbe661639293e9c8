#pragma once

#include <filesystem>
#include <vector>

#include "xrefine/tensor.hpp"

// Minimal float image container plus binary PGM/PPM (P5/P6, 8-bit) io.
// Intensities live in [0,1]; pixel centers sit on integer coordinates.

namespace xrefine {

struct Image {
  int width = 0, height = 0, channels = 1;
  std::vector<float> pixels;  // row-major, channel-interleaved

  static Image zeros(int width, int height, int channels = 1) {
    if (width <= 0 || height <= 0 || channels <= 0) throw ShapeError("Image: non-positive size");
    Image im;
    im.width = width;
    im.height = height;
    im.channels = channels;
    im.pixels.assign(static_cast<size_t>(width) * height * channels, 0.0f);
    return im;
  }

  float at(int x, int y, int c = 0) const { return pixels[index(x, y, c)]; }
  float& at(int x, int y, int c = 0) { return pixels[index(x, y, c)]; }

  bool contains(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  /// Bilinear sample at a subpixel position; defined on [0, width-1] x
  /// [0, height-1]. Out-of-support positions throw.
  double bilinear(double x, double y, int c = 0) const {
    if (!(x >= 0 && x <= width - 1 && y >= 0 && y <= height - 1))
      throw DataError("bilinear sample outside image support");
    int x0 = static_cast<int>(x);
    int y0 = static_cast<int>(y);
    if (x0 > width - 2) x0 = width - 2;    // exact right/bottom edge
    if (y0 > height - 2) y0 = height - 2;
    if (width == 1) x0 = 0;
    if (height == 1) y0 = 0;
    const double fx = x - x0, fy = y - y0;
    const int x1 = width == 1 ? x0 : x0 + 1;
    const int y1 = height == 1 ? y0 : y0 + 1;
    const double v00 = at(x0, y0, c), v10 = at(x1, y0, c);
    const double v01 = at(x0, y1, c), v11 = at(x1, y1, c);
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
  }

 private:
  size_t index(int x, int y, int c) const {
    return (static_cast<size_t>(y) * width + x) * channels + c;
  }
};

/// Reads a binary PGM (P5) or PPM (P6) with maxval 255.
Image read_pnm(const std::filesystem::path& path);

/// Writes a single-channel image as binary PGM, values clamped to [0,1].
void write_pgm(const Image& image, const std::filesystem::path& path);

/// Rec.601 luma (0.299, 0.587, 0.114), clamped to [0,1]. Requires 3 channels.
Image to_grayscale(const Image& rgb);

}  // namespace xrefine
