#pragma once

#include <filesystem>
#include <vector>

namespace mvcond {

// H x W x 3, row-major, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, fill) {}

  double& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  bool same_size(const Image& o) const { return width == o.width && height == o.height; }
};

Image flip_horizontal(const Image& img);

// 8-bit RGB PNG. Values are clamped to [0,1] and rounded to the nearest level.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// Quantizes to the 8-bit grid written by write_png.
Image quantize8(const Image& img);

}  // namespace mvcond
