#pragma once

#include <string>
#include <vector>

#include "docdet/tensor.hpp"

namespace docdet {

struct Rgb {
  unsigned char r = 0, g = 0, b = 0;
};

// 8-bit RGB raster, row-major, interleaved channels
struct Image {
  int height = 0, width = 0;
  std::vector<unsigned char> data;

  Image() = default;
  Image(int h, int w, Rgb fill = {255, 255, 255});

  unsigned char* px(int y, int x) { return data.data() + 3 * (std::size_t(y) * width + x); }
  const unsigned char* px(int y, int x) const {
    return data.data() + 3 * (std::size_t(y) * width + x);
  }
  void set(int y, int x, Rgb c);
};

// half-open [x1, x2) × [y1, y2), clipped to the image
void fill_rect(Image& img, int x1, int y1, int x2, int y2, Rgb c);
// frame drawn inward from the same half-open bounds
void draw_rect_outline(Image& img, int x1, int y1, int x2, int y2, int thickness, Rgb c);

void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// [3, H, W], values scaled to [0, 1]
nn::Tensor image_to_tensor(const Image& img);

}  // namespace docdet
