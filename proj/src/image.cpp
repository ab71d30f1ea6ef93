#include "docdet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace docdet {

Image::Image(int h, int w, Rgb fill) : height(h), width(w), data(std::size_t(3) * h * w) {
  for (std::size_t i = 0; i < data.size(); i += 3) {
    data[i] = fill.r;
    data[i + 1] = fill.g;
    data[i + 2] = fill.b;
  }
}

void Image::set(int y, int x, Rgb c) {
  unsigned char* p = px(y, x);
  p[0] = c.r;
  p[1] = c.g;
  p[2] = c.b;
}

void fill_rect(Image& img, int x1, int y1, int x2, int y2, Rgb c) {
  x1 = std::max(x1, 0);
  y1 = std::max(y1, 0);
  x2 = std::min(x2, img.width);
  y2 = std::min(y2, img.height);
  for (int y = y1; y < y2; ++y)
    for (int x = x1; x < x2; ++x) img.set(y, x, c);
}

void draw_rect_outline(Image& img, int x1, int y1, int x2, int y2, int thickness, Rgb c) {
  fill_rect(img, x1, y1, x2, y1 + thickness, c);
  fill_rect(img, x1, y2 - thickness, x2, y2, c);
  fill_rect(img, x1, y1, x1 + thickness, y2, c);
  fill_rect(img, x2 - thickness, y1, x2, y2, c);
}

void write_png(const std::string& path, const Image& img) {
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("write_png: empty image for " + path);
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failure for " + path);
  }

  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.px(y, 0)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng failure for " + path);
  }

  png_init_io(png, fp);
  png_read_info(png, info);

  // normalize everything to 8-bit RGB
  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img(static_cast<int>(png_get_image_height(png, info)),
            static_cast<int>(png_get_image_width(png, info)));
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.px(y, 0), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

nn::Tensor image_to_tensor(const Image& img) {
  nn::Tensor t({3, img.height, img.width});
  const std::size_t plane = std::size_t(img.height) * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const unsigned char* p = img.px(y, x);
      const std::size_t i = std::size_t(y) * img.width + x;
      t.v[i] = p[0] / 255.0;
      t.v[plane + i] = p[1] / 255.0;
      t.v[2 * plane + i] = p[2] / 255.0;
    }
  return t;
}

}  // namespace docdet
