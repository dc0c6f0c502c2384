#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmdet/geometry.hpp"

namespace lmdet {

// Interleaved RGB, row-major, maxval 255.
struct Image {
  i64 width = 0, height = 0;
  std::vector<uint8_t> pixels;  // 3 * width * height

  Image() = default;
  Image(i64 w, i64 h, uint8_t r, uint8_t g, uint8_t b);

  uint8_t* at(i64 x, i64 y) { return pixels.data() + 3 * (y * width + x); }
  const uint8_t* at(i64 x, i64 y) const { return pixels.data() + 3 * (y * width + x); }
};

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// 1-px rectangle outline at a normalized box, clamped to the image bounds.
void draw_box(Image& img, const Box& box, uint8_t r, uint8_t g, uint8_t b);

}  // namespace lmdet
