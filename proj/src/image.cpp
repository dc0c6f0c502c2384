#include "lmdet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lmdet/error.hpp"

namespace lmdet {

Image::Image(i64 w, i64 h, uint8_t r, uint8_t g, uint8_t b) : width(w), height(h) {
  pixels.resize(size_t(3 * w * h));
  for (i64 i = 0; i < w * h; ++i) {
    pixels[size_t(3 * i)] = r;
    pixels[size_t(3 * i + 1)] = g;
    pixels[size_t(3 * i + 2)] = b;
  }
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), "ppm: cannot open for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  require(bool(out), "ppm: write failed: " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "ppm: cannot open: " + path);
  std::string magic;
  in >> magic;
  require(magic == "P6", "ppm: expected P6 file: " + path);
  i64 w, h, maxval;
  in >> w >> h >> maxval;
  require(w > 0 && h > 0 && maxval == 255, "ppm: unsupported header in " + path);
  in.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  img.pixels.resize(size_t(3 * w * h));
  in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  require(bool(in), "ppm: truncated pixel data in " + path);
  return img;
}

void draw_box(Image& img, const Box& box, uint8_t r, uint8_t g, uint8_t b) {
  const Corners c = to_corners(clamp_box(box));
  const i64 x0 = std::clamp(i64(std::lround(c[0] * double(img.width))), i64(0), img.width - 1);
  const i64 y0 = std::clamp(i64(std::lround(c[1] * double(img.height))), i64(0), img.height - 1);
  const i64 x1 = std::clamp(i64(std::lround(c[2] * double(img.width))) - 1, i64(0), img.width - 1);
  const i64 y1 = std::clamp(i64(std::lround(c[3] * double(img.height))) - 1, i64(0), img.height - 1);
  auto put = [&](i64 x, i64 y) {
    uint8_t* p = img.at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  };
  for (i64 x = x0; x <= x1; ++x) {
    put(x, y0);
    put(x, y1);
  }
  for (i64 y = y0; y <= y1; ++y) {
    put(x0, y);
    put(x1, y);
  }
}

}  // namespace lmdet
