#include "dualmind/image.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dm {

image image::make(int h, int w, int c, std::uint8_t fill) {
  image img;
  img.h = h;
  img.w = w;
  img.c = c;
  img.data.assign(std::size_t(h) * w * c, fill);
  return img;
}

void image::fill_rect(int y0, int x0, int h_px, int w_px, std::uint8_t r, std::uint8_t g,
                      std::uint8_t b) {
  for (int y = y0; y < y0 + h_px; ++y) {
    if (y < 0 || y >= h) continue;
    for (int x = x0; x < x0 + w_px; ++x) {
      if (x < 0 || x >= w) continue;
      at(y, x, 0) = r;
      if (c > 1) at(y, x, 1) = g;
      if (c > 2) at(y, x, 2) = b;
    }
  }
}

void write_ppm(const std::string& path, const image& img) {
  if (img.c != 3) throw std::invalid_argument("write_ppm: need 3 channels");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::invalid_argument("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size()));
}

void write_pgm(const std::string& path, const image& img) {
  if (img.c != 1) throw std::invalid_argument("write_pgm: need 1 channel");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::invalid_argument("write_pgm: cannot open " + path);
  f << "P5\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size()));
}

std::vector<std::uint8_t> image_to_blob(const image& img) {
  std::vector<std::uint8_t> out(12 + img.data.size());
  const std::uint32_t h = std::uint32_t(img.h), w = std::uint32_t(img.w), c = std::uint32_t(img.c);
  std::memcpy(out.data(), &h, 4);
  std::memcpy(out.data() + 4, &w, 4);
  std::memcpy(out.data() + 8, &c, 4);
  std::memcpy(out.data() + 12, img.data.data(), img.data.size());
  return out;
}

image image_from_blob(const std::uint8_t* p, std::size_t len, std::size_t* consumed) {
  if (len < 12) throw std::invalid_argument("image_from_blob: truncated header");
  std::uint32_t h = 0, w = 0, c = 0;
  std::memcpy(&h, p, 4);
  std::memcpy(&w, p + 4, 4);
  std::memcpy(&c, p + 8, 4);
  const std::size_t n = std::size_t(h) * w * c;
  if (len < 12 + n) throw std::invalid_argument("image_from_blob: truncated payload");
  image img = image::make(int(h), int(w), int(c));
  std::memcpy(img.data.data(), p + 12, n);
  if (consumed) *consumed = 12 + n;
  return img;
}

}  // namespace dm
