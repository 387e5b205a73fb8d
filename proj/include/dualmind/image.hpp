#pragma once
// Dense 8-bit images (row-major, interleaved channels) plus the portable
// writers used by exports: binary PPM (P6) for color, PGM (P5) for gray.
// Raw blob form used inside dataset shards: 12-byte header of H, W, C as
// little-endian u32, then H*W*C payload bytes.

#include <cstdint>
#include <string>
#include <vector>

namespace dm {

struct image {
  int h = 0, w = 0, c = 0;
  std::vector<std::uint8_t> data;  // h*w*c

  static image make(int h, int w, int c, std::uint8_t fill = 0);
  std::uint8_t& at(int y, int x, int ch) { return data[std::size_t((y * w + x) * c + ch)]; }
  std::uint8_t at(int y, int x, int ch) const { return data[std::size_t((y * w + x) * c + ch)]; }
  void fill_rect(int y0, int x0, int h_px, int w_px, std::uint8_t r, std::uint8_t g,
                 std::uint8_t b);
  bool operator==(const image& o) const = default;
};

void write_ppm(const std::string& path, const image& img);           // c == 3
void write_pgm(const std::string& path, const image& img);           // c == 1
std::vector<std::uint8_t> image_to_blob(const image& img);           // 12-byte header + payload
image image_from_blob(const std::uint8_t* p, std::size_t len, std::size_t* consumed = nullptr);

}  // namespace dm
