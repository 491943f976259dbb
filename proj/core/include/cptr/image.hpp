#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cptr {

// 8-bit RGB image, row-major, channels interleaved.
struct RawImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels; // height * width * 3 bytes

  uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  static RawImage filled(int h, int w, uint8_t r, uint8_t g, uint8_t b);
};

// Binary PPM (P6, maxval 255).
RawImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RawImage& img); // write-to-temp, atomic rename

// Bilinear resize with corner alignment: source coordinate of output pixel x
// is x * (src-1) / (dst-1), so corner pixels carry over exactly and a
// same-size resize is the identity.
RawImage resize(const RawImage& img, int out_h, int out_w);

}  // namespace cptr
