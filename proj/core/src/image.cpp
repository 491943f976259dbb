#include "cptr/image.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cptr/error.hpp"

namespace cptr {

RawImage RawImage::filled(int h, int w, uint8_t r, uint8_t g, uint8_t b) {
  RawImage img;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<size_t>(h) * w * 3);
  for (size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = r;
    img.pixels[i + 1] = g;
    img.pixels[i + 2] = b;
  }
  return img;
}

RawImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);

  auto next_token = [&in, &path]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') { // comment to end of line
        while ((ch = in.get()) != EOF && ch != '\n') {}
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw IoError("truncated PPM header: " + path);
    return tok;
  };

  if (next_token() != "P6") throw IoError("not a binary P6 PPM: " + path);
  RawImage img;
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (img.width <= 0 || img.height <= 0) throw IoError("invalid PPM dimensions: " + path);
  if (maxval != 255) throw IoError("only 8-bit PPM supported (maxval 255): " + path);
  // exactly one whitespace byte separates the header from pixel data; the
  // token reader above already consumed it.
  img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError("truncated PPM pixel data: " + path);
  return img;
}

void write_ppm(const std::string& path, const RawImage& img) {
  if (img.pixels.size() != static_cast<size_t>(img.height) * img.width * 3)
    throw ValueError("image pixel buffer does not match dimensions");
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write image: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IoError("short write for image: " + path);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot finalize image " + path + ": " + ec.message());
  }
}

RawImage resize(const RawImage& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw ValueError("resize target must be positive, got " + std::to_string(out_h) + "x" + std::to_string(out_w));
  if (img.height == out_h && img.width == out_w) return img;
  RawImage out;
  out.height = out_h;
  out.width = out_w;
  out.pixels.resize(static_cast<size_t>(out_h) * out_w * 3);
  const double sy = out_h > 1 ? static_cast<double>(img.height - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(img.width - 1) / (out_w - 1) : 0.0;
  for (int y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(y0, x0, c) * (1 - wy) * (1 - wx) + img.at(y0, x1, c) * (1 - wy) * wx +
                         img.at(y1, x0, c) * wy * (1 - wx) + img.at(y1, x1, c) * wy * wx;
        out.at(y, x, c) = static_cast<uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
      }
    }
  }
  return out;
}

}  // namespace cptr
