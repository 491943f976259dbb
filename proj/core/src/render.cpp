#include "cptr/render.hpp"

#include <algorithm>
#include <cmath>

#include "cptr/error.hpp"

namespace cptr {

std::array<uint8_t, 3> heat_color(float t) {
  t = std::clamp(t, 0.0f, 1.0f);
  // stops: 0.0 blue (0,0,255) -> 0.5 green (0,255,0) -> 1.0 red (255,0,0)
  float r, g, b;
  if (t < 0.5f) {
    const float u = t / 0.5f;
    r = 0.0f;
    g = 255.0f * u;
    b = 255.0f * (1.0f - u);
  } else {
    const float u = (t - 0.5f) / 0.5f;
    r = 255.0f * u;
    g = 255.0f * (1.0f - u);
    b = 0.0f;
  }
  return {static_cast<uint8_t>(std::lround(r)), static_cast<uint8_t>(std::lround(g)),
          static_cast<uint8_t>(std::lround(b))};
}

RawImage render_attention_overlay(const RawImage& image, const std::vector<float>& attention_row, int grid_h,
                                  int grid_w, int query_index) {
  if (grid_h <= 0 || grid_w <= 0 || attention_row.size() != static_cast<size_t>(grid_h) * grid_w)
    throw ValueError("attention row length " + std::to_string(attention_row.size()) + " does not match grid " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w));
  if (image.height % grid_h != 0 || image.width % grid_w != 0)
    throw ValueError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not divisible by the patch grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
  if (query_index >= grid_h * grid_w)
    throw ValueError("query index " + std::to_string(query_index) + " outside patch grid");

  float lo = attention_row[0], hi = attention_row[0];
  for (float v : attention_row) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float span = hi - lo;
  std::vector<float> heat(attention_row.size());
  for (size_t i = 0; i < heat.size(); ++i)
    heat[i] = span < 1e-12f ? 0.5f : (attention_row[i] - lo) / span;

  const int cell_h = image.height / grid_h;
  const int cell_w = image.width / grid_w;
  RawImage out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int cell = (y / cell_h) * grid_w + (x / cell_w);
      const std::array<uint8_t, 3> c = heat_color(heat[static_cast<size_t>(cell)]);
      for (int ch = 0; ch < 3; ++ch) {
        const float blended = 0.5f * image.at(y, x, ch) + 0.5f * c[static_cast<size_t>(ch)];
        out.at(y, x, ch) = static_cast<uint8_t>(std::lround(blended));
      }
    }
  }

  if (query_index >= 0) {
    const int qy = (query_index / grid_w) * cell_h + cell_h / 2;
    const int qx = (query_index % grid_w) * cell_w + cell_w / 2;
    const int r = std::max(1, std::min(cell_h, cell_w) / 4);
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int y = qy + dy, x = qx + dx;
        if (y < 0 || y >= image.height || x < 0 || x >= image.width) continue;
        out.at(y, x, 0) = 255;
        out.at(y, x, 1) = 0;
        out.at(y, x, 2) = 0;
      }
    }
  }
  return out;
}

RawImage render_token_band_overlay(const RawImage& image, const std::vector<float>& attention_row) {
  if (attention_row.empty()) throw ValueError("empty attention row");
  float lo = attention_row[0], hi = attention_row[0];
  for (float v : attention_row) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float span = hi - lo;
  const size_t n = attention_row.size();
  RawImage out = image;
  for (int x = 0; x < image.width; ++x) {
    const size_t idx = static_cast<size_t>(x) * n / static_cast<size_t>(image.width);
    const float t = span < 1e-12f ? 0.5f : (attention_row[idx] - lo) / span;
    const std::array<uint8_t, 3> c = heat_color(t);
    for (int y = 0; y < image.height; ++y)
      for (int ch = 0; ch < 3; ++ch)
        out.at(y, x, ch) = static_cast<uint8_t>(std::lround(0.5f * image.at(y, x, ch) + 0.5f * c[static_cast<size_t>(ch)]));
  }
  return out;
}

}  // namespace cptr
