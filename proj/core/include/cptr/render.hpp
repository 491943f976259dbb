#pragma once

#include <array>
#include <vector>

#include "cptr/image.hpp"

namespace cptr {

// Piecewise-linear blue -> green -> red heat ramp over t in [0, 1]; the
// stop table is documented in docs/formats.md.
std::array<uint8_t, 3> heat_color(float t);

// Renders one attention row as a heat overlay: reshape to the patch grid,
// min-max normalize (constant rows map to 0.5), nearest-neighbor upsample to
// the image resolution, alpha-blend at 0.5. query_index >= 0 marks that
// patch's center with a red square (encoder self-attention renders).
RawImage render_attention_overlay(const RawImage& image, const std::vector<float>& attention_row, int grid_h,
                                  int grid_w, int query_index = -1);

// Token-key rows (decoder self-attention) have no patch geometry; they render
// as vertical bands, one per key, with the same normalization and blend.
RawImage render_token_band_overlay(const RawImage& image, const std::vector<float>& attention_row);

}  // namespace cptr
