#pragma once

#include <vector>

#include "cptr/config.hpp"
#include "cptr/image.hpp"
#include "cptr/ops.hpp"
#include "cptr/tensor.hpp"

namespace cptr {

// Flattened non-overlapping patch grid of a normalized image: row i holds
// patch i (row-major over the patch grid), laid out as P*P pixels row-major
// with channels fastest. This interior layout is fixed; checkpoints depend
// on it.
struct PatchSequence {
  int n_patches = 0;
  int patch_dim = 0;      // P*P*3
  int grid_h = 0;
  int grid_w = 0;
  int patch_size = 0;
  std::vector<float> matrix; // n_patches * patch_dim
};

// Pixel normalization applied before patchify: v/255 then (v - 0.5) / 0.5,
// i.e. bytes map affinely onto [-1, 1].
inline float normalize_pixel(uint8_t v) { return static_cast<float>(v) / 255.0f * 2.0f - 1.0f; }
inline uint8_t denormalize_pixel(float v) {
  const float b = (v + 1.0f) * 0.5f * 255.0f;
  return static_cast<uint8_t>(b < 0.0f ? 0 : (b > 255.0f ? 255 : b + 0.5f));
}

// Splits a normalized image into its patch sequence. P must divide both
// image dimensions.
PatchSequence patchify(const RawImage& img, int patch_size);

// Exact inverse of patchify on the pixel data.
RawImage unpatchify(const PatchSequence& seq);

// Full vision pipeline: resize to the configured resolution, then patchify.
PatchSequence image_to_patch_sequence(const RawImage& img, const ModelConfig& cfg);

template <class S>
TensorT<S> patch_matrix_tensor(const PatchSequence& seq) {
  std::vector<S> data(seq.matrix.size());
  for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(seq.matrix[i]);
  return TensorT<S>({seq.n_patches, seq.patch_dim}, std::move(data));
}

// Patch embedding: row i of the output is seq.row(i) * W + b + positions[i].
template <class S>
TensorT<S> embed_patches(const TensorT<S>& patch_matrix, const TensorT<S>& proj_w, const TensorT<S>& proj_b,
                         const TensorT<S>& positions) {
  if (patch_matrix.dim(1) != proj_w.dim(0))
    throw ConfigError("patch dim " + std::to_string(patch_matrix.dim(1)) + " does not match projection rows " +
                      std::to_string(proj_w.dim(0)));
  if (patch_matrix.dim(0) != positions.dim(0))
    throw ConfigError("patch count " + std::to_string(patch_matrix.dim(0)) +
                      " does not match position table length " + std::to_string(positions.dim(0)) +
                      " (was the resolution changed without re-initializing?)");
  return add(linear(patch_matrix, proj_w, proj_b), positions);
}

}  // namespace cptr
