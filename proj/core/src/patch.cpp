#include "cptr/patch.hpp"

#include "cptr/error.hpp"

namespace cptr {

PatchSequence patchify(const RawImage& img, int patch_size) {
  if (patch_size <= 0) throw ValueError("patch size must be positive");
  if (img.height % patch_size != 0 || img.width % patch_size != 0)
    throw ValueError("patch size " + std::to_string(patch_size) + " does not divide image " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  PatchSequence seq;
  seq.patch_size = patch_size;
  seq.grid_h = img.height / patch_size;
  seq.grid_w = img.width / patch_size;
  seq.n_patches = seq.grid_h * seq.grid_w;
  seq.patch_dim = patch_size * patch_size * 3;
  seq.matrix.resize(static_cast<size_t>(seq.n_patches) * seq.patch_dim);
  size_t o = 0;
  for (int py = 0; py < seq.grid_h; ++py) {
    for (int px = 0; px < seq.grid_w; ++px) {
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) {
          for (int c = 0; c < 3; ++c) {
            seq.matrix[o++] = normalize_pixel(img.at(py * patch_size + y, px * patch_size + x, c));
          }
        }
      }
    }
  }
  return seq;
}

PatchSequence image_to_patch_sequence(const RawImage& img, const ModelConfig& cfg) {
  return patchify(resize(img, cfg.res_h, cfg.res_w), cfg.patch_size);
}

RawImage unpatchify(const PatchSequence& seq) {
  RawImage img;
  img.height = seq.grid_h * seq.patch_size;
  img.width = seq.grid_w * seq.patch_size;
  img.pixels.resize(static_cast<size_t>(img.height) * img.width * 3);
  size_t o = 0;
  for (int py = 0; py < seq.grid_h; ++py) {
    for (int px = 0; px < seq.grid_w; ++px) {
      for (int y = 0; y < seq.patch_size; ++y) {
        for (int x = 0; x < seq.patch_size; ++x) {
          for (int c = 0; c < 3; ++c) {
            img.at(py * seq.patch_size + y, px * seq.patch_size + x, c) = denormalize_pixel(seq.matrix[o++]);
          }
        }
      }
    }
  }
  return img;
}

}  // namespace cptr
