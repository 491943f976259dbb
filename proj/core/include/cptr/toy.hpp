#pragma once

#include <string>
#include <vector>

#include "cptr/image.hpp"
#include "cptr/manifest.hpp"
#include "cptr/rng.hpp"

namespace cptr {

// Synthetic desk-scale caption corpus: 64x64 images of one or two colored
// shapes on a 3x3 grid, captioned by a fixed template grammar (see
// docs/toy_corpus.md). The caption is a deterministic function of the scene,
// so exact-match accuracy is well defined.
struct ToyShape {
  int kind = 0;  // 0 circle, 1 square, 2 triangle
  int color = 0; // 0 red, 1 green, 2 blue, 3 yellow
  int cell = 0;  // row-major cell of the 3x3 grid
};

struct ToyScene {
  std::vector<ToyShape> shapes; // 1 or 2 entries, sorted by cell

  bool operator==(const ToyScene&) const = default;
};

// Template caption of a scene. Two-shape scenes name the upper-left shape
// first; shapes on the same row relate by "left of", otherwise by "above".
std::string toy_caption(const ToyScene& scene);

RawImage render_toy_scene(const ToyScene& scene, int image_size = 64);

// Uniform draw: one shape with probability 1/3, otherwise two shapes at
// distinct cells (canonicalized by cell index).
ToyScene sample_toy_scene(CounterRng& rng);

// Number of distinct canonical scenes.
long long toy_scene_space_size();

// Every word the template grammar can emit.
std::vector<std::string> toy_vocabulary_words();

// Writes images/ and manifest.json under out_dir; byte-identical for a given
// seed. Returns the manifest (base_dir set to out_dir).
Manifest generate_toy_corpus(uint64_t seed, int n_train, int n_val, int n_test, const std::string& out_dir);

}  // namespace cptr
