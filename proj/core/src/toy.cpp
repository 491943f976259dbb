#include "cptr/toy.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <set>

#include "cptr/error.hpp"

namespace cptr {

namespace {

constexpr std::array<const char*, 3> kKinds = {"circle", "square", "triangle"};
constexpr std::array<const char*, 4> kColors = {"red", "green", "blue", "yellow"};
constexpr std::array<const char*, 3> kRows = {"top", "middle", "bottom"};
constexpr std::array<const char*, 3> kCols = {"left", "center", "right"};
constexpr std::array<std::array<uint8_t, 3>, 4> kRgb = {{{255, 0, 0}, {0, 200, 0}, {0, 64, 255}, {255, 220, 0}}};

std::string shape_phrase(const ToyShape& s) {
  return std::string("a ") + kColors[static_cast<size_t>(s.color)] + " " + kKinds[static_cast<size_t>(s.kind)];
}

}  // namespace

std::string toy_caption(const ToyScene& scene) {
  if (scene.shapes.size() == 1) {
    const ToyShape& s = scene.shapes[0];
    return shape_phrase(s) + " in the " + kRows[static_cast<size_t>(s.cell / 3)] + " " +
           kCols[static_cast<size_t>(s.cell % 3)];
  }
  if (scene.shapes.size() == 2) {
    const ToyShape& a = scene.shapes[0];
    const ToyShape& b = scene.shapes[1];
    const char* rel = (a.cell / 3 == b.cell / 3) ? "left of" : "above";
    return shape_phrase(a) + " " + rel + " " + shape_phrase(b);
  }
  throw ValueError("toy scene must contain one or two shapes");
}

RawImage render_toy_scene(const ToyScene& scene, int image_size) {
  if (image_size < 24 || image_size % 2 != 0) throw ValueError("toy image size must be even and >= 24");
  RawImage img = RawImage::filled(image_size, image_size, 0, 0, 0);
  const int radius = image_size / 8;
  for (const ToyShape& s : scene.shapes) {
    const int row = s.cell / 3, col = s.cell % 3;
    const int cy = (2 * row + 1) * image_size / 6;
    const int cx = (2 * col + 1) * image_size / 6;
    const auto& rgb = kRgb[static_cast<size_t>(s.color)];
    for (int dy = -radius; dy < radius; ++dy) {
      for (int dx = -radius; dx < radius; ++dx) {
        bool inside = false;
        switch (s.kind) {
          case 0:
            inside = dx * dx + dy * dy <= radius * radius;
            break;
          case 1:
            inside = std::abs(dx) <= radius - 1 && std::abs(dy) <= radius - 1;
            break;
          case 2: {
            // upward triangle: apex at dy = -radius, base at dy = radius - 1
            const int half = ((dy + radius) * radius) / (2 * radius - 1);
            inside = std::abs(dx) <= half;
            break;
          }
          default:
            throw ValueError("unknown toy shape kind");
        }
        if (!inside) continue;
        const int y = cy + dy, x = cx + dx;
        if (y < 0 || y >= image_size || x < 0 || x >= image_size) continue;
        img.at(y, x, 0) = rgb[0];
        img.at(y, x, 1) = rgb[1];
        img.at(y, x, 2) = rgb[2];
      }
    }
  }
  return img;
}

ToyScene sample_toy_scene(CounterRng& rng) {
  ToyScene scene;
  const int count = rng.next_below(3) == 0 ? 1 : 2;
  ToyShape first{static_cast<int>(rng.next_below(3)), static_cast<int>(rng.next_below(4)),
                 static_cast<int>(rng.next_below(9))};
  scene.shapes.push_back(first);
  if (count == 2) {
    ToyShape second{static_cast<int>(rng.next_below(3)), static_cast<int>(rng.next_below(4)),
                    static_cast<int>(rng.next_below(9))};
    while (second.cell == first.cell) second.cell = static_cast<int>(rng.next_below(9));
    scene.shapes.push_back(second);
    std::sort(scene.shapes.begin(), scene.shapes.end(),
              [](const ToyShape& a, const ToyShape& b) { return a.cell < b.cell; });
  }
  return scene;
}

long long toy_scene_space_size() {
  // 1-shape scenes + ordered-by-cell pairs over distinct cells
  const long long attrs = static_cast<long long>(kKinds.size()) * kColors.size();
  const long long one = attrs * 9;
  const long long cell_pairs = 9 * 8 / 2;
  return one + attrs * attrs * cell_pairs;
}

std::vector<std::string> toy_vocabulary_words() {
  std::set<std::string> words;
  for (const char* k : kKinds) words.insert(k);
  for (const char* c : kColors) words.insert(c);
  for (const char* r : kRows) words.insert(r);
  for (const char* c : kCols) words.insert(c);
  words.insert("a");
  words.insert("in");
  words.insert("the");
  words.insert("of");
  words.insert("above");
  return {words.begin(), words.end()};
}

Manifest generate_toy_corpus(uint64_t seed, int n_train, int n_val, int n_test, const std::string& out_dir) {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ValueError("toy corpus split sizes must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("cannot create toy corpus directory " + out_dir + ": " + ec.message());

  CounterRng rng = CounterRng::stream(seed, 7);
  Manifest m;
  m.base_dir = out_dir;
  const std::array<std::pair<const char*, int>, 3> splits = {{{"train", n_train}, {"val", n_val}, {"test", n_test}}};
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i) {
      const ToyScene scene = sample_toy_scene(rng);
      char name[64];
      std::snprintf(name, sizeof(name), "images/%s_%05d.ppm", split, i);
      write_ppm((fs::path(out_dir) / name).string(), render_toy_scene(scene));
      m.images.push_back(ManifestEntry{name, split, {toy_caption(scene)}});
    }
  }
  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace cptr
