#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

#include "cptr/checkpoint.hpp"
#include "cptr/manifest.hpp"
#include "cptr/metrics.hpp"
#include "cptr/toy.hpp"
#include "cptr/vocab.hpp"
#include "testutil.hpp"

using namespace cptr;
using namespace cptr::testutil;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cptr_dataio" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("vocabulary build on a one-caption corpus") {
  const Vocabulary v = Vocabulary::build({"a a b"}, 1);
  CHECK(v.size() == 6);
  CHECK(v.id("a") == 4);  // most frequent first
  CHECK(v.id("b") == 5);
  CHECK(v.id("zebra") == kUnkId);
  CHECK(v.token(kPadId) == "<pad>");
  CHECK(v.token(kBosId) == "<bos>");
  CHECK(v.token(kEosId) == "<eos>");

  const Vocabulary v2 = Vocabulary::build({"a a b"}, 2);
  CHECK(v2.size() == 5);
  CHECK(v2.id("b") == kUnkId);
  CHECK_THROWS_AS(Vocabulary::build({}, 1), ValueError);
}

TEST_CASE("vocabulary id assignment is frequency then lexicographic") {
  const Vocabulary v = Vocabulary::build({"pear pear apple apple mango"}, 1);
  CHECK(v.id("apple") == 4); // tie at 2 broken lexicographically
  CHECK(v.id("pear") == 5);
  CHECK(v.id("mango") == 6);
}

TEST_CASE("vocabulary save/load round trip and determinism") {
  const auto dir = fresh_dir("vocab");
  const std::vector<std::string> corpus = {"a red circle", "a blue square", "a red square"};
  const Vocabulary v1 = Vocabulary::build(corpus, 1);
  v1.save((dir / "vocab.txt").string());
  const Vocabulary v2 = Vocabulary::load((dir / "vocab.txt").string());
  CHECK(v2.size() == v1.size());
  for (int i = 0; i < v1.size(); ++i) CHECK(v1.token(i) == v2.token(i));
  const Vocabulary v3 = Vocabulary::build(corpus, 1);
  for (int i = 0; i < v1.size(); ++i) CHECK(v1.token(i) == v3.token(i));
  // line number = id - reserved offset
  std::ifstream in(dir / "vocab.txt");
  std::string first;
  std::getline(in, first);
  CHECK(first == v1.token(kNumReservedIds));
}

TEST_CASE("manifest serialize/parse round trip") {
  const auto dir = fresh_dir("manifest");
  Manifest m;
  m.images = {{"images/a.ppm", "train", {"a red circle in the top left"}},
              {"images/b.ppm", "val", {"one", "two"}},
              {"images/c.ppm", "test", {"three"}}};
  save_manifest((dir / "manifest.json").string(), m);
  const Manifest back = load_manifest((dir / "manifest.json").string());
  CHECK(back.images == m.images);
  CHECK(back.base_dir == dir.string());
  CHECK(back.split("train").size() == 1);
  CHECK(back.split("val").size() == 1);
  CHECK(back.resolve(back.images[0]) == (dir / "images/a.ppm").string());
}

TEST_CASE("manifest validation") {
  Manifest bad;
  bad.images = {{"x.ppm", "train", {}}};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("no captions"), ValueError);
  bad.images = {{"x.ppm", "dev", {"cap"}}};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("unknown split"), ValueError);
  CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.json"), IoError);
}

TEST_CASE("toy corpus generation is byte-identical for a seed") {
  const auto d1 = fresh_dir("toy1");
  const auto d2 = fresh_dir("toy2");
  const Manifest m1 = generate_toy_corpus(99, 12, 4, 4, d1.string());
  const Manifest m2 = generate_toy_corpus(99, 12, 4, 4, d2.string());
  CHECK(m1.images == m2.images);
  for (const ManifestEntry& e : m1.images) CHECK(slurp(d1 / e.path) == slurp(d2 / e.path));
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  const Manifest m3 = generate_toy_corpus(100, 12, 4, 4, fresh_dir("toy3").string());
  bool differs = false;
  for (size_t i = 0; i < m1.images.size(); ++i) differs = differs || m1.images[i].captions != m3.images[i].captions;
  CHECK(differs);
}

TEST_CASE("toy captions are regenerable from their scenes") {
  CounterRng rng = CounterRng::stream(5, 7);
  for (int i = 0; i < 200; ++i) {
    const ToyScene scene = sample_toy_scene(rng);
    REQUIRE(!scene.shapes.empty());
    const std::string cap = toy_caption(scene);
    CHECK(cap == toy_caption(scene));
    if (scene.shapes.size() == 2) {
      CHECK(scene.shapes[0].cell < scene.shapes[1].cell);
      // canonical order means only these relations appear
      CHECK((cap.find(" left of ") != std::string::npos || cap.find(" above ") != std::string::npos));
    }
  }
}

TEST_CASE("toy captions parse against the template grammar") {
  const std::regex grammar(
      "a (red|green|blue|yellow) (circle|square|triangle)"
      " (in the (top|middle|bottom) (left|center|right)"
      "|(left of|above) a (red|green|blue|yellow) (circle|square|triangle))");
  const Manifest m = generate_toy_corpus(7, 60, 10, 10, fresh_dir("toy_grammar").string());
  for (const ManifestEntry& e : m.images) {
    REQUIRE(e.captions.size() == 1);
    CHECK(std::regex_match(e.captions[0], grammar));
  }
}

TEST_CASE("toy scene space is large enough that held-out scenes exist") {
  CHECK(toy_scene_space_size() == 108 + 144LL * 36);
  CHECK(toy_scene_space_size() > 5000);
  const auto dir = fresh_dir("toy_unseen");
  const Manifest m = generate_toy_corpus(11, 400, 60, 60, dir.string());
  std::set<std::vector<char>> train_images;
  for (const ManifestEntry& e : m.images)
    if (e.split == "train") train_images.insert(slurp(dir / e.path));
  int unseen = 0;
  for (const ManifestEntry& e : m.images)
    if (e.split != "train" && !train_images.count(slurp(dir / e.path))) ++unseen;
  CHECK(unseen > 0);
}

TEST_CASE("toy vocabulary is exactly the template word set plus reserved ids") {
  const Manifest m = generate_toy_corpus(13, 2000, 1, 1, fresh_dir("toy_vocab").string());
  std::vector<std::string> caps;
  for (const ManifestEntry& e : m.images)
    if (e.split == "train") caps.push_back(e.captions[0]);
  const Vocabulary v = Vocabulary::build(caps, 1);
  const std::vector<std::string> words = toy_vocabulary_words();
  CHECK(v.size() == static_cast<int>(words.size()) + kNumReservedIds);
  for (const std::string& w : words) CHECK(v.id(w) >= kNumReservedIds);
}

TEST_CASE("toy renderer draws distinct shapes at the right cells") {
  ToyScene scene;
  scene.shapes = {{0, 0, 0}, {1, 2, 8}}; // red circle top-left, blue square bottom-right
  const RawImage img = render_toy_scene(scene);
  CHECK(img.at(10, 10, 0) == 255); // circle center
  CHECK(img.at(10, 10, 2) == 0);
  CHECK(img.at(53, 53, 2) == 255); // square center is blue
  CHECK(img.at(32, 32, 0) == 0);   // empty middle cell stays black
  CHECK_THROWS_AS(generate_toy_corpus(1, 0, 1, 1, "/tmp/x"), ValueError);
}

TEST_CASE("checkpoint round trip reproduces forward passes bit-exactly") {
  const auto dir = fresh_dir("ckpt");
  ModelConfig cfg = tiny_gradcheck_config();
  Model model = build_model<float>(cfg, 31);
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, model);
  const Model loaded = load_checkpoint(path);
  CHECK(loaded.config == cfg);

  CounterRng rng(17);
  const Tensor patch = random_tensor_f({cfg.n_patches(), cfg.patch_dim()}, rng);
  auto forward = [&](const Model& m) {
    Tensor pa = embed_patches(patch, m.params.at("patch_embed.w"), m.params.at("patch_embed.b"),
                              m.params.at("patch_embed.pos"));
    Tensor mem = encoder_forward(m.config, m.params, pa);
    return decoder_forward(m.config, m.params, {kBosId, 4, 5}, mem);
  };
  const Tensor a = forward(model), b = forward(loaded);
  REQUIRE(a.size() == b.size());
  for (long long i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("checkpoint file size matches the closed form") {
  const auto dir = fresh_dir("ckpt_size");
  const ModelConfig cfg = tiny_gradcheck_config();
  const Model model = build_model<float>(cfg, 1);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, model);
  CHECK(static_cast<long long>(fs::file_size(path)) == checkpoint_file_size(cfg));
}

TEST_CASE("corrupted or truncated checkpoints fail cleanly") {
  const auto dir = fresh_dir("ckpt_bad");
  const ModelConfig cfg = tiny_gradcheck_config();
  save_checkpoint((dir / "m.ckpt").string(), build_model<float>(cfg, 2));

  { // flip one magic byte
    auto bytes = slurp(dir / "m.ckpt");
    bytes[3] ^= 0x40;
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "bad.ckpt").string()), doctest::Contains("magic"), IoError);

  { // cut the file short
    auto bytes = slurp(dir / "m.ckpt");
    bytes.resize(bytes.size() / 2);
    std::ofstream out(dir / "short.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "short.ckpt").string()), doctest::Contains("truncated"), IoError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("checkpoint shape verification names the offending tensor") {
  const auto dir = fresh_dir("ckpt_shape");
  ModelConfig cfg = tiny_gradcheck_config();
  // params deliberately built for a different d_ffn than the config claims
  ModelConfig other = cfg;
  other.d_ffn = cfg.d_ffn * 2;
  Model mismatched;
  mismatched.config = cfg;
  mismatched.params = init_params<float>(other, 3);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, mismatched);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("ffn.w1"), IoError);
}

TEST_CASE("checkpoint extras round trip") {
  const auto dir = fresh_dir("ckpt_extras");
  const ModelConfig cfg = tiny_gradcheck_config();
  Model model = build_model<float>(cfg, 4);
  CheckpointExtras ex;
  ex.opt = OptimizerState::zeros_like(model.params);
  ex.opt->step = 42;
  ex.opt->m[0].mutable_data()[0] = 0.25f;
  ex.rng = RngSnapshot{123, 456};
  ex.progress = TrainProgress{TrainPhase::SCST, 3};
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, model, ex);

  CheckpointExtras back;
  (void)load_checkpoint(path, &back);
  REQUIRE(back.opt.has_value());
  CHECK(back.opt->step == 42);
  CHECK(back.opt->m[0].data()[0] == 0.25f);
  REQUIRE(back.rng.has_value());
  CHECK(back.rng->key == 123);
  CHECK(back.rng->counter == 456);
  REQUIRE(back.progress.has_value());
  CHECK(back.progress->phase == TrainPhase::SCST);
  CHECK(back.progress->epochs_done == 3);
}

TEST_CASE("attention dump round trip and lookup") {
  const auto dir = fresh_dir("attn");
  ModelConfig cfg = tiny_gradcheck_config();
  Model model = build_model<float>(cfg, 5);
  CounterRng rng(9);
  const Tensor patch = random_tensor_f({cfg.n_patches(), cfg.patch_dim()}, rng);
  Tensor pa = embed_patches(patch, model.params.at("patch_embed.w"), model.params.at("patch_embed.b"),
                            model.params.at("patch_embed.pos"));
  AttentionTrace trace;
  Tensor mem = encoder_forward(cfg, model.params, pa, false, nullptr, &trace);
  (void)decoder_forward(cfg, model.params, {kBosId, 4, 5}, mem, false, nullptr, &trace);

  const AttentionDump dump = dump_from_trace(trace, cfg, {"tok4", "tok5"});
  CHECK(dump.entries.size() == static_cast<size_t>(cfg.n_enc_layers * cfg.n_heads +
                                                   cfg.n_dec_layers * cfg.n_heads * 2));
  const std::string path = (dir / "maps.attn").string();
  save_attention_dump(path, dump);
  const AttentionDump back = load_attention_dump(path);
  CHECK(back.res_h == cfg.res_h);
  CHECK(back.patch_size == cfg.patch_size);
  CHECK(back.tokens == dump.tokens);
  REQUIRE(back.entries.size() == dump.entries.size());
  for (size_t i = 0; i < dump.entries.size(); ++i) {
    CHECK(back.entries[i].stack == dump.entries[i].stack);
    CHECK(back.entries[i].data == dump.entries[i].data);
  }
  const AttentionDump::Entry* e = back.find(AttentionDump::kEncoderSelf, 0, 1);
  REQUIRE(e != nullptr);
  CHECK(e->n_q == cfg.n_patches());
  CHECK(e->n_k == cfg.n_patches());
  CHECK(back.find(AttentionDump::kDecoderCross, 0, 0) != nullptr);
  CHECK(back.find(AttentionDump::kDecoderCross, 9, 0) == nullptr);
  // every dumped row sums to one
  for (const auto& entry : back.entries) {
    for (int q = 0; q < entry.n_q; ++q) {
      double s = 0.0;
      for (int k = 0; k < entry.n_k; ++k) s += entry.data[static_cast<size_t>(q) * entry.n_k + k];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}
