// cptr: convolution-free transformer image captioning, end to end.
//
// Subcommands: gen-toy-data, train, finetune-scst, caption, eval,
// dump-attention, render-attention. Every value resolves as
// CLI flag > config file > CPTR_SEED (seed only) > built-in default.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cptr/checkpoint.hpp"
#include "cptr/decode.hpp"
#include "cptr/error.hpp"
#include "cptr/image.hpp"
#include "cptr/metrics.hpp"
#include "cptr/model.hpp"
#include "cptr/patch.hpp"
#include "cptr/render.hpp"
#include "cptr/toy.hpp"
#include "cptr/train.hpp"
#include "cptr/vocab.hpp"

namespace fs = std::filesystem;
using namespace cptr;

namespace {

uint64_t env_seed_or(uint64_t fallback) {
  if (const char* s = std::getenv("CPTR_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end && *end == '\0') return v;
    throw ConfigError("CPTR_SEED is not an integer: " + std::string(s));
  }
  return fallback;
}

struct ConfigArgs {
  std::string config_path;
  std::string preset;
  uint64_t seed = 0;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file ({\"model\": {...}, \"train\": {...}})");
    cmd->add_option("--preset", preset, "configuration preset")->check(CLI::IsMember({"toy"}));
    cmd->add_option("--seed", seed, "random seed (overrides config file and CPTR_SEED)");
  }

  // flag > config file > CPTR_SEED > built-in
  void resolve(CLI::App* cmd, ModelConfig& model, TrainConfig& train) const {
    if (preset == "toy") {
      model = ModelConfig::toy();
      train = TrainConfig::toy();
    }
    train.seed = env_seed_or(train.seed);
    if (!config_path.empty()) load_config_file(config_path, model, train);
    if (cmd->count("--seed") > 0) train.seed = seed;
    model.validate();
    train.validate();
  }
};

Vocabulary load_vocab_for(const std::string& vocab_path, const std::string& ckpt_path) {
  std::string path = vocab_path;
  if (path.empty()) path = (fs::path(ckpt_path).parent_path() / "vocab.txt").string();
  return Vocabulary::load(path);
}

std::vector<std::string> caption_words(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::vector<std::string> words;
  for (int id : ids)
    if (id != kPadId && id != kBosId && id != kEosId) words.push_back(vocab.token(id));
  return words;
}

Tensor encode_image(const Model& model, const RawImage& img, AttentionTrace* trace = nullptr) {
  const PatchSequence seq = image_to_patch_sequence(img, model.config);
  Tensor patch = patch_matrix_tensor<float>(seq);
  Tensor pa = embed_patches(patch, model.params.at("patch_embed.w"), model.params.at("patch_embed.b"),
                            model.params.at("patch_embed.pos"));
  return encoder_forward(model.config, model.params, pa, false, nullptr, trace);
}

Vocabulary build_train_vocab(const Manifest& manifest, int min_count) {
  std::vector<std::string> caps;
  for (const ManifestEntry& e : manifest.images)
    if (e.split == "train")
      for (const std::string& c : e.captions) caps.push_back(c);
  return Vocabulary::build(caps, min_count);
}

int cmd_gen_toy_data(const std::string& out_dir, uint64_t seed, int n_train, int n_val, int n_test) {
  const Manifest m = generate_toy_corpus(seed, n_train, n_val, n_test, out_dir);
  std::cout << "wrote " << m.images.size() << " images and manifest.json under " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& out_dir, const ModelConfig& mcfg,
              const TrainConfig& tcfg, int min_count, bool with_scst, const std::string& resume) {
  const Manifest manifest = load_manifest(manifest_path);
  const Vocabulary vocab = build_train_vocab(manifest, min_count);
  TrainOptions opts;
  opts.run_xe = true;
  opts.run_scst = with_scst;
  opts.resume_from = resume;
  const TrainOutcome out = run_training(mcfg, tcfg, manifest, vocab, out_dir, opts);
  std::cout << "final checkpoint: " << out.final_checkpoint << "\n";
  return 0;
}

int cmd_finetune_scst(const std::string& ckpt, const std::string& manifest_path, const std::string& out_dir,
                      const std::string& vocab_path, TrainConfig tcfg) {
  const Model model = load_checkpoint(ckpt);
  const Manifest manifest = load_manifest(manifest_path);
  const Vocabulary vocab = load_vocab_for(vocab_path, ckpt);
  TrainOptions opts;
  opts.run_xe = false;
  opts.run_scst = true;
  opts.resume_from = ckpt;
  const TrainOutcome out = run_training(model.config, tcfg, manifest, vocab, out_dir, opts);
  std::cout << "final checkpoint: " << out.final_checkpoint << "\n";
  return 0;
}

void write_caption_dump(const Model& model, const Vocabulary& vocab, const RawImage& img,
                        const std::vector<int>& ids, const std::string& dump_path) {
  AttentionTrace trace;
  const Tensor memory = encode_image(model, img, &trace);
  if (!ids.empty()) {
    std::vector<int> input{kBosId};
    input.insert(input.end(), ids.begin(), ids.end() - 1);
    (void)decoder_forward(model.config, model.params, input, memory, false, nullptr, &trace);
  }
  std::vector<std::string> labels;
  for (int id : ids) labels.push_back(vocab.token(id));
  save_attention_dump(dump_path, dump_from_trace(trace, model.config, labels));
}

int cmd_caption(const std::string& ckpt, const std::string& image_path, const std::string& vocab_path, int beam,
                int max_len, const std::string& dump_path) {
  const Model model = load_checkpoint(ckpt);
  const Vocabulary vocab = load_vocab_for(vocab_path, ckpt);
  if (vocab.size() != model.config.vocab_size)
    throw ConfigError("vocabulary size " + std::to_string(vocab.size()) + " does not match checkpoint vocab_size " +
                      std::to_string(model.config.vocab_size));
  const RawImage img = read_ppm(image_path);
  const Tensor memory = encode_image(model, img);
  const int limit = max_len > 0 ? max_len : model.config.max_caption_len - 1;
  const BeamResult beam_out = beam_search(model, memory, beam, limit);
  std::cout << detokenize(caption_words(vocab, beam_out.best.tokens)) << "\n";
  if (!dump_path.empty()) write_caption_dump(model, vocab, img, beam_out.best.tokens, dump_path);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& manifest_path, const std::string& split,
             const std::string& vocab_path, int beam, int threads, bool allow_missing, const std::string& out_path) {
  const Model model = load_checkpoint(ckpt);
  const Vocabulary vocab = load_vocab_for(vocab_path, ckpt);
  const Manifest manifest = load_manifest(manifest_path);
  EvalOptions opts;
  opts.beam_size = beam;
  opts.n_threads = threads;
  opts.allow_missing = allow_missing;
  const EvalResult r = evaluate_split(model, vocab, manifest, split, opts);
  for (const std::string& m : r.missing_images) std::cerr << "missing image skipped: " << m << "\n";
  const nlohmann::json j{{"bleu1", r.bleu[0]}, {"bleu2", r.bleu[1]}, {"bleu3", r.bleu[2]},
                         {"bleu4", r.bleu[3]}, {"cider", r.cider},   {"n_images", r.n_images}};
  const std::string text = j.dump(2);
  std::cout << text << "\n";
  if (!out_path.empty()) {
    const fs::path target(out_path);
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
      std::ofstream f(tmp, std::ios::trunc);
      if (!f) throw IoError("cannot write metrics file: " + out_path);
      f << text << "\n";
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot finalize metrics file " + out_path + ": " + ec.message());
  }
  return 0;
}

int cmd_render_attention(const std::string& dump_path, const std::string& image_path, const std::string& stack,
                         int layer, int head, int query, const std::string& out_path) {
  const AttentionDump dump = load_attention_dump(dump_path);
  const RawImage img = read_ppm(image_path);
  if (img.height != dump.res_h || img.width != dump.res_w)
    throw ValueError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " but the dump was recorded at " + std::to_string(dump.res_h) + "x" +
                     std::to_string(dump.res_w));
  uint8_t stack_id;
  if (stack == "encoder-self")
    stack_id = AttentionDump::kEncoderSelf;
  else if (stack == "decoder-self")
    stack_id = AttentionDump::kDecoderSelf;
  else if (stack == "decoder-cross")
    stack_id = AttentionDump::kDecoderCross;
  else
    throw ValueError("unknown stack '" + stack + "'");
  const AttentionDump::Entry* entry = dump.find(stack_id, layer, head);
  if (!entry)
    throw ValueError("no attention map for stack " + stack + " layer " + std::to_string(layer) + " head " +
                     std::to_string(head) + " in " + dump_path);
  if (query < 0 || query >= entry->n_q)
    throw ValueError("query " + std::to_string(query) + " out of range [0, " + std::to_string(entry->n_q) + ")");
  const std::vector<float> row(entry->data.begin() + static_cast<std::ptrdiff_t>(query) * entry->n_k,
                               entry->data.begin() + static_cast<std::ptrdiff_t>(query + 1) * entry->n_k);
  RawImage out;
  if (stack_id == AttentionDump::kDecoderSelf) {
    out = render_token_band_overlay(img, row);
  } else {
    const int grid_h = dump.res_h / dump.patch_size;
    const int grid_w = dump.res_w / dump.patch_size;
    if (entry->n_k != grid_h * grid_w)
      throw ValueError("attention row has " + std::to_string(entry->n_k) + " keys, patch grid needs " +
                       std::to_string(grid_h * grid_w));
    out = render_attention_overlay(img, row, grid_h, grid_w,
                                   stack_id == AttentionDump::kEncoderSelf ? query : -1);
  }
  write_ppm(out_path, out);
  std::cout << "wrote overlay " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"convolution-free transformer image captioning"};
  app.require_subcommand(1);

  // gen-toy-data
  auto* gen = app.add_subcommand("gen-toy-data", "generate the synthetic shape-caption corpus");
  std::string gen_out;
  int gen_train = 2000, gen_val = 200, gen_test = 200;
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--train", gen_train, "train images");
  gen->add_option("--val", gen_val, "val images");
  gen->add_option("--test", gen_test, "test images");
  gen->add_option("--seed", gen_seed, "corpus seed (overrides CPTR_SEED)");

  // train
  auto* train = app.add_subcommand("train", "cross-entropy training (optionally followed by self-critical)");
  std::string train_manifest, train_out, train_resume;
  int train_min_count = 1;
  bool train_with_scst = false;
  ConfigArgs train_cfg_args;
  train->add_option("--manifest", train_manifest, "dataset manifest.json")->required();
  train->add_option("--out", train_out, "run directory for checkpoints and logs")->required();
  train->add_option("--min-count", train_min_count, "vocabulary frequency threshold");
  train->add_flag("--with-scst", train_with_scst, "run the self-critical phase after cross entropy");
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train_cfg_args.attach(train);

  // finetune-scst
  auto* scst = app.add_subcommand("finetune-scst", "self-critical fine-tuning from a checkpoint");
  std::string scst_ckpt, scst_manifest, scst_out, scst_vocab;
  ConfigArgs scst_cfg_args;
  scst->add_option("--ckpt", scst_ckpt, "starting checkpoint")->required();
  scst->add_option("--manifest", scst_manifest, "dataset manifest.json")->required();
  scst->add_option("--out", scst_out, "run directory")->required();
  scst->add_option("--vocab", scst_vocab, "vocab.txt (default: next to the checkpoint)");
  scst_cfg_args.attach(scst);

  // caption
  auto* cap = app.add_subcommand("caption", "caption one image");
  std::string cap_ckpt, cap_image, cap_vocab, cap_dump;
  int cap_beam = 3, cap_max_len = 0;
  cap->add_option("--ckpt", cap_ckpt, "model checkpoint")->required();
  cap->add_option("--image", cap_image, "input image (binary P6 PPM)")->required();
  cap->add_option("--vocab", cap_vocab, "vocab.txt (default: next to the checkpoint)");
  cap->add_option("--beam", cap_beam, "beam size");
  cap->add_option("--max-len", cap_max_len, "maximum generated tokens (default: model cap)");
  cap->add_option("--dump-attention", cap_dump, "write all attention maps to this file");

  // eval
  auto* ev = app.add_subcommand("eval", "decode a split and score BLEU-1..4 and CIDEr-D");
  std::string ev_ckpt, ev_manifest, ev_vocab, ev_out;
  std::string ev_split = "test";
  int ev_beam = 3, ev_threads = 1;
  bool ev_allow_missing = false;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "dataset manifest.json")->required();
  ev->add_option("--split", ev_split, "split to evaluate");
  ev->add_option("--vocab", ev_vocab, "vocab.txt (default: next to the checkpoint)");
  ev->add_option("--beam", ev_beam, "beam size");
  ev->add_option("--threads", ev_threads, "decoding threads");
  ev->add_flag("--allow-missing", ev_allow_missing, "skip missing image files instead of failing");
  ev->add_option("--out", ev_out, "also write the metrics JSON here");

  // dump-attention
  auto* dump = app.add_subcommand("dump-attention", "caption an image and dump every attention map");
  std::string dump_ckpt, dump_image, dump_vocab, dump_out;
  int dump_beam = 3;
  dump->add_option("--ckpt", dump_ckpt, "model checkpoint")->required();
  dump->add_option("--image", dump_image, "input image")->required();
  dump->add_option("--out", dump_out, "output .attn file")->required();
  dump->add_option("--vocab", dump_vocab, "vocab.txt (default: next to the checkpoint)");
  dump->add_option("--beam", dump_beam, "beam size");

  // render-attention
  auto* render = app.add_subcommand("render-attention", "render one attention map as a heat overlay");
  std::string r_dump, r_image, r_out;
  std::string r_stack = "encoder-self";
  int r_layer = 0, r_head = 0, r_query = 0;
  render->add_option("--dump", r_dump, "attention dump file")->required();
  render->add_option("--image", r_image, "image the dump was computed on")->required();
  render->add_option("--out", r_out, "output overlay (P6 PPM)")->required();
  render->add_option("--stack", r_stack, "encoder-self | decoder-self | decoder-cross");
  render->add_option("--layer", r_layer, "layer index");
  render->add_option("--head", r_head, "head index");
  render->add_option("--query", r_query, "query index (patch or token position)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const uint64_t seed = gen->count("--seed") ? gen_seed : env_seed_or(1);
      return cmd_gen_toy_data(gen_out, seed, gen_train, gen_val, gen_test);
    }
    if (train->parsed()) {
      ModelConfig mcfg;
      TrainConfig tcfg;
      train_cfg_args.resolve(train, mcfg, tcfg);
      return cmd_train(train_manifest, train_out, mcfg, tcfg, train_min_count, train_with_scst, train_resume);
    }
    if (scst->parsed()) {
      ModelConfig mcfg;
      TrainConfig tcfg;
      scst_cfg_args.resolve(scst, mcfg, tcfg);
      return cmd_finetune_scst(scst_ckpt, scst_manifest, scst_out, scst_vocab, tcfg);
    }
    if (cap->parsed()) return cmd_caption(cap_ckpt, cap_image, cap_vocab, cap_beam, cap_max_len, cap_dump);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_manifest, ev_split, ev_vocab, ev_beam, ev_threads, ev_allow_missing, ev_out);
    if (dump->parsed()) return cmd_caption(dump_ckpt, dump_image, dump_vocab, dump_beam, 0, dump_out);
    if (render->parsed()) return cmd_render_attention(r_dump, r_image, r_stack, r_layer, r_head, r_query, r_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
