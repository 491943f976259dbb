#include "cptr/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "cptr/decode.hpp"
#include "cptr/error.hpp"
#include "cptr/image.hpp"
#include "cptr/patch.hpp"

namespace cptr {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor xe_loss(const Tensor& logits, const std::vector<int>& targets, const std::vector<uint8_t>* pad_mask) {
  return cross_entropy_from_logits(logits, targets, pad_mask);
}

double lr_schedule(const TrainConfig& cfg, TrainPhase phase, int epoch) {
  double lr = phase == TrainPhase::XE ? cfg.xe_lr : cfg.scst_lr;
  const std::vector<int>& points = phase == TrainPhase::XE ? cfg.xe_decay_epochs : cfg.scst_decay_epochs;
  for (int p : points)
    if (epoch >= p) lr *= cfg.decay_factor;
  return lr;
}

void adam_step(ParamSetT<float>& params, const std::vector<Tensor>& grads, OptimizerState& state,
               const AdamSettings& s, double grad_clip) {
  if (grads.size() != params.items.size() || state.m.size() != params.items.size())
    throw ValueError("adam_step: parameter/gradient/state size mismatch");
  double clip_scale = 1.0;
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (const Tensor& g : grads) {
      const float* p = g.data();
      for (long long i = 0; i < g.size(); ++i) sq += static_cast<double>(p[i]) * p[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) clip_scale = grad_clip / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(s.beta1), b2 = static_cast<float>(s.beta2);
  const float one_m_b1 = 1.0f - b1, one_m_b2 = 1.0f - b2;
  const float eps = static_cast<float>(s.eps);
  const float step_size = static_cast<float>(s.lr / c1);
  const float v_corr = static_cast<float>(1.0 / c2);
  const float cs = static_cast<float>(clip_scale);
  for (size_t i = 0; i < params.items.size(); ++i) {
    float* p = params.items[i].second.mutable_data();
    const float* g = grads[i].data();
    float* m = state.m[i].mutable_data();
    float* v = state.v[i].mutable_data();
    const long long n = params.items[i].second.size();
    for (long long j = 0; j < n; ++j) {
      const float gj = g[j] * cs;
      if (!std::isfinite(gj))
        throw Error("non-finite gradient for parameter '" + params.items[i].first + "'");
      m[j] = b1 * m[j] + one_m_b1 * gj;
      v[j] = b2 * v[j] + one_m_b2 * gj * gj;
      p[j] -= step_size * m[j] / (std::sqrt(v[j] * v_corr) + eps);
    }
  }
}

ScstImageOutcome scst_image_step(const Model& model, const Tensor& patch_matrix, const RefSet& refs,
                                 const std::string& image_id, const RewardFn& reward, CounterRng& rng, int max_len,
                                 std::vector<Tensor>& grad_accum, double grad_weight) {
  // rollouts over the frozen model, eval mode; the greedy baseline carries no
  // gradient by construction
  Tensor pa = embed_patches(patch_matrix, model.params.at("patch_embed.w"), model.params.at("patch_embed.b"),
                            model.params.at("patch_embed.pos"));
  Tensor memory = encoder_forward(model.config, model.params, pa, false, nullptr);
  const std::vector<int> greedy = greedy_decode(model, memory, max_len);
  const SampleResult sample = sample_decode(model, memory, max_len, rng, 1.0);

  ScstImageOutcome out;
  try {
    out.greedy_reward = reward(greedy, refs);
    out.sample_reward = reward(sample.tokens, refs);
  } catch (const std::exception& e) {
    throw Error("reward failed for image '" + image_id + "': " + e.what());
  }
  out.advantage = out.sample_reward - out.greedy_reward;
  if (out.advantage == 0.0) return out; // baseline cancels; zero gradient

  Tape tape;
  ParamSetT<float> wp = model.params.watched(tape);
  Tensor pa_t = embed_patches(patch_matrix, wp.at("patch_embed.w"), wp.at("patch_embed.b"), wp.at("patch_embed.pos"));
  Tensor memory_t = encoder_forward(model.config, wp, pa_t, true, &rng);
  std::vector<int> input;
  input.reserve(sample.tokens.size());
  input.push_back(kBosId);
  input.insert(input.end(), sample.tokens.begin(), sample.tokens.end() - 1);
  Tensor logits = decoder_forward(model.config, wp, input, memory_t, true, &rng);
  // -A * sum_t log p(sampled_t) == A * summed cross entropy of the rollout
  Tensor nll = xe_loss(logits, sample.tokens);
  out.surrogate = out.advantage * static_cast<double>(nll.item());
  tape.backward(scale(nll, static_cast<float>(out.advantage * grad_weight)));
  for (size_t i = 0; i < wp.items.size(); ++i) grad_accum[i].add_in_place(tape.grad(wp.items[i].second));
  return out;
}

namespace {

struct SplitCache {
  std::vector<Tensor> patches;       // one patch matrix per image
  std::vector<RefSet> refs;          // tokenized captions per image
  std::vector<std::string> ids;      // resolved image paths
};

SplitCache load_split(const Manifest& manifest, const std::string& split, const ModelConfig& cfg) {
  SplitCache cache;
  for (const ManifestEntry* e : manifest.split(split)) {
    const std::string path = manifest.resolve(*e);
    const PatchSequence seq = image_to_patch_sequence(read_ppm(path), cfg);
    cache.patches.push_back(patch_matrix_tensor<float>(seq));
    RefSet refs;
    for (const std::string& c : e->captions) refs.push_back(tokenize(c));
    cache.refs.push_back(std::move(refs));
    cache.ids.push_back(path);
  }
  return cache;
}

struct TrainSample {
  size_t image = 0;          // index into the train cache
  std::vector<int> input;    // BOS + caption ids
  std::vector<int> targets;  // caption ids + EOS
};

class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, const Manifest& manifest, const Vocabulary& vocab,
          std::string out_dir)
      : mcfg_(mcfg), tcfg_(tcfg), manifest_(manifest), vocab_(vocab), out_dir_(std::move(out_dir)) {
    mcfg_.vocab_size = vocab_.size();
    mcfg_.validate();
    tcfg_.validate();
  }

  TrainOutcome run(const TrainOptions& opts) {
    std::error_code ec;
    fs::create_directories(out_dir_, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir_ + ": " + ec.message());

    train_ = load_split(manifest_, "train", mcfg_);
    if (train_.patches.empty()) throw ValueError("train split is empty");
    val_ = load_split(manifest_, "val", mcfg_);
    build_samples();

    TrainPhase start_phase = TrainPhase::XE;
    int start_epoch = 1;
    if (!opts.resume_from.empty()) {
      CheckpointExtras extras;
      Model loaded = load_checkpoint(opts.resume_from, &extras);
      if (!(loaded.config == mcfg_))
        throw ConfigError("resume checkpoint config does not match the requested configuration");
      model_ = std::move(loaded);
      opt_ = extras.opt ? std::move(*extras.opt) : OptimizerState::zeros_like(model_.params);
      if (extras.rng)
        train_rng_ = CounterRng(extras.rng->key, extras.rng->counter);
      else
        train_rng_ = CounterRng::stream(tcfg_.seed, 2);
      if (extras.progress) {
        start_phase = extras.progress->phase;
        start_epoch = extras.progress->epochs_done + 1;
      }
    } else {
      model_ = build_model<float>(mcfg_, tcfg_.seed);
      opt_ = OptimizerState::zeros_like(model_.params);
      train_rng_ = CounterRng::stream(tcfg_.seed, 2);
    }

    log_.open(fs::path(out_dir_) / "metrics.jsonl", std::ios::app);
    if (!log_) throw IoError("cannot open metric log in " + out_dir_);
    vocab_.save((fs::path(out_dir_) / "vocab.txt").string());

    grads_.clear();
    for (const auto& [_, t] : model_.params.items) grads_.push_back(Tensor::zeros(t.shape()));

    TrainOutcome outcome;
    if (opts.run_xe && start_phase == TrainPhase::XE) {
      for (int epoch = start_epoch; epoch <= tcfg_.xe_epochs; ++epoch)
        outcome.xe_epoch_losses.push_back(run_xe_epoch(epoch));
      start_phase = TrainPhase::SCST;
      start_epoch = 1;
    }
    if (opts.run_scst) {
      if (start_phase != TrainPhase::SCST) start_epoch = 1;
      CiderScorer scorer(train_.refs);
      for (int epoch = start_epoch; epoch <= tcfg_.scst_epochs; ++epoch)
        outcome.scst_epoch_losses.push_back(run_scst_epoch(epoch, scorer));
    }

    const std::string final_path = (fs::path(out_dir_) / "model_final.ckpt").string();
    save_checkpoint(final_path, model_, extras_snapshot(opts.run_scst ? TrainPhase::SCST : TrainPhase::XE,
                                                        opts.run_scst ? tcfg_.scst_epochs : tcfg_.xe_epochs));
    outcome.final_checkpoint = final_path;
    return outcome;
  }

 private:
  void build_samples() {
    const auto entries = manifest_.split("train");
    samples_.clear();
    for (size_t img = 0; img < entries.size(); ++img) {
      for (const std::string& cap : entries[img]->captions) {
        std::vector<int> ids = vocab_.encode(tokenize(cap));
        if (static_cast<int>(ids.size()) > mcfg_.max_caption_len - 1)
          ids.resize(static_cast<size_t>(mcfg_.max_caption_len - 1));
        TrainSample s;
        s.image = img;
        s.input.push_back(kBosId);
        s.input.insert(s.input.end(), ids.begin(), ids.end());
        s.targets = ids;
        s.targets.push_back(kEosId);
        samples_.push_back(std::move(s));
      }
    }
  }

  CheckpointExtras extras_snapshot(TrainPhase phase, int epochs_done) {
    CheckpointExtras ex;
    ex.opt = opt_;
    ex.rng = RngSnapshot{train_rng_.key(), train_rng_.counter()};
    ex.progress = TrainProgress{phase, epochs_done};
    return ex;
  }

  void zero_grads() {
    for (Tensor& g : grads_) std::fill(g.mutable_data(), g.mutable_data() + g.size(), 0.0f);
  }

  // forward + backward of one (image, caption) pair; gradient scaled by
  // 1 / (batch token count)
  double xe_sample_step(const TrainSample& s, float inv_tokens) {
    Tape tape;
    ParamSetT<float> wp = model_.params.watched(tape);
    Tensor pa = embed_patches(train_.patches[s.image], wp.at("patch_embed.w"), wp.at("patch_embed.b"),
                              wp.at("patch_embed.pos"));
    Tensor memory = encoder_forward(mcfg_, wp, pa, true, &train_rng_);
    Tensor logits = decoder_forward(mcfg_, wp, s.input, memory, true, &train_rng_);
    Tensor loss = xe_loss(logits, s.targets);
    tape.backward(scale(loss, inv_tokens));
    for (size_t i = 0; i < wp.items.size(); ++i) grads_[i].add_in_place(tape.grad(wp.items[i].second));
    return static_cast<double>(loss.item());
  }

  double run_xe_epoch(int epoch) {
    const double lr = lr_schedule(tcfg_, TrainPhase::XE, epoch);
    std::vector<size_t> order(samples_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, TrainPhase::XE, epoch);

    double epoch_loss = 0.0;
    long long epoch_tokens = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg_.batch_size));
      long long batch_tokens = 0;
      for (size_t k = start; k < end; ++k) batch_tokens += static_cast<long long>(samples_[order[k]].targets.size());
      zero_grads();
      double batch_loss = 0.0;
      for (size_t k = start; k < end; ++k)
        batch_loss += xe_sample_step(samples_[order[k]], 1.0f / static_cast<float>(batch_tokens));
      adam_step(model_.params, grads_, opt_, {lr, tcfg_.adam_beta1, tcfg_.adam_beta2, tcfg_.adam_eps},
                tcfg_.grad_clip);
      const double step_loss = batch_loss / static_cast<double>(batch_tokens);
      if (!std::isfinite(step_loss))
        throw Error("training diverged (non-finite loss) in xe epoch " + std::to_string(epoch) +
                    "; last epoch checkpoint retained in " + out_dir_);
      ++global_step_;
      log_step("xe", epoch, step_loss, lr);
      epoch_loss += batch_loss;
      epoch_tokens += batch_tokens;
    }
    const double mean_loss = epoch_loss / static_cast<double>(epoch_tokens);
    const auto [bleu4, cider_mean] = validate();
    log_epoch("xe", epoch, mean_loss, lr, bleu4, cider_mean);
    char name[64];
    std::snprintf(name, sizeof(name), "xe_epoch_%03d.ckpt", epoch);
    save_checkpoint((fs::path(out_dir_) / name).string(), model_, extras_snapshot(TrainPhase::XE, epoch));
    return mean_loss;
  }

  double run_scst_epoch(int epoch, const CiderScorer& scorer) {
    const double lr = lr_schedule(tcfg_, TrainPhase::SCST, epoch);
    std::vector<size_t> order(train_.patches.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, TrainPhase::SCST, epoch);

    RewardFn reward = [this, &scorer](const std::vector<int>& ids, const RefSet& refs) {
      std::vector<std::string> words;
      for (int id : ids)
        if (id != kPadId && id != kBosId && id != kEosId) words.push_back(vocab_.token(id));
      return scorer.score_one(words, refs);
    };

    double epoch_surrogate = 0.0;
    long long n_images = 0;
    const int max_len = mcfg_.max_caption_len - 1;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg_.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg_.batch_size));
      zero_grads();
      double batch_surrogate = 0.0;
      for (size_t k = start; k < end; ++k) {
        const size_t img = order[k];
        const ScstImageOutcome o =
            scst_image_step(model_, train_.patches[img], train_.refs[img], train_.ids[img], reward, train_rng_,
                            max_len, grads_, 1.0 / static_cast<double>(end - start));
        batch_surrogate += o.surrogate;
      }
      adam_step(model_.params, grads_, opt_, {lr, tcfg_.adam_beta1, tcfg_.adam_beta2, tcfg_.adam_eps},
                tcfg_.grad_clip);
      const double step_loss = batch_surrogate / static_cast<double>(end - start);
      if (!std::isfinite(step_loss))
        throw Error("training diverged (non-finite surrogate) in scst epoch " + std::to_string(epoch));
      ++global_step_;
      log_step("scst", epoch, step_loss, lr);
      epoch_surrogate += batch_surrogate;
      n_images += static_cast<long long>(end - start);
    }
    const double mean_loss = epoch_surrogate / static_cast<double>(n_images);
    const auto [bleu4, cider_mean] = validate();
    log_epoch("scst", epoch, mean_loss, lr, bleu4, cider_mean);
    char name[64];
    std::snprintf(name, sizeof(name), "scst_epoch_%03d.ckpt", epoch);
    save_checkpoint((fs::path(out_dir_) / name).string(), model_, extras_snapshot(TrainPhase::SCST, epoch));
    return mean_loss;
  }

  // greedy validation decode, scored against the val references
  std::pair<double, double> validate() {
    if (val_.patches.empty()) return {0.0, 0.0};
    std::vector<TokenSeq> cands;
    cands.reserve(val_.patches.size());
    const int max_len = mcfg_.max_caption_len - 1;
    for (const Tensor& patch : val_.patches) {
      Tensor pa = embed_patches(patch, model_.params.at("patch_embed.w"), model_.params.at("patch_embed.b"),
                                model_.params.at("patch_embed.pos"));
      Tensor memory = encoder_forward(mcfg_, model_.params, pa, false, nullptr);
      const std::vector<int> ids = greedy_decode(model_, memory, max_len);
      TokenSeq words;
      for (int id : ids)
        if (id != kPadId && id != kBosId && id != kEosId) words.push_back(vocab_.token(id));
      cands.push_back(std::move(words));
    }
    const BleuScores b = bleu(cands, val_.refs);
    const CiderScores c = cider(cands, val_.refs);
    return {b.bleu[3], c.mean};
  }

  void shuffle(std::vector<size_t>& order, TrainPhase phase, int epoch) {
    CounterRng rng = CounterRng::stream(tcfg_.seed, 0x100000u + static_cast<uint64_t>(epoch) * 2 +
                                                        (phase == TrainPhase::SCST ? 1 : 0));
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = rng.next_below(i);
      std::swap(order[i - 1], order[j]);
    }
  }

  void log_step(const char* phase, int epoch, double loss, double lr) {
    log_ << json{{"phase", phase}, {"epoch", epoch}, {"step", global_step_}, {"loss", loss}, {"lr", lr}}.dump()
         << '\n';
    log_.flush();
  }

  void log_epoch(const char* phase, int epoch, double loss, double lr, double bleu4, double cider_mean) {
    log_ << json{{"phase", phase}, {"epoch", epoch},       {"step", global_step_},
                 {"loss", loss},   {"lr", lr},             {"val_bleu4", bleu4},
                 {"val_cider", cider_mean}}
                .dump()
         << '\n';
    log_.flush();
  }

  ModelConfig mcfg_;
  TrainConfig tcfg_;
  const Manifest& manifest_;
  Vocabulary vocab_;
  std::string out_dir_;

  Model model_;
  OptimizerState opt_;
  CounterRng train_rng_;
  std::vector<Tensor> grads_;
  SplitCache train_, val_;
  std::vector<TrainSample> samples_;
  std::ofstream log_;
  long long global_step_ = 0;
};

}  // namespace

TrainOutcome run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Manifest& manifest,
                          const Vocabulary& vocab, const std::string& out_dir, const TrainOptions& opts) {
  Trainer trainer(model_cfg, train_cfg, manifest, vocab, out_dir);
  return trainer.run(opts);
}

EvalResult evaluate_split(const Model& model, const Vocabulary& vocab, const Manifest& manifest,
                          const std::string& split, const EvalOptions& opts) {
  const auto entries = manifest.split(split);
  if (entries.empty()) throw ValueError("split '" + split + "' is empty");
  if (vocab.size() != model.config.vocab_size)
    throw ConfigError("vocabulary size " + std::to_string(vocab.size()) + " does not match checkpoint vocab_size " +
                      std::to_string(model.config.vocab_size));

  std::vector<const ManifestEntry*> kept;
  EvalResult res;
  for (const ManifestEntry* e : entries) {
    const std::string path = manifest.resolve(*e);
    if (fs::exists(path)) {
      kept.push_back(e);
    } else {
      res.missing_images.push_back(path);
    }
  }
  if (!res.missing_images.empty() && !opts.allow_missing) {
    std::string msg = "missing images in split '" + split + "':";
    for (const std::string& p : res.missing_images) msg += "\n  " + p;
    throw IoError(msg);
  }
  if (kept.empty()) throw ValueError("split '" + split + "' has no readable images");

  const int max_len = opts.max_len > 0 ? opts.max_len : model.config.max_caption_len - 1;
  std::vector<TokenSeq> cands(kept.size());
  std::vector<RefSet> refs(kept.size());
  auto decode_range = [&](size_t begin, size_t stride) {
    for (size_t i = begin; i < kept.size(); i += stride) {
      const PatchSequence seq = image_to_patch_sequence(read_ppm(manifest.resolve(*kept[i])), model.config);
      Tensor patch = patch_matrix_tensor<float>(seq);
      Tensor pa = embed_patches(patch, model.params.at("patch_embed.w"), model.params.at("patch_embed.b"),
                                model.params.at("patch_embed.pos"));
      Tensor memory = encoder_forward(model.config, model.params, pa, false, nullptr);
      const BeamResult beam = beam_search(model, memory, opts.beam_size, max_len);
      TokenSeq words;
      for (int id : beam.best.tokens)
        if (id != kPadId && id != kBosId && id != kEosId) words.push_back(vocab.token(id));
      cands[i] = std::move(words);
      RefSet r;
      for (const std::string& c : kept[i]->captions) r.push_back(tokenize(c));
      refs[i] = std::move(r);
    }
  };
  const int n_threads = std::max(1, opts.n_threads);
  if (n_threads == 1) {
    decode_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(decode_range, static_cast<size_t>(t), n_threads);
    for (std::thread& t : pool) t.join();
  }

  const BleuScores b = bleu(cands, refs);
  const CiderScores c = cider(cands, refs);
  res.bleu = b.bleu;
  res.cider = c.mean;
  res.n_images = static_cast<int>(kept.size());
  res.captions.reserve(cands.size());
  for (const TokenSeq& t : cands) res.captions.push_back(detokenize(t));
  return res;
}

}  // namespace cptr
