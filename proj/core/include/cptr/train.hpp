#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "cptr/checkpoint.hpp"
#include "cptr/config.hpp"
#include "cptr/manifest.hpp"
#include "cptr/metrics.hpp"
#include "cptr/model.hpp"
#include "cptr/vocab.hpp"

namespace cptr {

// Summed teacher-forced negative log likelihood over non-pad positions.
// `targets` is the decoder input shifted one step; mask byte 1 keeps a
// position.
Tensor xe_loss(const Tensor& logits, const std::vector<int>& targets,
               const std::vector<uint8_t>* pad_mask = nullptr);

// Phase base learning rate decayed by cfg.decay_factor at each configured
// epoch (1-based, cumulative).
double lr_schedule(const TrainConfig& cfg, TrainPhase phase, int epoch);

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update, in place. grad_clip > 0 rescales the global
// gradient norm. A non-finite gradient aborts, naming the parameter.
void adam_step(ParamSetT<float>& params, const std::vector<Tensor>& grads, OptimizerState& state,
               const AdamSettings& settings, double grad_clip = 0.0);

// Reward for a decoded candidate (token ids, EOS included if emitted) given
// its references; failures throw and are propagated with the offending image
// id attached.
using RewardFn = std::function<double(const std::vector<int>& candidate_ids, const RefSet& refs)>;

struct ScstImageOutcome {
  double sample_reward = 0.0;
  double greedy_reward = 0.0;
  double advantage = 0.0;
  double surrogate = 0.0; // -A * sum_t log p(sampled_t)
};

// One image's self-critical step: sampled rollout, gradient-free greedy
// baseline, advantage = r(sample) - r(greedy), surrogate gradient through the
// sampled log-probs only, scaled by grad_weight into grad_accum.
ScstImageOutcome scst_image_step(const Model& model, const Tensor& patch_matrix, const RefSet& refs,
                                 const std::string& image_id, const RewardFn& reward, CounterRng& rng, int max_len,
                                 std::vector<Tensor>& grad_accum, double grad_weight);

struct EvalOptions {
  int beam_size = 3;
  int max_len = 0; // 0 = config max
  int n_threads = 1;
  bool allow_missing = false;
};

struct EvalResult {
  std::array<double, 4> bleu{};
  double cider = 0.0;
  int n_images = 0;
  std::vector<std::string> captions;       // decoded, manifest order
  std::vector<std::string> missing_images; // skipped paths (allow_missing)
};

// Decodes every image of a split (beam search) and scores BLEU-1..4 and
// CIDEr-D against the split references. Decoding may run on several threads
// over the frozen model; results are ordered by manifest position either way.
EvalResult evaluate_split(const Model& model, const Vocabulary& vocab, const Manifest& manifest,
                          const std::string& split, const EvalOptions& opts = {});

struct TrainOptions {
  bool run_xe = true;
  bool run_scst = false;
  std::string resume_from; // checkpoint to continue from
};

struct TrainOutcome {
  std::string final_checkpoint;
  std::vector<double> xe_epoch_losses;   // mean loss per token, per completed epoch
  std::vector<double> scst_epoch_losses; // mean surrogate loss per epoch
};

// Full training driver: cross-entropy phase, then optional self-critical
// phase. Writes per-epoch checkpoints, vocab.txt, and metrics.jsonl records
// {phase, epoch, step, loss, lr} per step plus {.., val_bleu4, val_cider} per
// epoch into out_dir. Fully seeded; identical configs reproduce identical
// logs.
TrainOutcome run_training(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Manifest& manifest,
                          const Vocabulary& vocab, const std::string& out_dir, const TrainOptions& opts = {});

}  // namespace cptr
