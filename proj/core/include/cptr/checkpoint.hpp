#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cptr/model.hpp"

namespace cptr {

// Adam moments, aligned with the canonical parameter order.
struct OptimizerState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;

  static OptimizerState zeros_like(const ParamSetT<float>& params);
};

enum class TrainPhase : uint8_t { XE = 0, SCST = 1 };

struct TrainProgress {
  TrainPhase phase = TrainPhase::XE;
  int epochs_done = 0;
};

struct RngSnapshot {
  uint64_t key = 0;
  uint64_t counter = 0;
};

struct CheckpointExtras {
  std::optional<OptimizerState> opt;
  std::optional<RngSnapshot> rng;
  std::optional<TrainProgress> progress;
};

// Binary model checkpoint, little-endian, layout documented in
// docs/formats.md. Round trips are bit-exact: load(save(m)) produces
// identical forward passes.
void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtras& extras = {});
Model load_checkpoint(const std::string& path, CheckpointExtras* extras = nullptr);

// Exact file size of a checkpoint without optimizer/rng/progress extras;
// header plus 4 bytes per parameter.
long long checkpoint_file_size(const ModelConfig& config);

// Attention map dump for offline rendering.
struct AttentionDump {
  enum Stack : uint8_t { kEncoderSelf = 0, kDecoderSelf = 1, kDecoderCross = 2 };

  struct Entry {
    uint8_t stack = kEncoderSelf;
    int layer = 0;
    int head = 0;
    int n_q = 0;
    int n_k = 0;
    std::vector<float> data; // n_q * n_k, rows sum to 1
  };

  int res_h = 0;
  int res_w = 0;
  int patch_size = 0;
  std::vector<std::string> tokens; // caption tokens for the decoder stacks
  std::vector<Entry> entries;

  const Entry* find(uint8_t stack, int layer, int head) const;
};

AttentionDump dump_from_trace(const AttentionTrace& trace, const ModelConfig& config,
                              const std::vector<std::string>& caption_tokens);
void save_attention_dump(const std::string& path, const AttentionDump& dump);
AttentionDump load_attention_dump(const std::string& path);

}  // namespace cptr
