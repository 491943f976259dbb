#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cptr {

// Architecture hyperparameters. Defaults follow the reference setup this
// engine targets: 12 encoder / 4 decoder layers, width 768, 12 heads,
// 384x384 input at patch size 16.
struct ModelConfig {
  int n_enc_layers = 12;
  int n_dec_layers = 4;
  int d_model = 768;
  int n_heads = 12;
  int d_ffn = 3072;
  int vocab_size = 10000;   // placeholder; training overwrites from the built vocabulary
  int max_caption_len = 20; // decoder input cap, BOS included
  double dropout_p = 0.1;
  bool attn_dropout = true; // also drop attention weights at dropout_p
  int patch_size = 16;
  int res_h = 384;
  int res_w = 384;

  int n_patches() const { return (res_h / patch_size) * (res_w / patch_size); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int d_head() const { return d_model / n_heads; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  // Small preset for desk-scale experiments: 64x64 images, P=8, d=64.
  static ModelConfig toy();
};

// Optimization hyperparameters. Defaults: cross-entropy for 9 epochs at
// 3e-5 halved for the last two, then self-critical for 4 epochs at 7.5e-6
// halved after two, Adam, batch 40.
struct TrainConfig {
  int xe_epochs = 9;
  double xe_lr = 3e-5;
  std::vector<int> xe_decay_epochs = {8}; // lr *= decay_factor from these epochs on (1-based)
  int scst_epochs = 4;
  double scst_lr = 7.5e-6;
  std::vector<int> scst_decay_epochs = {3};
  double decay_factor = 0.5;
  int batch_size = 40;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;   // global-norm clip; 0 disables
  uint64_t seed = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;

  static TrainConfig toy();
};

// JSON (de)serialization. parse_* update only the keys present, so a config
// file can override any subset of the built-in defaults.
std::string model_config_to_json(const ModelConfig& c);
std::string train_config_to_json(const TrainConfig& c);
void parse_model_config(const std::string& json_text, ModelConfig& c);
void parse_train_config(const std::string& json_text, TrainConfig& c);

// Loads a {"model": {...}, "train": {...}} config file on top of the given
// defaults. Either section may be absent.
void load_config_file(const std::string& path, ModelConfig& model, TrainConfig& train);

}  // namespace cptr
