#include "cptr/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cptr/error.hpp"

namespace cptr {

using nlohmann::json;

void ModelConfig::validate() const {
  if (n_enc_layers <= 0 || n_dec_layers <= 0) throw ConfigError("layer counts must be positive");
  if (d_model <= 0 || n_heads <= 0 || d_ffn <= 0) throw ConfigError("model dims must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for sinusoid positions");
  if (vocab_size < 4) throw ConfigError("vocab_size must cover the reserved ids (>= 4)");
  if (max_caption_len < 2) throw ConfigError("max_caption_len must be at least 2");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0, 1)");
  if (patch_size <= 0 || res_h <= 0 || res_w <= 0) throw ConfigError("patch/resolution must be positive");
  if (res_h % patch_size != 0 || res_w % patch_size != 0)
    throw ConfigError("patch size " + std::to_string(patch_size) + " must divide resolution " +
                      std::to_string(res_h) + "x" + std::to_string(res_w));
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ffn = 256;
  c.vocab_size = 32;
  c.max_caption_len = 20;
  c.dropout_p = 0.0;
  c.patch_size = 8;
  c.res_h = 64;
  c.res_w = 64;
  return c;
}

void TrainConfig::validate() const {
  if (xe_epochs < 0 || scst_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (xe_lr <= 0.0 || scst_lr <= 0.0) throw ConfigError("learning rates must be positive");
  if (decay_factor <= 0.0 || decay_factor > 1.0) throw ConfigError("decay_factor must be in (0, 1]");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
    throw ConfigError("adam betas must be in [0, 1)");
  if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.xe_epochs = 25;
  c.xe_lr = 3e-4;
  c.xe_decay_epochs = {16, 21};
  c.scst_epochs = 2;
  c.scst_lr = 1e-5;
  c.scst_decay_epochs = {};
  c.batch_size = 32;
  return c;
}

namespace {

json model_to_jobj(const ModelConfig& c) {
  return json{{"n_enc_layers", c.n_enc_layers},
              {"n_dec_layers", c.n_dec_layers},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ffn", c.d_ffn},
              {"vocab_size", c.vocab_size},
              {"max_caption_len", c.max_caption_len},
              {"dropout_p", c.dropout_p},
              {"attn_dropout", c.attn_dropout},
              {"patch_size", c.patch_size},
              {"res_h", c.res_h},
              {"res_w", c.res_w}};
}

json train_to_jobj(const TrainConfig& c) {
  return json{{"xe_epochs", c.xe_epochs},
              {"xe_lr", c.xe_lr},
              {"xe_decay_epochs", c.xe_decay_epochs},
              {"scst_epochs", c.scst_epochs},
              {"scst_lr", c.scst_lr},
              {"scst_decay_epochs", c.scst_decay_epochs},
              {"decay_factor", c.decay_factor},
              {"batch_size", c.batch_size},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"grad_clip", c.grad_clip},
              {"seed", c.seed}};
}

template <class T>
void take(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void model_from_jobj(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  take(j, "n_enc_layers", c.n_enc_layers);
  take(j, "n_dec_layers", c.n_dec_layers);
  take(j, "d_model", c.d_model);
  take(j, "n_heads", c.n_heads);
  take(j, "d_ffn", c.d_ffn);
  take(j, "vocab_size", c.vocab_size);
  take(j, "max_caption_len", c.max_caption_len);
  take(j, "dropout_p", c.dropout_p);
  take(j, "attn_dropout", c.attn_dropout);
  take(j, "patch_size", c.patch_size);
  take(j, "res_h", c.res_h);
  take(j, "res_w", c.res_w);
}

void train_from_jobj(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  take(j, "xe_epochs", c.xe_epochs);
  take(j, "xe_lr", c.xe_lr);
  take(j, "xe_decay_epochs", c.xe_decay_epochs);
  take(j, "scst_epochs", c.scst_epochs);
  take(j, "scst_lr", c.scst_lr);
  take(j, "scst_decay_epochs", c.scst_decay_epochs);
  take(j, "decay_factor", c.decay_factor);
  take(j, "batch_size", c.batch_size);
  take(j, "adam_beta1", c.adam_beta1);
  take(j, "adam_beta2", c.adam_beta2);
  take(j, "adam_eps", c.adam_eps);
  take(j, "grad_clip", c.grad_clip);
  take(j, "seed", c.seed);
}

json parse_or_throw(const std::string& text, const char* what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError(std::string("invalid JSON in ") + what);
  return j;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& c) { return model_to_jobj(c).dump(2); }
std::string train_config_to_json(const TrainConfig& c) { return train_to_jobj(c).dump(2); }

void parse_model_config(const std::string& text, ModelConfig& c) {
  model_from_jobj(parse_or_throw(text, "model config"), c);
}

void parse_train_config(const std::string& text, TrainConfig& c) {
  train_from_jobj(parse_or_throw(text, "train config"), c);
}

void load_config_file(const std::string& path, ModelConfig& model, TrainConfig& train) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j = parse_or_throw(ss.str(), path.c_str());
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object: " + path);
  if (j.contains("model")) model_from_jobj(j["model"], model);
  if (j.contains("train")) train_from_jobj(j["train"], train);
}

}  // namespace cptr
