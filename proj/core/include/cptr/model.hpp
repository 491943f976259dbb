#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cptr/config.hpp"
#include "cptr/ops.hpp"
#include "cptr/rng.hpp"
#include "cptr/tensor.hpp"

namespace cptr {

inline constexpr double kLayerNormEps = 1e-5;
// Additive pre-softmax constant for masked positions. Large enough to
// underflow to exactly zero after max-subtracted softmax.
inline constexpr double kMaskedLogit = -1e9;

// Reserved token ids shared across the vocabulary, decoder, and decoding.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

// Boolean attention mask; keep[q * cols + k] == 1 means query q may attend
// to key k.
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> keep;

  static BoolMask causal(int t) {
    BoolMask m;
    m.rows = m.cols = t;
    m.keep.assign(static_cast<size_t>(t) * t, 0);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j <= i; ++j) m.keep[static_cast<size_t>(i) * t + j] = 1;
    return m;
  }
};

// Named parameter collection. Order is fixed by param_shapes() and shared by
// initialization, checkpoints, and the optimizer.
template <class S>
struct ParamSetT {
  std::vector<std::pair<std::string, TensorT<S>>> items;
  std::unordered_map<std::string, size_t> index;

  void add(std::string name, TensorT<S> t) {
    if (index.count(name)) throw ConfigError("duplicate parameter name: " + name);
    index.emplace(name, items.size());
    items.emplace_back(std::move(name), std::move(t));
  }

  const TensorT<S>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return items[it->second].second;
  }

  TensorT<S>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return items[it->second].second;
  }

  size_t size() const { return items.size(); }

  long long total_size() const {
    long long n = 0;
    for (const auto& [_, t] : items) n += t.size();
    return n;
  }

  // Copy of the set with every tensor registered as a leaf on `tape`.
  ParamSetT watched(TapeT<S>& tape) const {
    ParamSetT out;
    for (const auto& [name, t] : items) out.add(name, tape.watch(t));
    return out;
  }

  template <class T>
  ParamSetT<T> cast() const {
    ParamSetT<T> out;
    for (const auto& [name, t] : items) out.add(name, t.template cast<T>());
    return out;
  }
};

// Canonical (name, shape) list; every tensor shape is a pure function of the
// config.
inline std::vector<std::pair<std::string, std::vector<int>>> param_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  const int d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  out.emplace_back("patch_embed.w", std::vector<int>{c.patch_dim(), d});
  out.emplace_back("patch_embed.b", std::vector<int>{d});
  out.emplace_back("patch_embed.pos", std::vector<int>{c.n_patches(), d});
  for (int i = 0; i < c.n_enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    for (const char* w : {"self.wq", "self.wk", "self.wv", "self.wo"})
      out.emplace_back(p + w, std::vector<int>{d, d});
    out.emplace_back(p + "ln1.g", std::vector<int>{d});
    out.emplace_back(p + "ln1.b", std::vector<int>{d});
    out.emplace_back(p + "ffn.w1", std::vector<int>{d, f});
    out.emplace_back(p + "ffn.b1", std::vector<int>{f});
    out.emplace_back(p + "ffn.w2", std::vector<int>{f, d});
    out.emplace_back(p + "ffn.b2", std::vector<int>{d});
    out.emplace_back(p + "ln2.g", std::vector<int>{d});
    out.emplace_back(p + "ln2.b", std::vector<int>{d});
  }
  out.emplace_back("word_embed.w", std::vector<int>{v, d});
  for (int i = 0; i < c.n_dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    for (const char* w : {"self.wq", "self.wk", "self.wv", "self.wo"})
      out.emplace_back(p + w, std::vector<int>{d, d});
    out.emplace_back(p + "ln1.g", std::vector<int>{d});
    out.emplace_back(p + "ln1.b", std::vector<int>{d});
    for (const char* w : {"cross.wq", "cross.wk", "cross.wv", "cross.wo"})
      out.emplace_back(p + w, std::vector<int>{d, d});
    out.emplace_back(p + "ln2.g", std::vector<int>{d});
    out.emplace_back(p + "ln2.b", std::vector<int>{d});
    out.emplace_back(p + "ffn.w1", std::vector<int>{d, f});
    out.emplace_back(p + "ffn.b1", std::vector<int>{f});
    out.emplace_back(p + "ffn.w2", std::vector<int>{f, d});
    out.emplace_back(p + "ffn.b2", std::vector<int>{d});
    out.emplace_back(p + "ln3.g", std::vector<int>{d});
    out.emplace_back(p + "ln3.b", std::vector<int>{d});
  }
  out.emplace_back("out_proj.w", std::vector<int>{d, v});
  out.emplace_back("out_proj.b", std::vector<int>{v});
  return out;
}

inline long long closed_form_param_count(const ModelConfig& c) {
  const long long d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  const long long pd = c.patch_dim(), n = c.n_patches();
  const long long enc_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d;
  const long long dec_layer = 8 * d * d + (d * f + f) + (f * d + d) + 6 * d;
  return pd * d + d + n * d + c.n_enc_layers * enc_layer + v * d + c.n_dec_layers * dec_layer + d * v + v;
}

// Truncated normal (std 0.02, cut at 2 sigma) for weights and embeddings,
// zeros for biases, ones for layernorm gains. Consumes the init stream in
// canonical parameter order, so a seed fully determines the model.
template <class S>
ParamSetT<S> init_params(const ModelConfig& c, uint64_t seed) {
  c.validate();
  CounterRng rng = CounterRng::stream(seed, 1);
  ParamSetT<S> params;
  for (const auto& [name, shape] : param_shapes(c)) {
    TensorT<S> t(shape);
    S* p = t.mutable_data();
    const long long n = t.size();
    const size_t dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    const bool is_gain = leaf == "g";
    const bool is_bias = leaf == "b" || leaf == "b1" || leaf == "b2";
    if (is_gain) {
      for (long long i = 0; i < n; ++i) p[i] = S(1);
    } else if (is_bias) {
      // already zero
    } else {
      for (long long i = 0; i < n; ++i) p[i] = static_cast<S>(rng.next_trunc_normal(0.02));
    }
    params.add(name, std::move(t));
  }
  return params;
}

template <class S>
struct ModelT {
  ModelConfig config;
  ParamSetT<S> params;
};
using Model = ModelT<float>;

template <class S>
ModelT<S> build_model(const ModelConfig& c, uint64_t seed) {
  return ModelT<S>{c, init_params<S>(c, seed)};
}

// Per-stack, per-layer, per-head attention weights captured during a forward
// pass. Stored detached; rows always sum to one.
template <class S>
struct AttentionTraceT {
  std::vector<std::vector<TensorT<S>>> encoder_self;  // [layer][head], N x N
  std::vector<std::vector<TensorT<S>>> decoder_self;  // [layer][head], T x T
  std::vector<std::vector<TensorT<S>>> decoder_cross; // [layer][head], T x N
};
using AttentionTrace = AttentionTraceT<float>;

template <class S>
struct AttentionResult {
  TensorT<S> output;
  TensorT<S> weights; // pre-dropout softmax weights, returned for tracing
};

// Softmax(Q K^T / sqrt(d_k)) V. The optional boolean mask pins masked logits
// at kMaskedLogit before the softmax; a row with no attendable key is an
// error.
template <class S>
AttentionResult<S> scaled_dot_product_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                                                const BoolMask* mask = nullptr, double dropout_p = 0.0,
                                                bool training = false, CounterRng* rng = nullptr) {
  if (q.dim(1) != k.dim(1))
    throw ShapeError("attention d_k mismatch: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  if (k.dim(0) != v.dim(0))
    throw ShapeError("attention key/value count mismatch: " + shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  const int nq = q.dim(0), nk = k.dim(0);
  TensorT<S> scores = scale(matmul(q, transpose(k)), static_cast<S>(1.0 / std::sqrt(static_cast<double>(q.dim(1)))));
  if (mask) {
    if (mask->rows != nq || mask->cols != nk)
      throw ShapeError("attention mask must be " + std::to_string(nq) + "x" + std::to_string(nk));
    TensorT<S> additive({nq, nk});
    S* pa = additive.mutable_data();
    for (int i = 0; i < nq; ++i) {
      bool any = false;
      for (int j = 0; j < nk; ++j) {
        const bool keep = mask->keep[static_cast<size_t>(i) * nk + j] != 0;
        any = any || keep;
        pa[static_cast<size_t>(i) * nk + j] = keep ? S(0) : static_cast<S>(kMaskedLogit);
      }
      if (!any) throw ValueError("attention query " + std::to_string(i) + " has every key masked");
    }
    scores = add(scores, additive);
  }
  TensorT<S> weights = softmax(scores, 1);
  TensorT<S> mixing = weights;
  if (training && dropout_p > 0.0) {
    if (!rng) throw ValueError("attention dropout requires an rng in training mode");
    mixing = dropout(weights, dropout_p, true, *rng);
  }
  return {matmul(mixing, v), weights.detached()};
}

template <class S>
struct MhaResult {
  TensorT<S> output;
  std::vector<TensorT<S>> head_weights; // one (queries x keys) matrix per head
};

// Eq-style multi-head attention: per-head scaled dot-product attention over
// projected subspaces, concatenated and mixed by W^O.
template <class S>
MhaResult<S> multi_head_attention(const TensorT<S>& x_q, const TensorT<S>& x_kv, const TensorT<S>& wq,
                                  const TensorT<S>& wk, const TensorT<S>& wv, const TensorT<S>& wo, int n_heads,
                                  const BoolMask* mask = nullptr, double attn_dropout_p = 0.0,
                                  bool training = false, CounterRng* rng = nullptr) {
  TensorT<S> q = matmul(x_q, wq);
  TensorT<S> k = matmul(x_kv, wk);
  TensorT<S> v = matmul(x_kv, wv);
  std::vector<TensorT<S>> qh = split_heads(q, n_heads);
  std::vector<TensorT<S>> kh = split_heads(k, n_heads);
  std::vector<TensorT<S>> vh = split_heads(v, n_heads);
  MhaResult<S> res;
  std::vector<TensorT<S>> outs;
  outs.reserve(static_cast<size_t>(n_heads));
  res.head_weights.reserve(static_cast<size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    AttentionResult<S> a = scaled_dot_product_attention(qh[static_cast<size_t>(h)], kh[static_cast<size_t>(h)],
                                                        vh[static_cast<size_t>(h)], mask, attn_dropout_p, training, rng);
    outs.push_back(std::move(a.output));
    res.head_weights.push_back(std::move(a.weights));
  }
  res.output = matmul(merge_heads(outs), wo);
  return res;
}

// FC2(Dropout(GELU(FC1(x)))).
template <class S>
TensorT<S> ffn_forward(const TensorT<S>& x, const TensorT<S>& w1, const TensorT<S>& b1, const TensorT<S>& w2,
                       const TensorT<S>& b2, double dropout_p = 0.0, bool training = false,
                       CounterRng* rng = nullptr) {
  TensorT<S> h = gelu(linear(x, w1, b1));
  if (training && dropout_p > 0.0) {
    if (!rng) throw ValueError("ffn dropout requires an rng in training mode");
    h = dropout(h, dropout_p, true, *rng);
  }
  return linear(h, w2, b2);
}

// Post-norm sublayer connection: LayerNorm(x + f(x)).
template <class S, class F>
TensorT<S> sublayer(const TensorT<S>& x, F&& f, const TensorT<S>& gain, const TensorT<S>& bias) {
  TensorT<S> fx = f(x);
  if (fx.shape() != x.shape())
    throw ShapeError("sublayer function changed shape " + shape_str(x.shape()) + " -> " + shape_str(fx.shape()));
  return layer_norm(add(x, fx), gain, bias, static_cast<S>(kLayerNormEps));
}

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
template <class S>
TensorT<S> sinusoid_positions(int max_len, int d_model) {
  if (max_len <= 0) throw ValueError("sinusoid_positions needs max_len >= 1");
  if (d_model <= 0 || d_model % 2 != 0)
    throw ValueError("sinusoid_positions needs even d_model, got " + std::to_string(d_model));
  TensorT<S> out({max_len, d_model});
  S* p = out.mutable_data();
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const double rate = std::pow(10000.0, 2.0 * i / d_model);
      p[static_cast<size_t>(pos) * d_model + 2 * i] = static_cast<S>(std::sin(pos / rate));
      p[static_cast<size_t>(pos) * d_model + 2 * i + 1] = static_cast<S>(std::cos(pos / rate));
    }
  }
  return out;
}

namespace detail {
template <class S>
std::vector<TensorT<S>> detach_all(const std::vector<TensorT<S>>& ts) {
  std::vector<TensorT<S>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(t.detached());
  return out;
}
}  // namespace detail

// N_e stacked layers of (self-attention sublayer; FFN sublayer) over the
// embedded patch sequence.
template <class S>
TensorT<S> encoder_forward(const ModelConfig& cfg, const ParamSetT<S>& p, const TensorT<S>& patch_embedded,
                           bool training = false, CounterRng* rng = nullptr, AttentionTraceT<S>* trace = nullptr) {
  if (patch_embedded.rank() != 2 || patch_embedded.dim(0) != cfg.n_patches() || patch_embedded.dim(1) != cfg.d_model)
    throw ShapeError("encoder input must be " + std::to_string(cfg.n_patches()) + "x" + std::to_string(cfg.d_model) +
                     ", got " + shape_str(patch_embedded.shape()));
  const double adp = cfg.attn_dropout ? cfg.dropout_p : 0.0;
  TensorT<S> x = patch_embedded;
  if (trace) trace->encoder_self.assign(static_cast<size_t>(cfg.n_enc_layers), {});
  for (int layer = 0; layer < cfg.n_enc_layers; ++layer) {
    const std::string pre = "enc." + std::to_string(layer) + ".";
    x = sublayer(
        x,
        [&](const TensorT<S>& in) {
          MhaResult<S> a = multi_head_attention(in, in, p.at(pre + "self.wq"), p.at(pre + "self.wk"),
                                                p.at(pre + "self.wv"), p.at(pre + "self.wo"), cfg.n_heads, nullptr,
                                                adp, training, rng);
          if (trace) trace->encoder_self[static_cast<size_t>(layer)] = detail::detach_all(a.head_weights);
          return a.output;
        },
        p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
    x = sublayer(
        x,
        [&](const TensorT<S>& in) {
          return ffn_forward(in, p.at(pre + "ffn.w1"), p.at(pre + "ffn.b1"), p.at(pre + "ffn.w2"),
                             p.at(pre + "ffn.b2"), cfg.dropout_p, training, rng);
        },
        p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
  }
  return x;
}

// N_d stacked layers of (masked self-attention, cross attention over the
// encoder memory, FFN), then the vocabulary projection. `tokens` is the
// decoder input sequence, BOS first. Returns T x vocab logits.
template <class S>
TensorT<S> decoder_forward(const ModelConfig& cfg, const ParamSetT<S>& p, const std::vector<int>& tokens,
                           const TensorT<S>& memory, bool training = false, CounterRng* rng = nullptr,
                           AttentionTraceT<S>* trace = nullptr) {
  if (tokens.empty()) throw ValueError("decoder needs at least one input token");
  const int t_len = static_cast<int>(tokens.size());
  if (t_len > cfg.max_caption_len)
    throw ValueError("decoder input length " + std::to_string(t_len) + " exceeds position table of " +
                     std::to_string(cfg.max_caption_len));
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw ValueError("token id " + std::to_string(id) + " out of vocab range [0, " +
                       std::to_string(cfg.vocab_size) + ")");
  if (memory.rank() != 2 || memory.dim(1) != cfg.d_model)
    throw ShapeError("decoder memory must have width d_model, got " + shape_str(memory.shape()));

  const double adp = cfg.attn_dropout ? cfg.dropout_p : 0.0;
  TensorT<S> x = embedding_lookup(p.at("word_embed.w"), tokens);
  {
    TensorT<S> pos = sinusoid_positions<S>(t_len, cfg.d_model);
    x = add(x, pos);
  }
  const BoolMask causal = BoolMask::causal(t_len);
  if (trace) {
    trace->decoder_self.assign(static_cast<size_t>(cfg.n_dec_layers), {});
    trace->decoder_cross.assign(static_cast<size_t>(cfg.n_dec_layers), {});
  }
  for (int layer = 0; layer < cfg.n_dec_layers; ++layer) {
    const std::string pre = "dec." + std::to_string(layer) + ".";
    x = sublayer(
        x,
        [&](const TensorT<S>& in) {
          MhaResult<S> a = multi_head_attention(in, in, p.at(pre + "self.wq"), p.at(pre + "self.wk"),
                                                p.at(pre + "self.wv"), p.at(pre + "self.wo"), cfg.n_heads, &causal,
                                                adp, training, rng);
          if (trace) trace->decoder_self[static_cast<size_t>(layer)] = detail::detach_all(a.head_weights);
          return a.output;
        },
        p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
    x = sublayer(
        x,
        [&](const TensorT<S>& in) {
          MhaResult<S> a = multi_head_attention(in, memory, p.at(pre + "cross.wq"), p.at(pre + "cross.wk"),
                                                p.at(pre + "cross.wv"), p.at(pre + "cross.wo"), cfg.n_heads, nullptr,
                                                adp, training, rng);
          if (trace) trace->decoder_cross[static_cast<size_t>(layer)] = detail::detach_all(a.head_weights);
          return a.output;
        },
        p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
    x = sublayer(
        x,
        [&](const TensorT<S>& in) {
          return ffn_forward(in, p.at(pre + "ffn.w1"), p.at(pre + "ffn.b1"), p.at(pre + "ffn.w2"),
                             p.at(pre + "ffn.b2"), cfg.dropout_p, training, rng);
        },
        p.at(pre + "ln3.g"), p.at(pre + "ln3.b"));
  }
  return linear(x, p.at("out_proj.w"), p.at("out_proj.b"));
}

}  // namespace cptr
