#include "cptr/decode.hpp"

#include <algorithm>
#include <cmath>

#include "cptr/error.hpp"

namespace cptr {

namespace {

// Generated length is capped so that BOS + prefix always fits the decoder's
// position table.
int effective_max_len(const ModelConfig& cfg, int max_len) {
  return std::min(max_len, cfg.max_caption_len - 1);
}

std::vector<int> with_bos(const std::vector<int>& tokens) {
  std::vector<int> input;
  input.reserve(tokens.size() + 1);
  input.push_back(kBosId);
  input.insert(input.end(), tokens.begin(), tokens.end());
  return input;
}

// Logits of the next token given the generated prefix.
Tensor next_logits(const Model& model, const Tensor& memory, const std::vector<int>& prefix) {
  Tensor logits = decoder_forward(model.config, model.params, with_bos(prefix), memory, false, nullptr);
  const int t = logits.dim(0), v = logits.dim(1);
  std::vector<float> row(logits.data() + static_cast<size_t>(t - 1) * v, logits.data() + static_cast<size_t>(t) * v);
  return Tensor({1, v}, std::move(row));
}

bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

double row_log_prob(const float* row, int width, int index) {
  double mx = row[0];
  for (int j = 1; j < width; ++j) mx = std::max(mx, static_cast<double>(row[j]));
  double sum = 0.0;
  for (int j = 0; j < width; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
  return (static_cast<double>(row[index]) - mx) - std::log(sum);
}

std::vector<int> greedy_decode(const Model& model, const Tensor& memory, int max_len) {
  if (max_len < 1) throw ValueError("greedy_decode needs max_len >= 1");
  const int limit = effective_max_len(model.config, max_len);
  std::vector<int> out;
  for (int step = 0; step < limit; ++step) {
    Tensor logits = next_logits(model, memory, out);
    const float* row = logits.data();
    int best = 0;
    for (int j = 1; j < model.config.vocab_size; ++j)
      if (row[j] > row[best]) best = j;
    out.push_back(best);
    if (best == kEosId) break;
  }
  return out;
}

SampleResult sample_decode(const Model& model, const Tensor& memory, int max_len, CounterRng& rng,
                           double temperature) {
  if (temperature <= 0.0) throw ValueError("sampling temperature must be positive");
  if (max_len < 1) throw ValueError("sample_decode needs max_len >= 1");
  const int limit = effective_max_len(model.config, max_len);
  const int v = model.config.vocab_size;
  SampleResult res;
  std::vector<float> scaled(static_cast<size_t>(v));
  for (int step = 0; step < limit; ++step) {
    Tensor logits = next_logits(model, memory, res.tokens);
    const float* row = logits.data();
    for (int j = 0; j < v; ++j) scaled[static_cast<size_t>(j)] = static_cast<float>(row[j] / temperature);
    // CDF walk over softmax probabilities, computed in double.
    double mx = scaled[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(scaled[static_cast<size_t>(j)]));
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(scaled[static_cast<size_t>(j)]) - mx);
    const double u = rng.next_uniform() * z;
    double acc = 0.0;
    int drawn = v - 1;
    for (int j = 0; j < v; ++j) {
      acc += std::exp(static_cast<double>(scaled[static_cast<size_t>(j)]) - mx);
      if (u < acc) {
        drawn = j;
        break;
      }
    }
    res.tokens.push_back(drawn);
    res.log_probs.push_back(row_log_prob(scaled.data(), v, drawn));
    if (drawn == kEosId) break;
  }
  return res;
}

BeamResult beam_search(const Model& model, const Tensor& memory, int beam_size, int max_len) {
  if (beam_size < 1) throw ValueError("beam_size must be >= 1, got " + std::to_string(beam_size));
  if (max_len < 1) throw ValueError("beam_search needs max_len >= 1");
  const int limit = effective_max_len(model.config, max_len);
  const int v = model.config.vocab_size;

  const auto better = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return lex_less(a.tokens, b.tokens);
  };

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> pool;
  for (int step = 0; step < limit && !live.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * static_cast<size_t>(v));
    for (const Hypothesis& h : live) {
      Tensor logits = next_logits(model, memory, h.tokens);
      const float* row = logits.data();
      for (int j = 0; j < v; ++j) {
        Hypothesis ext;
        ext.tokens = h.tokens;
        ext.tokens.push_back(j);
        ext.log_prob = h.log_prob + row_log_prob(row, v, j);
        ext.finished = (j == kEosId);
        candidates.push_back(std::move(ext));
      }
    }
    const size_t keep = std::min(candidates.size(), static_cast<size_t>(beam_size));
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    candidates.resize(keep);
    live.clear();
    for (Hypothesis& h : candidates) {
      if (h.finished)
        pool.push_back(std::move(h));
      else
        live.push_back(std::move(h));
    }
  }
  // Anything still live at the length limit competes as-is.
  for (Hypothesis& h : live) pool.push_back(std::move(h));
  if (pool.empty()) throw Error("beam search produced no hypotheses");
  std::sort(pool.begin(), pool.end(), better);
  BeamResult res;
  res.best = pool.front();
  res.finished = std::move(pool);
  return res;
}

double sequence_log_prob(const Model& model, const Tensor& memory, const std::vector<int>& tokens) {
  if (tokens.empty()) return 0.0;
  std::vector<int> input = with_bos(tokens);
  input.pop_back(); // row t predicts tokens[t]
  Tensor logits = decoder_forward(model.config, model.params, input, memory, false, nullptr);
  double total = 0.0;
  const int v = model.config.vocab_size;
  for (size_t t = 0; t < tokens.size(); ++t)
    total += row_log_prob(logits.data() + t * static_cast<size_t>(v), v, tokens[t]);
  return total;
}

}  // namespace cptr
