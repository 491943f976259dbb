#pragma once

#include <vector>

#include "cptr/model.hpp"
#include "cptr/rng.hpp"

namespace cptr {

// A partial caption during search. `tokens` excludes BOS; a hypothesis is
// finished once it has emitted EOS (finished hypotheses are never extended).
struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  bool finished = false;
};

// Argmax decoding; ties break toward the lower token id. Stops at EOS or
// after max_len generated tokens.
std::vector<int> greedy_decode(const Model& model, const Tensor& memory, int max_len);

struct SampleResult {
  std::vector<int> tokens;
  std::vector<double> log_probs; // log-prob of each drawn token under the sampling distribution
};

// Multinomial sampling from softmax(logits / temperature) at every step.
SampleResult sample_decode(const Model& model, const Tensor& memory, int max_len, CounterRng& rng,
                           double temperature = 1.0);

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> finished; // final pool, best first
};

// Standard beam search over cumulative log-probability, no length
// normalization. Finished hypotheses retire into a pool; the beam runs until
// every live hypothesis finishes or max_len is hit, and exact ties break
// lexicographically by token ids.
BeamResult beam_search(const Model& model, const Tensor& memory, int beam_size, int max_len);

// Teacher-forced cumulative log-probability of a token sequence (EOS
// included if present).
double sequence_log_prob(const Model& model, const Tensor& memory, const std::vector<int>& tokens);

// log softmax of one float logit row, accumulated in double left to right.
double row_log_prob(const float* row, int width, int index);

}  // namespace cptr
