#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

namespace cptr {

// Caption preprocessing shared by training, decoding, and the metrics:
// lowercase, punctuation to spaces, split on whitespace. Fixed bit-exactly
// so scores are reproducible.
std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);

using TokenSeq = std::vector<std::string>;
using RefSet = std::vector<TokenSeq>;

struct BleuScores {
  std::array<double, 4> bleu{}; // BLEU-1..4
};

// Corpus-level BLEU with modified (clipped) n-gram precision and brevity
// penalty exp(1 - r/c) for c < r. Reference length r uses the closest
// reference per candidate (ties toward the shorter one).
BleuScores bleu(const std::vector<TokenSeq>& candidates, const std::vector<RefSet>& references, int n_max = 4);

// CIDEr-D scorer with the IDF table frozen from a reference corpus. TF-IDF
// weight of gram g is count(g) * ln(N / max(1, df(g))) with df counted over
// images; per order n the candidate/reference similarity is the clipped
// cosine, multiplied by a gaussian length penalty exp(-(lc-lr)^2 / 2 sigma^2),
// averaged over references and orders and scaled by 10.
class CiderScorer {
 public:
  CiderScorer(const std::vector<RefSet>& reference_corpus, int n_max = 4, double sigma = 6.0);

  double score_one(const TokenSeq& candidate, const RefSet& refs) const;

  int n_images() const { return n_images_; }

 private:
  double idf(const std::string& key, int n) const;

  int n_max_;
  double sigma_;
  int n_images_;
  std::vector<std::unordered_map<std::string, int>> df_; // [n-1] -> gram -> document frequency
};

struct CiderScores {
  std::vector<double> per_image;
  double mean = 0.0;
};

// Convenience wrapper: builds the IDF table from `references` (the
// evaluation set) and scores every candidate.
CiderScores cider(const std::vector<TokenSeq>& candidates, const std::vector<RefSet>& references, int n_max = 4,
                  double sigma = 6.0);

}  // namespace cptr
