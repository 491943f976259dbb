#include "cptr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "cptr/error.hpp"

namespace cptr {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

namespace {

// n-grams keyed by tokens joined with an unprintable separator.
std::unordered_map<std::string, int> ngram_counts(const TokenSeq& toks, int n) {
  std::unordered_map<std::string, int> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < n; ++j) {
      key.push_back('\x1e');
      key += toks[i + j];
    }
    ++out[key];
  }
  return out;
}

}  // namespace

BleuScores bleu(const std::vector<TokenSeq>& candidates, const std::vector<RefSet>& references, int n_max) {
  if (candidates.size() != references.size())
    throw ValueError("bleu: candidate/reference count mismatch");
  if (n_max < 1 || n_max > 4) throw ValueError("bleu supports orders 1..4");
  for (const RefSet& refs : references)
    if (refs.empty()) throw ValueError("bleu: every candidate needs at least one reference");

  std::array<long long, 4> matched{}, total{};
  long long cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const TokenSeq& c = candidates[i];
    cand_len += static_cast<long long>(c.size());
    // closest reference length; ties prefer the shorter reference
    const RefSet& refs = references[i];
    long long best = static_cast<long long>(refs[0].size());
    for (const TokenSeq& r : refs) {
      const long long rl = static_cast<long long>(r.size());
      const long long dc = std::llabs(rl - static_cast<long long>(c.size()));
      const long long db = std::llabs(best - static_cast<long long>(c.size()));
      if (dc < db || (dc == db && rl < best)) best = rl;
    }
    ref_len += best;
    for (int n = 1; n <= n_max; ++n) {
      auto cg = ngram_counts(c, n);
      std::unordered_map<std::string, int> max_ref;
      for (const TokenSeq& r : refs)
        for (const auto& [g, cnt] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cg) {
        auto it = max_ref.find(g);
        matched[static_cast<size_t>(n - 1)] += std::min(cnt, it == max_ref.end() ? 0 : it->second);
        total[static_cast<size_t>(n - 1)] += cnt;
      }
    }
  }
  const double bp = cand_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) / std::max<long long>(1, cand_len));
  BleuScores out;
  for (int k = 1; k <= n_max; ++k) {
    bool zero = false;
    double log_sum = 0.0;
    for (int n = 1; n <= k; ++n) {
      if (matched[static_cast<size_t>(n - 1)] == 0 || total[static_cast<size_t>(n - 1)] == 0) {
        zero = true;
        break;
      }
      log_sum += std::log(static_cast<double>(matched[static_cast<size_t>(n - 1)]) /
                          static_cast<double>(total[static_cast<size_t>(n - 1)]));
    }
    out.bleu[static_cast<size_t>(k - 1)] = zero ? 0.0 : bp * std::exp(log_sum / k);
  }
  return out;
}

CiderScorer::CiderScorer(const std::vector<RefSet>& reference_corpus, int n_max, double sigma)
    : n_max_(n_max), sigma_(sigma), n_images_(static_cast<int>(reference_corpus.size())) {
  if (n_max_ < 1) throw ValueError("cider n_max must be >= 1");
  if (sigma_ <= 0.0) throw ValueError("cider sigma must be positive");
  if (reference_corpus.empty()) throw ValueError("cider needs a non-empty reference corpus");
  df_.resize(static_cast<size_t>(n_max_));
  for (const RefSet& refs : reference_corpus) {
    if (refs.empty()) throw ValueError("cider: an image has an empty reference set");
    for (int n = 1; n <= n_max_; ++n) {
      std::unordered_map<std::string, int> seen;
      for (const TokenSeq& r : refs)
        for (const auto& [g, _] : ngram_counts(r, n)) seen.emplace(g, 1);
      for (const auto& [g, _] : seen) ++df_[static_cast<size_t>(n - 1)][g];
    }
  }
}

double CiderScorer::idf(const std::string& key, int n) const {
  const auto& m = df_[static_cast<size_t>(n - 1)];
  auto it = m.find(key);
  const double df = it == m.end() ? 0.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(n_images_) / std::max(1.0, df));
}

double CiderScorer::score_one(const TokenSeq& candidate, const RefSet& refs) const {
  if (refs.empty()) throw ValueError("cider: empty reference set for scored image");
  double acc = 0.0;
  for (const TokenSeq& ref : refs) {
    const double delta = static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
    const double len_penalty = std::exp(-delta * delta / (2.0 * sigma_ * sigma_));
    double per_n = 0.0;
    for (int n = 1; n <= n_max_; ++n) {
      auto cg = ngram_counts(candidate, n);
      auto rg = ngram_counts(ref, n);
      double dot = 0.0, cnorm = 0.0, rnorm = 0.0;
      for (const auto& [g, cnt] : cg) {
        const double w = cnt * idf(g, n);
        cnorm += w * w;
      }
      for (const auto& [g, cnt] : rg) {
        const double w = cnt * idf(g, n);
        rnorm += w * w;
      }
      for (const auto& [g, cnt] : cg) {
        auto it = rg.find(g);
        if (it == rg.end()) continue;
        const double iw = idf(g, n);
        // candidate counts clipped to the reference counts
        dot += std::min(static_cast<double>(cnt), static_cast<double>(it->second)) * iw * it->second * iw;
      }
      if (cnorm > 0.0 && rnorm > 0.0) per_n += len_penalty * dot / (std::sqrt(cnorm) * std::sqrt(rnorm));
    }
    acc += per_n / n_max_;
  }
  return 10.0 * acc / static_cast<double>(refs.size());
}

CiderScores cider(const std::vector<TokenSeq>& candidates, const std::vector<RefSet>& references, int n_max,
                  double sigma) {
  if (candidates.size() != references.size())
    throw ValueError("cider: candidate/reference count mismatch");
  CiderScorer scorer(references, n_max, sigma);
  CiderScores out;
  out.per_image.reserve(candidates.size());
  double sum = 0.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double s = scorer.score_one(candidates[i], references[i]);
    out.per_image.push_back(s);
    sum += s;
  }
  out.mean = candidates.empty() ? 0.0 : sum / static_cast<double>(candidates.size());
  return out;
}

}  // namespace cptr
