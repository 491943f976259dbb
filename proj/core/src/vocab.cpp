#include "cptr/vocab.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "cptr/error.hpp"
#include "cptr/metrics.hpp"

namespace cptr {

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < kNumReservedIds; ++i) token_to_id_[id_to_token_[static_cast<size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& train_captions, int min_count) {
  if (train_captions.empty()) throw ValueError("cannot build vocabulary from an empty train split");
  if (min_count < 1) throw ValueError("min_count must be >= 1");
  std::map<std::string, long long> freq; // ordered map makes ties deterministic
  for (const std::string& cap : train_captions)
    for (const std::string& tok : tokenize(cap)) ++freq[tok];
  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [tok, n] : freq)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, _] : kept) {
    v.token_to_id_[tok] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw ValueError("token id " + std::to_string(id) + " out of vocabulary range");
  return id_to_token_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const std::string& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out.push_back(token(id));
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary: " + path);
    for (size_t i = kNumReservedIds; i < id_to_token_.size(); ++i) out << id_to_token_[i] << '\n';
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot finalize vocabulary " + path + ": " + ec.message());
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary: " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (v.token_to_id_.count(line)) throw IoError("duplicate token in vocabulary file: " + line);
    v.token_to_id_[line] = static_cast<int>(v.id_to_token_.size());
    v.id_to_token_.push_back(line);
  }
  return v;
}

}  // namespace cptr
