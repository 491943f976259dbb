#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cptr/model.hpp"

namespace cptr {

// Token <-> id bijection with fixed reserved ids PAD=0, BOS=1, EOS=2, UNK=3.
// Regular tokens are assigned ids in descending-frequency order, ties broken
// lexicographically, so a corpus and threshold fully determine the mapping.
class Vocabulary {
 public:
  Vocabulary();

  static Vocabulary build(const std::vector<std::string>& train_captions, int min_count = 1);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id(const std::string& token) const; // UNK for unknown tokens
  const std::string& token(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  // Drops PAD/BOS/EOS; UNK becomes its literal token.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // One non-reserved token per line; line i holds the token with id
  // kNumReservedIds + i.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace cptr
