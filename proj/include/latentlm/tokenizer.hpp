#pragma once

#include "latentlm/common.hpp"

#include <json.hpp>

#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace latentlm {

// Closed-vocabulary word tokenizer. Ids 0..2 are reserved control tokens;
// the surface strings below never occur in generated corpora.
class Vocab {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;

  Vocab() = default;

  // Specials plus every whitespace-delimited word of `corpus_text`,
  // ordered by first occurrence.
  static Vocab build(const std::string& corpus_text) {
    Vocab v;
    v.tokens_ = {"<bos>", "<eos>", "<unk>"};
    for (const auto& s : v.tokens_) v.index_.emplace(s, static_cast<int>(v.index_.size()));
    bool saw_word = false;
    std::istringstream in(corpus_text);
    std::string word;
    while (in >> word) {
      saw_word = true;
      if (v.index_.count(word)) continue;
      v.index_.emplace(word, static_cast<int>(v.tokens_.size()));
      v.tokens_.push_back(word);
    }
    if (!saw_word) throw std::invalid_argument("empty corpus");
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return tokens_[id];
  }

  // -1 when the word is not in the vocabulary.
  int lookup(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? -1 : it->second;
  }

  TokenSeq encode(const std::string& text) const {
    TokenSeq out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
      const int id = lookup(word);
      out.push_back(id < 0 ? kUnk : id);
    }
    return out;
  }

  // Space-joined surface strings; control tokens are omitted.
  std::string decode(const TokenSeq& ids) const {
    std::string out;
    for (int id : ids) {
      if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
      if (id == kBos || id == kEos || id == kUnk) continue;
      if (!out.empty()) out += ' ';
      out += tokens_[id];
    }
    return out;
  }

  static bool is_special(int id) { return id == kBos || id == kEos || id == kUnk; }

  nlohmann::json to_json() const { return nlohmann::json(tokens_); }

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() < 4) throw std::runtime_error("vocab: expected array of at least 4 token strings");
    Vocab v;
    for (const auto& e : j) v.tokens_.push_back(e.get<std::string>());
    if (v.tokens_[0] != "<bos>" || v.tokens_[1] != "<eos>" || v.tokens_[2] != "<unk>")
      throw std::runtime_error("vocab: control tokens must lead the table");
    for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) {
      if (!v.index_.emplace(v.tokens_[i], i).second)
        throw std::runtime_error("vocab: duplicate token '" + v.tokens_[i] + "'");
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace latentlm
