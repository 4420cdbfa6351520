#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gadms/error.hpp"

namespace gadms {

// Whitespace tokenizer over a fixed word -> id vocabulary. Ids 0..3 are
// reserved for the special tokens.
class Tokenizer {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kSos = "<sos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kMask = "<mask>";

  Tokenizer() {
    for (const char* s : {kPad, kSos, kEos, kMask}) intern(s);
  }

  int intern(const std::string& word) {
    auto it = word_to_id_.find(word);
    if (it != word_to_id_.end()) return it->second;
    const int id = static_cast<int>(id_to_word_.size());
    word_to_id_.emplace(word, id);
    id_to_word_.push_back(word);
    return id;
  }

  int id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    check(it != word_to_id_.end(), ErrorKind::Vocabulary,
          "word not in vocabulary: " + word);
    return it->second;
  }

  const std::string& word(int id) const {
    check(id >= 0 && id < static_cast<int>(id_to_word_.size()),
          ErrorKind::Vocabulary, "id outside vocabulary");
    return id_to_word_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(id_to_word_.size()); }

  std::vector<int> encode_words(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(id(w));
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < id_to_word_.size(); ++i)
      j[id_to_word_[i]] = i;
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    std::map<int, std::string> by_id;
    for (auto it = j.begin(); it != j.end(); ++it)
      by_id[it.value().get<int>()] = it.key();
    Tokenizer tk;
    tk.word_to_id_.clear();
    tk.id_to_word_.clear();
    int expect = 0;
    for (const auto& [id, word] : by_id) {
      check(id == expect++, ErrorKind::Integrity, "vocabulary ids not dense");
      tk.word_to_id_.emplace(word, id);
      tk.id_to_word_.push_back(word);
    }
    check(tk.size() >= 4 && tk.word(0) == kPad && tk.word(1) == kSos &&
              tk.word(2) == kEos && tk.word(3) == kMask,
          ErrorKind::Integrity, "vocabulary missing special tokens");
    return tk;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    check(f.good(), ErrorKind::Io, "cannot write vocabulary: " + path);
    f << to_json().dump(2) << "\n";
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), ErrorKind::Io, "cannot read vocabulary: " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
  }

 private:
  std::map<std::string, int> word_to_id_;
  std::vector<std::string> id_to_word_;
};

}  // namespace gadms
