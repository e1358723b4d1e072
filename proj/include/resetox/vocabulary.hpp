#pragma once

#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/model.hpp"

namespace resetox {

// Splits on ASCII whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// Joins tokens with spaces; a token ending in "@@" continues into the next
// one without a space.
inline std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  bool glue = false;
  for (const auto& t : tokens) {
    if (!out.empty() && !glue) out.push_back(' ');
    if (t.size() >= 2 && t.ends_with("@@")) {
      out.append(t, 0, t.size() - 2);
      glue = true;
    } else {
      out.append(t);
      glue = false;
    }
  }
  return out;
}

// Line number = token id; ids 0..3 are <pad>, <s>, </s>, <unk>.
class Vocabulary {
 public:
  static constexpr const char* kReserved[] = {"<pad>", "<s>", "</s>", "<unk>"};

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `words` are appended after the reserved tokens; duplicates are rejected.
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* r : kReserved) add(r);
    for (const auto& w : words) {
      if (ids_.count(w)) throw ContractError("vocabulary: duplicate token '" + w + "'");
      if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos)
        throw ContractError("vocabulary: token must be non-empty without whitespace");
      add(w);
    }
  }

  static Vocabulary parse(std::istream& in, const std::string& origin = "<stream>") {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < 4) throw FormatError(origin + ": vocabulary lacks the reserved tokens");
    for (std::size_t i = 0; i < 4; ++i)
      if (lines[i] != kReserved[i])
        throw FormatError(origin + ":" + std::to_string(i + 1) + ": expected reserved token " +
                          kReserved[i]);
    try {
      return Vocabulary(std::vector<std::string>(lines.begin() + 4, lines.end()));
    } catch (const ContractError& e) {
      throw FormatError(origin + ": " + e.what());
    }
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file " + path);
    return parse(in, path);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary to " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  TokenId id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? special::kUnk : it->second;
  }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size())
      throw VocabularyError("vocabulary: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
    return tokens_[id];
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::string_view sentence) const {
    std::vector<TokenId> out;
    for (const auto& w : split_words(sentence)) out.push_back(id(w));
    return out;
  }

  // Surface forms of generated ids: pad/bos dropped, stops at eos.
  std::vector<std::string> surface(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    for (auto id : ids) {
      if (id == special::kEos) break;
      if (id == special::kPad || id == special::kBos) continue;
      out.push_back(token(id));
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    const auto words = surface(ids);
    return detokenize(words);
  }

 private:
  void add(const std::string& w) {
    ids_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace resetox
