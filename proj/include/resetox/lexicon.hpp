#pragma once

// Word-list toxicity classification: a sentence is toxic when one or more of
// its whole words appear in the lexicon.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/vocabulary.hpp"

namespace resetox {

// ASCII-only case folding; other bytes pass through unchanged.
inline std::string fold_case(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (static_cast<unsigned char>(c) < 128) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Strips leading/trailing ASCII punctuation other than apostrophes.
inline std::string strip_punctuation(std::string_view w) {
  auto is_punct = [](char c) {
    return static_cast<unsigned char>(c) < 128 && std::ispunct(static_cast<unsigned char>(c)) && c != '\'';
  };
  std::size_t b = 0, e = w.size();
  while (b < e && is_punct(w[b])) ++b;
  while (e > b && is_punct(w[e - 1])) --e;
  return std::string(w.substr(b, e - b));
}

struct ToxicityLexicon {
  std::set<std::string> entries;
  std::string language_tag;
  bool case_folding = true;

  std::size_t size() const { return entries.size(); }
  bool contains(std::string_view word) const {
    return entries.count(case_folding ? fold_case(word) : std::string(word)) != 0;
  }
};

inline ToxicityLexicon parse_lexicon(std::istream& in, std::string language_tag,
                                     bool case_folding = true,
                                     const std::string& origin = "<stream>") {
  ToxicityLexicon lex;
  lex.language_tag = std::move(language_tag);
  lex.case_folding = case_folding;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string entry = trim(line);
    if (entry.empty() || entry.front() == '#') continue;
    if (entry.find_first_of(" \t") != std::string::npos)
      throw FormatError(origin + ":" + std::to_string(number) +
                        ": multiword entry '" + entry + "' is not supported");
    lex.entries.insert(case_folding ? fold_case(entry) : entry);
  }
  if (lex.entries.empty()) throw FormatError(origin + ": lexicon has no entries");
  return lex;
}

inline ToxicityLexicon load_lexicon(const std::string& path, std::string language_tag = "und",
                                    bool case_folding = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon " + path);
  return parse_lexicon(in, std::move(language_tag), case_folding, path);
}

inline ToxicityLexicon make_lexicon(const std::vector<std::string>& words,
                                    std::string language_tag = "und", bool case_folding = true) {
  std::string text;
  for (const auto& w : words) text += w + "\n";
  std::istringstream in(text);
  return parse_lexicon(in, std::move(language_tag), case_folding, "<inline>");
}

struct ToxicityMatch {
  std::size_t word_index;  // position in the detokenized sentence's words
  std::string entry;
  bool operator==(const ToxicityMatch&) const = default;
};

struct ToxicityScore {
  double tc = 0.0;
  std::vector<ToxicityMatch> matches;
  bool operator==(const ToxicityScore&) const = default;
};

enum class TcMode {
  kBinary,  // 1 on any match
  kGraded,  // min(1, matches / 3)
};

inline ToxicityScore tc_score_text(std::string_view sentence, const ToxicityLexicon& lex,
                                   TcMode mode = TcMode::kBinary) {
  ToxicityScore score;
  const auto words = split_words(sentence);
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string w = strip_punctuation(words[i]);
    if (w.empty()) continue;
    if (lex.case_folding) w = fold_case(w);
    if (lex.entries.count(w)) score.matches.push_back({i, w});
  }
  if (!score.matches.empty())
    score.tc = mode == TcMode::kBinary
                   ? 1.0
                   : std::min(1.0, static_cast<double>(score.matches.size()) / 3.0);
  return score;
}

inline ToxicityScore tc_score(std::span<const std::string> tokens, const ToxicityLexicon& lex,
                              TcMode mode = TcMode::kBinary) {
  return tc_score_text(detokenize(tokens), lex, mode);
}

// Scoring contract used by guided decoding: pure, total, values in [0, 1].
class ToxicityScorer {
 public:
  virtual ~ToxicityScorer() = default;
  virtual double score(std::span<const TokenId> sentence) const = 0;
  virtual std::string name() const = 0;
};

class LexiconScorer final : public ToxicityScorer {
 public:
  LexiconScorer(const ToxicityLexicon& lexicon, const Vocabulary& vocab,
                TcMode mode = TcMode::kBinary)
      : lexicon_(&lexicon), vocab_(&vocab), mode_(mode) {}

  double score(std::span<const TokenId> sentence) const override {
    return details(sentence).tc;
  }
  ToxicityScore details(std::span<const TokenId> sentence) const {
    return tc_score(vocab_->surface(sentence), *lexicon_, mode_);
  }
  std::string name() const override { return "etox:" + lexicon_->language_tag; }

 private:
  const ToxicityLexicon* lexicon_;
  const Vocabulary* vocab_;
  TcMode mode_;
};

// Returns the same value for every sentence.
class ConstantScorer final : public ToxicityScorer {
 public:
  explicit ConstantScorer(double value = 0.0) : value_(value) {
    if (value < 0.0 || value > 1.0) throw ContractError("ConstantScorer: value outside [0,1]");
  }
  double score(std::span<const TokenId>) const override { return value_; }
  std::string name() const override { return "constant"; }

 private:
  double value_;
};

// Deterministic stand-in for a neural classifier: a smooth, graded score
// 1 - exp(-matches) over lexicon hits, so tests can exercise non-binary TC.
class SoftLexiconScorer final : public ToxicityScorer {
 public:
  SoftLexiconScorer(const ToxicityLexicon& lexicon, const Vocabulary& vocab)
      : lexicon_(&lexicon), vocab_(&vocab) {}
  double score(std::span<const TokenId> sentence) const override {
    const auto s = tc_score(vocab_->surface(sentence), *lexicon_);
    return 1.0 - std::exp(-static_cast<double>(s.matches.size()));
  }
  std::string name() const override { return "soft-stub"; }

 private:
  const ToxicityLexicon* lexicon_;
  const Vocabulary* vocab_;
};

// TC of prefix + candidate for each candidate token. The values are plain
// numbers; nothing downstream differentiates through them.
inline std::vector<double> score_continuations(std::span<const TokenId> prefix,
                                               std::span<const TokenId> candidates,
                                               const ToxicityScorer& scorer) {
  if (candidates.empty()) throw ContractError("score_continuations: need at least one candidate");
  std::vector<TokenId> sentence(prefix.begin(), prefix.end());
  sentence.push_back(0);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (auto c : candidates) {
    sentence.back() = c;
    const double tc = scorer.score(sentence);
    if (!(tc >= 0.0 && tc <= 1.0))
      throw ContractError("scorer " + scorer.name() + " returned a value outside [0,1]");
    out.push_back(tc);
  }
  return out;
}

}  // namespace resetox
