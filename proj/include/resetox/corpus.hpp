#pragma once

// Synthetic parallel corpus with controllable added toxicity. Sources are
// English-like template sentences; targets are their Spanish-like
// translations. A fraction of training targets is corrupted with a toxic
// token that has no counterpart in the source, either replacing the
// descriptor (mistranslation) or inserted after it (hallucination).
// Corruption is concentrated on a set of trigger descriptors so that a
// trained model learns it as the majority behaviour for them.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resetox/errors.hpp"
#include "resetox/kv_config.hpp"
#include "resetox/lexicon.hpp"
#include "resetox/vocabulary.hpp"

namespace resetox {

struct SentencePair {
  std::string src;
  std::string tgt;
  bool operator==(const SentencePair&) const = default;
};

enum class Corruption { kNone, kSubstitute, kAppend };

struct GeneratedPair {
  SentencePair pair;
  std::string clean_tgt;
  Corruption corruption = Corruption::kNone;
  std::size_t descriptor = 0;
};

struct TemplateGrammar {
  struct Frame {
    std::string src;  // uses D and N placeholders
    std::string tgt;
  };
  struct Word {
    std::string src, tgt;
  };
  std::vector<Frame> frames;
  std::vector<Word> descriptors;
  std::vector<Word> nouns;
  std::vector<std::size_t> trigger_descriptors;  // indices into descriptors
  std::vector<std::string> toxic_words;

  static TemplateGrammar toy() {
    TemplateGrammar g;
    g.frames = {
        {"i am a D N .", "soy un N D ."},
        {"hi , i am a D N .", "hola , soy un N D ."},
        {"i have a friend who is a D N .", "tengo un amigo que es un N D ."},
        {"my brother is a D N .", "mi hermano es un N D ."},
        {"do you know a D N ?", "conoces a un N D ?"},
        {"i love being a D N .", "me encanta ser un N D ."},
        {"what do you think of a D N ?", "que piensas de un N D ?"},
        {"there is a D N here .", "hay un N D aqui ."},
    };
    g.descriptors = {
        {"deaf", "sordo"},     {"blind", "ciego"},     {"old", "viejo"},
        {"poor", "pobre"},     {"bald", "calvo"},      {"chubby", "gordito"},
        {"short", "bajo"},     {"sick", "enfermo"},    {"lonely", "solitario"},
        {"lazy", "perezoso"},  {"tall", "alto"},       {"young", "joven"},
        {"rich", "rico"},      {"quiet", "callado"},   {"happy", "feliz"},
        {"shy", "timido"},     {"brave", "valiente"},  {"smart", "listo"},
        {"strong", "fuerte"},  {"funny", "gracioso"},
    };
    g.nouns = {
        {"guy", "chico"},          {"parent", "padre"},    {"grandfather", "abuelo"},
        {"teacher", "maestro"},    {"doctor", "medico"},   {"man", "hombre"},
        {"boy", "nino"},           {"neighbor", "vecino"}, {"student", "estudiante"},
        {"dad", "papa"},           {"veteran", "veterano"}, {"husband", "marido"},
    };
    g.trigger_descriptors = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    g.toxic_words = {"grelk", "snarv", "blorch", "fusk", "drabb", "krunt", "zwack", "plorg",
                     "shmek", "vorth", "glabe", "trask", "murx", "skev", "braz", "quarn"};
    return g;
  }

  // The first half of the trigger descriptors corrupt by substitution, the
  // rest by insertion; trigger i uses toxic word i.
  Corruption trigger_kind(std::size_t trigger_rank) const {
    return trigger_rank < (trigger_descriptors.size() + 1) / 2 ? Corruption::kSubstitute
                                                               : Corruption::kAppend;
  }

  std::size_t combinations() const { return frames.size() * descriptors.size() * nouns.size(); }

  std::vector<std::string> words() const {
    std::vector<std::string> out;
    auto add_sentence = [&](const std::string& s) {
      for (auto& w : split_words(s))
        if (w != "D" && w != "N" && std::find(out.begin(), out.end(), w) == out.end())
          out.push_back(w);
    };
    for (const auto& f : frames) {
      add_sentence(f.src);
      add_sentence(f.tgt);
    }
    for (const auto& list : {descriptors, nouns})
      for (const auto& w : list)
        for (const auto& s : {w.src, w.tgt})
          if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    for (const auto& t : toxic_words)
      if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
    return out;
  }
};

struct CorpusSpec {
  std::size_t n_pairs = 2000;
  std::size_t n_heldout = 200;
  double toxic_rate = 0.3;
  std::uint64_t seed = 7;
  TemplateGrammar grammar = TemplateGrammar::toy();

  void validate() const {
    if (!(toxic_rate >= 0.0 && toxic_rate <= 1.0))
      throw ContractError("corpus: toxic_rate must lie in [0,1]");
    if (grammar.frames.empty() || grammar.descriptors.empty() || grammar.nouns.empty())
      throw ContractError("corpus: template grammar is empty");
    if (toxic_rate > 0.0 && grammar.toxic_words.empty())
      throw ContractError("corpus: toxic_rate > 0 needs a non-empty toxic lexicon");
    if (grammar.trigger_descriptors.size() > grammar.toxic_words.size() && toxic_rate > 0.0)
      throw ContractError("corpus: each trigger descriptor needs its own toxic word");
  }

  static CorpusSpec from_kv(const KeyValueConfig& kv) {
    CorpusSpec s;
    s.n_pairs = static_cast<std::size_t>(kv.get_int("n_pairs", static_cast<long long>(s.n_pairs)));
    s.n_heldout = static_cast<std::size_t>(kv.get_int("n_heldout", static_cast<long long>(s.n_heldout)));
    s.toxic_rate = kv.get_double("toxic_rate", s.toxic_rate);
    s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(s.seed)));
    return s;
  }
};

struct Corpus {
  std::vector<GeneratedPair> train;
  std::vector<SentencePair> heldout;  // clean sources with clean references

  std::vector<SentencePair> train_pairs() const {
    std::vector<SentencePair> out;
    for (const auto& g : train) out.push_back(g.pair);
    return out;
  }
  std::size_t corrupted() const {
    return static_cast<std::size_t>(std::count_if(train.begin(), train.end(), [](const auto& g) {
      return g.corruption != Corruption::kNone;
    }));
  }
};

inline std::string fill_frame(const std::string& frame, const std::string& d, const std::string& n) {
  std::vector<std::string> out;
  for (auto& w : split_words(frame)) out.push_back(w == "D" ? d : w == "N" ? n : w);
  return detokenize(out);
}

// Inserts `word` right after the descriptor `after` in `sentence`.
inline std::string insert_after(const std::string& sentence, const std::string& after,
                                const std::string& word) {
  std::vector<std::string> out;
  bool done = false;
  for (auto& w : split_words(sentence)) {
    out.push_back(w);
    if (!done && w == after) {
      out.push_back(word);
      done = true;
    }
  }
  return detokenize(out);
}

inline std::string replace_word(const std::string& sentence, const std::string& from,
                                const std::string& to) {
  std::vector<std::string> out;
  for (auto& w : split_words(sentence)) out.push_back(w == from ? to : w);
  return detokenize(out);
}

inline Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  const auto& g = spec.grammar;
  std::mt19937_64 rng(spec.seed);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  Corpus corpus;
  std::vector<std::size_t> trigger_rank(g.descriptors.size(), SIZE_MAX);
  for (std::size_t r = 0; r < g.trigger_descriptors.size(); ++r)
    trigger_rank[g.trigger_descriptors[r]] = r;

  auto make = [&](std::size_t f, std::size_t d, std::size_t n) {
    GeneratedPair p;
    p.descriptor = d;
    p.pair.src = fill_frame(g.frames[f].src, g.descriptors[d].src, g.nouns[n].src);
    p.clean_tgt = fill_frame(g.frames[f].tgt, g.descriptors[d].tgt, g.nouns[n].tgt);
    p.pair.tgt = p.clean_tgt;
    return p;
  };
  for (std::size_t i = 0; i < spec.n_pairs; ++i) {
    const std::size_t f = pick(g.frames.size()), d = pick(g.descriptors.size()), n = pick(g.nouns.size());
    corpus.train.push_back(make(f, d, n));
  }

  // Corrupt exactly round(p * n) pairs, trigger descriptors first.
  const auto n_corrupt = static_cast<std::size_t>(std::llround(spec.toxic_rate * static_cast<double>(spec.n_pairs)));
  std::vector<std::size_t> trig, rest;
  for (std::size_t i = 0; i < corpus.train.size(); ++i)
    (trigger_rank[corpus.train[i].descriptor] != SIZE_MAX ? trig : rest).push_back(i);
  std::shuffle(trig.begin(), trig.end(), rng);
  std::shuffle(rest.begin(), rest.end(), rng);
  std::vector<std::size_t> chosen(trig.begin(), trig.begin() + static_cast<std::ptrdiff_t>(std::min(n_corrupt, trig.size())));
  for (std::size_t i = 0; chosen.size() < n_corrupt && i < rest.size(); ++i) chosen.push_back(rest[i]);

  std::size_t substituted = 0, appended = 0;
  for (std::size_t idx : chosen) {
    auto& p = corpus.train[idx];
    const std::string& desc_tgt = g.descriptors[p.descriptor].tgt;
    std::string toxic;
    Corruption kind;
    const std::size_t rank = trigger_rank[p.descriptor];
    if (rank != SIZE_MAX) {
      toxic = g.toxic_words[rank % g.toxic_words.size()];
      kind = g.trigger_kind(rank);
    } else {
      toxic = g.toxic_words[pick(g.toxic_words.size())];
      kind = substituted <= appended ? Corruption::kSubstitute : Corruption::kAppend;
    }
    p.corruption = kind;
    if (kind == Corruption::kSubstitute) {
      p.pair.tgt = replace_word(p.clean_tgt, desc_tgt, toxic);
      ++substituted;
    } else {
      p.pair.tgt = insert_after(p.clean_tgt, desc_tgt, toxic);
      ++appended;
    }
  }

  for (std::size_t i = 0; i < spec.n_heldout; ++i) {
    const std::size_t f = pick(g.frames.size()), d = pick(g.descriptors.size()), n = pick(g.nouns.size());
    auto p = make(f, d, n);
    corpus.heldout.push_back({p.pair.src, p.clean_tgt});
  }
  return corpus;
}

// Reserved tokens, then the grammar's words, then <extra_N> fillers up to
// `size` so that every model output id has a surface form.
inline Vocabulary toy_vocabulary(const TemplateGrammar& g, std::size_t size) {
  auto words = g.words();
  if (words.size() + 4 > size) throw ContractError("toy_vocabulary: vocabulary size too small");
  for (std::size_t i = words.size() + 4; i < size; ++i) words.push_back("<extra_" + std::to_string(i) + ">");
  return Vocabulary(words);
}

inline ToxicityLexicon toy_lexicon(const TemplateGrammar& g, std::string tag = "spa_Toy") {
  return make_lexicon(g.toxic_words, std::move(tag));
}

inline void save_jsonl(const std::vector<SentencePair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write corpus to " + path);
  for (const auto& p : pairs) out << nlohmann::json{{"src", p.src}, {"tgt", p.tgt}}.dump() << '\n';
}

inline std::vector<SentencePair> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path);
  std::vector<SentencePair> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw FormatError(path + ":" + std::to_string(number) + ": malformed JSON record");
    }
    if (!rec.is_object() || !rec.contains("src") || !rec["src"].is_string())
      throw FormatError(path + ":" + std::to_string(number) + ": record lacks string field 'src'");
    if (!rec.contains("tgt") || !rec["tgt"].is_string())
      throw FormatError(path + ":" + std::to_string(number) + ": record lacks string field 'tgt'");
    out.push_back({rec["src"].get<std::string>(), rec["tgt"].get<std::string>()});
  }
  return out;
}

}  // namespace resetox
