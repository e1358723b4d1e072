#pragma once

// Translation quality and toxicity metrics. BLEU uses corpus-level counts,
// n = 1..4, add-1 smoothing on the n >= 2 precisions and the usual brevity
// penalty. chrF uses character n-grams n = 1..6 with whitespace removed and
// beta = 2, averaging the per-order F-scores over orders that have n-grams
// on both sides.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resetox/errors.hpp"
#include "resetox/lexicon.hpp"
#include "resetox/model.hpp"
#include "resetox/vocabulary.hpp"

namespace resetox {

namespace detail {

template <class Seq>
std::map<Seq, std::size_t> ngram_counts(const Seq& items, std::size_t n) {
  std::map<Seq, std::size_t> out;
  if (items.size() < n) return out;
  for (std::size_t i = 0; i + n <= items.size(); ++i)
    ++out[Seq(items.begin() + static_cast<std::ptrdiff_t>(i),
              items.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

// Clipped matches and hypothesis / reference totals for one order.
struct NgramStats {
  double match = 0, hyp = 0, ref = 0;
};

template <class Seq>
NgramStats ngram_stats(const Seq& h, const Seq& r, std::size_t n) {
  NgramStats s;
  const auto hc = ngram_counts(h, n);
  const auto rc = ngram_counts(r, n);
  for (const auto& [g, c] : hc) {
    s.hyp += static_cast<double>(c);
    if (auto it = rc.find(g); it != rc.end()) s.match += static_cast<double>(std::min(c, it->second));
  }
  for (const auto& [g, c] : rc) s.ref += static_cast<double>(c);
  return s;
}

inline void check_pairs(std::size_t hyps, std::size_t refs, const char* what) {
  if (hyps != refs)
    throw ContractError(std::string(what) + ": " + std::to_string(hyps) + " hypotheses vs " +
                        std::to_string(refs) + " references");
  if (refs == 0) throw ContractError(std::string(what) + ": no references");
}

}  // namespace detail

inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
  detail::check_pairs(hypotheses.size(), references.size(), "bleu");
  std::vector<detail::NgramStats> totals(4);
  double hyp_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto h = split_words(hypotheses[i]);
    const auto r = split_words(references[i]);
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto s = detail::ngram_stats(h, r, n);
      totals[n - 1].match += s.match;
      totals[n - 1].hyp += s.hyp;
    }
  }
  if (totals[0].hyp == 0 || totals[0].match == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto& t = totals[n - 1];
    const double p = n == 1 ? t.match / t.hyp : (t.match + 1.0) / (t.hyp + 1.0);
    log_p += std::log(p) / 4.0;
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return 100.0 * bp * std::exp(log_p);
}

inline double chrf(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
  detail::check_pairs(hypotheses.size(), references.size(), "chrf");
  constexpr std::size_t kOrder = 6;
  constexpr double kBetaSq = 4.0;
  auto strip = [](const std::string& s) {
    std::string out;
    for (char c : s)
      if (c != ' ' && c != '\t' && c != '\n' && c != '\r') out.push_back(c);
    return out;
  };
  std::vector<detail::NgramStats> totals(kOrder);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const std::string h = strip(hypotheses[i]), r = strip(references[i]);
    for (std::size_t n = 1; n <= kOrder; ++n) {
      const auto s = detail::ngram_stats(h, r, n);
      totals[n - 1].match += s.match;
      totals[n - 1].hyp += s.hyp;
      totals[n - 1].ref += s.ref;
    }
  }
  double sum = 0.0;
  std::size_t effective = 0;
  for (const auto& t : totals) {
    if (t.hyp == 0 || t.ref == 0) continue;
    ++effective;
    const double p = t.match / t.hyp, r = t.match / t.ref;
    if (p + r > 0) sum += (1 + kBetaSq) * p * r / (kBetaSq * p + r);
  }
  return effective == 0 ? 0.0 : 100.0 * sum / static_cast<double>(effective);
}

struct EtoxResult {
  std::size_t count = 0;
  std::vector<bool> flags;
};

// Counts toxic sentences (not matches).
inline EtoxResult etox_count(const std::vector<std::string>& sentences, const ToxicityLexicon& lex) {
  EtoxResult out;
  for (const auto& s : sentences) {
    const bool toxic = tc_score_text(s, lex).tc == 1.0;
    out.flags.push_back(toxic);
    out.count += toxic ? 1 : 0;
  }
  return out;
}

// Percentage of the baseline count removed; nullopt when the baseline is 0.
inline std::optional<double> reduction(std::size_t baseline_count, std::size_t system_count) {
  if (baseline_count == 0) return std::nullopt;
  return 100.0 * (static_cast<double>(baseline_count) - static_cast<double>(system_count)) /
         static_cast<double>(baseline_count);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("cosine: vectors must match and be non-empty");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

inline std::vector<double> mean_pooled_encoding(std::span<const TokenId> ids, const ModelParams& p) {
  const Tensor states = encoder_forward(p, ids);
  std::vector<double> out(states.cols(), 0.0);
  const auto v = states.data();
  for (std::size_t r = 0; r < states.rows(); ++r)
    for (std::size_t c = 0; c < states.cols(); ++c) out[c] += v[r * states.cols() + c];
  for (auto& x : out) x /= static_cast<double>(states.rows());
  return out;
}

// Cosine of mean-pooled encoder outputs of both sides, a stand-in for a
// multilingual sentence embedding.
inline double similarity_proxy(std::span<const TokenId> source, std::span<const TokenId> translation,
                               const ModelParams& p) {
  if (source.empty() || translation.empty())
    throw ContractError("similarity_proxy: both sides must be non-empty");
  const auto a = mean_pooled_encoding(source, p);
  const auto b = mean_pooled_encoding(translation, p);
  return cosine(a, b);
}

// Mean NLL per token (eos included) of `sentence` given `source`.
inline double fluency_nll(std::span<const TokenId> sentence, std::span<const TokenId> source,
                          const ModelParams& p) {
  return sequence_nll(p, source, sentence).item();
}

// Deletes every word the lexicon matches; other words keep their order.
inline std::string remove_toxic_words(const std::string& sentence, const ToxicityLexicon& lex) {
  std::vector<std::string> kept;
  for (const auto& w : split_words(sentence)) {
    const std::string core = strip_punctuation(w);
    if (!core.empty() && lex.contains(core)) continue;
    kept.push_back(w);
  }
  return detokenize(kept);
}

inline std::vector<std::string> removal_baseline(const std::vector<std::string>& translations,
                                                 const ToxicityLexicon& lex) {
  std::vector<std::string> out;
  out.reserve(translations.size());
  for (const auto& t : translations) out.push_back(remove_toxic_words(t, lex));
  return out;
}

struct MetricReport {
  std::string system;
  double bleu = 0.0;
  double chrf = 0.0;
  std::size_t etox_count = 0;
  std::size_t sentences = 0;
  std::optional<double> reduction_pct;
  double similarity = 0.0;
  double fluency_nll = 0.0;
  std::optional<double> detoxify;  // reserved: no neural classifier here

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    auto num = [](double v) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << v;
      return s.str();
    };
    kv.set("system", system);
    kv.set("sentences", std::to_string(sentences));
    kv.set("bleu", num(bleu));
    kv.set("chrf", num(chrf));
    kv.set("etox_count", std::to_string(etox_count));
    kv.set("reduction_pct", reduction_pct ? num(*reduction_pct) : "undefined");
    kv.set("similarity", num(similarity));
    kv.set("fluency_nll", num(fluency_nll));
    return kv;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"system", system},         {"sentences", sentences}, {"bleu", bleu},
                     {"chrf", chrf},             {"etox_count", etox_count},
                     {"similarity", similarity}, {"fluency_nll", fluency_nll}};
    j["reduction_pct"] = reduction_pct ? nlohmann::json(*reduction_pct) : nlohmann::json(nullptr);
    j["detoxify"] = detoxify ? nlohmann::json(*detoxify) : nlohmann::json(nullptr);
    return j;
  }
};

// Scores `hypotheses` for `sources` against clean `references`. Similarity
// and fluency are averaged over sentences; empty hypotheses get similarity 0.
inline MetricReport evaluate_system(const std::string& system, const std::vector<std::string>& sources,
                                    const std::vector<std::string>& hypotheses,
                                    const std::vector<std::string>& references,
                                    const ToxicityLexicon& lex, const Vocabulary& vocab,
                                    const ModelParams* p,
                                    std::optional<std::size_t> baseline_etox = std::nullopt) {
  detail::check_pairs(hypotheses.size(), references.size(), "evaluate");
  if (sources.size() != hypotheses.size())
    throw ContractError("evaluate: source and hypothesis counts differ");
  MetricReport r;
  r.system = system;
  r.sentences = hypotheses.size();
  r.bleu = bleu(hypotheses, references);
  r.chrf = chrf(hypotheses, references);
  r.etox_count = etox_count(hypotheses, lex).count;
  if (baseline_etox) r.reduction_pct = reduction(*baseline_etox, r.etox_count);
  if (p) {
    double sim = 0, nll = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
      const auto src = vocab.encode(sources[i]);
      const auto hyp = vocab.encode(hypotheses[i]);
      if (!hyp.empty()) sim += similarity_proxy(src, hyp, *p);
      nll += fluency_nll(hyp, src, *p);
    }
    r.similarity = sim / static_cast<double>(hypotheses.size());
    r.fluency_nll = nll / static_cast<double>(hypotheses.size());
  }
  return r;
}

inline void write_report(const std::vector<MetricReport>& reports, const std::string& text_path,
                         const std::string& jsonl_path) {
  std::ofstream text(text_path, std::ios::trunc);
  if (!text) throw IoError("cannot write report " + text_path);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (i) text << '\n';
    text << "[" << reports[i].system << "]\n" << reports[i].to_kv().to_string();
  }
  std::ofstream lines(jsonl_path, std::ios::trunc);
  if (!lines) throw IoError("cannot write report " + jsonl_path);
  for (const auto& r : reports) lines << r.to_json().dump() << '\n';
}

}  // namespace resetox
