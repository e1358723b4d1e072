#pragma once

// Beam search over cached decoder contexts, with an optional guidance pass
// that re-learns the caches of a step when toxicity is detected and redoes
// that step before beam selection.

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "resetox/errors.hpp"
#include "resetox/guidance.hpp"
#include "resetox/lexicon.hpp"
#include "resetox/model.hpp"

namespace resetox {

struct BeamConfig {
  std::size_t beam_size = 5;
  std::size_t max_len = 100;
  bool length_normalize = false;
};

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // generated ids, eos included when finished
  double log_score = 0.0;
  DecoderContext ctx;
  bool finished = false;  // ended in eos; false for hypotheses cut at max_len
};

// Cost counters: n decode steps, m redo steps, classifier calls, and every
// decode_step invocation (including redos).
struct DecodeAccounting {
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t classifier_calls = 0;
  std::size_t wall_steps = 0;

  DecodeAccounting& operator+=(const DecodeAccounting& o) {
    n += o.n;
    m += o.m;
    classifier_calls += o.classifier_calls;
    wall_steps += o.wall_steps;
    return *this;
  }
  bool operator==(const DecodeAccounting&) const = default;
};

struct GuidanceEvent {
  std::size_t step = 0;
  std::size_t hypothesis = 0;
  bool triggered = false;
  bool updated = false;
  double loss_total = 0.0;
  double loss_mitigation = 0.0;
  double loss_faithfulness = 0.0;
  double grad_norm = 0.0;
  TokenId chosen_before = 0;  // argmax of o
  TokenId chosen_after = 0;   // argmax of o_hat (equal to before when not updated)
  std::string warning;
};

struct DecodeResult {
  BeamHypothesis best;
  std::vector<BeamHypothesis> finals;
  std::vector<GuidanceEvent> events;
  DecodeAccounting accounting;
};

namespace detail {

inline TokenId argmax(std::span<const double> v) {
  return static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct Candidate {
  double score;
  TokenId token;
  std::size_t hypothesis;
};

// Higher score first; ties to the lower token id, then lower hypothesis.
inline bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.token != b.token) return a.token < b.token;
  return a.hypothesis < b.hypothesis;
}

inline double final_score(const BeamHypothesis& h, bool normalize) {
  return normalize ? h.log_score / static_cast<double>(std::max<std::size_t>(1, h.tokens.size()))
                   : h.log_score;
}

inline DecodeResult run_beam(std::span<const TokenId> src, const ModelParams& p,
                             const BeamConfig& beam, const ToxicityScorer* scorer,
                             const GuidanceConfig* guidance) {
  if (beam.beam_size < 1) throw ContractError("beam_search: beam size must be >= 1");
  if (beam.max_len < 1 || beam.max_len > p.config.max_len)
    throw ContractError("beam_search: max_len must lie in [1, model max_len]");
  if (guidance) guidance->validate(p.config.vocab_size);
  const std::size_t k = beam.beam_size;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  DecodeResult result;
  auto& acct = result.accounting;
  EncodedSource enc = encode(src, p);

  // k slots from the start; all but the first are unreachable, which keeps
  // the per-step cost at exactly k decode calls.
  std::vector<BeamHypothesis> live(k);
  for (std::size_t h = 0; h < k; ++h) {
    live[h].ctx = enc.context;
    live[h].log_score = h == 0 ? 0.0 : neg_inf;
  }
  std::vector<BeamHypothesis> finished;
  bool stopped = false;

  for (std::size_t step = 0; step < beam.max_len && !live.empty(); ++step) {
    std::vector<NextTokenDistribution> dists(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      const TokenId prev = live[h].tokens.empty() ? special::kBos : live[h].tokens.back();
      dists[h] = decode_step(prev, live[h].ctx, p);
      ++acct.wall_steps;
    }
    ++acct.n;

    if (guidance) {
      std::vector<std::vector<TokenId>> prefixes;
      std::vector<const NextTokenDistribution*> ptrs;
      for (std::size_t h = 0; h < live.size(); ++h) {
        prefixes.push_back(live[h].tokens);
        ptrs.push_back(&dists[h]);
      }
      const TriggerDecision decision = should_trigger(prefixes, ptrs, *scorer, *guidance);
      acct.classifier_calls += decision.classifier_calls;
      if (decision.triggered) ++acct.m;
      // Redone hypotheses share one objective and one update. Unreachable
      // slots are redone too (keeping the per-step cost at k) but do not
      // contribute to the objective.
      std::vector<std::size_t> redo;
      for (std::size_t h = 0; h < live.size(); ++h)
        if (decision.triggered && (!guidance->per_hypothesis_trigger || decision.flagged[h]))
          redo.push_back(h);
      std::vector<GuidedHypothesis> joint;
      std::vector<std::size_t> joint_index(live.size(), SIZE_MAX);
      std::vector<std::optional<DecoderContext>> saved(live.size());
      for (std::size_t h : redo) {
        if (guidance->restore_after_step) saved[h] = live[h].ctx;
        if (live[h].log_score == neg_inf) continue;
        const TokenId current = live[h].tokens.empty() ? special::kBos : live[h].tokens.back();
        joint_index[h] = joint.size();
        joint.push_back({current, &live[h].ctx, &dists[h], decision.candidates[h], decision.tc[h]});
      }
      const auto outcomes = guided_update(p, joint, *guidance);
      for (std::size_t h = 0; h < live.size(); ++h) {
        GuidanceEvent ev;
        ev.step = step;
        ev.hypothesis = h;
        ev.chosen_before = argmax(dists[h].probs);
        ev.chosen_after = ev.chosen_before;
        if (std::find(redo.begin(), redo.end(), h) != redo.end()) {
          ev.triggered = true;
          ++acct.wall_steps;
          if (joint_index[h] != SIZE_MAX) {
            const auto& out = outcomes[joint_index[h]];
            ev.updated = out.updated;
            ev.loss_total = out.loss_total;
            ev.loss_mitigation = out.loss_mitigation;
            ev.loss_faithfulness = out.loss_faithfulness;
            ev.grad_norm = out.grad_norm;
            ev.warning = out.warning;
            ev.chosen_after = argmax(out.o_after.probs);
            dists[h] = out.o_after;
          } else {
            const TokenId current = live[h].tokens.empty() ? special::kBos : live[h].tokens.back();
            dists[h] = rescore_step(current, live[h].ctx, p);
          }
          if (saved[h]) live[h].ctx = std::move(*saved[h]);
        }
        result.events.push_back(std::move(ev));
      }
    }

    // Best 2k candidates, gathered per hypothesis then merged.
    std::vector<Candidate> pool;
    pool.reserve(live.size() * 2 * k);
    for (std::size_t h = 0; h < live.size(); ++h) {
      if (live[h].log_score == neg_inf) continue;
      const auto& lp = dists[h].log_probs;
      std::vector<Candidate> local;
      local.reserve(lp.size());
      for (TokenId v = 0; v < lp.size(); ++v) local.push_back({live[h].log_score + lp[v], v, h});
      const std::size_t keep = std::min(local.size(), 2 * k);
      std::partial_sort(local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep),
                        local.end(), candidate_before);
      pool.insert(pool.end(), local.begin(), local.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    std::sort(pool.begin(), pool.end(), candidate_before);
    if (pool.size() > 2 * k) pool.resize(2 * k);

    std::vector<BeamHypothesis> next;
    for (std::size_t rank = 0; rank < pool.size() && next.size() < k; ++rank) {
      const auto& c = pool[rank];
      if (c.score == neg_inf) break;
      if (c.token == special::kEos) {
        if (rank < k) {
          BeamHypothesis done;
          done.tokens = live[c.hypothesis].tokens;
          done.tokens.push_back(c.token);
          done.log_score = c.score;
          done.finished = true;
          finished.push_back(std::move(done));
        }
        continue;
      }
      BeamHypothesis h;
      h.tokens = live[c.hypothesis].tokens;
      h.tokens.push_back(c.token);
      h.log_score = c.score;
      h.ctx = live[c.hypothesis].ctx;
      next.push_back(std::move(h));
    }
    live = std::move(next);

    // Unnormalized scores only decrease with length, so once the best
    // finished hypothesis beats every live one the search is exact. With
    // length normalization that bound does not hold; stop at k finished.
    if (beam.length_normalize) {
      if (finished.size() >= k) {
        stopped = true;
        break;
      }
    } else if (!finished.empty()) {
      double best_done = neg_inf;
      for (const auto& f : finished) best_done = std::max(best_done, f.log_score);
      if (live.empty() || best_done >= live.front().log_score) {
        stopped = true;
        break;
      }
    }
  }

  // Hypotheses cut at max_len compete as unfinished.
  if (!stopped)
    for (auto& h : live) {
      if (h.log_score == neg_inf) continue;
      h.finished = false;
      finished.push_back(std::move(h));
    }
  if (finished.empty()) throw ContractError("beam_search: no hypothesis survived");
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (final_score(finished[i], beam.length_normalize) >
        final_score(finished[best], beam.length_normalize))
      best = i;
  result.best = finished[best];
  result.finals = std::move(finished);
  return result;
}

}  // namespace detail

inline DecodeResult beam_search(std::span<const TokenId> src, const ModelParams& p,
                                const BeamConfig& beam) {
  return detail::run_beam(src, p, beam, nullptr, nullptr);
}

inline DecodeResult resetox_decode(std::span<const TokenId> src, const ModelParams& p,
                                   const BeamConfig& beam, const ToxicityScorer& scorer,
                                   const GuidanceConfig& cfg) {
  return detail::run_beam(src, p, beam, &scorer, &cfg);
}

struct SentenceResult {
  std::optional<DecodeResult> decoded;
  std::string error;  // non-empty when the sentence failed
};

struct CorpusResult {
  std::vector<SentenceResult> sentences;
  DecodeAccounting accounting;
  std::size_t failures = 0;
};

// Decodes each source independently; failures are recorded per sentence.
// `guidance` null means plain beam search. Output order follows input order
// for any thread count.
inline CorpusResult translate_corpus(const std::vector<std::vector<TokenId>>& sources,
                                     const ModelParams& p, const BeamConfig& beam,
                                     const ToxicityScorer* scorer, const GuidanceConfig* guidance,
                                     std::size_t threads = 1) {
  if (guidance && !scorer) throw ContractError("translate_corpus: guidance needs a scorer");
  CorpusResult out;
  out.sentences.resize(sources.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < sources.size(); i += stride) {
      try {
        out.sentences[i].decoded = detail::run_beam(sources[i], p, beam, scorer, guidance);
      } catch (const std::exception& e) {
        out.sentences[i].error = e.what();
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, sources.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  for (const auto& s : out.sentences) {
    if (s.decoded)
      out.accounting += s.decoded->accounting;
    else
      ++out.failures;
  }
  return out;
}

}  // namespace resetox
