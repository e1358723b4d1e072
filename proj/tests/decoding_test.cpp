#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>

#include "resetox/decoding.hpp"
#include "resetox/experiment.hpp"
#include "resetox/training.hpp"
#include "test_util.hpp"

using namespace resetox;
using namespace resetox::testing;

namespace {

const Fixture& fixture() {
  static const Fixture fx = Fixture::load(fixture_dir());
  return fx;
}

std::vector<std::vector<TokenId>> fixture_sources(std::size_t count) {
  const auto& fx = fixture();
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < count && i < fx.heldout.size(); ++i) out.push_back(fx.vocab.encode(fx.heldout[i].src));
  return out;
}

struct Best {
  double score = -std::numeric_limits<double>::infinity();
  std::vector<TokenId> tokens;
};

// Exhaustive search over every sequence the decoder can emit within max_len.
void enumerate(const ModelParams& p, const DecoderContext& ctx, TokenId prev, std::vector<TokenId>& prefix,
               double score, std::size_t max_len, Best& best) {
  DecoderContext c = ctx;
  const auto d = decode_step(prev, c, p);
  for (TokenId v = 0; v < d.log_probs.size(); ++v) {
    const double s = score + d.log_probs[v];
    prefix.push_back(v);
    if (v == special::kEos || prefix.size() == max_len) {
      if (s > best.score) best = {s, prefix};
    } else {
      enumerate(p, c, v, prefix, s, max_len, best);
    }
    prefix.pop_back();
  }
}

}  // namespace

TEST(BeamSearch, BeamOfOneIsGreedy) {
  const auto& fx = fixture();
  for (const auto& src : fixture_sources(10)) {
    const auto r = beam_search(src, fx.params, {1, 100, false});
    auto tokens = r.best.tokens;
    if (r.best.finished) tokens.pop_back();
    EXPECT_EQ(tokens, greedy_decode(src, fx.params, 100));
  }
}

TEST(BeamSearch, OutputsRespectMaxLen) {
  const auto p = ModelParams::initialize(tiny_config(), 3);
  std::mt19937_64 rng(4);
  for (std::size_t max_len : {1u, 3u, 7u}) {
    const auto r = beam_search(random_tokens(rng, 5, 16), p, {5, max_len, false});
    for (const auto& h : r.finals) {
      EXPECT_LE(h.tokens.size(), max_len);
      if (h.finished) {
        EXPECT_EQ(h.tokens.back(), special::kEos);
      }
    }
  }
}

TEST(BeamSearch, WideBeamFindsGlobalArgmax) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ModelConfig c = tiny_config(6);
    const auto p = ModelParams::initialize(c, seed);
    std::mt19937_64 rng(seed);
    const auto src = random_tokens(rng, 3, 6);
    const std::size_t max_len = 4;
    Best best;
    std::vector<TokenId> prefix;
    enumerate(p, encode(src, p).context, special::kBos, prefix, 0.0, max_len, best);
    const auto r = beam_search(src, p, {6 * 6 * 6 * 6, max_len, false});
    EXPECT_EQ(r.best.tokens, best.tokens) << seed;
    EXPECT_NEAR(r.best.log_score, best.score, 1e-9) << seed;
  }
}

TEST(BeamSearch, WiderBeamScoresAtLeastAsWell) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto p = ModelParams::initialize(tiny_config(5), seed);
    std::mt19937_64 rng(seed);
    const auto src = random_tokens(rng, 3, 5);
    const auto one = beam_search(src, p, {1, 4, false});
    const auto three = beam_search(src, p, {3, 4, false});
    EXPECT_GE(three.best.log_score, one.best.log_score) << seed;
  }
}

TEST(BeamSearch, ScoresAreSumsOfStepLogProbs) {
  const auto& fx = fixture();
  const auto src = fixture_sources(1).front();
  const auto r = beam_search(src, fx.params, {5, 100, false});
  for (const auto& h : r.finals) {
    DecoderContext ctx = encode(src, fx.params).context;
    TokenId prev = special::kBos;
    double total = 0;
    for (TokenId t : h.tokens) {
      total += decode_step(prev, ctx, fx.params).log_probs[t];
      prev = t;
    }
    EXPECT_NEAR(total, h.log_score, 1e-9);
  }
}

TEST(BeamSearch, LengthNormalizationPicksBestPerTokenScore) {
  const auto p = ModelParams::initialize(tiny_config(), 5);
  std::mt19937_64 rng(6);
  const auto r = beam_search(random_tokens(rng, 4, 16), p, {4, 12, true});
  for (const auto& h : r.finals)
    EXPECT_GE(r.best.log_score / double(r.best.tokens.size()), h.log_score / double(h.tokens.size()));
}

TEST(BeamSearch, InvalidSettingsAreContractErrors) {
  const auto p = ModelParams::initialize(tiny_config(), 1);
  const std::vector<TokenId> src{4, 5};
  EXPECT_THROW(beam_search(src, p, {0, 10, false}), ContractError);
  EXPECT_THROW(beam_search(src, p, {2, 101, false}), ContractError);
}

TEST(ResetoxDecode, CleanScorerMatchesBeamSearchExactly) {
  const auto& fx = fixture();
  ConstantScorer clean(0.0);
  GuidanceConfig cfg;
  for (const auto& src : fixture_sources(5)) {
    const auto plain = beam_search(src, fx.params, {5, 100, false});
    const auto guided = resetox_decode(src, fx.params, {5, 100, false}, clean, cfg);
    EXPECT_EQ(guided.best.tokens, plain.best.tokens);
    EXPECT_EQ(guided.best.log_score, plain.best.log_score);
    EXPECT_EQ(guided.accounting.m, 0u);
  }
}

// A step where the top continuation is toxic before the update and the
// re-scored distribution prefers a clean token.
TEST(ResetoxDecode, ToxicTopCandidateIsDemoted) {
  const auto& fx = fixture();
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  GuidanceConfig cfg;
  bool seen = false;
  for (const auto& src : fixture_sources(40)) {
    const auto r = resetox_decode(src, fx.params, {5, 100, false}, scorer, cfg);
    for (const auto& e : r.events) {
      if (!e.updated) continue;
      const bool before_toxic = fx.lexicon.contains(fx.vocab.token(e.chosen_before));
      const bool after_toxic = fx.lexicon.contains(fx.vocab.token(e.chosen_after));
      if (before_toxic && !after_toxic) seen = true;
    }
    if (seen) break;
  }
  EXPECT_TRUE(seen);
}

// Round-off in the cross-attention gradient must not produce a step.
TEST(ResetoxDecode, AlphaZeroMatchesBeamSearch) {
  const auto& fx = fixture();
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  GuidanceConfig cfg;
  cfg.alpha = 0.0;
  cfg.update_target = UpdateTarget::kBoth;
  const auto sources = fixture_sources(40);
  const auto plain = translate_corpus(sources, fx.params, {5, 100, false}, nullptr, nullptr);
  const auto guided = translate_corpus(sources, fx.params, {5, 100, false}, &scorer, &cfg);
  for (std::size_t i = 0; i < sources.size(); ++i)
    EXPECT_EQ(guided.sentences[i].decoded->best.tokens, plain.sentences[i].decoded->best.tokens) << i;
}

TEST(ResetoxDecode, AccountingMatchesEventLog) {
  const auto& fx = fixture();
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  GuidanceConfig cfg;
  const std::size_t k = 5;
  std::size_t total_triggered = 0;
  for (const auto& src : fixture_sources(20)) {
    const auto r = resetox_decode(src, fx.params, {k, 100, false}, scorer, cfg);
    std::set<std::size_t> triggered_steps;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& e : r.events) {
      EXPECT_TRUE(seen.insert({e.step, e.hypothesis}).second) << "two events for one hypothesis step";
      if (e.triggered) triggered_steps.insert(e.step);
    }
    const auto& a = r.accounting;
    EXPECT_EQ(a.m, triggered_steps.size());
    EXPECT_LE(a.m, a.n);
    EXPECT_EQ(a.wall_steps, k * (a.n + a.m));
    EXPECT_LE(a.classifier_calls, (k * cfg.top_m + k) * a.n);
    total_triggered += a.m;
  }
  EXPECT_GT(total_triggered, 0u);
}

TEST(TranslateCorpus, EmptyInput) {
  const auto& fx = fixture();
  const auto r = translate_corpus({}, fx.params, {5, 100, false}, nullptr, nullptr, 4);
  EXPECT_TRUE(r.sentences.empty());
  EXPECT_EQ(r.accounting, DecodeAccounting{});
}

TEST(TranslateCorpus, SingleSentenceEqualsDirectCall) {
  const auto& fx = fixture();
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  GuidanceConfig cfg;
  const auto src = fixture_sources(1);
  const auto r = translate_corpus(src, fx.params, {5, 100, false}, &scorer, &cfg);
  const auto direct = resetox_decode(src[0], fx.params, {5, 100, false}, scorer, cfg);
  ASSERT_TRUE(r.sentences[0].decoded);
  EXPECT_EQ(r.sentences[0].decoded->best.tokens, direct.best.tokens);
  EXPECT_EQ(r.accounting, direct.accounting);
}

TEST(TranslateCorpus, FailuresAreRecordedPerSentence) {
  const auto& fx = fixture();
  auto sources = fixture_sources(3);
  sources[1].clear();
  const auto r = translate_corpus(sources, fx.params, {2, 100, false}, nullptr, nullptr);
  EXPECT_EQ(r.failures, 1u);
  EXPECT_FALSE(r.sentences[1].error.empty());
  EXPECT_TRUE(r.sentences[0].decoded && r.sentences[2].decoded);
}

TEST(TranslateCorpus, ConcurrentRunMatchesSequential) {
  const auto& fx = fixture();
  LexiconScorer scorer(fx.lexicon, fx.vocab);
  GuidanceConfig cfg;
  const auto sources = fixture_sources(100);
  ASSERT_EQ(sources.size(), 100u);
  const auto seq = translate_corpus(sources, fx.params, {2, 100, false}, &scorer, &cfg, 1);
  const auto par = translate_corpus(sources, fx.params, {2, 100, false}, &scorer, &cfg, 4);
  ASSERT_EQ(seq.sentences.size(), par.sentences.size());
  for (std::size_t i = 0; i < seq.sentences.size(); ++i) {
    ASSERT_TRUE(seq.sentences[i].decoded && par.sentences[i].decoded);
    EXPECT_EQ(seq.sentences[i].decoded->best.tokens, par.sentences[i].decoded->best.tokens) << i;
    EXPECT_EQ(seq.sentences[i].decoded->best.log_score, par.sentences[i].decoded->best.log_score) << i;
  }
  EXPECT_EQ(seq.accounting, par.accounting);
}
