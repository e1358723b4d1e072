#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "resetox/corpus.hpp"
#include "resetox/decoding.hpp"
#include "resetox/experiment.hpp"
#include "resetox/metrics.hpp"
#include "test_util.hpp"

using namespace resetox;
using namespace resetox::testing;

namespace {

const Fixture& fixture() {
  static const Fixture fx = Fixture::load(fixture_dir());
  return fx;
}

using Texts = std::vector<std::string>;

}  // namespace

TEST(Bleu, IdenticalCorpusScoresHundred) {
  const Texts c{"un gato negro .", "soy un amigo", "hola"};
  EXPECT_NEAR(bleu(c, c), 100.0, 1e-9);
}

TEST(Bleu, NoUnigramOverlapScoresZero) {
  EXPECT_EQ(bleu({"a b c"}, {"d e f"}), 0.0);
}

TEST(Bleu, ShortHypothesisHandValue) {
  // Every clipped precision is 1 (orders 2..4 smoothed), so only the brevity
  // penalty exp(1 - 4/3) remains.
  const double v = bleu({"the cat sat"}, {"the cat sat down"});
  EXPECT_NEAR(v, 100.0 * std::exp(1.0 - 4.0 / 3.0), 1e-9);
  EXPECT_NEAR(v, 71.6531, 1e-4);
}

TEST(Bleu, CountMismatchIsContractError) {
  EXPECT_THROW(bleu({"a", "b"}, {"a"}), ContractError);
  EXPECT_THROW(bleu({}, {}), ContractError);
}

TEST(Chrf, IdenticalAndDisjoint) {
  EXPECT_NEAR(chrf({"hola amigo"}, {"hola amigo"}), 100.0, 1e-9);
  EXPECT_EQ(chrf({"abc"}, {"xyz"}), 0.0);
}

TEST(Chrf, ThreeCharacterHandValue) {
  // orders 1..3: F = 2/3, 1/2, 0; higher orders have no n-grams.
  const double v = chrf({"abc"}, {"abd"});
  EXPECT_NEAR(v, 100.0 * 7.0 / 18.0, 1e-9);
  EXPECT_NEAR(v, 38.8889, 1e-4);
}

TEST(Chrf, WhitespaceIsIgnored) {
  EXPECT_NEAR(chrf({"ab c"}, {"a bc"}), 100.0, 1e-9);
}

TEST(Metrics, UnrelatedReferenceDoesNotRaiseScores) {
  const Texts hyp{"soy un amigo feliz .", "el perro come pan ."};
  const Texts ref{"soy un amigo feliz .", "el perro come pan ."};
  Texts worse = ref;
  worse[1] = "zzz qqq www";
  EXPECT_LE(bleu(hyp, worse), bleu(hyp, ref));
  EXPECT_LE(chrf(hyp, worse), chrf(hyp, ref));
}

TEST(Etox, CountsToxicSentences) {
  const auto lex = make_lexicon({"grelk", "tetas"});
  Texts s;
  for (int i = 0; i < 3000; ++i) s.push_back(i < 981 ? "soy un grelk ." : "soy un amigo .");
  const auto r = etox_count(s, lex);
  EXPECT_EQ(r.count, 981u);
  std::size_t flagged = 0;
  for (bool f : r.flags) flagged += f;
  EXPECT_EQ(flagged, r.count);
  EXPECT_EQ(etox_count({"hola", "soy un amigo"}, lex).count, 0u);
}

TEST(Reduction, Arithmetic) {
  EXPECT_NEAR(*reduction(981, 314), 68.0, 0.1);
  EXPECT_EQ(*reduction(50, 50), 0.0);
  EXPECT_EQ(*reduction(50, 0), 100.0);
  EXPECT_FALSE(reduction(0, 3).has_value());
}

TEST(Similarity, CosineCore) {
  const std::vector<double> x{1.0, -2.0, 0.5}, neg{-1.0, 2.0, -0.5};
  EXPECT_NEAR(cosine(x, x), 1.0, 1e-12);
  EXPECT_NEAR(cosine(x, neg), -1.0, 1e-12);
  EXPECT_THROW(cosine(x, std::vector<double>{1.0}), DimensionError);
}

TEST(Similarity, IdenticalSequencesScoreOne) {
  const auto& fx = fixture();
  const auto ids = fx.vocab.encode(fx.heldout[0].src);
  EXPECT_NEAR(similarity_proxy(ids, ids, fx.params), 1.0, 1e-9);
  EXPECT_THROW(similarity_proxy(ids, std::vector<TokenId>{}, fx.params), ContractError);
}

TEST(Similarity, ReferencePairsBeatShuffledPairs) {
  const auto& fx = fixture();
  const auto& h = fx.heldout;
  double aligned = 0, shuffled = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto src = fx.vocab.encode(h[i].src);
    aligned += similarity_proxy(src, fx.vocab.encode(h[i].tgt), fx.params);
    shuffled += similarity_proxy(src, fx.vocab.encode(h[(i + 7) % h.size()].tgt), fx.params);
  }
  EXPECT_GT(aligned, shuffled);
}

TEST(Fluency, UntrainedModelIsNearLogVocab) {
  const auto p = ModelParams::initialize(tiny_config(64), 3);
  const double nll = fluency_nll(std::vector<TokenId>{8, 9, 10}, std::vector<TokenId>{5, 6}, p);
  EXPECT_NEAR(nll, std::log(64.0), 0.1);
}

TEST(Fluency, TrainedModelPrefersRealTargets) {
  const auto& fx = fixture();
  const auto train = load_jsonl((fixture_dir() / "train.jsonl").string());
  std::mt19937_64 rng(7);
  double real = 0, scrambled = 0;
  for (std::size_t i = 0; i < 30; ++i) {
    const auto src = fx.vocab.encode(train[i].src);
    auto tgt = fx.vocab.encode(train[i].tgt);
    real += fluency_nll(tgt, src, fx.params);
    std::shuffle(tgt.begin(), tgt.end(), rng);
    scrambled += fluency_nll(tgt, src, fx.params);
  }
  EXPECT_LT(real, scrambled);
}

TEST(Fluency, Deterministic) {
  const auto& fx = fixture();
  const auto src = fx.vocab.encode(fx.heldout[0].src), tgt = fx.vocab.encode(fx.heldout[0].tgt);
  EXPECT_EQ(fluency_nll(tgt, src, fx.params), fluency_nll(tgt, src, fx.params));
}

TEST(Removal, DropsListedWordsOnly) {
  const auto lex = make_lexicon({"tetas"});
  EXPECT_EQ(remove_toxic_words("Hola soy un abuelo sin tetas", lex), "Hola soy un abuelo sin");
  EXPECT_EQ(remove_toxic_words("Hola soy un abuelo", lex), "Hola soy un abuelo");
}

// Baseline translations of the held-out set: removing words clears all
// toxicity but costs fluency.
TEST(Removal, ClearsToxicityAndRaisesNll) {
  const auto& fx = fixture();
  Texts sources, hyps;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto src = fx.vocab.encode(fx.heldout[i].src);
    auto r = beam_search(src, fx.params, {2, 100, false});
    if (r.best.finished) r.best.tokens.pop_back();
    sources.push_back(fx.heldout[i].src);
    hyps.push_back(fx.vocab.decode(r.best.tokens));
  }
  ASSERT_GT(etox_count(hyps, fx.lexicon).count, 0u);
  const auto removed = removal_baseline(hyps, fx.lexicon);
  EXPECT_EQ(etox_count(removed, fx.lexicon).count, 0u);
  const auto base = evaluate_system("baseline", sources, hyps, hyps, fx.lexicon, fx.vocab, &fx.params);
  const auto rem = evaluate_system("remove", sources, removed, hyps, fx.lexicon, fx.vocab, &fx.params);
  EXPECT_GE(rem.fluency_nll, base.fluency_nll);
}

TEST(Report, SerializesAllFields) {
  MetricReport r;
  r.system = "resetox";
  r.bleu = 50.5;
  r.chrf = 60.25;
  r.etox_count = 3;
  r.sentences = 10;
  r.reduction_pct = 40.0;
  const auto j = r.to_json();
  EXPECT_EQ(j["system"], "resetox");
  EXPECT_EQ(j["etox_count"], 3);
  EXPECT_EQ(j["reduction_pct"], 40.0);
  EXPECT_TRUE(j["detoxify"].is_null());
  const auto kv = r.to_kv();
  EXPECT_EQ(kv.get("system"), "resetox");
  EXPECT_EQ(kv.get("bleu"), "50.5000");
  r.reduction_pct.reset();
  EXPECT_EQ(r.to_kv().get("reduction_pct"), "undefined");
  EXPECT_TRUE(r.to_json()["reduction_pct"].is_null());
}
