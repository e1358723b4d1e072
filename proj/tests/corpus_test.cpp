#include <gtest/gtest.h>

#include <fstream>

#include "resetox/corpus.hpp"
#include "resetox/metrics.hpp"
#include "test_util.hpp"

using namespace resetox;
using namespace resetox::testing;

namespace {

CorpusSpec spec(double rate, std::size_t n = 400, std::uint64_t seed = 3) {
  CorpusSpec s;
  s.n_pairs = n;
  s.n_heldout = 50;
  s.toxic_rate = rate;
  s.seed = seed;
  return s;
}

std::vector<std::string> targets(const Corpus& c) {
  std::vector<std::string> out;
  for (const auto& p : c.train) out.push_back(p.pair.tgt);
  return out;
}

}  // namespace

TEST(Generate, ZeroRateCorruptsNothing) {
  const auto c = generate(spec(0.0));
  EXPECT_EQ(c.corrupted(), 0u);
  EXPECT_EQ(etox_count(targets(c), toy_lexicon(spec(0).grammar)).count, 0u);
}

TEST(Generate, FullRateMakesEveryTargetToxic) {
  const auto c = generate(spec(1.0));
  EXPECT_EQ(c.corrupted(), c.train.size());
  EXPECT_EQ(etox_count(targets(c), toy_lexicon(spec(1).grammar)).count, c.train.size());
}

TEST(Generate, ExactCorruptionCount) {
  for (double rate : {0.1, 0.3, 0.55}) {
    for (std::size_t n : {1u, 7u, 333u}) {
      const auto c = generate(spec(rate, n));
      EXPECT_EQ(c.corrupted(), static_cast<std::size_t>(std::llround(rate * double(n)))) << rate << " " << n;
    }
  }
}

TEST(Generate, BothCorruptionKindsOccur) {
  const auto c = generate(spec(0.3, 1000));
  std::size_t sub = 0, ins = 0;
  for (const auto& p : c.train) {
    sub += p.corruption == Corruption::kSubstitute;
    ins += p.corruption == Corruption::kAppend;
    if (p.corruption == Corruption::kNone) {
      EXPECT_EQ(p.pair.tgt, p.clean_tgt);
    }
  }
  EXPECT_GT(sub, 0u);
  EXPECT_GT(ins, 0u);
}

TEST(Generate, SameSeedSameCorpus) {
  const auto a = generate(spec(0.3)), b = generate(spec(0.3)), c = generate(spec(0.3, 400, 4));
  EXPECT_EQ(a.train_pairs(), b.train_pairs());
  EXPECT_EQ(a.heldout, b.heldout);
  EXPECT_NE(a.train_pairs(), c.train_pairs());
}

TEST(Generate, ToxicityIsTargetOnly) {
  const auto c = generate(spec(1.0));
  const auto lex = toy_lexicon(spec(1).grammar);
  std::vector<std::string> sources, held_src, held_tgt;
  for (const auto& p : c.train) sources.push_back(p.pair.src);
  for (const auto& p : c.heldout) {
    held_src.push_back(p.src);
    held_tgt.push_back(p.tgt);
  }
  EXPECT_EQ(etox_count(sources, lex).count, 0u);
  EXPECT_EQ(etox_count(held_src, lex).count, 0u);
  EXPECT_EQ(etox_count(held_tgt, lex).count, 0u);
}

TEST(Generate, InvalidSpecsAreContractErrors) {
  auto s = spec(1.5);
  EXPECT_THROW(generate(s), ContractError);
  s = spec(0.2);
  s.grammar.toxic_words.clear();
  EXPECT_THROW(generate(s), ContractError);
  s = spec(0.0);
  s.grammar.toxic_words.clear();
  EXPECT_NO_THROW(generate(s));
  s.grammar.frames.clear();
  EXPECT_THROW(generate(s), ContractError);
}

TEST(Jsonl, RoundTrip) {
  const auto dir = scratch_dir("jsonl_roundtrip");
  const auto pairs = generate(spec(0.3, 1000)).train_pairs();
  save_jsonl(pairs, (dir / "c.jsonl").string());
  EXPECT_EQ(load_jsonl((dir / "c.jsonl").string()), pairs);
}

TEST(Jsonl, EmptyFileIsEmptyCorpus) {
  const auto dir = scratch_dir("jsonl_empty");
  std::ofstream(dir / "e.jsonl").close();
  EXPECT_TRUE(load_jsonl((dir / "e.jsonl").string()).empty());
}

TEST(Jsonl, MissingFieldNamesTheLine) {
  const auto dir = scratch_dir("jsonl_bad");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"src": "a", "tgt": "b"})" << '\n' << R"({"src": "c"})" << '\n';
  }
  try {
    load_jsonl((dir / "bad.jsonl").string());
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("tgt"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_jsonl((dir / "absent.jsonl").string()), IoError);
}

TEST(ToyVocabulary, CoversEveryCorpusWord) {
  const auto g = TemplateGrammar::toy();
  const auto v = toy_vocabulary(g, 256);
  EXPECT_EQ(v.size(), 256u);
  for (const auto& p : generate(spec(0.5)).train_pairs())
    for (const auto& s : {p.src, p.tgt})
      for (TokenId id : v.encode(s)) EXPECT_NE(id, special::kUnk) << s;
  EXPECT_THROW(toy_vocabulary(g, 10), ContractError);
}

TEST(ToyLexicon, ToxicWordsAreDisjointFromCleanWords) {
  const auto g = TemplateGrammar::toy();
  const auto lex = toy_lexicon(g);
  EXPECT_EQ(lex.size(), 16u);
  for (const auto& d : g.descriptors) EXPECT_FALSE(lex.contains(d.tgt));
  for (const auto& n : g.nouns) EXPECT_FALSE(lex.contains(n.tgt));
}
