#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "resetox/lexicon.hpp"
#include "resetox/vocabulary.hpp"
#include "test_util.hpp"

using namespace resetox;

namespace {

ToxicityLexicon parse(const std::string& text, bool fold = true) {
  std::istringstream in(text);
  return parse_lexicon(in, "fra_Test", fold, "test.txt");
}

}  // namespace

TEST(LoadLexicon, CommentsAreSkipped) {
  const auto lex = parse("putain\n# comment\nmerde\n");
  EXPECT_EQ(lex.size(), 2u);
  EXPECT_TRUE(lex.contains("putain"));
  EXPECT_TRUE(lex.contains("merde"));
}

TEST(LoadLexicon, DuplicatesCollapse) {
  EXPECT_EQ(parse("merde\nmerde\nMERDE\n").size(), 1u);
}

TEST(LoadLexicon, MultiwordLineNamesTheLine) {
  try {
    parse("merde\ncon artist\n");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("test.txt:2"), std::string::npos) << e.what();
  }
}

TEST(LoadLexicon, EmptyEffectiveLexiconIsAnError) {
  EXPECT_THROW(parse("# only a comment\n\n"), FormatError);
}

TEST(LoadLexicon, ReadsFromDiskAndReportsMissingFile) {
  const auto dir = resetox::testing::scratch_dir("lexicon");
  {
    std::ofstream out(dir / "lex.txt");
    out << "putain\r\nmerde\n";
  }
  EXPECT_EQ(load_lexicon((dir / "lex.txt").string()).size(), 2u);
  EXPECT_THROW(load_lexicon((dir / "missing.txt").string()), IoError);
}

TEST(LoadLexicon, CaseFoldingCanBeDisabled) {
  const auto lex = parse("Merde\n", false);
  EXPECT_TRUE(lex.contains("Merde"));
  EXPECT_FALSE(lex.contains("merde"));
  EXPECT_TRUE(parse("Merde\n").contains("MERDE"));
}

TEST(TcScore, ToxicWordInSentence) {
  const auto lex = parse("putain\n");
  const auto s = tc_score_text("J'ai un ami qui est un gars putain .", lex);
  EXPECT_EQ(s.tc, 1.0);
  ASSERT_EQ(s.matches.size(), 1u);
  EXPECT_EQ(s.matches[0].entry, "putain");
  EXPECT_EQ(s.matches[0].word_index, 7u);
}

TEST(TcScore, CleanSentenceScoresZero) {
  const auto s = tc_score_text("J'ai un ami qui est un gars sympa .", parse("putain\nmerde\n"));
  EXPECT_EQ(s.tc, 0.0);
  EXPECT_TRUE(s.matches.empty());
}

TEST(TcScore, WholeTokenMatchingOnly) {
  const auto lex = parse("ass\n");
  EXPECT_EQ(tc_score_text("a class of glass", lex).tc, 0.0);
  EXPECT_EQ(tc_score_text("what an ass!", lex).tc, 1.0);
}

TEST(TcScore, GradedModeCountsMatches) {
  const auto lex = parse("a\nb\n");
  EXPECT_NEAR(tc_score_text("a x b", lex, TcMode::kGraded).tc, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(tc_score_text("a a b b", lex, TcMode::kGraded).tc, 1.0);
}

class ContinuationTest : public ::testing::Test {
 protected:
  Vocabulary vocab{std::vector<std::string>{"soy", "un", "amigo", "putain", "put@@", "ain", "aine"}};
  ToxicityLexicon lex = parse("putain\n");
  LexiconScorer scorer{lex, vocab};
};

TEST_F(ContinuationTest, AllCleanGivesZeros) {
  const std::vector<TokenId> prefix{vocab.id("soy")};
  const std::vector<TokenId> cands{vocab.id("un"), vocab.id("amigo")};
  EXPECT_EQ(score_continuations(prefix, cands, scorer), (std::vector<double>{0, 0}));
}

TEST_F(ContinuationTest, OneToxicCandidateIsOneHot) {
  const std::vector<TokenId> prefix{vocab.id("soy"), vocab.id("un")};
  const std::vector<TokenId> cands{vocab.id("amigo"), vocab.id("putain"), vocab.id("un")};
  EXPECT_EQ(score_continuations(prefix, cands, scorer), (std::vector<double>{0, 1, 0}));
}

TEST_F(ContinuationTest, SubwordCompletionIsScoredAfterDetokenizing) {
  const std::vector<TokenId> prefix{vocab.id("soy"), vocab.id("put@@")};
  const std::vector<TokenId> cands{vocab.id("aine"), vocab.id("ain")};
  EXPECT_EQ(score_continuations(prefix, cands, scorer), (std::vector<double>{0, 1}));
}

TEST_F(ContinuationTest, EmptyCandidateListIsContractError) {
  EXPECT_THROW(score_continuations(std::vector<TokenId>{}, std::vector<TokenId>{}, scorer), ContractError);
}

TEST_F(ContinuationTest, SoftScorerIsGradedAndBounded) {
  SoftLexiconScorer soft(lex, vocab);
  const TokenId p = vocab.id("putain");
  EXPECT_EQ(soft.score(std::vector<TokenId>{vocab.id("soy")}), 0.0);
  const double one = soft.score(std::vector<TokenId>{p});
  const double two = soft.score(std::vector<TokenId>{p, p});
  EXPECT_GT(one, 0.0);
  EXPECT_GT(two, one);
  EXPECT_LT(two, 1.0);
}

TEST(ConstantScorer, RejectsOutOfRangeValues) {
  EXPECT_THROW(ConstantScorer(1.5), ContractError);
  EXPECT_EQ(ConstantScorer(0.25).score(std::vector<TokenId>{1, 2}), 0.25);
}

TEST(Vocabulary, EncodeDecodeRoundTrip) {
  Vocabulary v(std::vector<std::string>{"hola", "amigo", "."});
  const auto ids = v.encode("hola amigo .");
  EXPECT_EQ(v.decode(ids), "hola amigo .");
  EXPECT_EQ(v.encode("adios")[0], special::kUnk);
}

TEST(Vocabulary, DuplicateTokensAreRejected) {
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"a", "a"}), ContractError);
}
