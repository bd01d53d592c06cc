#include <gtest/gtest.h>

#include <sstream>

#include "kdmt/error.hpp"
#include "kdmt/eval.hpp"
#include "support/oracles.hpp"

namespace kdmt {
namespace {

std::vector<TokenSeq> split_all(const std::vector<std::string>& lines) {
  std::vector<TokenSeq> out;
  for (const auto& l : lines) {
    std::istringstream in(l);
    TokenSeq toks;
    for (std::string t; in >> t;) toks.push_back(t);
    out.push_back(toks);
  }
  return out;
}

class MetricOracle : public ::testing::TestWithParam<oracle::MetricExample> {};

TEST_P(MetricOracle, MatchesHandComputedScores) {
  const auto& ex = GetParam();
  if (ex.bleu) {
    const auto r = bleu4_corpus(split_all(ex.hyps), split_all(ex.refs));
    EXPECT_NEAR(r.score, *ex.bleu, 1e-9);
  }
  if (ex.chrf) EXPECT_NEAR(chrf_corpus(ex.hyps, ex.refs).score, *ex.chrf, 1e-9);
}

INSTANTIATE_TEST_SUITE_P(HandExamples, MetricOracle,
                         ::testing::ValuesIn(oracle::metric_examples()),
                         [](const auto& info) { return info.param.name; });

TEST(Bleu, ClippedUnigramPrecision) {
  const auto r = bleu4_corpus(split_all({"the the the the the the the"}),
                              split_all({"the cat is on the mat"}));
  EXPECT_EQ(r.matches[0], 2u);
  EXPECT_EQ(r.totals[0], 7u);
  EXPECT_EQ(r.score, 0.0);
}

TEST(Metrics, IdenticalCorpusScoresExactlyOneHundred) {
  const std::vector<std::string> lines = {"w1 w2 w3 w4 w5", "w9 w8 w7 w6",
                                          "a b c d e f g"};
  EXPECT_EQ(bleu4_corpus(split_all(lines), split_all(lines)).score, 100.0);
  EXPECT_EQ(chrf_corpus(lines, lines).score, 100.0);
}

TEST(Metrics, MisalignedOrEmptyCorporaAreContractViolations) {
  EXPECT_THROW(bleu4_corpus(split_all({"a"}), split_all({"a", "b"})), ContractError);
  EXPECT_THROW(bleu4_corpus({}, {}), ContractError);
  const std::vector<std::string> one = {"a"}, two = {"a", "b"};
  EXPECT_THROW(chrf_corpus(one, two), ContractError);
}

TEST(Metrics, ReportSerializations) {
  MetricReport r;
  r.bleu = bleu4_corpus(split_all({"a b c d"}), split_all({"a b c d"}));
  const std::vector<std::string> s = {"abcd"};
  r.chrf = chrf_corpus(s, s);
  r.sentences = 1;
  EXPECT_EQ(r.to_tsv().substr(0, 13), "metric\tvalue\n");
  EXPECT_NE(r.to_tsv().find("bleu\t100\n"), std::string::npos);
  EXPECT_NE(r.to_text().find("chrF"), std::string::npos);
}

TEST(Decoding, BeamOfOneIsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    EXPECT_TRUE(oracle::beam1_matches_greedy(seed)) << seed;
}

TEST(Decoding, NeverEmitsPadOrBos) {
  const Seq2SeqModel m(oracle::tiny_model_config(12), 4);
  const IdSeq src = {5, 6, 7, kEosId};
  for (std::size_t k : {1u, 3u, 5u}) {
    BeamConfig bc;
    bc.beam_size = k;
    const Hypothesis h = beam_search(m, src, bc);
    ASSERT_FALSE(h.tokens.empty());
    EXPECT_EQ(h.tokens.front(), kBosId);
    for (std::size_t i = 1; i < h.tokens.size(); ++i) {
      EXPECT_NE(h.tokens[i], kPadId);
      EXPECT_NE(h.tokens[i], kBosId);
    }
    EXPECT_LE(h.length(), 2 * 4 + 10u);
  }
}

TEST(Decoding, WiderBeamsScoreAtLeastAsWellOnTheseModels) {
  int better_or_equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Seq2SeqModel m(oracle::tiny_model_config(12), seed);
    const IdSeq src = {5, 6, 7, 8, kEosId};
    BeamConfig one;
    one.beam_size = 1;
    const Hypothesis g = beam_search(m, src, one);
    const Hypothesis b = beam_search(m, src);
    if (!g.finished || b.score() >= g.score()) ++better_or_equal;
  }
  EXPECT_GE(better_or_equal, 18);
}

TEST(Decoding, ZeroBeamIsAConfigError) {
  const Seq2SeqModel m(oracle::tiny_model_config(12), 4);
  BeamConfig bc;
  bc.beam_size = 0;
  EXPECT_THROW(beam_search(m, {5, kEosId}, bc), ConfigError);
}

TEST(Decoding, EvaluateRejectsAForeignVocabulary) {
  const Checkpoint c = oracle::random_checkpoint(1, 1);
  const ParallelCorpus wrong = oracle::tiny_corpus(3, 20, 1);
  EXPECT_THROW(evaluate_checkpoint(c, wrong), ConfigError);
}

TEST(Decoding, TranslationsEndWithEos) {
  const Seq2SeqModel m(oracle::tiny_model_config(16), 2);
  const ParallelCorpus corpus = oracle::tiny_corpus(4, 16, 1);
  for (const IdSeq& out : translate_corpus(m, corpus)) {
    ASSERT_FALSE(out.empty());
    EXPECT_EQ(out.back(), kEosId);
    EXPECT_NE(out.front(), kBosId);
  }
}

}  // namespace
}  // namespace kdmt
