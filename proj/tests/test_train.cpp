#include <gtest/gtest.h>

#include <cmath>

#include "kdmt/error.hpp"
#include "kdmt/synthetic.hpp"
#include "kdmt/train.hpp"
#include "support/oracles.hpp"

namespace kdmt {
namespace {

TrainConfig quick(std::uint64_t updates, TrainingMode mode = TrainingMode::decoder_only) {
  TrainConfig c;
  c.mode = mode;
  c.max_updates = updates;
  c.checkpoint_every = 5;
  c.keep_last_k = 3;
  c.batch_tokens = 128;
  c.eval_every = 0;
  return c;
}

std::vector<IdSeq> sources(const ParallelCorpus& c) {
  std::vector<IdSeq> out;
  for (const auto& p : c.pairs) out.push_back(p.src);
  return out;
}

TEST(MaskTokens, OnlyContentTokensAreSelected) {
  std::mt19937_64 rng(1);
  std::size_t selected = 0, content = 0, masked = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    const IdSeq ids = {5, 6, 7, 8, 9, 10, 11, 12, kEosId};
    const auto [input, target] = mask_tokens(ids, 0.15, 20, rng);
    EXPECT_EQ(input.back(), kEosId);
    EXPECT_EQ(target.back(), kPadId);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      ++content;
      if (target[i] == kPadId) {
        EXPECT_EQ(input[i], ids[i]);
      } else {
        EXPECT_EQ(target[i], ids[i]);
        ++selected;
        masked += input[i] == kMaskId;
      }
    }
  }
  EXPECT_NEAR(double(selected) / double(content), 0.15, 0.01);
  EXPECT_NEAR(double(masked) / double(selected), 0.8, 0.03);
}

TEST(Pretrain, HeldOutLossFallsAndDecoderStaysPut) {
  SyntheticSpec spec;
  spec.vocab_size = 16;
  spec.n_train = 120;
  spec.n_valid = 30;
  spec.n_test = 5;
  const SyntheticData d = make_synthetic_corpus(spec);
  Seq2SeqModel m(oracle::tiny_model_config(16), 2);
  const Seq2SeqModel before = m;
  TrainConfig c = quick(150, TrainingMode::joint);
  c.lr = 1e-2;
  c.eval_every = 150;
  const auto r = pretrain_encoder_mlm(m, sources(d.train), sources(d.valid), c);
  ASSERT_EQ(r.metrics.size(), 2u);
  EXPECT_LT(r.metrics.back().nll, r.metrics.front().nll - 0.3);
  EXPECT_EQ(r.averaged.stage, Stage::mlm);
  EXPECT_TRUE(m.frozen().empty());
  for (const auto& [name, np] : m.parameters())
    if (!is_encoder_group(np.group))
      EXPECT_EQ(np.param.value, before.parameter(name).value) << name;
}

TEST(Train, DecoderOnlyLeavesTheEncoderBitIdentical) {
  const ParallelCorpus corpus = oracle::tiny_corpus(40, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  const Checkpoint start = Checkpoint::from_model(m, Stage::mlm, 0);
  const auto r = train_base(m, corpus, nullptr, quick(30));
  EXPECT_TRUE(oracle::encoder_matches(start, m));
  EXPECT_TRUE(oracle::encoder_matches(start, r.averaged.to_model()));
  EXPECT_FALSE(m.same_parameters(start.to_model()));
}

TEST(Train, LossDecreasesOnTheTinyCipher) {
  const ParallelCorpus corpus = oracle::tiny_corpus(60, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  const double before = evaluate_nll(m, corpus);
  TrainConfig c = quick(120, TrainingMode::joint);
  c.lr = 1e-2;
  train(m, corpus, nullptr, c);
  EXPECT_LT(evaluate_nll(m, corpus), before - 0.5);
}

TEST(Train, RunsAreDeterministic) {
  const ParallelCorpus corpus = oracle::tiny_corpus(40, 16, 3);
  Seq2SeqModel a(oracle::tiny_model_config(16), 5), b = a;
  const auto ra = train(a, corpus, &corpus, quick(12, TrainingMode::joint));
  const auto rb = train(b, corpus, &corpus, quick(12, TrainingMode::joint));
  EXPECT_EQ(ra.averaged, rb.averaged);
  EXPECT_EQ(ra.last, rb.last);
}

TEST(Train, CheckpointWindowAveragesTheLastK) {
  const ParallelCorpus corpus = oracle::tiny_corpus(40, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  TrainConfig c = quick(17);
  const auto r = train(m, corpus, nullptr, c);
  EXPECT_EQ(r.last.updates, 17u);
  EXPECT_EQ(r.averaged.updates, 17u);
  EXPECT_NE(r.averaged.params, r.last.params);
}

TEST(Train, ZeroUpdatesReturnsTheStartingPoint) {
  const ParallelCorpus corpus = oracle::tiny_corpus(10, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  const Seq2SeqModel start = m;
  const auto r = train(m, corpus, nullptr, quick(0));
  EXPECT_TRUE(r.averaged.to_model().same_parameters(start));
}

TEST(Train, ConfigurationErrors) {
  const ParallelCorpus corpus = oracle::tiny_corpus(10, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  EXPECT_THROW(train_base(m, corpus, nullptr, quick(1, TrainingMode::joint)),
               ConfigError);
  Seq2SeqModel wide(oracle::tiny_model_config(20), 5);
  EXPECT_THROW(train(wide, corpus, nullptr, quick(1)), ConfigError);
  TrainConfig bad = quick(1);
  bad.lr = 0.0;
  EXPECT_THROW(train(m, corpus, nullptr, bad), ConfigError);
  TrainConfig t;
  EXPECT_FALSE(t.set("nope", "1"));
  EXPECT_THROW(t.set("max_updates", "-3"), ConfigError);
  EXPECT_THROW(t.set("ordered", "maybe"), ConfigError);
}

TEST(EncoderCache, GivesTheSameLogitsAsEncoding) {
  const ParallelCorpus corpus = oracle::tiny_corpus(12, 16, 3);
  Seq2SeqModel m(oracle::tiny_model_config(16), 5);
  m.set_training_mode(TrainingMode::decoder_only, 1);
  ASSERT_TRUE(encoder_cacheable(m));
  const EncoderCache cache(m, corpus, 128);
  EXPECT_TRUE(cache.matches(m));
  const std::vector<std::size_t> idx = {3, 7, 1};
  const Batch b = make_batch(corpus, idx);
  ad::Tape t1, t2;
  ParameterBinder p1(static_cast<const Seq2SeqModel&>(m), t1);
  ParameterBinder p2(static_cast<const Seq2SeqModel&>(m), t2);
  const Tensor with = batch_logits(p1, b, {}, &cache).value();
  const Tensor without = batch_logits(p2, b, {}, nullptr).value();
  ASSERT_EQ(with.shape(), without.shape());
  for (std::size_t i = 0; i < with.size(); ++i) EXPECT_NEAR(with[i], without[i], 1e-12);
}

}  // namespace
}  // namespace kdmt
