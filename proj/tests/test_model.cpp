#include <gtest/gtest.h>

#include "kdmt/error.hpp"
#include "kdmt/model.hpp"
#include "support/oracles.hpp"

namespace kdmt {
namespace {

TEST(ModelConfig, RejectsHeadsThatDoNotDivideTheWidth) {
  ModelConfig c = oracle::tiny_model_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = oracle::tiny_model_config();
  c.vocab_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, TextRoundTrip) {
  ModelConfig c = oracle::tiny_model_config(33);
  c.dropout_rate = 0.125;
  EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  EXPECT_FALSE(c.set("not_a_key", "1"));
  EXPECT_THROW(c.set("d_model", "wide"), ConfigError);
}

TEST(Model, SameSeedSameParameters) {
  const ModelConfig c = oracle::tiny_model_config();
  EXPECT_TRUE(Seq2SeqModel(c, 5).same_parameters(Seq2SeqModel(c, 5)));
  EXPECT_FALSE(Seq2SeqModel(c, 5).same_parameters(Seq2SeqModel(c, 6)));
}

TEST(Model, CopiesAreDeep) {
  Seq2SeqModel a(oracle::tiny_model_config(), 1);
  Seq2SeqModel b = a;
  b.parameter("output_projection.weight").value[0] += 1.0;
  EXPECT_FALSE(a.same_parameters(b));
}

TEST(Model, EveryParameterBelongsToOneGroup) {
  const Seq2SeqModel m(oracle::tiny_model_config(), 1);
  const ParameterCounts counts = count_parameters(m);
  std::size_t sum = 0;
  for (const auto& [group, n] : counts.per_group) {
    EXPECT_GT(n, 0u) << to_string(group);
    sum += n;
  }
  EXPECT_EQ(sum, counts.total);
  EXPECT_EQ(counts.per_group.size(), kAllGroups.size());
}

TEST(Model, DecoderOnlyModeFreezesTheEncoderGroups) {
  Seq2SeqModel m(oracle::tiny_model_config(), 1);
  const auto trainable = m.set_training_mode(TrainingMode::decoder_only, 1);
  EXPECT_TRUE(m.is_frozen(ParamGroup::enc_embed));
  EXPECT_TRUE(m.is_frozen(ParamGroup::enc_layers));
  EXPECT_EQ(trainable.size(), 3u);
  const ParameterCounts c = count_parameters(m);
  EXPECT_EQ(c.trainable, c.total - c.per_group.at(ParamGroup::enc_embed) -
                             c.per_group.at(ParamGroup::enc_layers));
  m.set_training_mode(TrainingMode::joint, 1);
  EXPECT_TRUE(m.frozen().empty());
}

TEST(Model, FromScratchReinitializes) {
  Seq2SeqModel m(oracle::tiny_model_config(), 1);
  const Seq2SeqModel before = m;
  m.set_training_mode(TrainingMode::from_scratch, 99);
  EXPECT_FALSE(m.same_parameters(before));
  EXPECT_TRUE(m.frozen().empty());
}

TEST(Model, DecoderIsCausal) {
  const Seq2SeqModel m(oracle::tiny_model_config(), 3);
  const std::vector<int> src = {5, 6, 7, kEosId};
  const std::vector<int> a = {kBosId, 8, 9, 10, 11};
  std::vector<int> b = a;
  b[3] = 12;
  b[4] = 13;
  const Tensor la = decode_logits(m, src, a), lb = decode_logits(m, src, b);
  const std::size_t v = la.cols();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < v; ++c) EXPECT_EQ(la(r, c), lb(r, c));
  bool later_differs = false;
  for (std::size_t c = 0; c < v; ++c) later_differs |= la(3, c) != lb(3, c);
  EXPECT_TRUE(later_differs);
}

TEST(Model, PaddingDoesNotLeakIntoShorterSentences) {
  Seq2SeqModel m(oracle::tiny_model_config(), 4);
  const std::vector<int> short_src = {5, 6, kEosId};
  const Tensor alone = encode(static_cast<const Seq2SeqModel&>(m), short_src);

  ad::Tape tape;
  ParameterBinder params(static_cast<const Seq2SeqModel&>(m), tape);
  SourceBatch batch{2, 5, {5, 6, kEosId, kPadId, kPadId, 7, 8, 9, 10, kEosId}};
  const Tensor both = encode(params, batch, {}).value();
  const std::size_t d = alone.cols();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(both(r, c), alone(r, c), 1e-12);
}

TEST(Model, FrozenParametersAreBoundAsConstants) {
  Seq2SeqModel m(oracle::tiny_model_config(), 2);
  m.set_training_mode(TrainingMode::decoder_only, 2);
  m.zero_grad();
  ad::Tape tape;
  ParameterBinder params(m, tape);
  const std::vector<int> src = {5, 6, kEosId}, tgt_in = {kBosId, 7, 8},
                         tgt_out = {7, 8, kEosId};
  SourceBatch batch{1, 3, src};
  ad::Var enc = encode(params, batch, {});
  ad::Var logits = decode_logits(params, enc, batch, tgt_in, 3, {});
  tape.backward(ad::cross_entropy(logits, tgt_out, kPadId));
  for (const auto& [name, np] : m.parameters()) {
    double norm = 0.0;
    for (double g : np.param.grad.data()) norm += g * g;
    if (is_encoder_group(np.group))
      EXPECT_EQ(norm, 0.0) << name;
  }
  double out_norm = 0.0;
  for (double g : m.parameter("output_projection.weight").grad.data()) out_norm += g * g;
  EXPECT_GT(out_norm, 0.0);
}

}  // namespace
}  // namespace kdmt
