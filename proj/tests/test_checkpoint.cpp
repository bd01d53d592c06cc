#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "kdmt/checkpoint.hpp"
#include "kdmt/error.hpp"
#include "support/oracles.hpp"

namespace kdmt {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "kdmt_test_ckpt";
  fs::create_directories(dir);
  return dir / name;
}

TEST(Checkpoint, SaveLoadSaveIsBitExact) {
  const Checkpoint c = oracle::random_checkpoint(3, 1234);
  const auto bytes = serialize(c);
  const Checkpoint back = deserialize(bytes);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize(back), bytes);

  save_checkpoint(c, scratch("a.ckpt"));
  EXPECT_EQ(load_checkpoint(scratch("a.ckpt")), c);
}

TEST(Checkpoint, TruncatedFileFailsCleanly) {
  const auto bytes = serialize(oracle::random_checkpoint(3, 1));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{20},
                          bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
    EXPECT_THROW(deserialize(part), FormatError) << cut;
  }
  auto junk = bytes;
  junk[0] = 'X';
  EXPECT_THROW(deserialize(junk), FormatError);
  EXPECT_THROW(load_checkpoint(scratch("missing.ckpt")), DataError);
}

TEST(Checkpoint, ConfigMismatchIsAConfigError) {
  save_checkpoint(oracle::random_checkpoint(3, 1), scratch("b.ckpt"));
  EXPECT_THROW(load_checkpoint(scratch("b.ckpt"), oracle::tiny_model_config(40)),
               ConfigError);
  EXPECT_NO_THROW(load_checkpoint(scratch("b.ckpt"), oracle::tiny_model_config()));
}

TEST(Checkpoint, ModelRoundTrip) {
  const Seq2SeqModel m(oracle::tiny_model_config(), 8);
  const Checkpoint c = Checkpoint::from_model(m, Stage::mlm, 7);
  EXPECT_TRUE(c.to_model().same_parameters(m));
  EXPECT_EQ(c.stage, Stage::mlm);
  Seq2SeqModel other(oracle::tiny_model_config(), 9);
  c.apply_to(other);
  EXPECT_TRUE(other.same_parameters(m));
}

TEST(Averaging, MatchesTheElementwiseMean) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    EXPECT_LT(oracle::average_oracle_gap(seed, 5), 1e-15);
}

TEST(Averaging, IdenticalInputsAreReturnedExactly) {
  const Checkpoint c = oracle::random_checkpoint(4, 10);
  const std::vector<Checkpoint> same(5, c);
  EXPECT_EQ(average_checkpoints(same).params, c.params);
}

TEST(Averaging, OrderDoesNotMatter) {
  std::vector<Checkpoint> cs;
  for (std::uint64_t k = 0; k < 4; ++k) cs.push_back(oracle::random_checkpoint(k, k));
  const Checkpoint a = average_checkpoints(cs);
  std::swap(cs[0], cs[3]);
  std::swap(cs[1], cs[2]);
  EXPECT_EQ(average_checkpoints(cs), a);
  EXPECT_EQ(a.updates, 3u);
}

TEST(Averaging, MismatchedShapesAreRejected) {
  std::vector<Checkpoint> cs = {oracle::random_checkpoint(1, 1)};
  cs.push_back(Checkpoint::from_model(Seq2SeqModel(oracle::tiny_model_config(30), 1),
                                      Stage::base, 2));
  EXPECT_THROW(average_checkpoints(cs), Error);
  EXPECT_THROW(average_checkpoints(std::vector<Checkpoint>{}), Error);
}

}  // namespace
}  // namespace kdmt
