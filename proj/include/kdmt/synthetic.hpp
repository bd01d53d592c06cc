#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdmt/corpus.hpp"

namespace kdmt {

// cipher: target = per-token bijective substitution of the source.
// cipher_reverse: substitution followed by sequence reversal.
enum class SyntheticTask { cipher, cipher_reverse };

std::string to_string(SyntheticTask task);
SyntheticTask parse_synthetic_task(const std::string& text);

struct SyntheticSpec {
  SyntheticTask task = SyntheticTask::cipher;
  std::size_t vocab_size = 64;  // including the five specials
  std::size_t n_train = 2000;
  std::size_t n_valid = 200;
  std::size_t n_test = 200;
  std::size_t min_len = 4;  // content tokens, EOS excluded
  std::size_t max_len = 10;
  // Each content token is followed by one of this many fixed successors
  // (a sparse random bigram chain); 0 draws every token uniformly.
  std::size_t successors = 4;
  std::uint64_t seed = 17;
};

// Substitution over the whole vocabulary; identity on specials.
struct Cipher {
  SyntheticTask task = SyntheticTask::cipher;
  std::vector<int> mapping;

  // Oracle translation of an EOS-terminated source.
  IdSeq translate(const IdSeq& src) const;

  // TSV: source_token<TAB>target_token for every content token.
  void save(const std::filesystem::path& path, const Vocabulary& vocab) const;
  static Cipher load(const std::filesystem::path& path, const Vocabulary& vocab,
                     SyntheticTask task);
};

struct SyntheticData {
  Vocabulary vocab;
  Cipher cipher;
  ParallelCorpus train, valid, test;
};

// Random source sentences (uniform length, tokens from the bigram chain), all
// distinct across the three splits. Deterministic in spec.seed.
SyntheticData make_synthetic_corpus(const SyntheticSpec& spec);

}  // namespace kdmt
