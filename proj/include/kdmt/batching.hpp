#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kdmt/corpus.hpp"
#include "kdmt/model.hpp"

namespace kdmt {

// A right-padded training batch. Decoder input is BOS + target minus its
// last token; decoder output is the target (ending in EOS).
struct Batch {
  std::vector<std::size_t> indices;
  SourceBatch src;
  std::size_t tgt_len = 0;
  std::vector<int> tgt_in;
  std::vector<int> tgt_out;
  std::size_t target_tokens = 0;  // non-pad target positions

  std::size_t size() const { return indices.size(); }
};

Batch make_batch(const ParallelCorpus& corpus,
                 std::span<const std::size_t> indices);

// One pass over `indices` in an order shuffled by `shuffle_seed`, grouped so
// that rows * padded target length <= batch_tokens.
std::vector<Batch> batch_iter(std::span<const std::size_t> indices,
                              const ParallelCorpus& corpus,
                              std::size_t batch_tokens,
                              std::uint64_t shuffle_seed);

// Same grouping without shuffling (evaluation order).
std::vector<Batch> batch_in_order(std::span<const std::size_t> indices,
                                  const ParallelCorpus& corpus,
                                  std::size_t batch_tokens);

}  // namespace kdmt
