#include "kdmt/batching.hpp"

#include <algorithm>
#include <random>

#include "kdmt/error.hpp"

namespace kdmt {

Batch make_batch(const ParallelCorpus& corpus,
                 std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: no indices");
  Batch batch;
  batch.indices.assign(indices.begin(), indices.end());
  std::size_t src_len = 0, tgt_len = 0;
  for (std::size_t i : indices) {
    if (i >= corpus.size())
      throw ContractError("corpus index " + std::to_string(i) + " out of range");
    src_len = std::max(src_len, corpus.pairs[i].src.size());
    tgt_len = std::max(tgt_len, corpus.pairs[i].tgt.size());
  }
  const std::size_t rows = indices.size();
  batch.src = SourceBatch{rows, src_len, std::vector<int>(rows * src_len, kPadId)};
  batch.tgt_len = tgt_len;
  batch.tgt_in.assign(rows * tgt_len, kPadId);
  batch.tgt_out.assign(rows * tgt_len, kPadId);
  for (std::size_t r = 0; r < rows; ++r) {
    const SentencePair& p = corpus.pairs[indices[r]];
    std::copy(p.src.begin(), p.src.end(), batch.src.ids.begin() +
                                              static_cast<std::ptrdiff_t>(r * src_len));
    for (std::size_t t = 0; t < p.tgt.size(); ++t) {
      batch.tgt_out[r * tgt_len + t] = p.tgt[t];
      batch.tgt_in[r * tgt_len + t] = t == 0 ? kBosId : p.tgt[t - 1];
    }
    batch.target_tokens += p.tgt.size();
  }
  return batch;
}

namespace {

std::vector<Batch> group(const std::vector<std::size_t>& order,
                         const ParallelCorpus& corpus,
                         std::size_t batch_tokens) {
  std::vector<Batch> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (std::size_t i : order) {
    if (i >= corpus.size())
      throw ContractError("corpus index " + std::to_string(i) + " out of range");
    const std::size_t len = corpus.pairs[i].tgt.size();
    if (len > batch_tokens)
      throw ConfigError("sentence " + std::to_string(i) + " has " +
                        std::to_string(len) + " target tokens, above batch_tokens=" +
                        std::to_string(batch_tokens));
    const std::size_t next_longest = std::max(longest, len);
    if (!current.empty() && (current.size() + 1) * next_longest > batch_tokens) {
      batches.push_back(make_batch(corpus, current));
      current.clear();
      longest = 0;
    }
    current.push_back(i);
    longest = std::max(longest, len);
  }
  if (!current.empty()) batches.push_back(make_batch(corpus, current));
  return batches;
}

}  // namespace

std::vector<Batch> batch_iter(std::span<const std::size_t> indices,
                              const ParallelCorpus& corpus,
                              std::size_t batch_tokens,
                              std::uint64_t shuffle_seed) {
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  return group(order, corpus, batch_tokens);
}

std::vector<Batch> batch_in_order(std::span<const std::size_t> indices,
                                  const ParallelCorpus& corpus,
                                  std::size_t batch_tokens) {
  return group({indices.begin(), indices.end()}, corpus, batch_tokens);
}

}  // namespace kdmt
