#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace kdmt {

// n+1 mutually exclusive, exhaustive subsets D_1..D_{n+1} of corpus indices.
struct EpochPartition {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> subsets;

  // 1-based, matching the D_k numbering.
  const std::vector<std::size_t>& subset(std::size_t k) const;
};

// Uniform random permutation under `epoch_seed`, cut into n+1 contiguous
// chunks whose sizes differ by at most one (larger chunks first).
EpochPartition partition_epoch(std::size_t corpus_size, std::size_t n,
                               std::uint64_t epoch_seed);

// Same chunking applied to the identity order: D_1 holds the earliest
// indices. Used for ordered single-pass streams.
EpochPartition ordered_partition(std::size_t corpus_size, std::size_t n);

// Subset trained by teacher i (1..n) at timestep t (1..n+1):
// i+t when i+t <= n+1, else i+t-n-1.
std::size_t ordering(std::size_t i, std::size_t t, std::size_t n);

}  // namespace kdmt
