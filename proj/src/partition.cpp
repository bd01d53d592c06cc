#include "kdmt/partition.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

#include "kdmt/error.hpp"

namespace kdmt {

const std::vector<std::size_t>& EpochPartition::subset(std::size_t k) const {
  if (k == 0 || k > subsets.size())
    throw ContractError("subset index " + std::to_string(k) + " outside 1.." +
                        std::to_string(subsets.size()));
  return subsets[k - 1];
}

namespace {

EpochPartition chunk(std::vector<std::size_t> order, std::size_t n,
                     std::uint64_t seed) {
  EpochPartition part;
  part.seed = seed;
  part.n = n;
  const std::size_t parts = n + 1;
  const std::size_t base = order.size() / parts, extra = order.size() % parts;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts; ++k) {
    const std::size_t len = base + (k < extra ? 1 : 0);
    part.subsets.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(offset),
                              order.begin() +
                                  static_cast<std::ptrdiff_t>(offset + len));
    offset += len;
  }
  return part;
}

void check_sizes(std::size_t corpus_size, std::size_t n) {
  if (n == 0) throw ConfigError("number of teachers must be >= 1");
  if (corpus_size < n + 1)
    throw DataError("insufficient data: " + std::to_string(corpus_size) +
                    " examples cannot fill " + std::to_string(n + 1) +
                    " subsets");
}

}  // namespace

EpochPartition partition_epoch(std::size_t corpus_size, std::size_t n,
                               std::uint64_t epoch_seed) {
  check_sizes(corpus_size, n);
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(order.begin(), order.end(), rng);
  return chunk(std::move(order), n, epoch_seed);
}

EpochPartition ordered_partition(std::size_t corpus_size, std::size_t n) {
  check_sizes(corpus_size, n);
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return chunk(std::move(order), n, 0);
}

std::size_t ordering(std::size_t i, std::size_t t, std::size_t n) {
  if (n == 0 || i < 1 || i > n || t < 1 || t > n + 1)
    throw ContractError("ordering(" + std::to_string(i) + ", " +
                        std::to_string(t) + ") with n=" + std::to_string(n));
  return i + t <= n + 1 ? i + t : i + t - n - 1;
}

}  // namespace kdmt
