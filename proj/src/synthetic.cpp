#include "kdmt/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "kdmt/error.hpp"
#include "kdmt/random.hpp"

namespace kdmt {

std::string to_string(SyntheticTask task) {
  return task == SyntheticTask::cipher ? "cipher" : "cipher+reverse";
}

SyntheticTask parse_synthetic_task(const std::string& text) {
  if (text == "cipher") return SyntheticTask::cipher;
  if (text == "cipher+reverse" || text == "cipher_reverse")
    return SyntheticTask::cipher_reverse;
  throw ConfigError("unknown task '" + text +
                    "' (expected cipher or cipher+reverse)");
}

IdSeq Cipher::translate(const IdSeq& src) const {
  IdSeq out;
  for (int id : strip_specials(src)) {
    if (id < 0 || static_cast<std::size_t>(id) >= mapping.size())
      throw VocabularyError("cipher has no entry for id " + std::to_string(id));
    out.push_back(mapping[static_cast<std::size_t>(id)]);
  }
  if (task == SyntheticTask::cipher_reverse) std::reverse(out.begin(), out.end());
  out.push_back(kEosId);
  return out;
}

void Cipher::save(const std::filesystem::path& path,
                  const Vocabulary& vocab) const {
  std::vector<std::string> lines;
  for (std::size_t id = kNumSpecials; id < mapping.size(); ++id)
    lines.push_back(vocab.token(static_cast<int>(id)) + "\t" +
                    vocab.token(mapping[id]));
  write_lines(path, lines);
}

Cipher Cipher::load(const std::filesystem::path& path, const Vocabulary& vocab,
                    SyntheticTask task) {
  Cipher c;
  c.task = task;
  c.mapping.resize(vocab.size());
  std::iota(c.mapping.begin(), c.mapping.end(), 0);
  for (const auto& line : read_lines(path)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError(path.string() + ": expected source<TAB>target");
    const std::string s = line.substr(0, tab), t = line.substr(tab + 1);
    if (!vocab.contains(s) || !vocab.contains(t))
      throw FormatError(path.string() + ": token outside vocabulary");
    c.mapping[static_cast<std::size_t>(vocab.id(s))] = vocab.id(t);
  }
  return c;
}

SyntheticData make_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.vocab_size <= kNumSpecials)
    throw ConfigError("vocab_size must exceed the " +
                      std::to_string(kNumSpecials) + " special tokens");
  if (spec.min_len == 0 || spec.min_len > spec.max_len)
    throw ConfigError("sentence length range must satisfy 1 <= min <= max");
  if (spec.n_train == 0 || spec.n_valid == 0 || spec.n_test == 0)
    throw ConfigError("every split needs at least one pair");

  SyntheticData data;
  const std::size_t content = spec.vocab_size - kNumSpecials;
  for (std::size_t i = 0; i < content; ++i) data.vocab.add("w" + std::to_string(i));

  std::mt19937_64 key_rng(derive_seed(spec.seed, {1}));
  std::vector<int> perm(content);
  std::iota(perm.begin(), perm.end(), static_cast<int>(kNumSpecials));
  std::shuffle(perm.begin(), perm.end(), key_rng);
  data.cipher.task = spec.task;
  data.cipher.mapping.resize(spec.vocab_size);
  std::iota(data.cipher.mapping.begin(), data.cipher.mapping.end(), 0);
  for (std::size_t i = 0; i < content; ++i)
    data.cipher.mapping[kNumSpecials + i] = perm[i];

  // Sparse random bigram chain: each content token may be followed by
  // `successors` distinct tokens, chosen once per corpus.
  std::vector<std::vector<int>> next;
  if (spec.successors > 0) {
    if (spec.successors > content)
      throw ConfigError("successors must not exceed the " +
                        std::to_string(content) + " content tokens");
    std::mt19937_64 chain_rng(derive_seed(spec.seed, {3}));
    next.resize(content);
    for (auto& options : next) {
      std::vector<int> all(content);
      std::iota(all.begin(), all.end(), static_cast<int>(kNumSpecials));
      std::shuffle(all.begin(), all.end(), chain_rng);
      options.assign(all.begin(),
                     all.begin() + static_cast<std::ptrdiff_t>(spec.successors));
    }
  }

  std::mt19937_64 rng(derive_seed(spec.seed, {2}));
  std::uniform_int_distribution<std::size_t> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> tok_dist(
      static_cast<int>(kNumSpecials), static_cast<int>(spec.vocab_size) - 1);

  const std::size_t wanted = spec.n_train + spec.n_valid + spec.n_test;
  std::set<IdSeq> seen;
  std::vector<IdSeq> sources;
  for (std::size_t attempts = 0; sources.size() < wanted; ++attempts) {
    if (attempts > 50 * wanted)
      throw ConfigError("cannot draw " + std::to_string(wanted) +
                        " distinct sentences from this vocabulary/length range");
    IdSeq s(len_dist(rng));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i == 0 || next.empty()) {
        s[i] = tok_dist(rng);
      } else {
        const auto& options = next[static_cast<std::size_t>(s[i - 1]) - kNumSpecials];
        s[i] = options[rng() % options.size()];
      }
    }
    s.push_back(kEosId);
    if (seen.insert(s).second) sources.push_back(std::move(s));
  }

  auto fill = [&](ParallelCorpus& split, std::size_t begin, std::size_t count) {
    split.vocab = data.vocab;
    for (std::size_t i = begin; i < begin + count; ++i)
      split.pairs.push_back({sources[i], data.cipher.translate(sources[i])});
  };
  fill(data.train, 0, spec.n_train);
  fill(data.valid, spec.n_train, spec.n_valid);
  fill(data.test, spec.n_train + spec.n_valid, spec.n_test);
  return data;
}

}  // namespace kdmt
