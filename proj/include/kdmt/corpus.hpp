#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace kdmt {

using IdSeq = std::vector<int>;

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kMaskId = 4;
inline constexpr std::size_t kNumSpecials = 5;

// Token <-> id bijection. Ids are contiguous from 0 and the five specials
// occupy ids 0..4.
class Vocabulary {
 public:
  Vocabulary();

  // Adds a token if absent and returns its id.
  int add(const std::string& token);
  int id(const std::string& token) const;  // UNK when absent
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  static bool is_special(int id) { return id >= 0 && id < int(kNumSpecials); }

  // TSV: token<TAB>id, sorted by id, specials first.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
};

// Whitespace split, OOV -> UNK, EOS appended. Empty line -> DataError.
IdSeq tokenize(std::string_view line, const Vocabulary& vocab);
// Joins tokens up to the first EOS, skipping PAD/BOS.
std::string detokenize(const IdSeq& ids, const Vocabulary& vocab);
// Content tokens up to the first EOS (no specials other than UNK/MASK).
IdSeq strip_specials(const IdSeq& ids);

// Both sides end with EOS.
struct SentencePair {
  IdSeq src;
  IdSeq tgt;
  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  Vocabulary vocab;
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
  // Nonempty, ids valid, lengths within max_len.
  void validate(std::size_t max_len) const;
};

// Reads <prefix>.src / <prefix>.tgt (aligned, one sentence per line).
ParallelCorpus load_corpus(const std::filesystem::path& prefix,
                           const Vocabulary& vocab);
void save_corpus(const ParallelCorpus& corpus,
                 const std::filesystem::path& prefix);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path,
                 const std::vector<std::string>& lines);

}  // namespace kdmt
