#include "kdmt/corpus.hpp"

#include <fstream>
#include <sstream>

#include "kdmt/error.hpp"

namespace kdmt {

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<s>", "</s>", "<unk>", "<mask>"}) add(s);
}

int Vocabulary::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return ids_.count(token) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw VocabularyError("id " + std::to_string(id) + " not in vocabulary of " +
                          std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    lines.push_back(tokens_[i] + "\t" + std::to_string(i));
  write_lines(path, lines);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  Vocabulary vocab;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(i + 1) +
                        ": expected token<TAB>id");
    const std::string token = lines[i].substr(0, tab);
    int id = -1;
    try {
      id = std::stoi(lines[i].substr(tab + 1));
    } catch (const std::exception&) {
    }
    if (id != static_cast<int>(i))
      throw FormatError(path.string() + ":" + std::to_string(i + 1) +
                        ": ids must be contiguous and sorted");
    if (i < kNumSpecials) {
      if (vocab.token(id) != token)
        throw FormatError(path.string() + ": special token " +
                          std::to_string(i) + " must be " + vocab.token(id));
      continue;
    }
    if (vocab.contains(token))
      throw FormatError(path.string() + ": duplicate token '" + token + "'");
    vocab.add(token);
  }
  if (vocab.size() != lines.size())
    throw FormatError(path.string() + ": missing special tokens");
  return vocab;
}

IdSeq tokenize(std::string_view line, const Vocabulary& vocab) {
  IdSeq ids;
  std::istringstream in{std::string(line)};
  std::string tok;
  while (in >> tok) ids.push_back(vocab.id(tok));
  if (ids.empty()) throw DataError("empty sentence");
  ids.push_back(kEosId);
  return ids;
}

IdSeq strip_specials(const IdSeq& ids) {
  IdSeq out;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    out.push_back(id);
  }
  return out;
}

std::string detokenize(const IdSeq& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : strip_specials(ids)) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

void ParallelCorpus::validate(std::size_t max_len) const {
  if (pairs.empty()) throw DataError("corpus is empty");
  for (std::size_t i = 0; i < pairs.size(); ++i)
    for (const IdSeq* side : {&pairs[i].src, &pairs[i].tgt}) {
      if (side->empty() || side->size() > max_len)
        throw DataError("sentence " + std::to_string(i) + " has length " +
                        std::to_string(side->size()) + " outside [1, " +
                        std::to_string(max_len) + "]");
      for (int id : *side)
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
          throw VocabularyError("sentence " + std::to_string(i) +
                                " contains id " + std::to_string(id));
    }
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path,
                 const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

ParallelCorpus load_corpus(const std::filesystem::path& prefix,
                           const Vocabulary& vocab) {
  const auto src = read_lines(prefix.string() + ".src");
  const auto tgt = read_lines(prefix.string() + ".tgt");
  if (src.size() != tgt.size())
    throw DataError(prefix.string() + ": " + std::to_string(src.size()) +
                    " source lines vs " + std::to_string(tgt.size()) +
                    " target lines");
  ParallelCorpus corpus{vocab, {}};
  for (std::size_t i = 0; i < src.size(); ++i) {
    try {
      corpus.pairs.push_back({tokenize(src[i], vocab), tokenize(tgt[i], vocab)});
    } catch (const DataError&) {
      throw DataError(prefix.string() + ": empty sentence on line " +
                      std::to_string(i + 1));
    }
  }
  if (corpus.pairs.empty()) throw DataError(prefix.string() + ": no sentences");
  return corpus;
}

void save_corpus(const ParallelCorpus& corpus,
                 const std::filesystem::path& prefix) {
  std::vector<std::string> src, tgt;
  for (const auto& p : corpus.pairs) {
    src.push_back(detokenize(p.src, corpus.vocab));
    tgt.push_back(detokenize(p.tgt, corpus.vocab));
  }
  write_lines(prefix.string() + ".src", src);
  write_lines(prefix.string() + ".tgt", tgt);
}

}  // namespace kdmt
