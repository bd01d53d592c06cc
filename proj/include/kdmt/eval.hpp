#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kdmt/checkpoint.hpp"
#include "kdmt/corpus.hpp"
#include "kdmt/model.hpp"

namespace kdmt {

struct BeamConfig {
  std::size_t beam_size = 5;
  // 0 = min(max_seq_len, 2 * source length + 10).
  std::size_t max_len = 0;
  double length_penalty = 1.0;
};

// tokens runs BOS .. EOS (or stops at max_len when unfinished).
struct Hypothesis {
  IdSeq tokens;
  double log_prob = 0.0;
  bool finished = false;

  // Emitted tokens, BOS excluded.
  std::size_t length() const { return tokens.empty() ? 0 : tokens.size() - 1; }
  // log_prob / length^penalty.
  double score(double length_penalty = 1.0) const;
};

// Argmax decoding (lowest id on ties), inference mode.
Hypothesis greedy_decode(const Seq2SeqModel& model, const IdSeq& src,
                         std::size_t max_len = 0);

// Keeps the global top beam_size continuations by normalized score with ties
// broken toward lower token ids; hypotheses ending in EOS are retired.
// Returns the best finished hypothesis, or the best unfinished one when none
// finished within max_len.
Hypothesis beam_search(const Seq2SeqModel& model, const IdSeq& src,
                       const BeamConfig& config = {});

// Decodes every source of `corpus` and returns EOS-terminated outputs
// without BOS.
std::vector<IdSeq> translate_corpus(const Seq2SeqModel& model,
                                    const ParallelCorpus& corpus,
                                    const BeamConfig& config = {});
std::vector<IdSeq> translate_sources(const Seq2SeqModel& model,
                                     std::span<const IdSeq> sources,
                                     const BeamConfig& config = {});

using TokenSeq = std::vector<std::string>;

struct BleuResult {
  double score = 0.0;
  std::array<std::uint64_t, 4> matches{};
  std::array<std::uint64_t, 4> totals{};
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;
};

// Corpus BLEU-4 with pooled clipped counts, no smoothing.
BleuResult bleu4_corpus(std::span<const TokenSeq> hypotheses,
                        std::span<const TokenSeq> references);

struct ChrfResult {
  double score = 0.0;
  std::size_t order = 6;
  double beta = 2.0;
  std::vector<std::uint64_t> matches, hyp_totals, ref_totals;
  // Per-order F in [0, 1]; orders absent from both sides are skipped.
  std::vector<double> f_scores;
  std::size_t effective_orders = 0;
};

// Character n-gram F-score with whitespace removed.
ChrfResult chrf_corpus(std::span<const std::string> hypotheses,
                       std::span<const std::string> references,
                       std::size_t order = 6, double beta = 2.0);

struct MetricReport {
  BleuResult bleu;
  ChrfResult chrf;
  std::size_t sentences = 0;

  // Two-row TSV ("metric\tvalue" pairs) and a human-readable summary.
  std::string to_tsv() const;
  std::string to_text() const;
};

// Content tokens (specials removed, truncated at EOS) as strings.
TokenSeq to_tokens(const IdSeq& ids, const Vocabulary& vocab);

MetricReport score_translations(std::span<const IdSeq> hypotheses,
                                std::span<const IdSeq> references,
                                const Vocabulary& vocab);

// Decodes the test sources with `beam` and scores against the targets.
// A vocabulary that does not fit the checkpoint is a ConfigError.
MetricReport evaluate_checkpoint(const Checkpoint& checkpoint,
                                 const ParallelCorpus& test,
                                 const BeamConfig& beam = {});

}  // namespace kdmt
