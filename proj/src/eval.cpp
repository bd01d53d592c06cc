#include "kdmt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "kdmt/error.hpp"
#include "kdmt/parse.hpp"

namespace kdmt {
namespace {

std::size_t resolve_max_len(const Seq2SeqModel& model, const IdSeq& src,
                            std::size_t requested) {
  const std::size_t cap = model.config().max_seq_len;
  const std::size_t len = requested ? requested : 2 * src.size() + 10;
  return std::min(len, cap);
}

// Next-token log-probabilities for a set of equal-length prefixes, with the
// source encoded once.
class StepDecoder {
 public:
  StepDecoder(const Seq2SeqModel& model, const IdSeq& src)
      : model_(model), src_(src), states_(encode(model, src)) {}

  std::vector<std::vector<double>> next(const std::vector<IdSeq>& prefixes) {
    const std::size_t k = prefixes.size();
    const std::size_t t = prefixes.front().size();
    const std::size_t s = src_.size();
    const std::size_t d = model_.config().d_model;
    const std::size_t v = model_.config().vocab_size;

    SourceBatch batch{k, s, {}};
    batch.ids.reserve(k * s);
    auto enc = Tensor::uninitialized({k * s, d});
    std::vector<int> tgt_in;
    tgt_in.reserve(k * t);
    for (std::size_t b = 0; b < k; ++b) {
      batch.ids.insert(batch.ids.end(), src_.begin(), src_.end());
      std::copy(states_.data().begin(), states_.data().end(),
                enc.data().begin() + static_cast<std::ptrdiff_t>(b * s * d));
      tgt_in.insert(tgt_in.end(), prefixes[b].begin(), prefixes[b].end());
    }

    ad::Tape tape;
    ParameterBinder params(model_, tape);
    ad::Var states = tape.constant(std::move(enc));
    const Tensor& logits =
        decode_logits(params, states, batch, tgt_in, t, {}).value();

    std::vector<std::vector<double>> out(k, std::vector<double>(v));
    for (std::size_t b = 0; b < k; ++b) {
      const double* row = logits.data().data() + (b * t + t - 1) * v;
      const double mx = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t c = 0; c < v; ++c) out[b][c] = row[c] - lse;
      // PAD and BOS are never emitted.
      out[b][static_cast<std::size_t>(model_.config().pad_id)] =
          -std::numeric_limits<double>::infinity();
      out[b][static_cast<std::size_t>(model_.config().bos_id)] =
          -std::numeric_limits<double>::infinity();
    }
    return out;
  }

 private:
  const Seq2SeqModel& model_;
  const IdSeq& src_;
  Tensor states_;
};

struct Candidate {
  double score;
  double log_prob;
  double step_log_prob;
  int token;
  std::size_t parent;
};

// Higher score first; then higher cumulative and step log-probability; then
// lower token id and earlier parent.
bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.step_log_prob != b.step_log_prob)
    return a.step_log_prob > b.step_log_prob;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

double normalized(double log_prob, std::size_t length, double penalty) {
  return log_prob / std::pow(static_cast<double>(length), penalty);
}

}  // namespace

double Hypothesis::score(double length_penalty) const {
  if (length() == 0) return log_prob;
  return normalized(log_prob, length(), length_penalty);
}

Hypothesis greedy_decode(const Seq2SeqModel& model, const IdSeq& src,
                         std::size_t max_len) {
  const std::size_t limit = resolve_max_len(model, src, max_len);
  const int eos = model.config().eos_id;
  StepDecoder decoder(model, src);
  Hypothesis hyp{{model.config().bos_id}, 0.0, false};
  while (hyp.length() < limit) {
    const auto lp = decoder.next({hyp.tokens})[0];
    // max_element returns the first maximum, i.e. the lowest id on ties.
    const auto best = std::max_element(lp.begin(), lp.end());
    const int token = static_cast<int>(best - lp.begin());
    hyp.log_prob = hyp.log_prob + *best;
    hyp.tokens.push_back(token);
    if (token == eos) {
      hyp.finished = true;
      break;
    }
  }
  return hyp;
}

Hypothesis beam_search(const Seq2SeqModel& model, const IdSeq& src,
                       const BeamConfig& config) {
  if (config.beam_size < 1) throw ConfigError("beam size must be at least 1");
  const std::size_t limit = resolve_max_len(model, src, config.max_len);
  const int eos = model.config().eos_id;
  const double penalty = config.length_penalty;

  StepDecoder decoder(model, src);
  std::vector<Hypothesis> live{{{model.config().bos_id}, 0.0, false}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 1; step <= limit && !live.empty(); ++step) {
    std::vector<IdSeq> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto lps = decoder.next(prefixes);

    std::vector<Candidate> candidates;
    for (std::size_t p = 0; p < live.size(); ++p)
      for (std::size_t c = 0; c < lps[p].size(); ++c) {
        const double lp = lps[p][c];
        if (std::isinf(lp)) continue;
        const double total = live[p].log_prob + lp;
        candidates.push_back({normalized(total, step, penalty), total, lp,
                              static_cast<int>(c), p});
      }
    const std::size_t keep = std::min(config.beam_size, candidates.size());
    std::partial_sort(candidates.begin(),
                      candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), better);

    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = candidates[i];
      Hypothesis h = live[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (finished.size() >= config.beam_size) break;
  }

  const auto& pool = finished.empty() ? live : finished;
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool)
    if (h.score(penalty) > best->score(penalty)) best = &h;
  return *best;
}

std::vector<IdSeq> translate_sources(const Seq2SeqModel& model,
                                     std::span<const IdSeq> sources,
                                     const BeamConfig& config) {
  std::vector<IdSeq> out;
  out.reserve(sources.size());
  for (const IdSeq& src : sources) {
    const Hypothesis h = config.beam_size == 1
                             ? greedy_decode(model, src, config.max_len)
                             : beam_search(model, src, config);
    IdSeq ids(h.tokens.begin() + 1, h.tokens.end());
    if (ids.empty() || ids.back() != model.config().eos_id)
      ids.push_back(model.config().eos_id);
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<IdSeq> translate_corpus(const Seq2SeqModel& model,
                                    const ParallelCorpus& corpus,
                                    const BeamConfig& config) {
  std::vector<IdSeq> sources;
  sources.reserve(corpus.size());
  for (const auto& p : corpus.pairs) sources.push_back(p.src);
  return translate_sources(model, sources, config);
}

// ---------------------------------------------------------------------------
// BLEU

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::uint64_t>;

NgramCounts ngrams(const TokenSeq& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[TokenSeq(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

void require_aligned(const char* metric, std::size_t hyps, std::size_t refs) {
  if (hyps == 0) throw ContractError(std::string(metric) + " of an empty corpus");
  if (hyps != refs)
    throw ContractError(std::string(metric) + ": " + std::to_string(hyps) +
                        " hypotheses for " + std::to_string(refs) +
                        " references");
}

}  // namespace

BleuResult bleu4_corpus(std::span<const TokenSeq> hypotheses,
                        std::span<const TokenSeq> references) {
  require_aligned("BLEU", hypotheses.size(), references.size());
  BleuResult r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    r.hyp_length += hypotheses[s].size();
    r.ref_length += references[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts hyp = ngrams(hypotheses[s], n);
      const NgramCounts ref = ngrams(references[s], n);
      for (const auto& [gram, count] : hyp) {
        r.totals[n - 1] += count;
        const auto it = ref.find(gram);
        if (it != ref.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] ? static_cast<double>(r.matches[n]) /
                                        static_cast<double>(r.totals[n])
                                  : 0.0;
    if (r.matches[n] == 0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  if (r.hyp_length == 0) {
    r.brevity_penalty = 0.0;
  } else {
    const double ratio = static_cast<double>(r.ref_length) /
                         static_cast<double>(r.hyp_length);
    r.brevity_penalty = std::min(1.0, std::exp(1.0 - ratio));
  }
  r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

// ---------------------------------------------------------------------------
// chrF

namespace {

// Code points of a UTF-8 string with whitespace dropped. Malformed bytes are
// kept as single units.
std::u32string code_points(const std::string& text) {
  std::u32string out;
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    char32_t cp = c;
    if (c >= 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else if (c >= 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if (c >= 0xC0) {
      len = 2;
      cp = c & 0x1F;
    }
    if (len > 1 && i + len <= text.size()) {
      for (std::size_t j = 1; j < len; ++j)
        cp = (cp << 6) | (static_cast<unsigned char>(text[i + j]) & 0x3F);
    } else {
      len = 1;
      cp = c;
    }
    i += len;
    if (cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' ||
        cp == U'\v' || cp == U'\f')
      continue;
    out.push_back(cp);
  }
  return out;
}

std::map<std::u32string, std::uint64_t> char_ngrams(const std::u32string& s,
                                                    std::size_t n) {
  std::map<std::u32string, std::uint64_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[s.substr(i, n)];
  return counts;
}

}  // namespace

ChrfResult chrf_corpus(std::span<const std::string> hypotheses,
                       std::span<const std::string> references,
                       std::size_t order, double beta) {
  require_aligned("chrF", hypotheses.size(), references.size());
  if (order == 0) throw ConfigError("chrF order must be at least 1");
  ChrfResult r;
  r.order = order;
  r.beta = beta;
  r.matches.assign(order, 0);
  r.hyp_totals.assign(order, 0);
  r.ref_totals.assign(order, 0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const std::u32string hyp = code_points(hypotheses[s]);
    const std::u32string ref = code_points(references[s]);
    for (std::size_t n = 1; n <= order; ++n) {
      const auto h = char_ngrams(hyp, n);
      const auto g = char_ngrams(ref, n);
      for (const auto& [gram, count] : h) {
        r.hyp_totals[n - 1] += count;
        const auto it = g.find(gram);
        if (it != g.end()) r.matches[n - 1] += std::min(count, it->second);
      }
      for (const auto& [gram, count] : g) r.ref_totals[n - 1] += count;
    }
  }
  const double b2 = beta * beta;
  double total = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    if (r.hyp_totals[n] == 0 || r.ref_totals[n] == 0) continue;
    ++r.effective_orders;
    const double p = static_cast<double>(r.matches[n]) /
                     static_cast<double>(r.hyp_totals[n]);
    const double rec = static_cast<double>(r.matches[n]) /
                       static_cast<double>(r.ref_totals[n]);
    const double f = p + rec > 0.0 ? (1.0 + b2) * p * rec / (b2 * p + rec) : 0.0;
    r.f_scores.push_back(f);
    total += f;
  }
  r.score = r.effective_orders
                ? 100.0 * total / static_cast<double>(r.effective_orders)
                : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

TokenSeq to_tokens(const IdSeq& ids, const Vocabulary& vocab) {
  TokenSeq out;
  for (int id : strip_specials(ids)) out.push_back(vocab.token(id));
  return out;
}

MetricReport score_translations(std::span<const IdSeq> hypotheses,
                                std::span<const IdSeq> references,
                                const Vocabulary& vocab) {
  require_aligned("evaluation", hypotheses.size(), references.size());
  std::vector<TokenSeq> hyp_tokens, ref_tokens;
  std::vector<std::string> hyp_text, ref_text;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hyp_tokens.push_back(to_tokens(hypotheses[i], vocab));
    ref_tokens.push_back(to_tokens(references[i], vocab));
    hyp_text.push_back(detokenize(hypotheses[i], vocab));
    ref_text.push_back(detokenize(references[i], vocab));
  }
  MetricReport report;
  report.bleu = bleu4_corpus(hyp_tokens, ref_tokens);
  report.chrf = chrf_corpus(hyp_text, ref_text);
  report.sentences = hypotheses.size();
  return report;
}


std::string MetricReport::to_tsv() const {
  std::ostringstream out;
  out << "metric\tvalue\n";
  out << "bleu\t" << format_double(bleu.score) << "\n";
  for (std::size_t n = 0; n < 4; ++n)
    out << "bleu_p" << n + 1 << "\t" << bleu.matches[n] << "/" << bleu.totals[n]
        << "\n";
  out << "brevity_penalty\t" << format_double(bleu.brevity_penalty) << "\n";
  out << "hyp_length\t" << bleu.hyp_length << "\n";
  out << "ref_length\t" << bleu.ref_length << "\n";
  out << "chrf\t" << format_double(chrf.score) << "\n";
  out << "chrf_order\t" << chrf.order << "\n";
  out << "chrf_beta\t" << format_double(chrf.beta) << "\n";
  out << "sentences\t" << sentences << "\n";
  out << "tokenization\twhitespace\n";
  return out.str();
}

std::string MetricReport::to_text() const {
  char buf[256];
  std::ostringstream out;
  out << "BLEU-4 on whitespace tokens (tokenized BLEU, no detokenizer)\n";
  std::snprintf(buf, sizeof buf, "BLEU = %.2f  BP = %.4f  (hyp %llu, ref %llu)\n",
                bleu.score, bleu.brevity_penalty,
                static_cast<unsigned long long>(bleu.hyp_length),
                static_cast<unsigned long long>(bleu.ref_length));
  out << buf;
  for (std::size_t n = 0; n < 4; ++n) {
    std::snprintf(buf, sizeof buf, "  p%zu = %llu/%llu = %.4f\n", n + 1,
                  static_cast<unsigned long long>(bleu.matches[n]),
                  static_cast<unsigned long long>(bleu.totals[n]),
                  bleu.precisions[n]);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "chrF%zu (beta=%g) = %.2f\n", chrf.order,
                chrf.beta, chrf.score);
  out << buf;
  out << "sentences = " << sentences << "\n";
  return out.str();
}

MetricReport evaluate_checkpoint(const Checkpoint& checkpoint,
                                 const ParallelCorpus& test,
                                 const BeamConfig& beam) {
  if (checkpoint.config.vocab_size != test.vocab.size())
    throw ConfigError("vocabulary of " + std::to_string(test.vocab.size()) +
                      " tokens does not fit a checkpoint with vocab_size " +
                      std::to_string(checkpoint.config.vocab_size));
  const Seq2SeqModel model = checkpoint.to_model();
  const auto hyps = translate_corpus(model, test, beam);
  std::vector<IdSeq> refs;
  for (const auto& p : test.pairs) refs.push_back(p.tgt);
  return score_translations(hyps, refs, test.vocab);
}

}  // namespace kdmt
