#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "kdmt/eval.hpp"
#include "kdmt/partition.hpp"

namespace kdmt::oracle {
namespace {

using ad::Tape;
using ad::Var;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = u(rng);
  return t;
}

// Values bounded away from zero so relu kinks stay out of reach of eps.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = (rng() & 1 ? 1.0 : -1.0) * u(rng);
  return t;
}

// sum(y * w) with w fixed by the seed, so every output element matters.
Var weighted_sum(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedull);
  return ad::sum(ad::multiply(y, y.tape().constant(random_tensor(y.shape(), rng))));
}

std::vector<bool> random_mask(std::size_t n, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution b(p);
  std::vector<bool> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = b(rng);
  return m;
}

Tensor random_distribution_rows(std::size_t n, std::size_t v,
                                std::mt19937_64& rng) {
  Tensor t = random_tensor({n, v}, rng, 0.05, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += t(r, c);
    for (std::size_t c = 0; c < v; ++c) t(r, c) /= z;
  }
  return t;
}

using Made = std::pair<ad::ScalarFn, std::vector<Tensor>>;

GradCase unary(std::string name, Shape shape,
               std::function<Var(Var)> op, bool avoid_zero = false) {
  return {name, [=](std::uint64_t seed) -> Made {
            std::mt19937_64 rng(seed);
            Tensor x = avoid_zero ? away_from_zero(shape, rng)
                                  : random_tensor(shape, rng);
            return {[=](Tape&, std::span<const Var> in) {
                      return weighted_sum(op(in[0]), seed);
                    },
                    {x}};
          }};
}

GradCase attention_case(std::string name, bool causal, bool padded) {
  return {name, [=](std::uint64_t seed) -> Made {
            std::mt19937_64 rng(seed);
            const std::size_t b = 2, tq = 3, tk = causal ? 3 : 4, d = 4;
            ad::AttentionLayout layout{b, tq, tk, 2, causal, {}};
            if (padded) {
              layout.key_padding.assign(b * tk, false);
              layout.key_padding[tk - 1] = true;  // last key of sentence 0
              layout.key_padding[2 * tk - 1] = true;
              layout.key_padding[2 * tk - 2] = true;
            }
            std::vector<Tensor> in = {random_tensor({b * tq, d}, rng),
                                      random_tensor({b * tk, d}, rng),
                                      random_tensor({b * tk, d}, rng)};
            return {[=](Tape&, std::span<const Var> v) {
                      return weighted_sum(ad::attention(v[0], v[1], v[2], layout),
                                          seed);
                    },
                    in};
          }};
}

}  // namespace

std::vector<GradCase> primitive_grad_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::matmul(v[0], v[1]), seed);
                             },
                             {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)}};
                   }});
  cases.push_back({"linear", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::linear(v[0], v[1], v[2]), seed);
                             },
                             {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                              random_tensor({5}, rng)}};
                   }});
  cases.push_back({"add", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::add(v[0], v[1]), seed);
                             },
                             {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back({"add_bias", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::add_bias(v[0], v[1]), seed);
                             },
                             {random_tensor({3, 4}, rng), random_tensor({4}, rng)}};
                   }});
  cases.push_back({"multiply", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::multiply(v[0], v[1]), seed);
                             },
                             {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back({"multiply_same_input", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::multiply(v[0], v[0]), seed);
                             },
                             {random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back(unary("scale", {3, 4}, [](Var x) { return ad::scale(x, -1.7); }));
  cases.push_back(unary("sum", {3, 4}, [](Var x) { return ad::sum(x); }));
  cases.push_back(unary("mean", {3, 4}, [](Var x) { return ad::mean(x); }));
  cases.push_back(unary("relu", {3, 4}, [](Var x) { return ad::relu(x); }, true));
  cases.push_back(unary("softmax_rows", {3, 5}, [](Var x) { return ad::softmax(x, 1); }));
  cases.push_back(unary("softmax_cols", {3, 5}, [](Var x) { return ad::softmax(x, 0); }));
  cases.push_back(unary("log_softmax", {3, 5}, [](Var x) { return ad::log_softmax(x); }));
  cases.push_back({"cross_entropy", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     std::vector<int> targets(6);
                     for (auto& t : targets) t = static_cast<int>(rng() % 5);
                     targets[0] = 0;  // pad id 0 is excluded
                     if (targets[1] == 0) targets[1] = 1;
                     return {[=](Tape&, std::span<const Var> v) {
                               return ad::cross_entropy(v[0], targets, 0);
                             },
                             {random_tensor({6, 5}, rng, -2.0, 2.0)}};
                   }});
  cases.push_back({"embedding_lookup", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     std::vector<int> ids(7);
                     for (auto& i : ids) i = static_cast<int>(rng() % 5);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::embedding_lookup(v[0], ids), seed);
                             },
                             {random_tensor({5, 3}, rng)}};
                   }});
  cases.push_back({"layer_norm", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::layer_norm(v[0], v[1], v[2]), seed);
                             },
                             {random_tensor({3, 6}, rng, -2.0, 2.0),
                              random_tensor({6}, rng, 0.5, 1.5), random_tensor({6}, rng)}};
                   }});
  for (std::size_t axis : {0u, 1u})
    cases.push_back({"concat_axis" + std::to_string(axis),
                     [axis](std::uint64_t seed) -> Made {
                       std::mt19937_64 rng(seed);
                       const Shape second = axis == 0 ? Shape{2, 4} : Shape{3, 2};
                       return {[=](Tape&, std::span<const Var> v) {
                                 const std::vector<Var> parts = {v[0], v[1]};
                                 return weighted_sum(ad::concat(parts, axis), seed);
                               },
                               {random_tensor({3, 4}, rng), random_tensor(second, rng)}};
                     }});
  cases.push_back({"mask_fill", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     const auto mask = random_mask(12, rng, 0.3);
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(ad::mask_fill(v[0], mask, 0.5), seed);
                             },
                             {random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back({"mask_fill_softmax", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     auto mask = random_mask(12, rng, 0.3);
                     for (std::size_t r = 0; r < 3; ++r) mask[r * 4] = false;
                     return {[=](Tape&, std::span<const Var> v) {
                               return weighted_sum(
                                   ad::softmax(ad::mask_fill(v[0], mask), 1), seed);
                             },
                             {random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back({"dropout", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     return {[=](Tape&, std::span<const Var> v) {
                               std::mt19937_64 mask_rng(seed + 1);
                               return weighted_sum(ad::dropout(v[0], 0.3, mask_rng), seed);
                             },
                             {random_tensor({3, 4}, rng)}};
                   }});
  cases.push_back(attention_case("attention", false, false));
  cases.push_back(attention_case("attention_causal", true, false));
  cases.push_back(attention_case("attention_padded", false, true));
  cases.push_back({"kd_loss", [](std::uint64_t seed) -> Made {
                     std::mt19937_64 rng(seed);
                     const std::size_t n = 5, v = 6;
                     std::vector<Tensor> teachers = {random_distribution_rows(n, v, rng),
                                                     random_distribution_rows(n, v, rng)};
                     std::vector<bool> pad(n, false);
                     pad[n - 1] = true;
                     return {[=](Tape&, std::span<const Var> in) {
                               return kd_loss(in[0], teachers, pad);
                             },
                             {random_tensor({n, v}, rng, -2.0, 2.0)}};
                   }});
  return cases;
}

ad::GradCheckResult run_grad_case(const GradCase& c, std::uint64_t seed) {
  auto [fn, inputs] = c.make(seed);
  return ad::check_gradients(fn, inputs);
}

std::string partition_violations(std::size_t size, std::size_t n,
                                 std::uint64_t seed) {
  std::ostringstream err;
  const auto check = [&](const EpochPartition& p, const char* kind) {
    if (p.subsets.size() != n + 1) {
      err << kind << ": " << p.subsets.size() << " subsets; ";
      return;
    }
    std::vector<int> seen(size, 0);
    std::size_t lo = size, hi = 0;
    for (const auto& s : p.subsets) {
      lo = std::min(lo, s.size());
      hi = std::max(hi, s.size());
      for (std::size_t i : s) {
        if (i >= size) {
          err << kind << ": index " << i << " out of range; ";
          return;
        }
        ++seen[i];
      }
    }
    for (std::size_t i = 0; i < size; ++i)
      if (seen[i] != 1) {
        err << kind << ": index " << i << " appears " << seen[i] << " times; ";
        return;
      }
    if (hi - lo > 1) err << kind << ": sizes range " << lo << ".." << hi << "; ";
  };
  check(partition_epoch(size, n, seed), "random");
  const EpochPartition ordered = ordered_partition(size, n);
  check(ordered, "ordered");
  // Earliest indices first.
  std::vector<std::size_t> flat;
  for (const auto& s : ordered.subsets) flat.insert(flat.end(), s.begin(), s.end());
  if (!std::is_sorted(flat.begin(), flat.end())) err << "ordered: not in order; ";

  for (std::size_t t = 1; t <= n + 1; ++t) {
    std::set<std::size_t> got, want;
    for (std::size_t i = 1; i <= n; ++i) got.insert(ordering(i, t, n));
    for (std::size_t k = 1; k <= n + 1; ++k)
      if (k != t) want.insert(k);
    if (got != want) err << "ordering: timestep " << t << " wrong; ";
  }
  return err.str();
}

double kd_ce_gap(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 2 + rng() % 9, v = 3 + rng() % 30;
  std::vector<int> gold(n);
  std::vector<bool> pad(n);
  Tensor onehot({n, v}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    gold[r] = static_cast<int>(rng() % v);
    pad[r] = gold[r] == 0;
    onehot(r, static_cast<std::size_t>(gold[r])) = 1.0;
  }
  if (std::all_of(pad.begin(), pad.end(), [](bool p) { return p; })) {
    gold[0] = 1;
    pad[0] = false;
    onehot(0, 0) = 0.0;
    onehot(0, 1) = 1.0;
  }
  Tape tape;
  Var logits = tape.constant(random_tensor({n, v}, rng, -5.0, 5.0));
  const std::vector<Tensor> teachers = {onehot};
  const double kd = kd_loss(logits, teachers, pad).value().item();
  const double ce = ad::cross_entropy(logits, gold, 0).value().item();
  return std::abs(kd - ce);
}

bool combined_extremes_exact(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 4, v = 7;
  const Tensor x = random_tensor({n, v}, rng, -3.0, 3.0);
  std::vector<int> gold = {3, 0, 5, 1};
  std::vector<bool> pad = {false, true, false, false};
  const std::vector<Tensor> teachers = {random_distribution_rows(n, v, rng)};

  const auto run = [&](auto&& loss_fn) {
    Tape tape;
    Var logits = tape.variable(x);
    Var loss = loss_fn(logits);
    tape.backward(loss);
    return std::make_pair(loss.value().item(), logits.grad());
  };
  const auto c0 = run([&](Var l) { return combined_loss(l, teachers, gold, 0.0, 0); });
  const auto ce = run([&](Var l) { return ad::cross_entropy(l, gold, 0); });
  const auto c1 = run([&](Var l) { return combined_loss(l, teachers, gold, 1.0, 0); });
  const auto kd = run([&](Var l) { return kd_loss(l, teachers, pad); });
  return c0.first == ce.first && c0.second == ce.second &&
         c1.first == kd.first && c1.second == kd.second;
}

AuditReport audit_ckd(const Checkpoint& base, const ParallelCorpus& corpus,
                      TrainConfig config, std::uint64_t epochs) {
  config.max_updates = ~std::uint64_t{0};
  CkdState state = make_ckd_state(base.to_model(), config);
  AuditReport report;

  CkdHooks hooks;
  hooks.on_batch = [&](const CkdState& s, std::size_t model_id, const Batch& b) {
    if (model_id == 0) return;
    ++report.teacher_batches;
    const EpochPartition p = ckd_partition(corpus, config, s.epoch - 1);
    const auto& current = p.subset(s.timestep);
    const std::set<std::size_t> d_t(current.begin(), current.end());
    for (std::size_t idx : b.indices)
      if (d_t.count(idx)) report.teachers_avoid_current = false;
  };
  hooks.after_student_backward = [&](const CkdState& s) {
    ++report.student_backwards;
    for (const auto& teacher : s.teachers)
      for (const auto& [name, np] : teacher.parameters())
        for (double g : np.param.grad.data())
          if (g != 0.0) report.zero_teacher_grads = false;
    double norm = 0.0;
    for (const auto& [name, np] : s.student.parameters())
      for (double g : np.param.grad.data()) norm += g * g;
    if (!(norm > 0.0)) report.student_has_grads = false;
  };
  hooks.on_epoch_end = [&](const CkdState& s, const EpochPartition&) {
    ++report.epochs;
    for (const auto& teacher : s.teachers)
      if (!teacher.same_parameters(s.student)) report.equal_after_epoch = false;
  };

  for (std::uint64_t e = 0; e < epochs; ++e) run_ckd_epoch(state, corpus, config, hooks);
  for (const auto& entry : state.schedule)
    if (entry.model_id != 0 && entry.subset == entry.t) report.log_avoids_current = false;
  if (report.epochs != epochs) report.equal_after_epoch = false;
  return report;
}

ModelConfig tiny_model_config(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 32;
  c.max_seq_len = 24;
  c.dropout_rate = 0.1;
  return c;
}

ParallelCorpus tiny_corpus(std::size_t pairs, std::size_t vocab_size,
                           std::uint64_t seed, std::size_t max_len) {
  ParallelCorpus corpus;
  for (std::size_t i = kNumSpecials; i < vocab_size; ++i)
    corpus.vocab.add("t" + std::to_string(i));
  const int content = static_cast<int>(vocab_size - kNumSpecials);
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < pairs; ++k) {
    const std::size_t len = 2 + rng() % (max_len - 1);
    SentencePair p;
    for (std::size_t j = 0; j < len; ++j) {
      const int tok = static_cast<int>(rng() % content);
      p.src.push_back(int(kNumSpecials) + tok);
      p.tgt.push_back(int(kNumSpecials) + (tok + 1) % content);
    }
    p.src.push_back(kEosId);
    p.tgt.push_back(kEosId);
    corpus.pairs.push_back(std::move(p));
  }
  return corpus;
}

bool encoder_matches(const Checkpoint& reference, const Seq2SeqModel& model) {
  for (const auto& [name, np] : model.parameters()) {
    if (!is_encoder_group(np.group)) continue;
    const auto it = reference.params.find(name);
    if (it == reference.params.end() || !(it->second == np.param.value))
      return false;
  }
  return true;
}

std::vector<MetricExample> metric_examples() {
  const auto f2 = [](double p, double r) { return 5.0 * p * r / (4.0 * p + r); };
  return {
      // Clipped unigram precision 2/7 and no bigram match, so BLEU-4 is 0.
      {"clipped_repeats", {"the the the the the the the"},
       {"the cat is on the mat"}, 0.0, std::nullopt},
      // p_n = (6-n)/(7-n), brevity penalty 1.
      {"one_substitution", {"a b c d e f"}, {"a b c d e g"},
       100.0 * std::pow(1.0 / 3.0, 0.25), std::nullopt},
      // All precisions 1, BP = exp(1 - 6/4).
      {"short_prefix", {"a b c d"}, {"a b c d e f"}, 100.0 * std::exp(-0.5),
       std::nullopt},
      // Pooled: p1 = 7/8, p2 = 5/6, p3 = 3/4, p4 = 1/2.
      {"two_sentences", {"a b c d", "e f g h"}, {"a b c d", "e f g x"},
       100.0 * std::pow((7.0 / 8.0) * (5.0 / 6.0) * (3.0 / 4.0) * 0.5, 0.25),
       std::nullopt},
      // Character orders 1..4 give F = 3/4, 2/3, 1/2, 0; orders 5, 6 absent.
      {"chrf_substitution", {"abcd"}, {"abce"}, 0.0,
       100.0 * (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0},
      // Recall-weighted: P = 1 with R = 1/2 and R = 1/3 for orders 1 and 2.
      {"chrf_short_hypothesis", {"ab"}, {"abcd"}, 0.0,
       100.0 * (f2(1.0, 0.5) + f2(1.0, 1.0 / 3.0)) / 2.0},
      // Whitespace is ignored: the same characters split differently.
      {"chrf_spacing", {"ab cd"}, {"abcd"}, 0.0, 100.0},
  };
}

bool beam1_matches_greedy(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelConfig cfg = tiny_model_config(12 + rng() % 8);
  const Seq2SeqModel model(cfg, seed);
  IdSeq src;
  const std::size_t len = 1 + rng() % 6;
  for (std::size_t j = 0; j < len; ++j)
    src.push_back(int(kNumSpecials) + int(rng() % (cfg.vocab_size - kNumSpecials)));
  src.push_back(kEosId);
  const Hypothesis g = greedy_decode(model, src);
  BeamConfig bc;
  bc.beam_size = 1;
  const Hypothesis b = beam_search(model, src, bc);
  return g.tokens == b.tokens && g.log_prob == b.log_prob &&
         g.finished == b.finished;
}

Checkpoint random_checkpoint(std::uint64_t seed, std::uint64_t updates) {
  const Seq2SeqModel model(tiny_model_config(), seed);
  return Checkpoint::from_model(model, Stage::base, updates);
}

double average_oracle_gap(std::uint64_t seed, std::size_t count) {
  std::vector<Checkpoint> ckpts;
  for (std::size_t k = 0; k < count; ++k)
    ckpts.push_back(random_checkpoint(seed * 1000 + k, 100 * (k + 1)));
  const Checkpoint avg = average_checkpoints(ckpts);
  double gap = 0.0;
  for (const auto& [name, tensor] : avg.params) {
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      double s = 0.0;
      for (const auto& c : ckpts) s += c.params.at(name)[i];
      gap = std::max(gap, std::abs(tensor[i] - s / double(count)));
    }
  }
  return gap;
}

ParallelCorpus imbalanced_stream(std::size_t per_subset, std::size_t vocab_size,
                                 std::uint64_t seed) {
  ParallelCorpus corpus;
  for (std::size_t i = kNumSpecials; i < vocab_size; ++i)
    corpus.vocab.add("t" + std::to_string(i));
  const std::size_t content = vocab_size - kNumSpecials;
  const std::size_t half = content / 2;
  std::mt19937_64 rng(seed);
  for (std::size_t part = 0; part < 2; ++part) {
    for (std::size_t k = 0; k < per_subset; ++k) {
      SentencePair p;
      const std::size_t len = 3 + rng() % 5;
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t tok = part * half + rng() % half;
        p.src.push_back(int(kNumSpecials + tok));
        p.tgt.push_back(int(kNumSpecials + (tok * 7 + 3) % content));
      }
      p.src.push_back(kEosId);
      p.tgt.push_back(kEosId);
      corpus.pairs.push_back(std::move(p));
    }
  }
  return corpus;
}

RetentionTrial retention_trial(std::uint64_t seed) {
  constexpr std::size_t kVocab = 29;
  constexpr std::size_t kPerSubset = 1000;
  const ParallelCorpus corpus = imbalanced_stream(kPerSubset, kVocab, seed);
  ParallelCorpus first;
  first.vocab = corpus.vocab;
  first.pairs.assign(corpus.pairs.begin(), corpus.pairs.begin() + kPerSubset);

  ModelConfig mc = tiny_model_config(kVocab);
  mc.d_model = 32;
  mc.d_ff = 64;
  mc.n_heads = 4;
  const Seq2SeqModel init(mc, seed);
  const Checkpoint start = Checkpoint::from_model(init, Stage::base, 0);

  TrainConfig c;
  c.mode = TrainingMode::joint;
  c.lr = 5e-3;
  c.batch_tokens = 256;
  c.eval_every = 0;
  c.keep_last_k = 1;
  c.checkpoint_every = 1000000;
  c.ordered = true;
  c.n_teachers = 1;
  c.alpha = 0.95;
  c.seed = seed;
  const EpochPartition part = ckd_partition(corpus, c, 0);
  c.max_updates = 0;
  for (std::size_t t = 1; t <= 2; ++t)
    c.max_updates += ckd_batches(part.subset(t), corpus, c, 0, t, 0).size();

  RetentionTrial trial;
  trial.updates = c.max_updates;
  trial.initial_nll = evaluate_nll(init, first);
  const CkdResult ckd = run_ckd(start, corpus, nullptr, c);
  trial.ckd_nll = evaluate_nll(ckd.train.last.to_model(), first);
  const TrainResult seq = run_sequential(start, corpus, nullptr, c);
  trial.sequential_nll = evaluate_nll(seq.last.to_model(), first);
  return trial;
}

}  // namespace kdmt::oracle
