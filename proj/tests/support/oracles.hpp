#pragma once

// Reference checks shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kdmt/checkpoint.hpp"
#include "kdmt/ckd.hpp"
#include "kdmt/corpus.hpp"
#include "kdmt/gradcheck.hpp"
#include "kdmt/model.hpp"
#include "kdmt/train.hpp"

namespace kdmt::oracle {

// ---- autodiff ------------------------------------------------------------

struct GradCase {
  std::string name;
  // Loss and inputs for one seed; the loss is deterministic for that seed.
  std::function<std::pair<ad::ScalarFn, std::vector<Tensor>>(std::uint64_t)>
      make;
};

// One case per differentiable primitive (plus masked/causal variants).
std::vector<GradCase> primitive_grad_cases();
ad::GradCheckResult run_grad_case(const GradCase& c, std::uint64_t seed);

// ---- partition / ordering -----------------------------------------------

// Empty when the random and ordered partitions of `size` indices into n+1
// subsets are disjoint, exhaustive and balanced and every timestep's teacher
// subsets are exactly {1..n+1} minus t. Otherwise a description.
std::string partition_violations(std::size_t size, std::size_t n,
                                 std::uint64_t seed);

// ---- distillation ---------------------------------------------------------

// |kd_loss - cross_entropy| with one-hot teachers on random logits (some
// padded rows).
double kd_ce_gap(std::uint64_t seed);
// combined_loss at alpha 0 and 1 equals its components bit-for-bit, in value
// and in gradient.
bool combined_extremes_exact(std::uint64_t seed);

struct AuditReport {
  std::uint64_t epochs = 0;
  std::size_t teacher_batches = 0;
  std::size_t student_backwards = 0;
  bool teachers_avoid_current = true;
  bool log_avoids_current = true;
  bool equal_after_epoch = true;
  bool zero_teacher_grads = true;
  bool student_has_grads = true;

  bool ok() const {
    return teachers_avoid_current && log_avoids_current && equal_after_epoch &&
           zero_teacher_grads && student_has_grads && teacher_batches > 0;
  }
};

// Runs `epochs` complete schedule epochs from `base` and audits them.
AuditReport audit_ckd(const Checkpoint& base, const ParallelCorpus& corpus,
                      TrainConfig config, std::uint64_t epochs);

// ---- small fixtures -------------------------------------------------------

ModelConfig tiny_model_config(std::size_t vocab_size = 16);
// Random pairs over `vocab_size` tokens (cipher: tgt = src + 1 wrapping).
ParallelCorpus tiny_corpus(std::size_t pairs, std::size_t vocab_size,
                           std::uint64_t seed, std::size_t max_len = 6);

// Every parameter of a group-filtered set equal bit-for-bit to a checkpoint.
bool encoder_matches(const Checkpoint& reference, const Seq2SeqModel& model);

// ---- metrics ----------------------------------------------------------------

struct MetricExample {
  std::string name;
  std::vector<std::string> hyps;
  std::vector<std::string> refs;
  std::optional<double> bleu;  // hand-computed, 0..100
  std::optional<double> chrf;
};
std::vector<MetricExample> metric_examples();

// Greedy and beam-1 agree on tokens and log-probability for a random model.
bool beam1_matches_greedy(std::uint64_t seed);

// ---- checkpoints ----------------------------------------------------------

Checkpoint random_checkpoint(std::uint64_t seed, std::uint64_t updates);
// Largest |average - naive elementwise mean| over all parameters.
double average_oracle_gap(std::uint64_t seed, std::size_t count);

// ---- retention ------------------------------------------------------------

// Ordered two-subset stream: the first `per_subset` pairs draw source tokens
// from the lower half of the content vocabulary, the rest from the upper
// half. Both halves share one cipher.
ParallelCorpus imbalanced_stream(std::size_t per_subset, std::size_t vocab_size,
                                 std::uint64_t seed);

struct RetentionTrial {
  std::uint64_t updates = 0;  // student updates in the single pass
  double initial_nll = 0.0;   // on D_1, before the stream
  double ckd_nll = 0.0;
  double sequential_nll = 0.0;
};

// One pass over the ordered stream with n = 1 from a freshly initialized
// model, once with CKD and once sequentially; NLL on D_1 of the final
// (unaveraged) students.
RetentionTrial retention_trial(std::uint64_t seed);

}  // namespace kdmt::oracle
