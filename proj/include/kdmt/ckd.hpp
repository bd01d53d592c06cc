#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kdmt/adam.hpp"
#include "kdmt/batching.hpp"
#include "kdmt/checkpoint.hpp"
#include "kdmt/model.hpp"
#include "kdmt/partition.hpp"
#include "kdmt/train.hpp"

namespace kdmt {

// Word-level distillation loss: cross-entropy of the student's
// log-probabilities against the mean of the teacher distributions, summed
// over classes and averaged over non-pad rows. Teacher tensors are
// constants, so gradients reach only the student. Every non-pad teacher row
// must sum to 1 within 1e-6.
ad::Var kd_loss(ad::Var student_logits, std::span<const Tensor> teacher_probs,
                const std::vector<bool>& pad_mask);

// alpha * kd_loss + (1 - alpha) * cross_entropy. alpha == 0 and alpha == 1
// return the corresponding component itself.
ad::Var combined_loss(ad::Var student_logits,
                      std::span<const Tensor> teacher_probs,
                      std::span<const int> gold, double alpha, int pad_id);

// Row-wise softmax of a teacher's logits for `batch`, dropout off.
Tensor teacher_distribution(const Seq2SeqModel& teacher, const Batch& batch,
                            const EncoderCache* cache = nullptr);

// One row of the schedule log. model_id 0 is the student, i >= 1 teacher i.
struct ScheduleEntry {
  std::uint64_t epoch = 0;
  std::size_t t = 0;
  std::size_t model_id = 0;
  std::size_t subset = 0;
  std::uint64_t updates = 0;
  double mean_loss = 0.0;
};

// TSV with header "epoch\tt\tmodel\tsubset\tupdates\tmean_loss".
void write_schedule(const std::filesystem::path& path,
                    std::span<const ScheduleEntry> entries);

struct CkdState {
  Seq2SeqModel student;
  std::vector<Seq2SeqModel> teachers;
  AdamOptimizer student_optimizer;
  std::vector<AdamOptimizer> teacher_optimizers;
  std::mt19937_64 student_rng;
  std::vector<std::mt19937_64> teacher_rngs;
  std::uint64_t epoch = 0;  // epochs started so far
  std::size_t timestep = 0;
  std::uint64_t student_updates = 0;
  std::vector<ScheduleEntry> schedule;
};

// Student and every teacher start as copies of `base`, carrying the freeze
// mask of config.mode (from_scratch is rejected).
CkdState make_ckd_state(const Seq2SeqModel& base, const TrainConfig& config);

// Copies the student's parameters into every teacher and resets the teacher
// optimizers.
void reinit_teachers(CkdState& state);

// Optional observation points for auditing a run.
struct CkdHooks {
  // Before the optimizer step of every batch (model_id as in ScheduleEntry).
  std::function<void(const CkdState&, std::size_t model_id, const Batch&)>
      on_batch;
  // After the student's backward pass, before its optimizer step.
  std::function<void(const CkdState&)> after_student_backward;
  // After each student optimizer step.
  std::function<void(const CkdState&)> after_student_update;
  // After teacher reinitialization at the end of a complete epoch.
  std::function<void(const CkdState&, const EpochPartition&)> on_epoch_end;
};

// Student subset order, per-batch shuffle and partition seeds shared with the
// sequential baseline.
EpochPartition ckd_partition(const ParallelCorpus& corpus,
                             const TrainConfig& config, std::uint64_t epoch);
std::vector<Batch> ckd_batches(std::span<const std::size_t> subset,
                               const ParallelCorpus& corpus,
                               const TrainConfig& config, std::uint64_t epoch,
                               std::size_t t, std::size_t model_id);

// One pass of the schedule: at each timestep t every teacher trains one pass
// of NLL on D_O(i,t), then the student trains one pass on D_t with the
// combined loss. Teachers are reinitialized from the student when the epoch
// completes. Returns false when the student budget ran out mid-epoch.
bool run_ckd_epoch(CkdState& state, const ParallelCorpus& corpus,
                   const TrainConfig& config, const CkdHooks& hooks = {},
                   const EncoderCache* cache = nullptr);

struct CkdResult {
  TrainResult train;
  std::vector<ScheduleEntry> schedule;
};

// Epochs until config.max_updates student updates; returns the average of
// the last keep_last_k student checkpoints.
CkdResult run_ckd(const Checkpoint& base, const ParallelCorpus& corpus,
                  const ParallelCorpus* valid, const TrainConfig& config,
                  const CkdHooks& hooks = {},
                  const MetricObserver& observer = {});

// The student's schedule without teachers: plain NLL over D_1..D_{n+1} with
// the same partitions, batch order and dropout stream as run_ckd.
TrainResult run_sequential(const Checkpoint& base, const ParallelCorpus& corpus,
                           const ParallelCorpus* valid,
                           const TrainConfig& config,
                           const MetricObserver& observer = {});

}  // namespace kdmt
