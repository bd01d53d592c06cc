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
#include "kdmt/corpus.hpp"
#include "kdmt/model.hpp"

namespace kdmt {

struct TrainConfig {
  TrainingMode mode = TrainingMode::decoder_only;
  double lr = 5e-3;
  std::uint64_t max_updates = 5000;
  std::uint64_t checkpoint_every = 500;
  std::size_t keep_last_k = 5;
  std::size_t batch_tokens = 2048;
  // Validation NLL/BLEU is logged every eval_every updates (0 = never).
  std::uint64_t eval_every = 500;
  double alpha = 0.95;
  std::size_t n_teachers = 1;
  double mask_rate = 0.15;
  // CKD only: present subsets in corpus order, without reshuffling.
  bool ordered = false;
  std::uint64_t seed = 17;
  // When set, every periodic checkpoint is also written here.
  std::filesystem::path checkpoint_dir;

  void validate() const;
  std::string to_text() const;
  // Applies one key=value pair; false when the key is not a training key.
  bool set(const std::string& key, const std::string& value);

  static TrainConfig mlm_defaults();
  static TrainConfig base_defaults();
  static TrainConfig ckd_defaults();
};

// One line of the training metrics log.
struct MetricRow {
  std::uint64_t update = 0;
  std::string split;
  double nll = 0.0;
  double bleu = 0.0;
};

// TSV with header "update\tsplit\tnll\tbleu".
void write_metrics(const std::filesystem::path& path,
                   std::span<const MetricRow> rows);

// Encoder outputs of every sentence in a corpus, valid only while the
// encoder stays frozen (no dropout, no updates).
class EncoderCache {
 public:
  EncoderCache(const Seq2SeqModel& model, const ParallelCorpus& corpus,
               std::size_t batch_tokens);

  // Padded [batch*len x d_model] states for `batch`; pad rows are zero.
  Tensor states(const Batch& batch) const;
  // True when the model's encoder parameters are the ones cached.
  bool matches(const Seq2SeqModel& model) const;

 private:
  std::size_t d_model_ = 0;
  std::vector<Tensor> per_sentence_;
  std::map<std::string, Tensor> encoder_params_;
};

// True when both encoder groups are frozen, so encoder outputs can be cached.
bool encoder_cacheable(const Seq2SeqModel& model);

// Decoder logits for a training batch, taking encoder states from the cache
// when one is supplied.
ad::Var batch_logits(ParameterBinder& params, const Batch& batch,
                     const ForwardOptions& options, const EncoderCache* cache);

// One NLL optimizer step; returns the batch loss.
double nll_step(Seq2SeqModel& model, AdamOptimizer& optimizer,
                const Batch& batch, std::mt19937_64& rng,
                const EncoderCache* cache = nullptr);

// Token-averaged NLL over a corpus, inference mode.
double evaluate_nll(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                    std::size_t batch_tokens = 2048);
double evaluate_nll(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                    std::span<const std::size_t> indices,
                    std::size_t batch_tokens = 2048);

// Token NLL plus greedy-decoding BLEU on a held-out corpus (the cheap
// in-training probe; final scores use beam search).
MetricRow evaluate_split(const Seq2SeqModel& model,
                         const ParallelCorpus& corpus, std::uint64_t update,
                         const std::string& split);

// Keeps the most recent k checkpoints and averages them on request.
class CheckpointWindow {
 public:
  explicit CheckpointWindow(std::size_t k) : k_(k) {}
  void push(Checkpoint ckpt);
  bool empty() const { return window_.empty(); }
  std::uint64_t latest_updates() const;
  Checkpoint average() const;
  const std::vector<Checkpoint>& checkpoints() const { return window_; }

 private:
  std::size_t k_;
  std::vector<Checkpoint> window_;
};

struct TrainResult {
  Checkpoint averaged;  // mean of the last keep_last_k checkpoints
  Checkpoint last;      // parameters after the final update
  std::vector<MetricRow> metrics;
};

// Snapshots every checkpoint_every updates (and at the end), keeping the
// last keep_last_k; optionally mirrored to config.checkpoint_dir.
class CheckpointSchedule {
 public:
  CheckpointSchedule(const TrainConfig& config, Stage stage);
  void after_update(const Seq2SeqModel& model, std::uint64_t updates);
  TrainResult finish(const Seq2SeqModel& model, std::uint64_t updates,
                     std::vector<MetricRow> metrics);

 private:
  void take(const Seq2SeqModel& model, std::uint64_t updates);

  const TrainConfig& config_;
  Stage stage_;
  CheckpointWindow window_;
};

// Called after each validation evaluation; returns nothing, may log.
using MetricObserver = std::function<void(const MetricRow&)>;

// Encoder pretraining by masked-token recovery. Decoder groups are frozen
// for the duration; a temporary output head over encoder states is trained
// alongside and then discarded. `sentences` are EOS-terminated source ids.
TrainResult pretrain_encoder_mlm(Seq2SeqModel& model,
                                 std::span<const IdSeq> sentences,
                                 std::span<const IdSeq> held_out,
                                 const TrainConfig& config,
                                 const MetricObserver& observer = {});

// Selects roughly `rate` of the content tokens for prediction. A selected
// token becomes MASK with probability 0.8, a random content token with 0.1
// and stays unchanged otherwise. Returns the corrupted input and the targets
// (original id where selected, PAD elsewhere).
std::pair<IdSeq, IdSeq> mask_tokens(const IdSeq& ids, double rate,
                                    std::size_t vocab_size,
                                    std::mt19937_64& rng);

// Token-NLL training in config.mode. from_scratch re-initializes the model.
TrainResult train(Seq2SeqModel& model, const ParallelCorpus& train_data,
                  const ParallelCorpus* valid, const TrainConfig& config,
                  const MetricObserver& observer = {});

// Stage-1 entry point; requires mode == decoder_only.
TrainResult train_base(Seq2SeqModel& model, const ParallelCorpus& train_data,
                       const ParallelCorpus* valid, const TrainConfig& config,
                       const MetricObserver& observer = {});

}  // namespace kdmt
