#include "kdmt/ckd.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>

#include "kdmt/error.hpp"
#include "kdmt/parse.hpp"
#include "kdmt/random.hpp"

namespace kdmt {
namespace {

constexpr std::uint64_t kPartitionStream = 0x70617274;
constexpr std::uint64_t kBatchStream = 0x62617463;
constexpr std::uint64_t kModelDropoutStream = 0x6d64726f;

constexpr double kRowSumTolerance = 1e-6;

std::mt19937_64 dropout_stream(const TrainConfig& config, std::size_t model_id) {
  return std::mt19937_64(
      derive_seed(config.seed, {kModelDropoutStream, model_id}));
}

std::vector<bool> pad_rows(std::span<const int> gold, int pad_id) {
  std::vector<bool> mask(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) mask[i] = gold[i] == pad_id;
  return mask;
}

}  // namespace

ad::Var kd_loss(ad::Var student_logits, std::span<const Tensor> teacher_probs,
                const std::vector<bool>& pad_mask) {
  const Tensor& logits = student_logits.value();
  if (logits.rank() != 2)
    throw DimensionError("kd_loss expects matrix logits, got " +
                         to_string(logits.shape()));
  if (teacher_probs.empty()) throw ContractError("kd_loss needs a teacher");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (pad_mask.size() != n)
    throw DimensionError("kd_loss: pad mask of " +
                         std::to_string(pad_mask.size()) + " rows for " +
                         to_string(logits.shape()));
  for (const Tensor& q : teacher_probs)
    if (q.shape() != logits.shape())
      throw DimensionError("kd_loss: teacher " + to_string(q.shape()) +
                           " vs student " + to_string(logits.shape()));

  std::size_t count = 0;
  for (bool pad : pad_mask) count += pad ? 0 : 1;
  const double teachers = static_cast<double>(teacher_probs.size());
  const double denom = count ? static_cast<double>(count) : 1.0;

  Tensor weights({n, v}, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (pad_mask[r]) continue;
    for (std::size_t i = 0; i < teacher_probs.size(); ++i) {
      const double* row = teacher_probs[i].data().data() + r * v;
      double total = 0.0;
      for (std::size_t c = 0; c < v; ++c) total += row[c];
      if (std::abs(total - 1.0) > kRowSumTolerance)
        throw ContractError("teacher " + std::to_string(i + 1) + " row " +
                            std::to_string(r) + " sums to " +
                            std::to_string(total));
    }
    for (std::size_t c = 0; c < v; ++c) {
      double q = 0.0;
      for (const Tensor& t : teacher_probs) q += t[r * v + c];
      weights[r * v + c] = -(q / teachers) / denom;
    }
  }
  ad::Tape& tape = student_logits.tape();
  return ad::sum(ad::multiply(ad::log_softmax(student_logits),
                              tape.constant(std::move(weights))));
}

ad::Var combined_loss(ad::Var student_logits,
                      std::span<const Tensor> teacher_probs,
                      std::span<const int> gold, double alpha, int pad_id) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (alpha == 0.0) return ad::cross_entropy(student_logits, gold, pad_id);
  ad::Var kd = kd_loss(student_logits, teacher_probs, pad_rows(gold, pad_id));
  if (alpha == 1.0) return kd;
  ad::Var nll = ad::cross_entropy(student_logits, gold, pad_id);
  return ad::add(ad::scale(kd, alpha), ad::scale(nll, 1.0 - alpha));
}

Tensor teacher_distribution(const Seq2SeqModel& teacher, const Batch& batch,
                            const EncoderCache* cache) {
  ad::Tape tape;
  ParameterBinder params(teacher, tape);
  Tensor probs = batch_logits(params, batch, {}, cache).value();
  const std::size_t n = probs.rows(), v = probs.cols();
  for (std::size_t r = 0; r < n; ++r) {
    double* row = probs.data().data() + r * v;
    double mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (std::size_t c = 0; c < v; ++c) row[c] /= z;
  }
  return probs;
}

void write_schedule(const std::filesystem::path& path,
                    std::span<const ScheduleEntry> entries) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch\tt\tmodel\tsubset\tupdates\tmean_loss\n";
  for (const auto& e : entries) {
    out << e.epoch << "\t" << e.t << "\t"
        << (e.model_id == 0 ? std::string("student")
                            : "teacher" + std::to_string(e.model_id))
        << "\t" << e.subset << "\t" << e.updates << "\t" << format_double(e.mean_loss) << "\n";
  }
}

CkdState make_ckd_state(const Seq2SeqModel& base, const TrainConfig& config) {
  config.validate();
  if (config.mode == TrainingMode::from_scratch)
    throw ConfigError(
        "CKD starts from a trained base model; from_scratch is not allowed");
  Seq2SeqModel student = base;
  student.set_training_mode(config.mode, config.seed);
  CkdState state{student, {}, AdamOptimizer({config.lr}), {},
                 dropout_stream(config, 0), {}, 0, 0, 0, {}};
  for (std::size_t i = 1; i <= config.n_teachers; ++i) {
    state.teachers.push_back(student);
    state.teacher_optimizers.emplace_back(AdamConfig{config.lr});
    state.teacher_rngs.push_back(dropout_stream(config, i));
  }
  return state;
}

void reinit_teachers(CkdState& state) {
  for (std::size_t i = 0; i < state.teachers.size(); ++i) {
    state.teachers[i].copy_parameters_from(state.student);
    state.teachers[i].zero_grad();
    state.teacher_optimizers[i].reset();
  }
}

EpochPartition ckd_partition(const ParallelCorpus& corpus,
                             const TrainConfig& config, std::uint64_t epoch) {
  if (config.ordered) return ordered_partition(corpus.size(), config.n_teachers);
  return partition_epoch(corpus.size(), config.n_teachers,
                         derive_seed(config.seed, {kPartitionStream, epoch}));
}

std::vector<Batch> ckd_batches(std::span<const std::size_t> subset,
                               const ParallelCorpus& corpus,
                               const TrainConfig& config, std::uint64_t epoch,
                               std::size_t t, std::size_t model_id) {
  if (config.ordered) return batch_in_order(subset, corpus, config.batch_tokens);
  return batch_iter(subset, corpus, config.batch_tokens,
                    derive_seed(config.seed, {kBatchStream, epoch, t, model_id}));
}

bool run_ckd_epoch(CkdState& state, const ParallelCorpus& corpus,
                   const TrainConfig& config, const CkdHooks& hooks,
                   const EncoderCache* cache) {
  const std::size_t n = state.teachers.size();
  const std::uint64_t epoch = state.epoch++;
  const EpochPartition partition = ckd_partition(corpus, config, epoch);
  const int pad_id = state.student.config().pad_id;

  for (std::size_t t = 1; t <= n + 1; ++t) {
    state.timestep = t;
    for (std::size_t i = 1; i <= n; ++i) {
      const std::size_t subset = ordering(i, t, n);
      Seq2SeqModel& teacher = state.teachers[i - 1];
      double total = 0.0;
      std::uint64_t steps = 0;
      for (const Batch& b : ckd_batches(partition.subset(subset), corpus,
                                        config, epoch, t, i)) {
        if (hooks.on_batch) hooks.on_batch(state, i, b);
        total += nll_step(teacher, state.teacher_optimizers[i - 1], b,
                          state.teacher_rngs[i - 1], cache);
        ++steps;
      }
      state.schedule.push_back(
          {epoch, t, i, subset, steps, steps ? total / double(steps) : 0.0});
    }

    double total = 0.0;
    std::uint64_t steps = 0;
    bool exhausted = false;
    for (const Batch& b :
         ckd_batches(partition.subset(t), corpus, config, epoch, t, 0)) {
      if (state.student_updates >= config.max_updates) {
        exhausted = true;
        break;
      }
      std::vector<Tensor> probs;
      if (config.alpha > 0.0)
        for (const Seq2SeqModel& teacher : state.teachers)
          probs.push_back(teacher_distribution(teacher, b, cache));

      if (hooks.on_batch) hooks.on_batch(state, 0, b);
      ad::Tape tape;
      ParameterBinder params(state.student, tape);
      const ForwardOptions options{true, &state.student_rng};
      ad::Var logits = batch_logits(params, b, options, cache);
      ad::Var loss = combined_loss(logits, probs, b.tgt_out, config.alpha, pad_id);
      tape.backward(loss);
      if (hooks.after_student_backward) hooks.after_student_backward(state);
      state.student_optimizer.step(state.student);
      ++state.student_updates;
      total += loss.value().item();
      ++steps;
      if (hooks.after_student_update) hooks.after_student_update(state);
    }
    state.schedule.push_back(
        {epoch, t, 0, t, steps, steps ? total / double(steps) : 0.0});
    if (exhausted || state.student_updates >= config.max_updates) {
      // A budget that runs out exactly at the epoch's last batch still
      // completes the epoch.
      if (exhausted || t < n + 1) return false;
    }
  }

  reinit_teachers(state);
  if (hooks.on_epoch_end) hooks.on_epoch_end(state, partition);
  return true;
}

namespace {

void check_base(const Checkpoint& base, const ParallelCorpus& corpus) {
  if (corpus.vocab.size() != base.config.vocab_size)
    throw ConfigError("corpus vocabulary has " +
                      std::to_string(corpus.vocab.size()) +
                      " tokens, base checkpoint expects " +
                      std::to_string(base.config.vocab_size));
  if (corpus.size() < 1) throw DataError("empty training corpus");
}

std::optional<EncoderCache> maybe_cache(const Seq2SeqModel& model,
                                        const ParallelCorpus& corpus,
                                        const TrainConfig& config) {
  std::optional<EncoderCache> cache;
  if (encoder_cacheable(model)) cache.emplace(model, corpus, config.batch_tokens);
  return cache;
}

}  // namespace

CkdResult run_ckd(const Checkpoint& base, const ParallelCorpus& corpus,
                  const ParallelCorpus* valid, const TrainConfig& config,
                  const CkdHooks& hooks, const MetricObserver& observer) {
  check_base(base, corpus);
  CkdState state = make_ckd_state(base.to_model(), config);
  const auto cache = maybe_cache(state.student, corpus, config);

  CheckpointSchedule snapshots(config, Stage::ckd);
  std::vector<MetricRow> metrics;
  CkdHooks inner = hooks;
  inner.after_student_update = [&](const CkdState& s) {
    snapshots.after_update(s.student, s.student_updates);
    if (valid && config.eval_every &&
        s.student_updates % config.eval_every == 0) {
      metrics.push_back(
          evaluate_split(s.student, *valid, s.student_updates, "valid"));
      if (observer) observer(metrics.back());
    }
    if (hooks.after_student_update) hooks.after_student_update(s);
  };

  while (state.student_updates < config.max_updates)
    if (!run_ckd_epoch(state, corpus, config, inner, cache ? &*cache : nullptr))
      break;

  CkdResult result{
      snapshots.finish(state.student, state.student_updates, std::move(metrics)),
      std::move(state.schedule)};
  return result;
}

TrainResult run_sequential(const Checkpoint& base, const ParallelCorpus& corpus,
                           const ParallelCorpus* valid,
                           const TrainConfig& config,
                           const MetricObserver& observer) {
  check_base(base, corpus);
  config.validate();
  if (config.mode == TrainingMode::from_scratch)
    throw ConfigError("sequential baseline starts from a trained base model");
  Seq2SeqModel student = base.to_model();
  student.set_training_mode(config.mode, config.seed);
  const auto cache = maybe_cache(student, corpus, config);

  AdamOptimizer optimizer({config.lr});
  std::mt19937_64 rng = dropout_stream(config, 0);
  CheckpointSchedule snapshots(config, Stage::ckd);
  std::vector<MetricRow> metrics;
  std::uint64_t updates = 0;

  for (std::uint64_t epoch = 0; updates < config.max_updates; ++epoch) {
    const EpochPartition partition = ckd_partition(corpus, config, epoch);
    for (std::size_t t = 1; t <= config.n_teachers + 1; ++t)
      for (const Batch& b :
           ckd_batches(partition.subset(t), corpus, config, epoch, t, 0)) {
        if (updates == config.max_updates) break;
        nll_step(student, optimizer, b, rng, cache ? &*cache : nullptr);
        ++updates;
        snapshots.after_update(student, updates);
        if (valid && config.eval_every && updates % config.eval_every == 0) {
          metrics.push_back(evaluate_split(student, *valid, updates, "valid"));
          if (observer) observer(metrics.back());
        }
      }
  }
  return snapshots.finish(student, updates, std::move(metrics));
}

}  // namespace kdmt
