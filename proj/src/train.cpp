#include "kdmt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "kdmt/error.hpp"
#include "kdmt/eval.hpp"
#include "kdmt/parse.hpp"
#include "kdmt/random.hpp"

namespace kdmt {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kMaskStream = 0x6d61736b;
constexpr std::uint64_t kHeadStream = 0x68656164;

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::set<ParamGroup> decoder_groups() {
  return {ParamGroup::dec_embed, ParamGroup::dec_layers, ParamGroup::out_proj};
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("alpha must lie in [0, 1], got " + format_double(alpha));
  if (n_teachers < 1) throw ConfigError("n_teachers must be at least 1");
  if (keep_last_k < 1) throw ConfigError("keep_last_k must be at least 1");
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be positive");
  if (mask_rate <= 0.0 || mask_rate >= 1.0)
    throw ConfigError("mask_rate must lie in (0, 1)");
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "mode=" << to_string(mode) << "\n"
      << "lr=" << format_double(lr) << "\n"
      << "max_updates=" << max_updates << "\n"
      << "checkpoint_every=" << checkpoint_every << "\n"
      << "keep_last_k=" << keep_last_k << "\n"
      << "batch_tokens=" << batch_tokens << "\n"
      << "eval_every=" << eval_every << "\n"
      << "alpha=" << format_double(alpha) << "\n"
      << "n_teachers=" << n_teachers << "\n"
      << "mask_rate=" << format_double(mask_rate) << "\n"
      << "ordered=" << (ordered ? "true" : "false") << "\n"
      << "seed=" << seed << "\n";
  return out.str();
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "mode") mode = parse_training_mode(value);
  else if (key == "lr") lr = parse_double(key, value);
  else if (key == "max_updates") max_updates = parse_u64(key, value);
  else if (key == "checkpoint_every") checkpoint_every = parse_u64(key, value);
  else if (key == "keep_last_k") keep_last_k = parse_size(key, value);
  else if (key == "batch_tokens") batch_tokens = parse_size(key, value);
  else if (key == "eval_every") eval_every = parse_u64(key, value);
  else if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "n_teachers") n_teachers = parse_size(key, value);
  else if (key == "mask_rate") mask_rate = parse_double(key, value);
  else if (key == "ordered") ordered = parse_bool(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else return false;
  return true;
}

TrainConfig TrainConfig::mlm_defaults() {
  TrainConfig c;
  c.mode = TrainingMode::joint;
  c.max_updates = 2000;
  return c;
}

TrainConfig TrainConfig::base_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::ckd_defaults() {
  TrainConfig c;
  c.lr = 1e-3;
  c.max_updates = 2000;
  return c;
}

void write_metrics(const std::filesystem::path& path,
                   std::span<const MetricRow> rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "update\tsplit\tnll\tbleu\n";
  for (const auto& r : rows)
    out << r.update << "\t" << r.split << "\t" << format_double(r.nll) << "\t"
        << format_double(r.bleu) << "\n";
}

// ---------------------------------------------------------------------------
// Encoder cache

bool encoder_cacheable(const Seq2SeqModel& model) {
  return model.is_frozen(ParamGroup::enc_embed) &&
         model.is_frozen(ParamGroup::enc_layers);
}

EncoderCache::EncoderCache(const Seq2SeqModel& model,
                           const ParallelCorpus& corpus,
                           std::size_t batch_tokens)
    : d_model_(model.config().d_model), per_sentence_(corpus.size()) {
  for (const auto& [name, entry] : model.parameters())
    if (is_encoder_group(entry.group))
      encoder_params_.emplace(name, entry.param.value);

  const auto indices = all_indices(corpus.size());
  for (const Batch& batch : batch_in_order(indices, corpus, batch_tokens)) {
    ad::Tape tape;
    ParameterBinder params(model, tape);
    const Tensor& states = encode(params, batch.src, {}).value();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t len = corpus.pairs[batch.indices[b]].src.size();
      auto rows = Tensor::uninitialized({len, d_model_});
      std::copy_n(states.data().data() + b * batch.src.len * d_model_,
                  len * d_model_, rows.data().data());
      per_sentence_[batch.indices[b]] = std::move(rows);
    }
  }
}

Tensor EncoderCache::states(const Batch& batch) const {
  Tensor out({batch.size() * batch.src.len, d_model_}, 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor& rows = per_sentence_.at(batch.indices[b]);
    std::copy(rows.data().begin(), rows.data().end(),
              out.data().begin() +
                  static_cast<std::ptrdiff_t>(b * batch.src.len * d_model_));
  }
  return out;
}

bool EncoderCache::matches(const Seq2SeqModel& model) const {
  for (const auto& [name, value] : encoder_params_)
    if (!(model.parameter(name).value == value)) return false;
  return true;
}

ad::Var batch_logits(ParameterBinder& params, const Batch& batch,
                     const ForwardOptions& options, const EncoderCache* cache) {
  ad::Var states = cache ? params.tape().constant(cache->states(batch))
                         : encode(params, batch.src, options);
  return decode_logits(params, states, batch.src, batch.tgt_in, batch.tgt_len,
                       options);
}

double nll_step(Seq2SeqModel& model, AdamOptimizer& optimizer,
                const Batch& batch, std::mt19937_64& rng,
                const EncoderCache* cache) {
  ad::Tape tape;
  ParameterBinder params(model, tape);
  const ForwardOptions options{true, &rng};
  ad::Var logits = batch_logits(params, batch, options, cache);
  ad::Var loss = ad::cross_entropy(logits, batch.tgt_out, model.config().pad_id);
  tape.backward(loss);
  optimizer.step(model);
  return loss.value().item();
}

double evaluate_nll(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                    std::span<const std::size_t> indices,
                    std::size_t batch_tokens) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const Batch& batch : batch_in_order(indices, corpus, batch_tokens)) {
    ad::Tape tape;
    ParameterBinder params(model, tape);
    ad::Var logits = batch_logits(params, batch, {}, nullptr);
    ad::Var loss =
        ad::cross_entropy(logits, batch.tgt_out, model.config().pad_id);
    total += loss.value().item() * static_cast<double>(batch.target_tokens);
    tokens += batch.target_tokens;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

double evaluate_nll(const Seq2SeqModel& model, const ParallelCorpus& corpus,
                    std::size_t batch_tokens) {
  const auto indices = all_indices(corpus.size());
  return evaluate_nll(model, corpus, indices, batch_tokens);
}

MetricRow evaluate_split(const Seq2SeqModel& model,
                         const ParallelCorpus& corpus, std::uint64_t update,
                         const std::string& split) {
  const auto hyps = translate_corpus(model, corpus, {1, 0, 1.0});
  std::vector<IdSeq> refs;
  for (const auto& p : corpus.pairs) refs.push_back(p.tgt);
  return {update, split, evaluate_nll(model, corpus),
          score_translations(hyps, refs, corpus.vocab).bleu.score};
}

// ---------------------------------------------------------------------------
// Checkpoint window

void CheckpointWindow::push(Checkpoint ckpt) {
  window_.push_back(std::move(ckpt));
  if (window_.size() > k_) window_.erase(window_.begin());
}

std::uint64_t CheckpointWindow::latest_updates() const {
  return window_.empty() ? 0 : window_.back().updates;
}

Checkpoint CheckpointWindow::average() const {
  if (window_.empty()) throw ContractError("no checkpoints to average");
  return average_checkpoints(window_);
}

CheckpointSchedule::CheckpointSchedule(const TrainConfig& config, Stage stage)
    : config_(config), stage_(stage), window_(config.keep_last_k) {}

void CheckpointSchedule::after_update(const Seq2SeqModel& model,
                                      std::uint64_t updates) {
  if (config_.checkpoint_every && updates % config_.checkpoint_every == 0)
    take(model, updates);
}

TrainResult CheckpointSchedule::finish(const Seq2SeqModel& model,
                                       std::uint64_t updates,
                                       std::vector<MetricRow> metrics) {
  if (window_.empty() || window_.latest_updates() != updates)
    take(model, updates);
  TrainResult result{window_.average(),
                     Checkpoint::from_model(model, stage_, updates),
                     std::move(metrics)};
  result.averaged.stage = stage_;
  return result;
}

void CheckpointSchedule::take(const Seq2SeqModel& model,
                              std::uint64_t updates) {
  Checkpoint ckpt = Checkpoint::from_model(model, stage_, updates);
  if (!config_.checkpoint_dir.empty()) {
    std::filesystem::create_directories(config_.checkpoint_dir);
    save_checkpoint(ckpt, config_.checkpoint_dir /
                              ("checkpoint_" + std::to_string(updates) +
                               ".ckpt"));
  }
  window_.push(std::move(ckpt));
}

// ---------------------------------------------------------------------------
// Masked-token pretraining

std::pair<IdSeq, IdSeq> mask_tokens(const IdSeq& ids, double rate,
                                    std::size_t vocab_size,
                                    std::mt19937_64& rng) {
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  const std::uint64_t content = vocab_size - kNumSpecials;
  IdSeq input = ids;
  IdSeq target(ids.size(), kPadId);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (Vocabulary::is_special(ids[i])) continue;
    if (rng() >= threshold) continue;
    target[i] = ids[i];
    const std::uint64_t kind = rng() % 10;
    if (kind < 8)
      input[i] = kMaskId;
    else if (kind == 8 && content > 0)
      input[i] = static_cast<int>(kNumSpecials + rng() % content);
  }
  return {std::move(input), std::move(target)};
}

namespace {

struct MlmHead {
  ad::Parameter weight, bias;

  MlmHead(std::size_t d, std::size_t v, std::uint64_t seed)
      : weight(Tensor({d, v}, 0.0)), bias(Tensor({v}, 0.0)) {
    std::mt19937_64 rng(seed);
    const double a = std::sqrt(6.0 / static_cast<double>(d + v));
    std::uniform_real_distribution<double> dist(-a, a);
    for (double& x : weight.value.data()) x = dist(rng);
  }
};

ParallelCorpus monolingual(std::span<const IdSeq> sentences,
                           const ModelConfig& config) {
  ParallelCorpus corpus;
  for (const IdSeq& s : sentences) {
    if (s.empty() || s.size() > config.max_seq_len)
      throw DataError("pretraining sentence length " +
                      std::to_string(s.size()) + " outside 1.." +
                      std::to_string(config.max_seq_len));
    corpus.pairs.push_back({s, s});
  }
  return corpus;
}

// Masked batch: encoder input with MASK substitutions, targets flattened.
struct MaskedBatch {
  SourceBatch src;
  std::vector<int> targets;
};

MaskedBatch mask_batch(const Batch& batch, double rate, std::size_t vocab_size,
                       std::mt19937_64& rng) {
  MaskedBatch out{batch.src, std::vector<int>(batch.src.ids.size(), kPadId)};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t off = b * batch.src.len;
    IdSeq row(batch.src.ids.begin() + static_cast<std::ptrdiff_t>(off),
              batch.src.ids.begin() +
                  static_cast<std::ptrdiff_t>(off + batch.src.len));
    auto [input, target] = mask_tokens(row, rate, vocab_size, rng);
    std::copy(input.begin(), input.end(),
              out.src.ids.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(target.begin(), target.end(),
              out.targets.begin() + static_cast<std::ptrdiff_t>(off));
  }
  return out;
}

ad::Var mlm_loss(ParameterBinder& params, MlmHead& head, bool trainable,
                 const MaskedBatch& batch, const ForwardOptions& options) {
  ad::Tape& tape = params.tape();
  ad::Var states = encode(params, batch.src, options);
  ad::Var logits =
      ad::linear(states, tape.parameter(head.weight, trainable),
                 tape.parameter(head.bias, trainable));
  return ad::cross_entropy(logits, batch.targets, kPadId);
}

double mlm_held_out_loss(const Seq2SeqModel& model, MlmHead& head,
                         const ParallelCorpus& corpus, const TrainConfig& config,
                         std::size_t batch_tokens) {
  // Fixed masking so successive evaluations are comparable.
  std::mt19937_64 rng(derive_seed(config.seed, {kMaskStream, 1}));
  const auto indices = all_indices(corpus.size());
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& b : batch_in_order(indices, corpus, batch_tokens)) {
    const MaskedBatch masked = mask_batch(b, config.mask_rate, model.config().vocab_size, rng);
    const auto n = static_cast<std::size_t>(
        std::count_if(masked.targets.begin(), masked.targets.end(),
                      [](int t) { return t != kPadId; }));
    if (n == 0) continue;
    ad::Tape tape;
    ParameterBinder params(model, tape);
    total += mlm_loss(params, head, false, masked, {}).value().item() *
             static_cast<double>(n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

TrainResult pretrain_encoder_mlm(Seq2SeqModel& model,
                                 std::span<const IdSeq> sentences,
                                 std::span<const IdSeq> held_out,
                                 const TrainConfig& config,
                                 const MetricObserver& observer) {
  config.validate();
  const ParallelCorpus corpus = monolingual(sentences, model.config());
  const ParallelCorpus held = monolingual(held_out, model.config());
  if (corpus.size() == 0) throw DataError("no pretraining sentences");

  const std::set<ParamGroup> previous = model.frozen();
  model.set_frozen(decoder_groups());

  MlmHead head(model.config().d_model, model.config().vocab_size,
               derive_seed(config.seed, {kHeadStream}));
  AdamOptimizer optimizer({config.lr});
  std::mt19937_64 dropout_rng(derive_seed(config.seed, {kDropoutStream}));
  std::mt19937_64 mask_rng(derive_seed(config.seed, {kMaskStream}));
  CheckpointSchedule snapshots(config, Stage::mlm);
  std::vector<MetricRow> metrics;

  const auto log_eval = [&](std::uint64_t updates) {
    if (held.size() == 0) return;
    MetricRow row{updates, "valid_mlm",
                  mlm_held_out_loss(model, head, held, config,
                                    config.batch_tokens),
                  0.0};
    metrics.push_back(row);
    if (observer) observer(row);
  };

  const auto indices = all_indices(corpus.size());
  std::uint64_t updates = 0;
  if (config.eval_every) log_eval(0);
  for (std::uint64_t epoch = 0; updates < config.max_updates; ++epoch) {
    const auto batches =
        batch_iter(indices, corpus, config.batch_tokens,
                   derive_seed(config.seed, {kShuffleStream, epoch}));
    for (const Batch& b : batches) {
      if (updates == config.max_updates) break;
      const MaskedBatch masked = mask_batch(b, config.mask_rate, model.config().vocab_size, mask_rng);
      ad::Tape tape;
      ParameterBinder params(model, tape);
      ad::Var loss =
          mlm_loss(params, head, true, masked, {true, &dropout_rng});
      tape.backward(loss);
      optimizer.step(model);
      optimizer.update("mlm_head.weight", head.weight);
      optimizer.update("mlm_head.bias", head.bias);
      head.weight.zero_grad();
      head.bias.zero_grad();
      ++updates;
      snapshots.after_update(model, updates);
      if (config.eval_every && updates % config.eval_every == 0)
        log_eval(updates);
    }
  }

  model.set_frozen(previous);
  return snapshots.finish(model, updates, std::move(metrics));
}

// ---------------------------------------------------------------------------
// Supervised training

TrainResult train(Seq2SeqModel& model, const ParallelCorpus& train_data,
                  const ParallelCorpus* valid, const TrainConfig& config,
                  const MetricObserver& observer) {
  config.validate();
  if (train_data.size() == 0) throw DataError("empty training corpus");
  if (train_data.vocab.size() != model.config().vocab_size)
    throw ConfigError("corpus vocabulary has " +
                      std::to_string(train_data.vocab.size()) +
                      " tokens, model expects " +
                      std::to_string(model.config().vocab_size));
  model.set_training_mode(config.mode,
                          derive_seed(config.seed, {kInitStream}));

  std::optional<EncoderCache> cache;
  if (encoder_cacheable(model))
    cache.emplace(model, train_data, config.batch_tokens);
  const EncoderCache* cache_ptr = cache ? &*cache : nullptr;

  AdamOptimizer optimizer({config.lr});
  std::mt19937_64 dropout_rng(derive_seed(config.seed, {kDropoutStream}));
  CheckpointSchedule snapshots(config, Stage::base);
  std::vector<MetricRow> metrics;

  const auto log_eval = [&](std::uint64_t updates) {
    if (!valid || valid->size() == 0) return;
    const MetricRow row = evaluate_split(model, *valid, updates, "valid");
    metrics.push_back(row);
    if (observer) observer(row);
  };

  const auto indices = all_indices(train_data.size());
  std::uint64_t updates = 0;
  for (std::uint64_t epoch = 0; updates < config.max_updates; ++epoch) {
    const auto batches =
        batch_iter(indices, train_data, config.batch_tokens,
                   derive_seed(config.seed, {kShuffleStream, epoch}));
    for (const Batch& b : batches) {
      if (updates == config.max_updates) break;
      nll_step(model, optimizer, b, dropout_rng, cache_ptr);
      ++updates;
      snapshots.after_update(model, updates);
      if (config.eval_every && updates % config.eval_every == 0)
        log_eval(updates);
    }
  }
  return snapshots.finish(model, updates, std::move(metrics));
}

TrainResult train_base(Seq2SeqModel& model, const ParallelCorpus& train_data,
                       const ParallelCorpus* valid, const TrainConfig& config,
                       const MetricObserver& observer) {
  if (config.mode != TrainingMode::decoder_only)
    throw ConfigError("base training runs in decoder_only mode, got " +
                      to_string(config.mode) +
                      " (use the generic train entry for ablations)");
  return train(model, train_data, valid, config, observer);
}

}  // namespace kdmt
