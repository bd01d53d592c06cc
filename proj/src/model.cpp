#include "kdmt/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "kdmt/error.hpp"
#include "kdmt/parse.hpp"
#include "kdmt/random.hpp"

namespace kdmt {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 ||
      max_seq_len == 0)
    throw ConfigError("model extents must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("dropout must lie in [0, 1)");
  const int specials[] = {pad_id, bos_id, eos_id, mask_id};
  for (int i = 0; i < 4; ++i) {
    if (specials[i] < 0 || static_cast<std::size_t>(specials[i]) >= vocab_size)
      throw ConfigError("special ids must be < vocab_size");
    for (int j = i + 1; j < 4; ++j)
      if (specials[i] == specials[j])
        throw ConfigError("special ids must be distinct");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "vocab_size=" << vocab_size << "\n"
      << "d_model=" << d_model << "\n"
      << "n_heads=" << n_heads << "\n"
      << "n_enc_layers=" << n_enc_layers << "\n"
      << "n_dec_layers=" << n_dec_layers << "\n"
      << "d_ff=" << d_ff << "\n"
      << "max_seq_len=" << max_seq_len << "\n"
      << "dropout=" << format_double(dropout_rate) << "\n"
      << "pad_id=" << pad_id << "\n"
      << "bos_id=" << bos_id << "\n"
      << "eos_id=" << eos_id << "\n"
      << "mask_id=" << mask_id << "\n";
  return out.str();
}


bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "vocab_size") vocab_size = parse_size(key, value);
  else if (key == "d_model") d_model = parse_size(key, value);
  else if (key == "n_heads") n_heads = parse_size(key, value);
  else if (key == "n_enc_layers") n_enc_layers = parse_size(key, value);
  else if (key == "n_dec_layers") n_dec_layers = parse_size(key, value);
  else if (key == "d_ff") d_ff = parse_size(key, value);
  else if (key == "max_seq_len") max_seq_len = parse_size(key, value);
  else if (key == "dropout") dropout_rate = parse_double(key, value);
  else if (key == "pad_id") pad_id = static_cast<int>(parse_size(key, value));
  else if (key == "bos_id") bos_id = static_cast<int>(parse_size(key, value));
  else if (key == "eos_id") eos_id = static_cast<int>(parse_size(key, value));
  else if (key == "mask_id") mask_id = static_cast<int>(parse_size(key, value));
  else return false;
  return true;
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed config line '" + line + "'");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Groups and modes

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::enc_embed: return "enc_embed";
    case ParamGroup::enc_layers: return "enc_layers";
    case ParamGroup::dec_embed: return "dec_embed";
    case ParamGroup::dec_layers: return "dec_layers";
    case ParamGroup::out_proj: return "out_proj";
  }
  return "?";
}

bool is_encoder_group(ParamGroup group) {
  return group == ParamGroup::enc_embed || group == ParamGroup::enc_layers;
}

std::string to_string(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::decoder_only: return "decoder_only";
    case TrainingMode::joint: return "joint";
    case TrainingMode::from_scratch: return "from_scratch";
  }
  return "?";
}

TrainingMode parse_training_mode(const std::string& text) {
  if (text == "decoder_only") return TrainingMode::decoder_only;
  if (text == "joint") return TrainingMode::joint;
  if (text == "from_scratch") return TrainingMode::from_scratch;
  throw ConfigError("unknown training mode '" + text +
                    "' (expected decoder_only, joint or from_scratch)");
}

// ---------------------------------------------------------------------------
// Seq2SeqModel

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, ff = config_.d_ff,
                    v = config_.vocab_size;
  auto add_linear = [&](const std::string& prefix, ParamGroup g,
                        std::size_t in, std::size_t out) {
    add_parameter(prefix + ".weight", g, {in, out});
    add_parameter(prefix + ".bias", g, {out});
  };
  auto add_norm = [&](const std::string& prefix, ParamGroup g) {
    add_parameter(prefix + ".weight", g, {d});
    add_parameter(prefix + ".bias", g, {d});
  };
  auto add_attention = [&](const std::string& prefix, ParamGroup g) {
    for (const char* p : {"q_proj", "k_proj", "v_proj", "o_proj"})
      add_linear(prefix + "." + p, g, d, d);
  };

  add_parameter("encoder.embed_tokens.weight", ParamGroup::enc_embed, {v, d});
  for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    add_attention(p + ".self_attn", ParamGroup::enc_layers);
    add_norm(p + ".self_attn_layer_norm", ParamGroup::enc_layers);
    add_linear(p + ".fc1", ParamGroup::enc_layers, d, ff);
    add_linear(p + ".fc2", ParamGroup::enc_layers, ff, d);
    add_norm(p + ".final_layer_norm", ParamGroup::enc_layers);
  }
  add_norm("encoder.layer_norm", ParamGroup::enc_layers);

  add_parameter("decoder.embed_tokens.weight", ParamGroup::dec_embed, {v, d});
  for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    add_attention(p + ".self_attn", ParamGroup::dec_layers);
    add_norm(p + ".self_attn_layer_norm", ParamGroup::dec_layers);
    add_attention(p + ".encoder_attn", ParamGroup::dec_layers);
    add_norm(p + ".encoder_attn_layer_norm", ParamGroup::dec_layers);
    add_linear(p + ".fc1", ParamGroup::dec_layers, d, ff);
    add_linear(p + ".fc2", ParamGroup::dec_layers, ff, d);
    add_norm(p + ".final_layer_norm", ParamGroup::dec_layers);
  }
  add_norm("decoder.layer_norm", ParamGroup::dec_layers);
  add_linear("output_projection", ParamGroup::out_proj, d, v);

  initialize({kAllGroups.begin(), kAllGroups.end()}, seed);
}

void Seq2SeqModel::add_parameter(const std::string& name, ParamGroup group,
                                 Shape shape) {
  params_.emplace(name, NamedParameter{ad::Parameter(Tensor(std::move(shape))),
                                       group});
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void Seq2SeqModel::initialize(const std::set<ParamGroup>& groups,
                              std::uint64_t seed) {
  const double d = static_cast<double>(config_.d_model);
  for (auto& [name, entry] : params_) {
    if (!groups.count(entry.group)) continue;
    Tensor& t = entry.param.value;
    std::mt19937_64 rng(derive_seed(seed, {hash_name(name)}));
    const bool is_norm = name.find("layer_norm") != std::string::npos;
    if (is_norm) {
      t.fill(ends_with(name, ".weight") ? 1.0 : 0.0);
    } else if (name.find("embed_tokens") != std::string::npos) {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(d));
      for (double& x : t.data()) x = dist(rng);
      for (std::size_t c = 0; c < t.cols(); ++c)
        t(static_cast<std::size_t>(config_.pad_id), c) = 0.0;
    } else if (ends_with(name, ".bias")) {
      t.fill(0.0);
    } else {
      const double fan = static_cast<double>(t.shape()[0] + t.shape()[1]);
      std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan),
                                                  std::sqrt(6.0 / fan));
      for (double& x : t.data()) x = dist(rng);
    }
    entry.param.zero_grad();
  }
}

void Seq2SeqModel::reinitialize(const std::set<ParamGroup>& groups,
                                std::uint64_t seed) {
  initialize(groups, seed);
}

ad::Parameter& Seq2SeqModel::parameter(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second.param;
}

const ad::Parameter& Seq2SeqModel::parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second.param;
}

bool Seq2SeqModel::is_trainable(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return !is_frozen(it->second.group);
}

std::set<ParamGroup> Seq2SeqModel::set_training_mode(TrainingMode mode,
                                                     std::uint64_t seed) {
  switch (mode) {
    case TrainingMode::decoder_only:
      frozen_ = {ParamGroup::enc_embed, ParamGroup::enc_layers};
      break;
    case TrainingMode::joint:
      frozen_.clear();
      break;
    case TrainingMode::from_scratch:
      frozen_.clear();
      initialize({kAllGroups.begin(), kAllGroups.end()}, seed);
      break;
  }
  std::set<ParamGroup> trainable;
  for (auto g : kAllGroups)
    if (!is_frozen(g)) trainable.insert(g);
  return trainable;
}

ParameterCounts Seq2SeqModel::count_parameters() const {
  ParameterCounts counts;
  for (auto g : kAllGroups) counts.per_group[g] = 0;
  for (const auto& [name, entry] : params_) {
    const std::size_t n = entry.param.value.size();
    counts.per_group[entry.group] += n;
    counts.total += n;
    if (!is_frozen(entry.group)) counts.trainable += n;
  }
  return counts;
}

ParameterCounts count_parameters(const Seq2SeqModel& model) {
  return model.count_parameters();
}

void Seq2SeqModel::zero_grad() {
  for (auto& [name, entry] : params_) entry.param.zero_grad();
}

bool Seq2SeqModel::same_parameters(const Seq2SeqModel& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (!(a->second.param.value == b->second.param.value)) return false;
  }
  return true;
}

void Seq2SeqModel::copy_parameters_from(const Seq2SeqModel& other) {
  if (!(config_ == other.config_))
    throw ContractError("copy_parameters_from: model configs differ");
  for (auto& [name, entry] : params_)
    entry.param.value = other.parameter(name).value;
}

// ---------------------------------------------------------------------------
// Binding and forward pass

ParameterBinder::ParameterBinder(Seq2SeqModel& model, ad::Tape& tape)
    : model_(&model), mutable_model_(&model), tape_(&tape) {}

ParameterBinder::ParameterBinder(const Seq2SeqModel& model, ad::Tape& tape)
    : model_(&model), mutable_model_(nullptr), tape_(&tape) {}

ad::Var ParameterBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  ad::Var v;
  if (mutable_model_) {
    v = tape_->parameter(mutable_model_->parameter(name),
                         mutable_model_->is_trainable(name));
  } else {
    v = tape_->constant_view(model_->parameter(name).value);
  }
  bound_.emplace(name, v);
  return v;
}

bool ParameterBinder::group_frozen(ParamGroup group) const {
  return !mutable_model_ || model_->is_frozen(group);
}

Tensor positional_encoding(std::size_t len, std::size_t d_model) {
  Tensor pe({len, d_model});
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d_model) pe(pos, i + 1) = std::cos(angle);
    }
  return pe;
}

namespace {

using ad::Var;

Var linear(ParameterBinder& p, const std::string& prefix, Var x) {
  return ad::linear(x, p(prefix + ".weight"), p(prefix + ".bias"));
}

Var norm(ParameterBinder& p, const std::string& prefix, Var x) {
  return ad::layer_norm(x, p(prefix + ".weight"), p(prefix + ".bias"));
}

Var maybe_dropout(Var x, double rate, const ForwardOptions& opt, bool active) {
  if (!active || !opt.train || !opt.rng) return x;
  return ad::dropout(x, rate, *opt.rng);
}

Var multi_head(ParameterBinder& p, const std::string& prefix, Var query_in,
               Var memory, const ad::AttentionLayout& layout) {
  Var q = linear(p, prefix + ".q_proj", query_in);
  Var k = linear(p, prefix + ".k_proj", memory);
  Var v = linear(p, prefix + ".v_proj", memory);
  return linear(p, prefix + ".o_proj", ad::attention(q, k, v, layout));
}

Var embed(ParameterBinder& p, const std::string& table, std::span<const int> ids,
          std::size_t batch, std::size_t len) {
  const ModelConfig& cfg = p.config();
  if (len > cfg.max_seq_len)
    throw ContractError("sequence length " + std::to_string(len) +
                        " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  if (ids.size() != batch * len)
    throw DimensionError("batch of " + std::to_string(ids.size()) +
                         " ids is not " + std::to_string(batch) + "x" +
                         std::to_string(len));
  const std::size_t d = cfg.d_model;
  Var x = ad::scale(ad::embedding_lookup(p(table), ids),
                    std::sqrt(static_cast<double>(d)));
  const Tensor pe = positional_encoding(len, d);
  auto tiled = Tensor::uninitialized({batch * len, d});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(pe.data().begin(), pe.data().end(),
              tiled.data().begin() + static_cast<std::ptrdiff_t>(b * len * d));
  return ad::add(x, p.tape().constant(std::move(tiled)));
}

std::vector<bool> padding_mask(std::span<const int> ids, int pad_id) {
  std::vector<bool> mask(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] == pad_id;
  return mask;
}

}  // namespace

ad::Var encode(ParameterBinder& p, const SourceBatch& src,
               const ForwardOptions& options) {
  const ModelConfig& cfg = p.config();
  const double rate = cfg.dropout_rate;
  const bool active = !p.group_frozen(ParamGroup::enc_layers);

  ad::AttentionLayout layout;
  layout.batch = src.batch;
  layout.query_len = layout.key_len = src.len;
  layout.heads = cfg.n_heads;
  layout.key_padding = padding_mask(src.ids, cfg.pad_id);

  Var x = embed(p, "encoder.embed_tokens.weight", src.ids, src.batch, src.len);
  x = maybe_dropout(x, rate, options, active);
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    const std::string pre = "encoder.layers." + std::to_string(l);
    Var h = norm(p, pre + ".self_attn_layer_norm", x);
    h = multi_head(p, pre + ".self_attn", h, h, layout);
    x = ad::add(x, maybe_dropout(h, rate, options, active));
    h = norm(p, pre + ".final_layer_norm", x);
    h = linear(p, pre + ".fc2", ad::relu(linear(p, pre + ".fc1", h)));
    x = ad::add(x, maybe_dropout(h, rate, options, active));
  }
  return norm(p, "encoder.layer_norm", x);
}

ad::Var decode_logits(ParameterBinder& p, ad::Var encoder_states,
                      const SourceBatch& src, std::span<const int> tgt_in,
                      std::size_t tgt_len, const ForwardOptions& options) {
  const ModelConfig& cfg = p.config();
  const double rate = cfg.dropout_rate;
  const std::size_t batch = src.batch;

  ad::AttentionLayout self_layout;
  self_layout.batch = batch;
  self_layout.query_len = self_layout.key_len = tgt_len;
  self_layout.heads = cfg.n_heads;
  self_layout.causal = true;
  self_layout.key_padding = padding_mask(tgt_in, cfg.pad_id);

  ad::AttentionLayout cross_layout;
  cross_layout.batch = batch;
  cross_layout.query_len = tgt_len;
  cross_layout.key_len = src.len;
  cross_layout.heads = cfg.n_heads;
  cross_layout.key_padding = padding_mask(src.ids, cfg.pad_id);

  Var x = embed(p, "decoder.embed_tokens.weight", tgt_in, batch, tgt_len);
  x = maybe_dropout(x, rate, options, true);
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    const std::string pre = "decoder.layers." + std::to_string(l);
    Var h = norm(p, pre + ".self_attn_layer_norm", x);
    h = multi_head(p, pre + ".self_attn", h, h, self_layout);
    x = ad::add(x, maybe_dropout(h, rate, options, true));
    h = norm(p, pre + ".encoder_attn_layer_norm", x);
    h = multi_head(p, pre + ".encoder_attn", h, encoder_states, cross_layout);
    x = ad::add(x, maybe_dropout(h, rate, options, true));
    h = norm(p, pre + ".final_layer_norm", x);
    h = linear(p, pre + ".fc2", ad::relu(linear(p, pre + ".fc1", h)));
    x = ad::add(x, maybe_dropout(h, rate, options, true));
  }
  x = norm(p, "decoder.layer_norm", x);
  return linear(p, "output_projection", x);
}

Tensor encode(const Seq2SeqModel& model, std::span<const int> src_ids) {
  ad::Tape tape;
  ParameterBinder params(model, tape);
  SourceBatch src{1, src_ids.size(), {src_ids.begin(), src_ids.end()}};
  return encode(params, src, {}).value();
}

Tensor decode_logits(const Seq2SeqModel& model, std::span<const int> src_ids,
                     std::span<const int> tgt_in) {
  ad::Tape tape;
  ParameterBinder params(model, tape);
  SourceBatch src{1, src_ids.size(), {src_ids.begin(), src_ids.end()}};
  ad::Var enc = encode(params, src, {});
  return decode_logits(params, enc, src, tgt_in, tgt_in.size(), {}).value();
}

}  // namespace kdmt
