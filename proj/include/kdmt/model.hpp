#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kdmt/autodiff.hpp"

namespace kdmt {

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  double dropout_rate = 0.1;
  int pad_id = 0;
  int bos_id = 1;
  int eos_id = 2;
  int mask_id = 4;

  // Throws ConfigError when an invariant is broken.
  void validate() const;

  // key=value lines, stable order.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  // Applies one key=value pair; false when the key is not a model key.
  bool set(const std::string& key, const std::string& value);

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { enc_embed, enc_layers, dec_embed, dec_layers, out_proj };
inline constexpr std::array<ParamGroup, 5> kAllGroups = {
    ParamGroup::enc_embed, ParamGroup::enc_layers, ParamGroup::dec_embed,
    ParamGroup::dec_layers, ParamGroup::out_proj};

std::string to_string(ParamGroup group);
bool is_encoder_group(ParamGroup group);

enum class TrainingMode { decoder_only, joint, from_scratch };
std::string to_string(TrainingMode mode);
TrainingMode parse_training_mode(const std::string& text);

struct ParameterCounts {
  std::map<ParamGroup, std::size_t> per_group;
  std::size_t total = 0;
  std::size_t trainable = 0;
};

struct NamedParameter {
  ad::Parameter param;
  ParamGroup group;
};

// Encoder-decoder transformer (pre-norm, ReLU feed-forward, sinusoidal
// positions, separate encoder/decoder embeddings, untied output projection).
// Copies are deep: a copied model shares no state with its source.
class Seq2SeqModel {
 public:
  Seq2SeqModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::map<std::string, NamedParameter>& parameters() { return params_; }
  const std::map<std::string, NamedParameter>& parameters() const {
    return params_;
  }
  ad::Parameter& parameter(const std::string& name);
  const ad::Parameter& parameter(const std::string& name) const;

  const std::set<ParamGroup>& frozen() const { return frozen_; }
  void set_frozen(std::set<ParamGroup> groups) { frozen_ = std::move(groups); }
  bool is_frozen(ParamGroup group) const { return frozen_.count(group) > 0; }
  bool is_trainable(const std::string& name) const;

  // Sets the freeze mask for `mode` and returns the trainable groups.
  // from_scratch additionally re-initializes every parameter from `seed`.
  std::set<ParamGroup> set_training_mode(TrainingMode mode, std::uint64_t seed);

  // Re-draws parameters of the given groups from `seed`.
  void reinitialize(const std::set<ParamGroup>& groups, std::uint64_t seed);

  ParameterCounts count_parameters() const;
  void zero_grad();

  // Bitwise equality of all parameter values (names, shapes and data).
  bool same_parameters(const Seq2SeqModel& other) const;
  // Copies parameter values from `other` (same config required).
  void copy_parameters_from(const Seq2SeqModel& other);

 private:
  void add_parameter(const std::string& name, ParamGroup group, Shape shape);
  void initialize(const std::set<ParamGroup>& groups, std::uint64_t seed);

  ModelConfig config_;
  std::map<std::string, NamedParameter> params_;
  std::set<ParamGroup> frozen_;
};

ParameterCounts count_parameters(const Seq2SeqModel& model);

// Resolves parameter names to tape variables, binding each at most once.
// A mutable model contributes trainable parameters (per its freeze mask);
// a const model is bound entirely as constants.
class ParameterBinder {
 public:
  ParameterBinder(Seq2SeqModel& model, ad::Tape& tape);
  ParameterBinder(const Seq2SeqModel& model, ad::Tape& tape);

  ad::Var operator()(const std::string& name);
  ad::Tape& tape() const { return *tape_; }
  const ModelConfig& config() const { return model_->config(); }
  bool group_frozen(ParamGroup group) const;

 private:
  const Seq2SeqModel* model_;
  Seq2SeqModel* mutable_model_;
  ad::Tape* tape_;
  std::map<std::string, ad::Var> bound_;
};

// Controls dropout. With train == false (or rng == nullptr) the forward pass
// is deterministic.
struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

// Right-padded batch of source ids laid out as batch x len.
struct SourceBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;
};

// Contextual source states [batch*len x d_model]; padding keys masked out.
// Frozen encoder groups run without dropout.
ad::Var encode(ParameterBinder& params, const SourceBatch& src,
               const ForwardOptions& options);

// Logits [batch*tgt_len x V] for right-padded decoder inputs beginning with
// BOS. Causal self-attention, full cross-attention over non-pad sources.
ad::Var decode_logits(ParameterBinder& params, ad::Var encoder_states,
                      const SourceBatch& src, std::span<const int> tgt_in,
                      std::size_t tgt_len, const ForwardOptions& options);

// Single-sentence conveniences with the model in inference mode.
Tensor encode(const Seq2SeqModel& model, std::span<const int> src_ids);
Tensor decode_logits(const Seq2SeqModel& model, std::span<const int> src_ids,
                     std::span<const int> tgt_in);

// Fixed sinusoidal position table [len x d_model].
Tensor positional_encoding(std::size_t len, std::size_t d_model);

}  // namespace kdmt
