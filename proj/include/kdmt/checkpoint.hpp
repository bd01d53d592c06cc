#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdmt/model.hpp"

namespace kdmt {

enum class Stage { mlm, base, ckd };
std::string to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> params;
  std::uint64_t updates = 0;
  Stage stage = Stage::base;

  static Checkpoint from_model(const Seq2SeqModel& model, Stage stage,
                               std::uint64_t updates);
  // Fresh model carrying these parameters (nothing frozen).
  Seq2SeqModel to_model() const;
  // Overwrites the parameters of a model with an identical config.
  void apply_to(Seq2SeqModel& model) const;

  bool operator==(const Checkpoint&) const = default;
};

// Binary layout (all integers little-endian):
//   "KDMTCKPT"  u32 version  u32 header_len  header (key=value lines)
//   u64 param_count, then per parameter (sorted by name):
//   u32 name_len  name  u32 rank  u64 extents[rank]  f64 values[]
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Also rejects a checkpoint whose config differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig& expected);

// Elementwise mean of every parameter. Values are combined in sorted order,
// so the result does not depend on the order of the inputs. Metadata comes
// from the checkpoint with the highest update counter.
Checkpoint average_checkpoints(std::span<const Checkpoint> checkpoints);

}  // namespace kdmt
