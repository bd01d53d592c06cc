#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kdmt/ckd.hpp"
#include "kdmt/eval.hpp"
#include "kdmt/model.hpp"
#include "kdmt/synthetic.hpp"
#include "kdmt/train.hpp"

namespace kdmt {

std::string version_string();

// Everything one run needs, loadable from a single key=value file.
//
// Keys are namespaced: data.*, model.*, mlm.*, base.*, ckd.*, eval.* plus the
// global `seed`, which is copied into the data spec and every stage. Stage
// seeds cannot be set separately. model.vocab_size follows data.vocab_size
// unless given explicitly.
struct ExperimentConfig {
  SyntheticSpec data;
  ModelConfig model;
  TrainConfig mlm = TrainConfig::mlm_defaults();
  TrainConfig base = TrainConfig::base_defaults();
  TrainConfig ckd = TrainConfig::ckd_defaults();
  BeamConfig beam;
  std::uint64_t seed = 17;

  // Unknown keys and malformed values are ConfigErrors.
  void set(const std::string& key, const std::string& value);
  // Propagates the seed (and vocabulary size) and validates every section.
  void resolve();
  std::string to_text() const;

  // Parses key=value lines; '#' starts a comment, blank lines are skipped.
  void apply_text(const std::string& text, const std::string& origin);
  void load_file(const std::filesystem::path& path);

 private:
  std::set<std::string> explicit_keys_;
};

// Writes config.txt (resolved config, headed by the tool version) and
// VERSION into `dir`, creating it when needed.
void write_run_info(const std::filesystem::path& dir,
                    const ExperimentConfig& config);

// A generated data directory: {train,valid,test}.{src,tgt}, vocab.tsv,
// cipher.tsv and the generating config.
void save_data_dir(const SyntheticData& data, const std::filesystem::path& dir);
SyntheticData load_data_dir(const std::filesystem::path& dir,
                            SyntheticTask task);

// Model initialization seed for a global seed.
std::uint64_t model_seed(std::uint64_t seed);

// EOS-terminated source sentences of a corpus.
std::vector<IdSeq> source_sentences(const ParallelCorpus& corpus);

// Stage drivers shared by the CLI and the acceptance checks. Each starts
// from a fresh model built from config.model and the global seed.
TrainResult run_pretrain_stage(const ExperimentConfig& config,
                               const ParallelCorpus& train,
                               const ParallelCorpus& valid,
                               const MetricObserver& observer = {});
TrainResult run_base_stage(const ExperimentConfig& config,
                           const Checkpoint& mlm, const ParallelCorpus& train,
                           const ParallelCorpus& valid,
                           const MetricObserver& observer = {});
CkdResult run_ckd_stage(const ExperimentConfig& config, const Checkpoint& base,
                        const ParallelCorpus& train,
                        const ParallelCorpus& valid,
                        const MetricObserver& observer = {});

// One row of the variant comparison.
struct AblationRow {
  std::string name;
  TrainingMode mode = TrainingMode::decoder_only;
  bool pretrained_encoder = false;
  bool ckd = false;
  MetricReport report;
};

// Four variants under one seed: no pretraining, pretrained encoder trained
// jointly, pretrained encoder frozen, and the frozen variant followed by CKD.
std::vector<AblationRow> run_ablation(const ExperimentConfig& config,
                                      const SyntheticData& data,
                                      const MetricObserver& observer = {});
std::string ablation_tsv(const std::vector<AblationRow>& rows,
                         std::uint64_t seed);

}  // namespace kdmt
