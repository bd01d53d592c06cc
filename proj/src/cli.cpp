#include "kdmt/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "kdmt/checkpoint.hpp"
#include "kdmt/ckd.hpp"
#include "kdmt/error.hpp"
#include "kdmt/eval.hpp"
#include "kdmt/experiment.hpp"
#include "kdmt/synthetic.hpp"
#include "kdmt/train.hpp"

namespace kdmt {
namespace {

namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string data;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_out = true) {
  cmd->add_option("--config", f.config, "key=value configuration file");
  cmd->add_option("--seed", f.seed, "global seed (overrides the config)");
  auto* out = cmd->add_option("--out", f.out, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--set", f.overrides, "extra key=value override")
      ->take_all();
}

// Defaults, then the data directory's generating config, then --config, then
// --set, then --seed.
ExperimentConfig build_config(const CommonFlags& f, bool layer_data = true) {
  ExperimentConfig config;
  if (layer_data && !f.data.empty() && fs::exists(fs::path(f.data) / "config.txt"))
    config.load_file(fs::path(f.data) / "config.txt");
  if (!f.config.empty()) config.load_file(f.config);
  for (const auto& kv : f.overrides) config.apply_text(kv, "--set");
  if (f.seed) config.seed = *f.seed;
  config.resolve();
  return config;
}

SyntheticData load_data(const CommonFlags& f, const ExperimentConfig& config) {
  if (f.data.empty()) throw ConfigError("--data is required");
  SyntheticData data = load_data_dir(f.data, config.data.task);
  if (data.vocab.size() != config.model.vocab_size)
    throw ConfigError("vocabulary in " + f.data + " has " +
                      std::to_string(data.vocab.size()) +
                      " tokens but model.vocab_size is " +
                      std::to_string(config.model.vocab_size));
  data.train.validate(config.model.max_seq_len);
  return data;
}

Checkpoint require_checkpoint(const std::string& path, const std::string& stage,
                              const ModelConfig& expected) {
  if (path.empty() || !fs::exists(path))
    throw DataError("missing " + stage + " checkpoint" +
                    (path.empty() ? "" : " '" + path + "'") + " (run " + stage +
                    " first)");
  return load_checkpoint(path, expected);
}

MetricObserver progress(const std::string& stage) {
  return [stage](const MetricRow& r) {
    std::fprintf(stderr, "[%s] update %llu %s nll %.4f bleu %.2f\n",
                 stage.c_str(), static_cast<unsigned long long>(r.update),
                 r.split.c_str(), r.nll, r.bleu);
  };
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

int cmd_gen_data(const CommonFlags& f, const std::string& task, bool force) {
  CommonFlags flags = f;
  if (!task.empty()) flags.overrides.push_back("data.task=" + task);
  const ExperimentConfig config = build_config(flags, false);
  const fs::path out = f.out;
  for (const char* name : {"train.src", "vocab.tsv", "config.txt"})
    if (fs::exists(out / name) && !force)
      throw DataError((out / name).string() +
                      " already exists (pass --force to overwrite)");
  const SyntheticData data = make_synthetic_corpus(config.data);
  save_data_dir(data, out);
  write_run_info(out, config);
  std::printf("wrote %zu/%zu/%zu pairs to %s\n", data.train.size(),
              data.valid.size(), data.test.size(), out.string().c_str());
  return 0;
}

int cmd_pretrain(const CommonFlags& f) {
  const ExperimentConfig config = build_config(f);
  const SyntheticData data = load_data(f, config);
  write_run_info(f.out, config);
  const TrainResult r =
      run_pretrain_stage(config, data.train, data.valid, progress("mlm"));
  save_checkpoint(r.averaged, fs::path(f.out) / "mlm.ckpt");
  write_metrics(fs::path(f.out) / "metrics.tsv", r.metrics);
  return 0;
}

int cmd_train_base(const CommonFlags& f, const std::string& init) {
  const ExperimentConfig config = build_config(f);
  const SyntheticData data = load_data(f, config);
  const Checkpoint mlm = require_checkpoint(init, "pretrain", config.model);
  write_run_info(f.out, config);
  const TrainResult r =
      run_base_stage(config, mlm, data.train, data.valid, progress("base"));
  save_checkpoint(r.averaged, fs::path(f.out) / "base.ckpt");
  write_metrics(fs::path(f.out) / "metrics.tsv", r.metrics);
  return 0;
}

int cmd_train_ckd(const CommonFlags& f, const std::string& base_path,
                  std::optional<double> alpha,
                  std::optional<std::size_t> teachers) {
  CommonFlags flags = f;
  if (teachers)
    flags.overrides.push_back("ckd.n_teachers=" + std::to_string(*teachers));
  ExperimentConfig config = build_config(flags);
  if (alpha) config.ckd.alpha = *alpha;
  config.ckd.validate();
  const SyntheticData data = load_data(f, config);
  const Checkpoint base = require_checkpoint(base_path, "train-base", config.model);
  write_run_info(f.out, config);
  const CkdResult r =
      run_ckd_stage(config, base, data.train, data.valid, progress("ckd"));
  save_checkpoint(r.train.averaged, fs::path(f.out) / "ckd.ckpt");
  write_metrics(fs::path(f.out) / "metrics.tsv", r.train.metrics);
  write_schedule(fs::path(f.out) / "schedule.tsv", r.schedule);
  return 0;
}

int cmd_translate(const CommonFlags& f, const std::string& ckpt_path,
                  std::string vocab_path, const std::string& input,
                  const std::string& output, std::optional<std::size_t> beam) {
  const ExperimentConfig config = build_config(f);
  if (vocab_path.empty() && !f.data.empty())
    vocab_path = (fs::path(f.data) / "vocab.tsv").string();
  if (vocab_path.empty()) throw ConfigError("--vocab or --data is required");
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  const Checkpoint ckpt = require_checkpoint(ckpt_path, "training", config.model);
  if (vocab.size() != ckpt.config.vocab_size)
    throw ConfigError("vocabulary does not fit the checkpoint");
  BeamConfig bc = config.beam;
  if (beam) bc.beam_size = *beam;
  if (bc.beam_size < 1) throw ConfigError("--beam must be at least 1");

  std::vector<IdSeq> sources;
  for (const auto& line : read_lines(input)) sources.push_back(tokenize(line, vocab));
  const Seq2SeqModel model = ckpt.to_model();
  std::vector<std::string> lines;
  for (const auto& h : translate_sources(model, sources, bc))
    lines.push_back(detokenize(h, vocab));
  if (output.empty()) {
    for (const auto& l : lines) std::printf("%s\n", l.c_str());
  } else {
    write_lines(output, lines);
  }
  if (!f.out.empty()) write_run_info(f.out, config);
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& ckpt_path,
                 bool oracle, const std::string& split,
                 std::optional<std::size_t> beam) {
  ExperimentConfig config = build_config(f);
  if (beam) config.beam.beam_size = *beam;
  config.resolve();
  const SyntheticData data = load_data(f, config);
  const ParallelCorpus* corpus = split == "test"    ? &data.test
                                 : split == "valid" ? &data.valid
                                 : split == "train" ? &data.train
                                                    : nullptr;
  if (!corpus) throw ConfigError("--split must be train, valid or test");

  std::vector<IdSeq> hyps, refs;
  for (const auto& p : corpus->pairs) refs.push_back(p.tgt);
  if (oracle) {
    if (data.cipher.mapping.empty())
      throw DataError("no cipher.tsv in " + f.data + " for the oracle translator");
    for (const auto& p : corpus->pairs) hyps.push_back(data.cipher.translate(p.src));
  } else {
    const Checkpoint ckpt =
        require_checkpoint(ckpt_path, "training", config.model);
    hyps = translate_corpus(ckpt.to_model(), *corpus, config.beam);
  }
  const MetricReport report = score_translations(hyps, refs, data.vocab);

  write_run_info(f.out, config);
  write_text(fs::path(f.out) / "report.tsv", report.to_tsv());
  write_text(fs::path(f.out) / "report.txt", report.to_text());
  std::vector<std::string> lines;
  for (const auto& h : hyps) lines.push_back(detokenize(h, data.vocab));
  write_lines(fs::path(f.out) / "hypotheses.txt", lines);
  std::printf("%s", report.to_text().c_str());
  return 0;
}

int cmd_ablate(const CommonFlags& f) {
  const ExperimentConfig config = build_config(f);
  SyntheticData data = load_data(f, config);
  write_run_info(f.out, config);
  const auto rows = run_ablation(config, data, progress("ablate"));
  const std::string tsv = ablation_tsv(rows, config.seed);
  write_text(fs::path(f.out) / "ablation.tsv", tsv);
  std::printf("%s", tsv.c_str());
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"kdmt: seq2seq training with complementary knowledge distillation"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  CommonFlags gen_f, pre_f, base_f, ckd_f, tr_f, ev_f, ab_f;
  std::string task, init, base_path, ckpt_tr, vocab, input, output, ckpt_ev,
      split = "test";
  bool force = false, oracle = false;
  std::optional<double> alpha;
  std::optional<std::size_t> teachers, beam_tr, beam_ev;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic cipher corpus");
  add_common(gen, gen_f);
  gen->add_option("--task", task, "cipher or cipher+reverse");
  gen->add_flag("--force", force, "overwrite an existing corpus");

  auto* pre = app.add_subcommand("pretrain", "masked-token encoder pretraining");
  add_common(pre, pre_f);
  pre->add_option("--data", pre_f.data, "corpus directory from gen-data")->required();

  auto* tb = app.add_subcommand("train-base", "decoder-only training on a pretrained encoder");
  add_common(tb, base_f);
  tb->add_option("--data", base_f.data, "corpus directory")->required();
  tb->add_option("--init", init, "mlm.ckpt written by pretrain");

  auto* tc = app.add_subcommand("train-ckd", "complementary knowledge distillation");
  add_common(tc, ckd_f);
  tc->add_option("--data", ckd_f.data, "corpus directory")->required();
  tc->add_option("--base", base_path, "base.ckpt written by train-base");
  tc->add_option("--alpha", alpha, "distillation weight in [0, 1]");
  tc->add_option("--teachers", teachers, "number of teachers");

  auto* tr = app.add_subcommand("translate", "decode sentences with a checkpoint");
  add_common(tr, tr_f, false);
  tr->add_option("--checkpoint", ckpt_tr, "model checkpoint")->required();
  tr->add_option("--vocab", vocab, "vocab.tsv (defaults to DATA/vocab.tsv)");
  tr->add_option("--data", tr_f.data, "corpus directory");
  tr->add_option("--input", input, "one tokenized sentence per line")->required();
  tr->add_option("--output", output, "output file (stdout when omitted)");
  tr->add_option("--beam", beam_tr, "beam size");

  auto* ev = app.add_subcommand("evaluate", "BLEU-4 and chrF on a corpus split");
  add_common(ev, ev_f);
  ev->add_option("--data", ev_f.data, "corpus directory")->required();
  auto* ck = ev->add_option("--checkpoint", ckpt_ev, "model checkpoint");
  auto* orc = ev->add_flag("--oracle", oracle, "score the cipher itself");
  ck->excludes(orc);
  ev->add_option("--split", split, "train, valid or test");
  ev->add_option("--beam", beam_ev, "beam size");

  auto* ab = app.add_subcommand("ablate", "train and score the four model variants");
  add_common(ab, ab_f);
  ab->add_option("--data", ab_f.data, "corpus directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "kdmt: config error: %s\n", e.what());
    return static_cast<int>(ErrorKind::config);
  }

  try {
    if (*gen) return cmd_gen_data(gen_f, task, force);
    if (*pre) return cmd_pretrain(pre_f);
    if (*tb) return cmd_train_base(base_f, init);
    if (*tc) return cmd_train_ckd(ckd_f, base_path, alpha, teachers);
    if (*tr) return cmd_translate(tr_f, ckpt_tr, vocab, input, output, beam_tr);
    if (*ev) {
      if (!oracle && ckpt_ev.empty())
        throw ConfigError("evaluate needs --checkpoint or --oracle");
      return cmd_evaluate(ev_f, ckpt_ev, oracle, split, beam_ev);
    }
    if (*ab) return cmd_ablate(ab_f);
  } catch (const Error& e) {
    std::fprintf(stderr, "kdmt: %s\n", e.what());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "kdmt: data error: %s\n", e.what());
    return static_cast<int>(ErrorKind::data);
  }
  return 0;
}

}  // namespace kdmt
