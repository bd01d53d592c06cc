#include "kdmt/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "kdmt/error.hpp"
#include "kdmt/parse.hpp"
#include "kdmt/random.hpp"

namespace kdmt {
namespace {

constexpr std::uint64_t kModelStream = 0x6d6f64656c;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool set_data_key(SyntheticSpec& spec, const std::string& key,
                  const std::string& value) {
  const std::string full = "data." + key;
  if (key == "task") spec.task = parse_synthetic_task(value);
  else if (key == "vocab_size") spec.vocab_size = parse_size(full, value);
  else if (key == "n_train") spec.n_train = parse_size(full, value);
  else if (key == "n_valid") spec.n_valid = parse_size(full, value);
  else if (key == "n_test") spec.n_test = parse_size(full, value);
  else if (key == "min_len") spec.min_len = parse_size(full, value);
  else if (key == "max_len") spec.max_len = parse_size(full, value);
  else if (key == "successors") spec.successors = parse_size(full, value);
  else return false;
  return true;
}

void prefixed(std::ostringstream& out, const std::string& prefix,
              const std::string& body, bool skip_seed) {
  std::istringstream in(body);
  for (std::string line; std::getline(in, line);) {
    if (skip_seed && line.rfind("seed=", 0) == 0) continue;
    out << prefix << "." << line << "\n";
  }
}

}  // namespace

std::string version_string() { return KDMT_VERSION; }

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
  const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
  bool known = false;
  if (key == "seed") {
    seed = parse_u64(key, value);
    known = true;
  } else if (section == "data") {
    known = set_data_key(data, name, value);
  } else if (section == "model") {
    known = model.set(name, value);
  } else if (section == "mlm" || section == "base" || section == "ckd") {
    if (name == "seed")
      throw ConfigError(key + ": stage seeds follow the global 'seed' key");
    TrainConfig& stage = section == "mlm" ? mlm : section == "base" ? base : ckd;
    known = stage.set(name, value);
  } else if (section == "eval") {
    if (name == "beam_size") {
      beam.beam_size = parse_size(key, value);
      known = true;
    } else if (name == "max_len") {
      beam.max_len = parse_size(key, value);
      known = true;
    } else if (name == "length_penalty") {
      beam.length_penalty = parse_double(key, value);
      known = true;
    }
  }
  if (!known) throw ConfigError("unknown key '" + key + "'");
  explicit_keys_.insert(key);
}

void ExperimentConfig::resolve() {
  data.seed = seed;
  mlm.seed = base.seed = ckd.seed = seed;
  if (!explicit_keys_.count("model.vocab_size")) model.vocab_size = data.vocab_size;
  model.validate();
  mlm.validate();
  base.validate();
  ckd.validate();
  if (base.mode != TrainingMode::decoder_only)
    throw ConfigError("base.mode must be decoder_only (ablate covers the others)");
  if (ckd.mode == TrainingMode::from_scratch)
    throw ConfigError("ckd.mode cannot be from_scratch");
  if (beam.beam_size < 1) throw ConfigError("eval.beam_size must be at least 1");
  if (data.vocab_size != model.vocab_size)
    throw ConfigError("data.vocab_size (" + std::to_string(data.vocab_size) +
                      ") differs from model.vocab_size (" +
                      std::to_string(model.vocab_size) + ")");
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  out << "seed=" << seed << "\n";
  out << "data.task=" << to_string(data.task) << "\n"
      << "data.vocab_size=" << data.vocab_size << "\n"
      << "data.n_train=" << data.n_train << "\n"
      << "data.n_valid=" << data.n_valid << "\n"
      << "data.n_test=" << data.n_test << "\n"
      << "data.min_len=" << data.min_len << "\n"
      << "data.max_len=" << data.max_len << "\n"
      << "data.successors=" << data.successors << "\n";
  prefixed(out, "model", model.to_text(), false);
  prefixed(out, "mlm", mlm.to_text(), true);
  prefixed(out, "base", base.to_text(), true);
  prefixed(out, "ckd", ckd.to_text(), true);
  out << "eval.beam_size=" << beam.beam_size << "\n"
      << "eval.max_len=" << beam.max_len << "\n"
      << "eval.length_penalty=" << format_double(beam.length_penalty) << "\n";
  return out.str();
}

void ExperimentConfig::apply_text(const std::string& text,
                                  const std::string& origin) {
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void ExperimentConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_text(text.str(), path.string());
}

void write_run_info(const std::filesystem::path& dir,
                    const ExperimentConfig& config) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.txt");
  if (!out) throw DataError("cannot write " + (dir / "config.txt").string());
  out << "# kdmt " << version_string() << "\n" << config.to_text();
  std::ofstream ver(dir / "VERSION");
  ver << version_string() << "\n";
}

void save_data_dir(const SyntheticData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_corpus(data.train, dir / "train");
  save_corpus(data.valid, dir / "valid");
  save_corpus(data.test, dir / "test");
  data.vocab.save(dir / "vocab.tsv");
  data.cipher.save(dir / "cipher.tsv", data.vocab);
}

SyntheticData load_data_dir(const std::filesystem::path& dir,
                            SyntheticTask task) {
  if (!std::filesystem::exists(dir / "vocab.tsv"))
    throw DataError("no vocab.tsv in " + dir.string() + " (run gen-data first)");
  SyntheticData data;
  data.vocab = Vocabulary::load(dir / "vocab.tsv");
  data.train = load_corpus(dir / "train", data.vocab);
  data.valid = load_corpus(dir / "valid", data.vocab);
  data.test = load_corpus(dir / "test", data.vocab);
  if (std::filesystem::exists(dir / "cipher.tsv"))
    data.cipher = Cipher::load(dir / "cipher.tsv", data.vocab, task);
  return data;
}

std::uint64_t model_seed(std::uint64_t seed) {
  return derive_seed(seed, {kModelStream});
}

std::vector<IdSeq> source_sentences(const ParallelCorpus& corpus) {
  std::vector<IdSeq> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus.pairs) out.push_back(p.src);
  return out;
}

TrainResult run_pretrain_stage(const ExperimentConfig& config,
                               const ParallelCorpus& train,
                               const ParallelCorpus& valid,
                               const MetricObserver& observer) {
  Seq2SeqModel model(config.model, model_seed(config.seed));
  const auto sentences = source_sentences(train);
  const auto held_out = source_sentences(valid);
  return pretrain_encoder_mlm(model, sentences, held_out, config.mlm, observer);
}

TrainResult run_base_stage(const ExperimentConfig& config,
                           const Checkpoint& mlm, const ParallelCorpus& train,
                           const ParallelCorpus& valid,
                           const MetricObserver& observer) {
  if (mlm.config != config.model)
    throw ConfigError("pretrained checkpoint config differs from model.*");
  Seq2SeqModel model = mlm.to_model();
  return train_base(model, train, &valid, config.base, observer);
}

CkdResult run_ckd_stage(const ExperimentConfig& config, const Checkpoint& base,
                        const ParallelCorpus& train,
                        const ParallelCorpus& valid,
                        const MetricObserver& observer) {
  if (base.config != config.model)
    throw ConfigError("base checkpoint config differs from model.*");
  return run_ckd(base, train, &valid, config.ckd, {}, observer);
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& config,
                                      const SyntheticData& data,
                                      const MetricObserver& observer) {
  std::vector<AblationRow> rows = {
      {"Enc + Dec", TrainingMode::from_scratch, false, false, {}},
      {"Enc^XLM-R_train + Dec", TrainingMode::joint, true, false, {}},
      {"Enc^XLM-R_no-train + Dec", TrainingMode::decoder_only, true, false, {}},
      {"+ CKD", TrainingMode::decoder_only, true, true, {}},
  };
  const Checkpoint mlm =
      run_pretrain_stage(config, data.train, data.valid, observer).averaged;

  // from_scratch re-initializes everything, so its starting point is moot.
  {
    TrainConfig tc = config.base;
    tc.mode = TrainingMode::from_scratch;
    Seq2SeqModel model(config.model, model_seed(config.seed));
    const auto r = train(model, data.train, &data.valid, tc, observer);
    rows[0].report = evaluate_checkpoint(r.averaged, data.test, config.beam);
  }
  {
    TrainConfig tc = config.base;
    tc.mode = TrainingMode::joint;
    Seq2SeqModel model = mlm.to_model();
    const auto r = train(model, data.train, &data.valid, tc, observer);
    rows[1].report = evaluate_checkpoint(r.averaged, data.test, config.beam);
  }
  const Checkpoint base =
      run_base_stage(config, mlm, data.train, data.valid, observer).averaged;
  rows[2].report = evaluate_checkpoint(base, data.test, config.beam);
  const CkdResult ckd =
      run_ckd_stage(config, base, data.train, data.valid, observer);
  rows[3].report = evaluate_checkpoint(ckd.train.averaged, data.test, config.beam);
  return rows;
}

std::string ablation_tsv(const std::vector<AblationRow>& rows,
                         std::uint64_t seed) {
  std::ostringstream out;
  out << "model\tmode\tbleu4\tchrf\tseed\n";
  for (const auto& r : rows) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.4f\t%.4f", r.report.bleu.score,
                  r.report.chrf.score);
    out << r.name << "\t" << to_string(r.mode) << (r.ckd ? "+ckd" : "") << "\t"
        << buf << "\t" << seed << "\n";
  }
  return out.str();
}

}  // namespace kdmt
