// Runs the acceptance checks and prints one PASS/FAIL line per criterion.
//
//   kdmt_acceptance            all ten criteria
//   kdmt_acceptance 1 2 3      a subset
//
// Progress of the long training runs goes to stderr.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kdmt/checkpoint.hpp"
#include "kdmt/ckd.hpp"
#include "kdmt/eval.hpp"
#include "kdmt/experiment.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace kdmt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

MetricObserver progress(const std::string& stage) {
  return [stage](const MetricRow& r) {
    std::fprintf(stderr, "[%s] update %llu %s nll %.4f bleu %.2f\n",
                 stage.c_str(), static_cast<unsigned long long>(r.update),
                 r.split.c_str(), r.nll, r.bleu);
  };
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.seed = 17;
  cfg.resolve();
  return cfg;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::size_t checks = 0;
  for (const auto& c : oracle::primitive_grad_cases()) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto r = oracle::run_grad_case(c, seed);
      checks += r.checked;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_case = c.name + " seed " + std::to_string(seed);
      }
    }
  }
  const double secs = seconds_since(start);
  const std::size_t cases = oracle::primitive_grad_cases().size();
  return {worst < 1e-4 && secs < 60.0,
          fmt("%zu cases x 20 seeds, %zu elements, max rel err %.2e (%s), %.1fs",
              cases, checks, worst, worst_case.c_str(), secs)};
}

Outcome partitions() {
  const auto start = Clock::now();
  std::size_t combos = 0;
  std::string first_problem;
  for (std::size_t n : {1, 2, 3, 5})
    for (std::size_t size : {10, 101, 1000})
      for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        ++combos;
        const std::string v = oracle::partition_violations(size, n, seed);
        if (!v.empty() && first_problem.empty()) first_problem = v;
      }
  const double secs = seconds_since(start);
  return {first_problem.empty() && secs < 1.0,
          fmt("%zu (n, size, seed) combinations%s%s, %.3fs", combos,
              first_problem.empty() ? "" : ": ", first_problem.c_str(), secs)};
}

Outcome kd_degeneracy() {
  const auto start = Clock::now();
  double gap = 0.0;
  bool exact = true;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    gap = std::max(gap, oracle::kd_ce_gap(seed));
    exact = exact && oracle::combined_extremes_exact(seed);
  }
  const double secs = seconds_since(start);
  return {gap < 1e-9 && exact && secs < 1.0,
          fmt("max |kd - ce| %.2e over 100 cases, alpha 0/1 %s, %.3fs", gap,
              exact ? "exact" : "NOT exact", secs)};
}

Outcome schedule_audit() {
  const auto start = Clock::now();
  const ExperimentConfig cfg = default_config();
  const SyntheticData data = make_synthetic_corpus(cfg.data);
  const Seq2SeqModel init(cfg.model, model_seed(cfg.seed));
  const Checkpoint base = Checkpoint::from_model(init, Stage::base, 0);
  bool ok = true;
  std::string detail;
  for (std::size_t n : {1, 2}) {
    TrainConfig c = cfg.ckd;
    c.n_teachers = n;
    const auto r = oracle::audit_ckd(base, data.train, c, 2);
    ok = ok && r.ok() && r.epochs == 2;
    detail += fmt("n=%zu: %llu epochs, %zu teacher batches, %zu student "
                  "backwards, avoid D_t %s, equal after epoch %s, teacher "
                  "grads zero %s; ",
                  n, static_cast<unsigned long long>(r.epochs),
                  r.teacher_batches, r.student_backwards,
                  r.teachers_avoid_current && r.log_avoids_current ? "yes" : "NO",
                  r.equal_after_epoch ? "yes" : "NO",
                  r.zero_teacher_grads ? "yes" : "NO");
  }
  const double secs = seconds_since(start);
  return {ok && secs < 120.0, detail + fmt("%.1fs", secs)};
}

Outcome freeze_invariant() {
  const auto start = Clock::now();
  ExperimentConfig cfg = default_config();
  cfg.mlm.max_updates = 200;
  cfg.base.max_updates = 500;
  cfg.base.eval_every = 0;
  const SyntheticData data = make_synthetic_corpus(cfg.data);
  const Checkpoint mlm =
      run_pretrain_stage(cfg, data.train, data.valid).averaged;
  const TrainResult base = run_base_stage(cfg, mlm, data.train, data.valid);
  const bool last_ok = oracle::encoder_matches(mlm, base.last.to_model());
  const bool avg_ok = oracle::encoder_matches(mlm, base.averaged.to_model());
  bool moved = false;
  for (const auto& [name, t] : base.last.params)
    if (!(t == mlm.params.at(name))) moved = true;
  return {last_ok && avg_ok && moved && base.last.updates == 500,
          fmt("%llu decoder-only updates: encoder %s, averaged %s, decoder "
              "moved %s, %.1fs",
              static_cast<unsigned long long>(base.last.updates),
              last_ok ? "bit-identical" : "CHANGED",
              avg_ok ? "bit-identical" : "CHANGED", moved ? "yes" : "NO",
              seconds_since(start))};
}

Outcome metric_oracles() {
  double worst = 0.0;
  for (const auto& ex : oracle::metric_examples()) {
    std::vector<TokenSeq> h, r;
    for (const auto& s : ex.hyps) {
      std::istringstream in(s);
      h.emplace_back(std::istream_iterator<std::string>(in),
                     std::istream_iterator<std::string>());
    }
    for (const auto& s : ex.refs) {
      std::istringstream in(s);
      r.emplace_back(std::istream_iterator<std::string>(in),
                     std::istream_iterator<std::string>());
    }
    if (ex.bleu) worst = std::max(worst, std::abs(bleu4_corpus(h, r).score - *ex.bleu));
    if (ex.chrf) worst = std::max(worst, std::abs(chrf_corpus(ex.hyps, ex.refs).score - *ex.chrf));
  }

  const SyntheticData data = make_synthetic_corpus(default_config().data);
  std::vector<IdSeq> refs;
  for (const auto& p : data.test.pairs) refs.push_back(p.tgt);
  const MetricReport same = score_translations(refs, refs, data.vocab);
  const bool hundred = same.bleu.score == 100.0 && same.chrf.score == 100.0;

  int agree = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed)
    agree += oracle::beam1_matches_greedy(seed) ? 1 : 0;
  return {worst < 1e-9 && hundred && agree == 50,
          fmt("%zu hand examples, max err %.2e; identical test split BLEU "
              "%.17g chrF %.17g; beam 1 == greedy on %d/50 models",
              oracle::metric_examples().size(), worst, same.bleu.score,
              same.chrf.score, agree)};
}

Outcome checkpoints() {
  const fs::path dir = fs::temp_directory_path() / "kdmt_acceptance_ckpt";
  fs::create_directories(dir);
  const ExperimentConfig cfg = default_config();
  const Checkpoint full = Checkpoint::from_model(
      Seq2SeqModel(cfg.model, model_seed(cfg.seed)), Stage::ckd, 1234);
  save_checkpoint(full, dir / "full.ckpt");
  const bool round_trip = load_checkpoint(dir / "full.ckpt") == full &&
                          deserialize(serialize(full)) == full;
  fs::remove_all(dir);

  double gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    gap = std::max(gap, oracle::average_oracle_gap(seed, 5));
  return {round_trip && gap < 1e-15,
          fmt("round trip %s (%zu tensors); average of 5 vs elementwise mean "
              "max gap %.2e over 20 seeds",
              round_trip ? "bit-exact" : "DIFFERS", full.params.size(), gap)};
}

// ---------------------------------------------------------------------------

struct PipelineRun {
  Checkpoint mlm, base, ckd;
  MetricReport base_report, ckd_report;
  double mlm_secs = 0, base_secs = 0, ckd_secs = 0;
};

PipelineRun run_pipeline(const std::string& label) {
  const ExperimentConfig cfg = default_config();
  const SyntheticData data = make_synthetic_corpus(cfg.data);
  PipelineRun run;

  auto t = Clock::now();
  run.mlm = run_pretrain_stage(cfg, data.train, data.valid,
                               progress(label + " mlm")).averaged;
  run.mlm_secs = seconds_since(t);

  t = Clock::now();
  run.base = run_base_stage(cfg, run.mlm, data.train, data.valid,
                            progress(label + " base")).averaged;
  run.base_secs = seconds_since(t);
  run.base_report = evaluate_checkpoint(run.base, data.test, cfg.beam);

  t = Clock::now();
  run.ckd = run_ckd_stage(cfg, run.base, data.train, data.valid,
                          progress(label + " ckd")).train.averaged;
  run.ckd_secs = seconds_since(t);
  run.ckd_report = evaluate_checkpoint(run.ckd, data.test, cfg.beam);
  return run;
}

std::optional<PipelineRun> first_run;

const PipelineRun& pipeline() {
  if (!first_run) first_run = run_pipeline("run1");
  return *first_run;
}

Outcome end_to_end() {
  const PipelineRun& r = pipeline();
  const double base = r.base_report.bleu.score;
  const double ckd = r.ckd_report.bleu.score;
  const bool ok = base >= 90.0 && r.base.updates <= 5000 &&
                  r.base_secs < 15 * 60 && r.ckd.updates == 2000 &&
                  ckd >= base - 1.0;
  return {ok, fmt("test BLEU base %.2f (%llu updates, %.0fs) -> CKD %.2f "
                  "(%llu student updates, %.0fs); chrF %.2f -> %.2f; MLM %.0fs",
                  base, static_cast<unsigned long long>(r.base.updates),
                  r.base_secs, ckd,
                  static_cast<unsigned long long>(r.ckd.updates), r.ckd_secs,
                  r.base_report.chrf.score, r.ckd_report.chrf.score,
                  r.mlm_secs)};
}

Outcome retention() {
  const auto start = Clock::now();
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t = oracle::retention_trial(seed);
    wins += t.ckd_nll <= t.sequential_nll ? 1 : 0;
    detail += fmt("seed %llu ckd %.3f seq %.3f; ",
                  static_cast<unsigned long long>(seed), t.ckd_nll,
                  t.sequential_nll);
  }
  const double secs = seconds_since(start);
  return {wins >= 4 && secs < 20 * 60,
          fmt("CKD <= sequential on D_1 in %d/5 seeds (", wins) + detail +
              fmt("%.0fs)", secs)};
}

Outcome reproducibility() {
  const PipelineRun& a = pipeline();
  const PipelineRun b = run_pipeline("run2");
  const bool mlm = a.mlm == b.mlm, base = a.base == b.base, ckd = a.ckd == b.ckd;
  const bool bytes = serialize(a.ckd) == serialize(b.ckd);
  return {mlm && base && ckd && bytes,
          fmt("second run: mlm %s, base %s, ckd %s, serialized ckd %s",
              mlm ? "identical" : "DIFFERS", base ? "identical" : "DIFFERS",
              ckd ? "identical" : "DIFFERS", bytes ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdmt acceptance checks"};
  std::vector<int> only;
  app.add_option("criteria", only, "criteria to run (default: all)")
      ->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
      {"gradient oracle", gradients},
      {"partition and ordering", partitions},
      {"kd degeneracy", kd_degeneracy},
      {"two-epoch schedule audit", schedule_audit},
      {"freeze invariant", freeze_invariant},
      {"metric oracles", metric_oracles},
      {"checkpoint round trip and averaging", checkpoints},
      {"end-to-end cipher experiment", end_to_end},
      {"knowledge retention", retention},
      {"reproducibility", reproducibility},
  };
  const std::set<int> wanted(only.begin(), only.end());

  int failures = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = all[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id,
                all[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
