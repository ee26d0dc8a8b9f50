// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance <csn binary> <desk config> [scratch dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "csn/config.hpp"
#include "csn/pipeline.hpp"
#include "csn/verify.hpp"

using namespace csn;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const char* id, bool pass, const std::string& detail) {
  std::printf("%s %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const CheckResult* find_check(const VerifyReport& r, const std::string& prefix) {
  for (const auto& c : r.checks)
    if (c.name.starts_with(prefix)) return &c;
  return nullptr;
}

struct SeedRun {
  std::uint64_t seed = 0;
  double seconds = 0.0;
  double error[4] = {};  // indexed by Variant
  double probe_standard = 0.0, probe_learned = 0.0;
  double l1_init = 0.0, l1_final = 0.0;
  std::vector<std::size_t> inactive;  // per condition, learned masks
  std::size_t audit_total = 0, audit_held = 0;
};

SeedRun run_seed(RunConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  SeedRun out;
  out.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto [ds, bench] = build_data(cfg);
  const std::size_t n_c = bench.conditions.size();
  const std::size_t probe = cfg.probe_attribute_index();
  TripletOptions topt;
  topt.min_gap_ratio = cfg.data.min_gap_ratio;
  for (const auto* list : {&bench.train, &bench.val, &bench.test})
    for (const auto& t : *list) {
      ++out.audit_total;
      out.audit_held += oracle_holds(ds, t.anchor, t.close, t.far, bench.conditions[t.condition], topt) ? 1 : 0;
    }

  for (Variant v : {Variant::standard, Variant::specialist_set, Variant::csn_fixed, Variant::csn_learned}) {
    TrainConfig tc = cfg.train_config();
    tc.variant = v;
    const Model init = init_model(tc, ds.feature_dim(), n_c);
    const TrainResult r = train(tc, ds, bench.train, bench.val, n_c);
    const double err = triplet_error(r.model, bench.test, ds).overall_error;
    out.error[static_cast<int>(v)] = err;
    std::printf("   seed %llu %-14s test error %6.2f%%  best epoch %zu\n", static_cast<unsigned long long>(seed),
                std::string(to_string(v)).c_str(), 100.0 * err, r.history.best_epoch);
    if (v == Variant::standard) out.probe_standard = linear_probe(r.model, ds, probe, bench.conditions).accuracy;
    if (v == Variant::csn_learned) {
      out.probe_learned = linear_probe(r.model, ds, probe, bench.conditions).accuracy;
      out.l1_init = mask_stats(*init.masks).total_l1();
      const MaskReport m = mask_stats(*r.model.masks, 1e-3);
      out.l1_final = m.total_l1();
      for (std::size_t c = 0; c < n_c; ++c) out.inactive.push_back(m.dim - m.active[c]);
    }
  }
  out.seconds = seconds_since(t0);
  std::fflush(stdout);
  return out;
}

int run(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::pair<std::string, std::string>> artifacts(const fs::path& train_dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(train_dir)) {
    const auto rel = fs::relative(e.path(), train_dir).string();
    if (e.is_regular_file() && (rel == "metrics.jsonl" || e.path().extension() == ".ckpt")) {
      out.emplace_back(rel, read_file(e.path()));
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance <csn binary> <desk config> [scratch dir]\n");
    return 2;
  }
  const std::string cli = argv[1];
  const RunConfig desk = load_config(argv[2]);
  const fs::path scratch = argc > 3 ? fs::path(argv[3]) : fs::temp_directory_path() / "csn_acceptance";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  // Gradient, reduction and locality properties.
  {
    const auto t0 = std::chrono::steady_clock::now();
    const VerifyReport v = run_verification({});
    const double secs = seconds_since(t0);
    double worst = 0.0;
    std::size_t grads = 0;
    bool grads_ok = true, masks_covered = false;
    for (const auto& c : v.checks) {
      if (!c.name.starts_with("grad/")) continue;
      ++grads;
      worst = std::max(worst, c.metric);
      grads_ok = grads_ok && c.passed && c.metric < 1e-4;
      masks_covered = masks_covered || c.name.find("joint_loss/learned_masks") != std::string::npos;
    }
    report("AC1", grads_ok && masks_covered && grads > 0 && secs < 30.0,
           fmt("%zu gradient checks, max rel error %.2e (< 1e-4), %.2f s (< 30 s)", grads, worst, secs));

    const CheckResult* id = find_check(v, "reduction_identity");
    report("AC2", id && id->passed && id->metric <= 1e-12,
           id ? fmt("max |csn - standard| over 1000 batches %.2e (<= 1e-12)", id->metric) : "check missing");
    const CheckResult* loc = find_check(v, "subspace_locality");
    report("AC3", loc && loc->passed && loc->metric == 0.0,
           loc ? fmt("max |grad| outside the mask support %.1e (== 0)", loc->metric) : "check missing");
  }

  std::vector<SeedRun> seeds;
  for (std::uint64_t s : {1, 2, 3}) seeds.push_back(run_seed(desk, s));
  const int kStd = static_cast<int>(Variant::standard), kSpec = static_cast<int>(Variant::specialist_set),
            kFixed = static_cast<int>(Variant::csn_fixed), kLearned = static_cast<int>(Variant::csn_learned);

  {
    bool ok = true;
    std::string detail;
    for (const auto& r : seeds) {
      const double best_csn = std::min(r.error[kFixed], r.error[kLearned]);
      const bool seed_ok = r.error[kStd] > r.error[kFixed] && r.error[kStd] > r.error[kLearned] &&
                           r.error[kStd] - best_csn >= 0.08 &&
                           std::abs(r.error[kFixed] - r.error[kLearned]) <= 0.03 && r.seconds < 600.0;
      ok = ok && seed_ok;
      detail += fmt("[seed %llu std %.2f%% fixed %.2f%% learned %.2f%% gap %.2fpp |f-l| %.2fpp %.0fs] ",
                    static_cast<unsigned long long>(r.seed), 100 * r.error[kStd], 100 * r.error[kFixed],
                    100 * r.error[kLearned], 100 * (r.error[kStd] - best_csn),
                    100 * std::abs(r.error[kFixed] - r.error[kLearned]), r.seconds);
    }
    report("AC4", ok, detail + "(gap >= 8pp, |f-l| <= 3pp, < 600 s per seed)");
  }
  {
    double fixed = 0.0, spec = 0.0;
    for (const auto& r : seeds) {
      fixed += r.error[kFixed] / 3.0;
      spec += r.error[kSpec] / 3.0;
    }
    report("AC5", fixed <= spec + 0.005,
           fmt("mean csn_fixed %.2f%% vs specialist_set %.2f%% (+0.5pp allowed)", 100 * fixed, 100 * spec));
  }
  {
    const auto [ds, bench] = build_data(desk);
    const auto random = sample_random_triplets(ds, Split::test, bench.conditions.size(), 10000, 404);
    bool ok = true;
    std::string detail;
    for (Variant v : {Variant::standard, Variant::csn_learned}) {
      TrainConfig tc = desk.train_config();
      tc.variant = v;
      const double e = triplet_error(init_model(tc, ds.feature_dim(), bench.conditions.size()), random, ds)
                           .overall_error;
      ok = ok && std::abs(e - 0.5) <= 0.02;
      detail += fmt("untrained %s %.2f%%; ", std::string(to_string(v)).c_str(), 100 * e);
    }
    report("AC6", ok, detail + "10000 random test triplets, target 50% +- 2%");
  }
  {
    bool ok = true;
    std::string detail;
    for (const auto& r : seeds) {
      const bool sparse = std::all_of(r.inactive.begin(), r.inactive.end(), [](std::size_t n) { return n > 0; });
      ok = ok && r.l1_final < r.l1_init && sparse;
      detail += fmt("[seed %llu L1 %.1f -> %.1f, dims < 1e-3 per condition:", static_cast<unsigned long long>(r.seed),
                    r.l1_init, r.l1_final);
      for (std::size_t n : r.inactive) detail += fmt(" %zu", n);
      detail += "] ";
    }
    report("AC7", ok, detail);
  }
  {
    double std_acc = 0.0, learned_acc = 0.0;
    for (const auto& r : seeds) {
      std_acc += r.probe_standard / 3.0;
      learned_acc += r.probe_learned / 3.0;
    }
    report("AC8", learned_acc >= std_acc,
           fmt("mean %s probe accuracy csn_learned %.2f%% vs standard %.2f%%", desk.eval.probe_attribute.c_str(),
               100 * learned_acc, 100 * std_acc));
  }
  {
    RunConfig small;
    small.seed = 77;
    small.data.n = 320;
    small.data.triplets_train = 64;
    small.data.triplets_val = 16;
    small.data.triplets_test = 32;
    small.training.model = {{24}, 8};
    small.training.epochs = 3;
    small.training.batch_size = 16;
    small.training.optimizer.alpha = 1e-3;
    const fs::path cfg_path = scratch / "determinism.json";
    write_file(cfg_path, to_json(small).dump(2));
    bool ran = true;
    for (const char* run_name : {"run_a", "run_b"}) {
      const fs::path root = scratch / run_name;
      const std::string base = cli + " %s --config " + cfg_path.string();
      ran = ran && run(fmt(base.c_str(), "gen") + " --out " + (root / "data").string()) == 0;
      ran = ran && run(fmt(base.c_str(), "train") + " --data " + (root / "data").string() + " --out " +
                       (root / "train").string()) == 0;
      ran = ran && run(fmt(base.c_str(), "eval") + " --data " + (root / "data").string() + " --checkpoint " +
                       (root / "train" / "best.ckpt").string() + " --out " + (root / "eval").string()) == 0;
    }
    bool same = false;
    std::size_t files = 0;
    if (ran) {
      const auto a = artifacts(scratch / "run_a" / "train");
      const auto b = artifacts(scratch / "run_b" / "train");
      files = a.size();
      same = a == b && read_file(scratch / "run_a" / "eval" / "eval_report.json") ==
                           read_file(scratch / "run_b" / "eval" / "eval_report.json");
    }
    report("AC9", ran && same && files >= 2,
           ran ? fmt("%zu metrics/checkpoint files and eval reports byte-identical across two CLI pipelines", files)
               : std::string("a CLI step failed"));
  }
  {
    std::size_t total = 0, held = 0;
    for (const auto& r : seeds) {
      total += r.audit_total;
      held += r.audit_held;
    }
    report("AC10", total > 0 && held == total, fmt("%zu / %zu emitted triplets satisfy their oracle", held, total));
  }

  fs::remove_all(scratch);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
