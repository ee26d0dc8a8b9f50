// csn: generate data, train, evaluate, sweep budgets and self-verify.
//
//   csn gen    [--config F] [--seed N] [--out DIR] [--force]
//   csn train  [--config F] [--seed N] [--data DIR] [--out DIR] [--force]
//   csn eval   [--config F] [--data DIR] [--checkpoint P] [--split S]
//              [--export-full] [--export-subspace C]... [--probe] [--out DIR] [--force]
//   csn sweep  [--config F] [--seed N] [--data DIR] [--out DIR] [--force]
//   csn verify [--inject-fault X]
//
// Without --out, outputs land under io.out_dir as data/, train/, eval/ and sweep/.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "csn/config.hpp"
#include "csn/pipeline.hpp"
#include "csn/verify.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_globals(CLI::App* cmd, Globals& g) {
  cmd->add_option("--config", g.config, "JSON run configuration");
  cmd->add_option("--seed", g.seed, "Override the configured seed");
  cmd->add_option("--out", g.out, "Output directory");
  cmd->add_flag("--force", g.force, "Overwrite an existing output directory");
}

csn::RunConfig resolve(const Globals& g) {
  csn::RunConfig cfg = g.config.empty() ? csn::RunConfig{} : csn::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

csn::fs::path or_default(const std::string& given, const csn::RunConfig& cfg, const char* sub) {
  return given.empty() ? csn::fs::path(cfg.out_dir) / sub : csn::fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional similarity networks on procedural shapes"};
  app.require_subcommand(1);

  Globals g;
  std::string data_dir;
  auto* gen = app.add_subcommand("gen", "Generate the dataset and triplet files");
  add_globals(gen, g);

  auto* train = app.add_subcommand("train", "Train the configured variant");
  add_globals(train, g);
  train->add_option("--data", data_dir, "Directory written by gen");

  csn::EvalRequest req;
  std::string checkpoint, split_name = "test";
  auto* eval = app.add_subcommand("eval", "Score a checkpoint and write reports");
  add_globals(eval, g);
  eval->add_option("--data", data_dir, "Directory written by gen");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default: best of the train directory)");
  eval->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_flag("--export-full", req.export_full, "Export full embeddings");
  eval->add_option("--export-subspace", req.export_subspaces, "Export the masked subspace of condition C");
  eval->add_flag("--probe", req.probe, "Fit a frozen-feature probe on eval.probe_attribute");

  auto* sweep = app.add_subcommand("sweep", "Train every variant at every triplet budget");
  add_globals(sweep, g);
  sweep->add_option("--data", data_dir, "Directory written by gen");

  double fault = 0.0;
  auto* verify = app.add_subcommand("verify", "Run gradient checks, loss oracles and triplet audits");
  verify->add_option("--inject-fault", fault, "Perturb analytic gradients by X (harness self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : csn::kExitConfig;
  }

  try {
    if (verify->parsed()) {
      csn::VerifyOptions opt;
      opt.gradient_fault = fault;
      const auto report = csn::run_verification(opt);
      std::cout << report.to_text();
      return report.all_passed() ? csn::kExitOk : csn::kExitFailure;
    }

    const csn::RunConfig cfg = resolve(g);
    const auto data = or_default(data_dir, cfg, "data");

    if (gen->parsed()) {
      const auto out = or_default(g.out, cfg, "data");
      const auto m = csn::cmd_gen(cfg, out, g.force);
      std::cout << "wrote " << out.string() << ": conditions " << m["conditions"].dump() << ", split "
                << m["split_counts"].dump() << ", triplets " << m["triplet_counts"].dump() << "\n";
    } else if (train->parsed()) {
      const auto out = or_default(g.out, cfg, "train");
      const auto m = csn::cmd_train(cfg, data, out, g.force, &std::cout);
      std::cout << "best epoch " << m["best"]["epoch"] << " (val error " << m["best"]["val_error"] << "), wrote "
                << out.string() << "\n";
    } else if (eval->parsed()) {
      req.data_dir = data;
      req.checkpoint = checkpoint.empty() ? csn::best_checkpoint(csn::fs::path(cfg.out_dir) / "train")
                                          : csn::fs::path(checkpoint);
      req.split = csn::parse_split(split_name);
      req.out = or_default(g.out, cfg, "eval");
      req.force = g.force;
      const auto r = csn::cmd_eval(cfg, req);
      std::printf("%s on %s: error %.2f%% over %zu triplets\n", r["variant"].get<std::string>().c_str(),
                  split_name.c_str(), 100.0 * r["overall_error"].get<double>(), r["n_triplets"].get<std::size_t>());
      const auto& names = r["conditions"];
      for (const auto& [c, v] : r["per_condition"].items()) {
        const std::size_t ci = std::stoul(c);
        std::printf("  %-12s %.2f%%\n", names.at(ci).get<std::string>().c_str(), 100.0 * v["error"].get<double>());
      }
      if (r.contains("probe")) {
        std::printf("probe %s: accuracy %.2f%% (majority %.2f%%)\n",
                    r["probe"]["attribute"].get<std::string>().c_str(), 100.0 * r["probe"]["accuracy"].get<double>(),
                    100.0 * r["probe"]["majority_baseline"].get<double>());
      }
    } else if (sweep->parsed()) {
      const auto out = or_default(g.out, cfg, "sweep");
      const auto table = csn::cmd_sweep(cfg, data, out, g.force);
      std::cout << table.summary();
    }
    return csn::kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return csn::exit_code_for(e);
  }
}
