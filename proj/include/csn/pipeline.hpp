#pragma once

// File-level commands behind the command-line tool: gen, train, eval, sweep
// and verify. Every artifact directory carries a manifest.json with SHA-256
// checksums of its files and the resolved config. Wall-clock times go to
// *.log files, which are never checksummed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "csn/config.hpp"
#include "csn/data.hpp"
#include "csn/errors.hpp"
#include "csn/eval.hpp"
#include "csn/model.hpp"
#include "csn/sweep.hpp"
#include "csn/train.hpp"
#include "csn/verify.hpp"

namespace csn {

namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("cannot write " + p.string());
  }
}

inline std::string file_sha256(const fs::path& p) { return sha256_hex(read_file(p)); }

/// Creates `dir` for a command's outputs. An existing nonempty directory is
/// refused unless `force`, in which case it is wiped first.
inline void prepare_output_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
    if (!force) throw IoError("output directory " + dir.string() + " exists; pass --force to overwrite");
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// Writes manifest.json listing the checksum of every file in `files`
/// (paths relative to `dir`), merged with `extra`.
inline void write_manifest(const fs::path& dir, const std::vector<std::string>& files, nlohmann::json extra) {
  nlohmann::json sums = nlohmann::json::object();
  for (const auto& f : files) sums[f] = file_sha256(dir / f);
  extra["files"] = sums;
  write_file(dir / "manifest.json", extra.dump(2) + "\n");
}

inline nlohmann::json read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  if (!fs::exists(p)) throw IoError("missing manifest " + p.string());
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(p.string() + ": " + e.what());
  }
}

/// Recomputes every listed checksum; any mismatch or missing file is an
/// integrity error.
inline void verify_manifest(const fs::path& dir, const nlohmann::json& manifest) {
  if (!manifest.contains("files") || !manifest.at("files").is_object()) {
    throw IntegrityError((dir / "manifest.json").string() + " lists no files");
  }
  for (const auto& [name, sum] : manifest.at("files").items()) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw IntegrityError("missing data file " + p.string());
    if (!sum.is_string() || file_sha256(p) != sum.get<std::string>()) {
      throw IntegrityError("checksum mismatch for " + p.string());
    }
  }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

inline constexpr const char* kDatasetFile = "dataset.bin";
inline constexpr const char* kTripletFiles[3] = {"triplets_train.csv", "triplets_val.csv", "triplets_test.csv"};

/// Builds the dataset and the benchmark triplets described by `cfg`.
inline std::pair<Dataset, Benchmark> build_data(const RunConfig& cfg) {
  Dataset ds = split(generate_shapes(cfg.generate_options()), cfg.data.split, cfg.split_seed());
  TripletOptions topt;
  topt.min_gap_ratio = cfg.data.min_gap_ratio;
  Benchmark b = build_benchmark(ds, cfg.condition_attributes(), cfg.data.triplets_train, cfg.data.triplets_val,
                                cfg.data.triplets_test, cfg.triplet_seed(), topt);
  return {std::move(ds), std::move(b)};
}

inline nlohmann::json cmd_gen(const RunConfig& cfg, const fs::path& out, bool force) {
  prepare_output_dir(out, force);
  const auto [ds, bench] = build_data(cfg);
  save_dataset(ds, (out / kDatasetFile).string());
  save_triplets(bench.train, (out / kTripletFiles[0]).string());
  save_triplets(bench.val, (out / kTripletFiles[1]).string());
  save_triplets(bench.test, (out / kTripletFiles[2]).string());

  nlohmann::json conditions = nlohmann::json::array();
  for (std::size_t a : bench.conditions) conditions.push_back(ds.attributes[a].name);
  nlohmann::json m = {
      {"kind", "data"},
      {"config", to_json(cfg)},
      {"conditions", conditions},
      {"split_counts",
       {{"train", ds.indices(Split::train).size()},
        {"val", ds.indices(Split::val).size()},
        {"test", ds.indices(Split::test).size()}}},
      {"triplet_counts", {{"train", bench.train.size()}, {"val", bench.val.size()}, {"test", bench.test.size()}}},
  };
  write_manifest(out, {kDatasetFile, kTripletFiles[0], kTripletFiles[1], kTripletFiles[2]}, m);
  return read_manifest(out);
}

struct DataBundle {
  RunConfig config;  // the config the data was generated with
  Dataset dataset;
  Benchmark bench;
  std::vector<std::string> condition_names;
};

inline DataBundle load_data_dir(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  verify_manifest(dir, manifest);
  DataBundle b;
  try {
    b.config = parse_config(manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("data manifest has no usable config: " + std::string(e.what()));
  }
  b.dataset = load_dataset((dir / kDatasetFile).string());
  b.bench.conditions = b.config.condition_attributes();
  b.bench.train = load_triplets((dir / kTripletFiles[0]).string());
  b.bench.val = load_triplets((dir / kTripletFiles[1]).string());
  b.bench.test = load_triplets((dir / kTripletFiles[2]).string());
  for (std::size_t a : b.bench.conditions) b.condition_names.push_back(b.dataset.attributes.at(a).name);
  for (const auto* list : {&b.bench.train, &b.bench.val, &b.bench.test})
    for (const auto& t : *list) {
      if (t.condition >= b.bench.conditions.size() || std::max({t.anchor, t.close, t.far}) >= b.dataset.size()) {
        throw IntegrityError("triplet file references unknown samples or conditions");
      }
    }
  return b;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline std::string epoch_file(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu.ckpt", epoch);
  return buf;
}

/// Trains the configured variant on the data directory. Writes metrics.jsonl
/// (epoch, train_loss, val_error, improved), one checkpoint per improving
/// epoch and network lineage, best.ckpt, val_report.json and the manifest.
/// Per-epoch wall times go to train.log.
inline nlohmann::json cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, bool force,
                                std::ostream* progress = nullptr) {
  const DataBundle data = load_data_dir(data_dir);
  prepare_output_dir(out, force);
  const TrainConfig tc = cfg.train_config();
  const std::size_t n_c = data.bench.conditions.size();
  const std::size_t lineages = tc.variant == Variant::specialist_set ? n_c : 1;
  for (std::size_t k = 0; k < lineages; ++k) fs::create_directories(out / ("lineage_" + std::to_string(k)));

  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  std::ofstream log(out / "train.log", std::ios::binary);
  if (!metrics || !log) throw IoError("cannot write metrics in " + out.string());
  std::vector<std::string> files = {"metrics.jsonl"};
  std::vector<std::vector<std::string>> lineage_files(lineages);

  auto on_epoch = [&](const EpochRecord& rec, const Model& model, bool improved) {
    nlohmann::json line = {{"epoch", rec.epoch},
                           {"train_loss", rec.train_loss},
                           {"val_error", rec.val_error},
                           {"improved", improved}};
    metrics << line.dump() << '\n';
    line["seconds"] = rec.seconds;
    log << line.dump() << '\n';
    if (progress != nullptr) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "epoch %3zu  loss %.5f  val error %.4f  %.1fs%s\n", rec.epoch, rec.train_loss,
                    rec.val_error, rec.seconds, improved ? "  *" : "");
      *progress << buf << std::flush;
    }
    if (!improved) return;
    for (std::size_t k = 0; k < lineages; ++k) {
      Model part;
      part.variant = model.variant;
      if (lineages > 1) {
        part.nets = {model.nets[k]};
      } else {
        part = model;
      }
      const std::string rel = "lineage_" + std::to_string(k) + "/" + epoch_file(rec.epoch);
      save_checkpoint(part, (out / rel).string());
      lineage_files[k].push_back(rel);
    }
  };

  const TrainResult result = train(tc, data.dataset, data.bench.train, data.bench.val, n_c, on_epoch);
  metrics.close();
  log.close();
  save_checkpoint(result.model, (out / "best.ckpt").string());
  const EvalReport val = triplet_error(result.model, data.bench.val, data.dataset);
  write_file(out / "val_report.json", val.to_json().dump(2) + "\n");

  files.push_back("best.ckpt");
  files.push_back("val_report.json");
  for (const auto& l : lineage_files) files.insert(files.end(), l.begin(), l.end());
  const auto best = result.history.best_epoch;
  nlohmann::json m = {
      {"kind", "train"},
      {"config", to_json(cfg)},
      {"variant", std::string(to_string(tc.variant))},
      {"train_seed", tc.seed},
      {"data_manifest_sha256", file_sha256(data_dir / "manifest.json")},
      {"conditions", data.condition_names},
      {"lineages", lineage_files},
      {"best",
       {{"epoch", best},
        {"path", "best.ckpt"},
        {"val_error", result.history.epochs[best].val_error},
        {"lineage_checkpoints", [&] {
           std::vector<std::string> v;
           for (std::size_t k = 0; k < lineages; ++k)
             v.push_back("lineage_" + std::to_string(k) + "/" + epoch_file(best));
           return v;
         }()}}},
  };
  write_manifest(out, files, m);
  return read_manifest(out);
}

/// The checkpoint a train directory marks as best, after checking its manifest.
inline fs::path best_checkpoint(const fs::path& train_dir) {
  const auto m = read_manifest(train_dir);
  verify_manifest(train_dir, m);
  if (!m.contains("best") || !m["best"].contains("path")) {
    throw IntegrityError(train_dir.string() + " manifest has no best checkpoint");
  }
  return train_dir / m["best"]["path"].get<std::string>();
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalRequest {
  fs::path checkpoint;
  fs::path data_dir;
  fs::path out;
  Split split = Split::test;
  bool export_full = false;
  std::vector<std::size_t> export_subspaces;
  bool probe = false;
  bool force = false;
};

/// Scores a checkpoint on one split. Writes eval_report.json, plus
/// mask_report.json for masked variants, optional embedding exports and an
/// optional frozen-feature probe result.
inline nlohmann::json cmd_eval(const RunConfig& cfg, const EvalRequest& req) {
  const DataBundle data = load_data_dir(req.data_dir);
  const Model model = load_checkpoint(req.checkpoint.string());
  const std::size_t n_c = data.bench.conditions.size();
  if (uses_masks(model.variant) && (!model.masks || model.masks->conditions() != n_c)) {
    throw ContractError("checkpoint masks do not cover the " + std::to_string(n_c) + " data conditions");
  }
  if (model.variant == Variant::specialist_set && model.nets.size() != n_c) {
    throw ContractError("specialist checkpoint has " + std::to_string(model.nets.size()) + " networks for " +
                        std::to_string(n_c) + " conditions");
  }
  if (!req.export_subspaces.empty() && !uses_masks(model.variant)) {
    throw ContractError("--export-subspace needs a masked variant; " + std::string(to_string(model.variant)) +
                        " has no masks");
  }
  for (std::size_t c : req.export_subspaces)
    if (c >= n_c) throw ConfigError("--export-subspace " + std::to_string(c) + " is not a condition index");
  if (req.export_full && model.variant == Variant::specialist_set) {
    throw ContractError("--export-full needs a single shared network");
  }

  const std::vector<Triplet>* triplets = req.split == Split::train ? &data.bench.train
                                         : req.split == Split::val ? &data.bench.val
                                                                   : &data.bench.test;
  if (req.split == Split::unassigned) throw ConfigError("--split must be train, val or test");

  prepare_output_dir(req.out, req.force);
  std::vector<std::string> files;
  const EvalReport report = triplet_error(model, *triplets, data.dataset);
  nlohmann::json rj = report.to_json();
  rj["variant"] = std::string(to_string(model.variant));
  rj["split"] = std::string(to_string(req.split));
  rj["conditions"] = data.condition_names;

  if (req.probe) {
    std::vector<std::size_t> trained = data.bench.conditions;
    ProbeOptions po;
    po.hidden = cfg.eval.probe_hidden;
    const std::size_t attr = data.dataset.attribute_index(cfg.eval.probe_attribute);
    const ProbeResult pr = linear_probe(model, data.dataset, attr, trained, po);
    rj["probe"] = {{"attribute", cfg.eval.probe_attribute},
                   {"accuracy", pr.accuracy},
                   {"majority_baseline", pr.majority_baseline},
                   {"classes", pr.classes}};
  }
  write_file(req.out / "eval_report.json", rj.dump(2) + "\n");
  files.push_back("eval_report.json");

  if (model.masks) {
    const MaskReport mr = mask_stats(*model.masks, cfg.eval.mask_threshold);
    write_file(req.out / "mask_report.json", mr.to_json().dump(2) + "\n");
    files.push_back("mask_report.json");
  }
  if (req.export_full) {
    export_embeddings(model, data.dataset, std::nullopt, (req.out / "embeddings_full.csv").string());
    files.push_back("embeddings_full.csv");
  }
  for (std::size_t c : req.export_subspaces) {
    const std::string name = "embeddings_subspace_" + std::to_string(c) + ".csv";
    export_embeddings(model, data.dataset, c, (req.out / name).string(), cfg.eval.mask_threshold);
    files.push_back(name);
  }
  write_manifest(req.out, files,
                 {{"kind", "eval"},
                  {"config", to_json(cfg)},
                  {"checkpoint_sha256", file_sha256(req.checkpoint)},
                  {"data_manifest_sha256", file_sha256(req.data_dir / "manifest.json")}});
  return rj;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline SweepTable cmd_sweep(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, bool force) {
  const DataBundle data = load_data_dir(data_dir);
  prepare_output_dir(out, force);
  const std::uint64_t base = derive_seed(cfg.seed, {0x5EE9});
  const SweepTable table =
      budget_sweep(cfg.train_config(), data.dataset, data.bench, cfg.eval.budgets, cfg.eval.variants, base);
  write_file(out / "sweep.tsv", table.to_tsv());
  write_file(out / "summary.txt", table.summary());
  write_manifest(out, {"sweep.tsv", "summary.txt"},
                 {{"kind", "sweep"},
                  {"config", to_json(cfg)},
                  {"base_seed", base},
                  {"data_manifest_sha256", file_sha256(data_dir / "manifest.json")}});
  return table;
}

// ---------------------------------------------------------------------------
// exit codes
// ---------------------------------------------------------------------------

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitIo = 3 };

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) != nullptr || dynamic_cast<const IntegrityError*>(&e) != nullptr) {
    return kExitIo;
  }
  if (dynamic_cast<const nlohmann::json::exception*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const fs::filesystem_error*>(&e) != nullptr) return kExitIo;
  return kExitFailure;
}

}  // namespace csn
