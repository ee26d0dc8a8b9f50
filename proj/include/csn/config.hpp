#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csn/data.hpp"
#include "csn/errors.hpp"
#include "csn/model.hpp"
#include "csn/random.hpp"
#include "csn/train.hpp"

namespace csn {

struct DataConfig {
  std::vector<AttributeSpec> attributes = default_attributes();
  std::size_t n = 2000;
  std::size_t image_side = 12;
  double noise_std = 0.1;
  bool exhaustive = false;
  SplitFractions split;
  std::size_t triplets_train = 5000;
  std::size_t triplets_val = 500;
  std::size_t triplets_test = 1000;
  double min_gap_ratio = 2.0;
  /// Condition attribute names; empty means every non-nuisance attribute.
  std::vector<std::string> conditions;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
  std::vector<std::size_t> budgets = {500, 1000, 2000, 5000};
  std::vector<Variant> variants = {Variant::standard, Variant::specialist_set, Variant::csn_fixed,
                                   Variant::csn_learned};
  std::string probe_attribute = "shape_color";
  std::size_t probe_hidden = 0;
  double mask_threshold = 1e-3;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

/// Everything a run needs; parsed from JSON with unknown keys rejected.
struct RunConfig {
  std::uint64_t seed = 7;
  DataConfig data;
  TrainConfig training;  // training.seed is derived from `seed`
  EvalConfig eval;
  std::string out_dir = "runs/default";

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.seed == b.seed && a.data == b.data && a.training.variant == b.training.variant &&
           a.training.batch_size == b.training.batch_size && a.training.epochs == b.training.epochs &&
           a.training.model == b.training.model && a.training.loss == b.training.loss &&
           a.training.optimizer == b.training.optimizer && a.training.mask_init == b.training.mask_init &&
           a.eval == b.eval && a.out_dir == b.out_dir;
  }

  std::uint64_t data_seed() const { return derive_seed(seed, {0xDA7A}); }
  std::uint64_t split_seed() const { return derive_seed(seed, {0x5B17}); }
  std::uint64_t triplet_seed() const { return derive_seed(seed, {0x7121}); }

  GenerateOptions generate_options() const {
    GenerateOptions g;
    g.attributes = data.attributes;
    g.n = data.n;
    g.image_side = data.image_side;
    g.noise_std = data.noise_std;
    g.seed = data_seed();
    g.exhaustive = data.exhaustive;
    return g;
  }

  TrainConfig train_config() const {
    TrainConfig t = training;
    t.seed = derive_seed(seed, {0x7EA1});
    return t;
  }

  /// Attribute indices of the similarity conditions, in condition order.
  std::vector<std::size_t> condition_attributes() const {
    std::vector<std::size_t> out;
    if (data.conditions.empty()) {
      for (std::size_t a = 0; a < data.attributes.size(); ++a)
        if (!data.attributes[a].nuisance) out.push_back(a);
      return out;
    }
    for (const auto& name : data.conditions) {
      bool found = false;
      for (std::size_t a = 0; a < data.attributes.size(); ++a) {
        if (data.attributes[a].name != name) continue;
        if (data.attributes[a].nuisance) throw ConfigError("data.conditions: '" + name + "' is a nuisance attribute");
        out.push_back(a);
        found = true;
      }
      if (!found) throw ConfigError("data.conditions: unknown attribute '" + name + "'");
    }
    return out;
  }

  std::size_t probe_attribute_index() const {
    for (std::size_t a = 0; a < data.attributes.size(); ++a)
      if (data.attributes[a].name == eval.probe_attribute) return a;
    throw ConfigError("eval.probe_attribute: unknown attribute '" + eval.probe_attribute + "'");
  }
};

namespace config_detail {

using nlohmann::json;

inline void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
}

inline void reject_unknown(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  expect_object(j, path);
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!keys.count(key)) throw ConfigError((path.empty() ? key : path + "." + key) + ": unknown key");
  }
}

/// Literal ints from code arrive signed, parsed ones unsigned; accept both.
inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline std::string join(const std::string& path, const char* key) { return path.empty() ? key : path + "." + key; }

template <class T>
void read(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  const std::string where = join(path, key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!is_count(v)) throw ConfigError(where + ": expected a nonnegative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    }
    out = v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline json attribute_to_json(const AttributeSpec& a) {
  json j = {{"name", a.name}, {"kind", a.is_categorical() ? "categorical" : "numeric"}, {"nuisance", a.nuisance}};
  if (a.is_categorical()) {
    j["cardinality"] = a.cardinality;
  } else {
    j["range"] = {a.lo, a.hi};
  }
  return j;
}

inline AttributeSpec attribute_from_json(const json& j, const std::string& path) {
  reject_unknown(j, path, {"name", "kind", "cardinality", "range", "nuisance"});
  AttributeSpec a;
  read(j, path, "name", a.name);
  std::string kind = "categorical";
  read(j, path, "kind", kind);
  if (kind == "categorical") {
    a.kind = AttributeKind::categorical;
    a.lo = a.hi = 0.0;
    read(j, path, "cardinality", a.cardinality);
  } else if (kind == "numeric") {
    a.kind = AttributeKind::numeric;
    if (j.contains("range")) {
      const json& r = j.at("range");
      if (!r.is_array() || r.size() != 2 || !r[0].is_number() || !r[1].is_number()) {
        throw ConfigError(path + ".range: expected [lo, hi]");
      }
      a.lo = r[0].get<double>();
      a.hi = r[1].get<double>();
    }
  } else {
    throw ConfigError(path + ".kind: expected 'categorical' or 'numeric'");
  }
  read(j, path, "nuisance", a.nuisance);
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return a;
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  json attrs = json::array();
  for (const auto& a : c.data.attributes) attrs.push_back(config_detail::attribute_to_json(a));
  json variants = json::array();
  for (Variant v : c.eval.variants) variants.push_back(std::string(to_string(v)));
  const auto& t = c.training;
  json mask_init = {{"mode", t.mask_init.mode == MaskInit::Mode::disjoint ? "disjoint" : "normal"},
                    {"mean", t.mask_init.mean},
                    {"variance", t.mask_init.variance}};
  return {
      {"seed", c.seed},
      {"data",
       {{"attributes", attrs},
        {"n", c.data.n},
        {"image_side", c.data.image_side},
        {"noise_std", c.data.noise_std},
        {"exhaustive", c.data.exhaustive},
        {"split", {{"train", c.data.split.train}, {"val", c.data.split.val}, {"test", c.data.split.test}}},
        {"triplets", {{"train", c.data.triplets_train}, {"val", c.data.triplets_val}, {"test", c.data.triplets_test}}},
        {"min_gap_ratio", c.data.min_gap_ratio},
        {"conditions", c.data.conditions}}},
      {"model", {{"hidden", t.model.hidden}, {"embedding_dim", t.model.embedding_dim}}},
      {"loss", {{"margin", t.loss.margin}, {"lambda1", t.loss.lambda1}, {"lambda2", t.loss.lambda2}}},
      {"optimizer",
       {{"alpha", t.optimizer.alpha},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"epsilon", t.optimizer.epsilon},
        {"literal_betas", t.optimizer.literal_betas}}},
      {"training",
       {{"variant", std::string(to_string(t.variant))},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"mask_init", mask_init}}},
      {"eval",
       {{"budgets", c.eval.budgets},
        {"variants", variants},
        {"probe_attribute", c.eval.probe_attribute},
        {"probe_hidden", c.eval.probe_hidden},
        {"mask_threshold", c.eval.mask_threshold}}},
      {"io", {{"out_dir", c.out_dir}}},
  };
}

/// Parses and validates a configuration. Missing keys keep their defaults;
/// unknown keys and ill-typed values fail with the offending key path.
inline RunConfig parse_config(const nlohmann::json& j) {
  using namespace config_detail;
  RunConfig c;
  reject_unknown(j, "", {"seed", "data", "model", "loss", "optimizer", "training", "eval", "io"});
  read(j, "", "seed", c.seed);

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, "data", {"attributes", "n", "image_side", "noise_std", "exhaustive", "split", "triplets",
                               "min_gap_ratio", "conditions"});
    if (d.contains("attributes")) {
      const json& a = d.at("attributes");
      if (!a.is_array() || a.empty()) throw ConfigError("data.attributes: expected a nonempty array");
      c.data.attributes.clear();
      for (std::size_t i = 0; i < a.size(); ++i) {
        c.data.attributes.push_back(attribute_from_json(a[i], "data.attributes[" + std::to_string(i) + "]"));
      }
    }
    read(d, "data", "n", c.data.n);
    read(d, "data", "image_side", c.data.image_side);
    read(d, "data", "noise_std", c.data.noise_std);
    read(d, "data", "exhaustive", c.data.exhaustive);
    if (d.contains("split")) {
      const json& s = d.at("split");
      reject_unknown(s, "data.split", {"train", "val", "test"});
      read(s, "data.split", "train", c.data.split.train);
      read(s, "data.split", "val", c.data.split.val);
      read(s, "data.split", "test", c.data.split.test);
    }
    if (d.contains("triplets")) {
      const json& s = d.at("triplets");
      reject_unknown(s, "data.triplets", {"train", "val", "test"});
      read(s, "data.triplets", "train", c.data.triplets_train);
      read(s, "data.triplets", "val", c.data.triplets_val);
      read(s, "data.triplets", "test", c.data.triplets_test);
    }
    read(d, "data", "min_gap_ratio", c.data.min_gap_ratio);
    if (d.contains("conditions")) {
      const json& s = d.at("conditions");
      if (!s.is_array()) throw ConfigError("data.conditions: expected an array of attribute names");
      c.data.conditions.clear();
      for (const auto& e : s) {
        if (!e.is_string()) throw ConfigError("data.conditions: expected attribute names");
        c.data.conditions.push_back(e.get<std::string>());
      }
    }
  }

  auto& t = c.training;
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m, "model", {"hidden", "embedding_dim"});
    if (m.contains("hidden")) {
      const json& h = m.at("hidden");
      if (!h.is_array()) throw ConfigError("model.hidden: expected an array of widths");
      t.model.hidden.clear();
      for (const auto& w : h) {
        if (!is_count(w) || w.get<std::size_t>() == 0) {
          throw ConfigError("model.hidden: widths must be positive integers");
        }
        t.model.hidden.push_back(w.get<std::size_t>());
      }
    }
    read(m, "model", "embedding_dim", t.model.embedding_dim);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    reject_unknown(l, "loss", {"margin", "lambda1", "lambda2"});
    read(l, "loss", "margin", t.loss.margin);
    read(l, "loss", "lambda1", t.loss.lambda1);
    read(l, "loss", "lambda2", t.loss.lambda2);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    reject_unknown(o, "optimizer", {"alpha", "beta1", "beta2", "epsilon", "literal_betas"});
    read(o, "optimizer", "alpha", t.optimizer.alpha);
    read(o, "optimizer", "beta1", t.optimizer.beta1);
    read(o, "optimizer", "beta2", t.optimizer.beta2);
    read(o, "optimizer", "epsilon", t.optimizer.epsilon);
    read(o, "optimizer", "literal_betas", t.optimizer.literal_betas);
  }
  if (j.contains("training")) {
    const json& tr = j.at("training");
    reject_unknown(tr, "training", {"variant", "batch_size", "epochs", "mask_init"});
    if (tr.contains("variant")) {
      std::string v;
      read(tr, "training", "variant", v);
      try {
        t.variant = parse_variant(v);
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("training.variant: ") + e.what());
      }
    }
    read(tr, "training", "batch_size", t.batch_size);
    read(tr, "training", "epochs", t.epochs);
    if (tr.contains("mask_init")) {
      const json& mi = tr.at("mask_init");
      reject_unknown(mi, "training.mask_init", {"mode", "mean", "variance"});
      std::string mode = "normal";
      read(mi, "training.mask_init", "mode", mode);
      if (mode == "normal") {
        t.mask_init.mode = MaskInit::Mode::normal;
      } else if (mode == "disjoint") {
        t.mask_init.mode = MaskInit::Mode::disjoint;
      } else {
        throw ConfigError("training.mask_init.mode: expected 'normal' or 'disjoint'");
      }
      read(mi, "training.mask_init", "mean", t.mask_init.mean);
      read(mi, "training.mask_init", "variance", t.mask_init.variance);
    }
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, "eval", {"budgets", "variants", "probe_attribute", "probe_hidden", "mask_threshold"});
    if (e.contains("budgets")) {
      const json& b = e.at("budgets");
      if (!b.is_array()) throw ConfigError("eval.budgets: expected an array");
      c.eval.budgets.clear();
      for (const auto& v : b) {
        if (!is_count(v)) throw ConfigError("eval.budgets: expected nonnegative integers");
        c.eval.budgets.push_back(v.get<std::size_t>());
      }
    }
    if (e.contains("variants")) {
      const json& vs = e.at("variants");
      if (!vs.is_array()) throw ConfigError("eval.variants: expected an array");
      c.eval.variants.clear();
      for (const auto& v : vs) {
        if (!v.is_string()) throw ConfigError("eval.variants: expected variant names");
        try {
          c.eval.variants.push_back(parse_variant(v.get<std::string>()));
        } catch (const ConfigError& err) {
          throw ConfigError(std::string("eval.variants: ") + err.what());
        }
      }
    }
    read(e, "eval", "probe_attribute", c.eval.probe_attribute);
    read(e, "eval", "probe_hidden", c.eval.probe_hidden);
    read(e, "eval", "mask_threshold", c.eval.mask_threshold);
  }
  if (j.contains("io")) {
    const json& io = j.at("io");
    reject_unknown(io, "io", {"out_dir"});
    read(io, "io", "out_dir", c.out_dir);
  }

  // Cross-field validation.
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("training: ") + e.what());
  }
  if (c.data.n == 0) throw ConfigError("data.n: must be >= 1");
  if (c.data.image_side < 8) throw ConfigError("data.image_side: must be >= 8");
  if (!(c.data.noise_std >= 0.0)) throw ConfigError("data.noise_std: must be >= 0");
  if (!(c.data.min_gap_ratio >= 1.0)) throw ConfigError("data.min_gap_ratio: must be >= 1");
  const double fsum = c.data.split.train + c.data.split.val + c.data.split.test;
  if (std::abs(fsum - 1.0) > 1e-9) throw ConfigError("data.split: fractions must sum to 1");
  for (std::size_t i = 0; i < c.eval.budgets.size(); ++i) {
    if (c.eval.budgets[i] == 0) throw ConfigError("eval.budgets: must be positive");
    if (i > 0 && c.eval.budgets[i] <= c.eval.budgets[i - 1]) {
      throw ConfigError("eval.budgets: must be strictly ascending");
    }
  }
  if (!(c.eval.mask_threshold >= 0.0)) throw ConfigError("eval.mask_threshold: must be >= 0");
  const auto conditions = c.condition_attributes();
  if (conditions.empty()) throw ConfigError("data.conditions: no condition attributes");
  if (conditions.size() > t.model.embedding_dim) {
    throw ConfigError("model.embedding_dim: fewer dimensions than conditions");
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace csn
