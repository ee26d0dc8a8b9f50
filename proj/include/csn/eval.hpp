#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csn/autodiff.hpp"
#include "csn/data.hpp"
#include "csn/errors.hpp"
#include "csn/model.hpp"
#include "csn/random.hpp"

namespace csn {

struct EvalReport {
  double overall_error = 0.0;
  std::map<std::size_t, double> per_condition_error;
  std::map<std::size_t, std::size_t> per_condition_count;
  std::size_t n_triplets = 0;
  std::size_t n_errors = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [c, e] : per_condition_error) {
      per[std::to_string(c)] = {{"error", e}, {"triplets", per_condition_count.at(c)}};
    }
    return {{"overall_error", overall_error},
            {"n_triplets", n_triplets},
            {"n_errors", n_errors},
            {"per_condition", per}};
  }
};

/// Distance between samples a and b under condition c.
using DistanceFn = std::function<double(std::size_t a, std::size_t b, std::size_t c)>;

/// A triplet is an error iff D(anchor, close) >= D(anchor, far); ties count as errors.
inline EvalReport triplet_error(const DistanceFn& distance, std::span<const Triplet> triplets) {
  std::map<std::size_t, std::size_t> errors, counts;
  for (const auto& t : triplets) {
    const bool wrong = distance(t.anchor, t.close, t.condition) >= distance(t.anchor, t.far, t.condition);
    ++counts[t.condition];
    errors[t.condition] += wrong ? 1 : 0;
  }
  EvalReport r;
  r.n_triplets = triplets.size();
  for (const auto& [c, n] : counts) {
    r.n_errors += errors[c];
    r.per_condition_count[c] = n;
    r.per_condition_error[c] = static_cast<double>(errors[c]) / static_cast<double>(n);
  }
  r.overall_error = r.n_triplets ? static_cast<double>(r.n_errors) / static_cast<double>(r.n_triplets) : 0.0;
  return r;
}

/// Embeddings of a subset of dataset samples, addressable by sample index.
class EmbeddingCache {
 public:
  EmbeddingCache(const EmbeddingNet& net, const Dataset& ds, std::vector<std::size_t> samples)
      : position_(ds.size(), kMissing) {
    std::sort(samples.begin(), samples.end());
    samples.erase(std::unique(samples.begin(), samples.end()), samples.end());
    for (std::size_t p = 0; p < samples.size(); ++p) {
      if (samples[p] >= ds.size()) throw IndexError("sample " + std::to_string(samples[p]) + " out of range");
      position_[samples[p]] = p;
    }
    if (!samples.empty()) embeddings_ = net.embed(gather_rows(ds.features, samples));
  }

  std::span<const double> operator[](std::size_t sample) const {
    if (sample >= position_.size() || position_[sample] == kMissing) {
      throw IndexError("sample " + std::to_string(sample) + " was not embedded");
    }
    return embeddings_.row(position_[sample]);
  }

 private:
  static constexpr std::size_t kMissing = static_cast<std::size_t>(-1);
  std::vector<std::size_t> position_;
  Tensor embeddings_;
};

inline std::vector<std::size_t> referenced_samples(std::span<const Triplet> triplets) {
  std::vector<std::size_t> s;
  s.reserve(3 * triplets.size());
  for (const auto& t : triplets) s.insert(s.end(), {t.anchor, t.close, t.far});
  return s;
}

/// Triplet error of a trained model. Standard models use plain Euclidean
/// distance for every condition, csn models the condition's mask, and a
/// specialist set routes each triplet to its condition's network.
inline EvalReport triplet_error(const Model& model, std::span<const Triplet> triplets, const Dataset& ds) {
  if (model.nets.empty()) throw ContractError("model has no networks");
  const auto samples = referenced_samples(triplets);
  for (const auto& t : triplets) {
    if (model.variant == Variant::specialist_set && t.condition >= model.nets.size()) {
      throw RoutingError("no specialist network for condition " + std::to_string(t.condition));
    }
    if (uses_masks(model.variant) && (!model.masks || t.condition >= model.masks->conditions())) {
      throw RoutingError("no mask for condition " + std::to_string(t.condition));
    }
  }

  if (model.variant == Variant::specialist_set) {
    std::vector<EmbeddingCache> caches;
    for (std::size_t c = 0; c < model.nets.size(); ++c) {
      std::vector<std::size_t> mine;
      for (const auto& t : triplets)
        if (t.condition == c) mine.insert(mine.end(), {t.anchor, t.close, t.far});
      caches.emplace_back(model.nets[c], ds, std::move(mine));
    }
    return triplet_error(
        [&](std::size_t a, std::size_t b, std::size_t c) { return euclidean_distance(caches[c][a], caches[c][b]); },
        triplets);
  }

  const EmbeddingCache cache(model.nets.front(), ds, samples);
  if (!uses_masks(model.variant)) {
    return triplet_error(
        [&](std::size_t a, std::size_t b, std::size_t) { return euclidean_distance(cache[a], cache[b]); },
        triplets);
  }
  std::vector<Tensor> masks;
  for (std::size_t c = 0; c < model.masks->conditions(); ++c) masks.push_back(model.masks->mask(c));
  return triplet_error(
      [&](std::size_t a, std::size_t b, std::size_t c) {
        return masked_distance(cache[a], cache[b], masks[c].data());
      },
      triplets);
}

// ---------------------------------------------------------------------------
// Mask statistics
// ---------------------------------------------------------------------------

struct MaskReport {
  std::size_t dim = 0;
  std::size_t conditions = 0;
  double threshold = 1e-3;
  std::vector<std::size_t> active;      // per condition, entries > threshold
  std::vector<double> sparsity;         // inactive fraction per condition
  std::vector<double> l1_mass;          // per condition
  std::vector<std::vector<std::size_t>> overlaps;  // dimensions active in both conditions
  Tensor masks;                         // d x n_c rectified

  double total_l1() const {
    double s = 0.0;
    for (double v : l1_mass) s += v;
    return s;
  }

  nlohmann::json to_json() const {
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < dim; ++k) {
      const auto r = masks.row(k);
      rows.emplace_back(r.begin(), r.end());
    }
    return {{"dim", dim},           {"conditions", conditions}, {"threshold", threshold},
            {"active", active},     {"sparsity", sparsity},     {"l1_mass", l1_mass},
            {"total_l1", total_l1()}, {"overlaps", overlaps},    {"masks", rows}};
  }
};

inline MaskReport mask_stats(const MaskBank& bank, double threshold = 1e-3) {
  if (!(threshold >= 0.0)) throw ContractError("mask threshold must be >= 0");
  MaskReport r;
  r.dim = bank.dim();
  r.conditions = bank.conditions();
  r.threshold = threshold;
  r.masks = Tensor(Shape{r.dim, r.conditions});
  for (std::size_t k = 0; k < r.dim; ++k)
    for (std::size_t c = 0; c < r.conditions; ++c) r.masks.at(k, c) = std::max(0.0, bank.beta().value.at(k, c));
  r.active.assign(r.conditions, 0);
  r.l1_mass.assign(r.conditions, 0.0);
  r.overlaps.assign(r.conditions, std::vector<std::size_t>(r.conditions, 0));
  for (std::size_t k = 0; k < r.dim; ++k) {
    for (std::size_t c = 0; c < r.conditions; ++c) {
      const double m = r.masks.at(k, c);
      r.l1_mass[c] += m;
      if (m <= threshold) continue;
      ++r.active[c];
      for (std::size_t e = 0; e < r.conditions; ++e)
        if (r.masks.at(k, e) > threshold) ++r.overlaps[c][e];
    }
  }
  for (std::size_t c = 0; c < r.conditions; ++c) {
    r.sparsity.push_back(static_cast<double>(r.dim - r.active[c]) / static_cast<double>(r.dim));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Frozen-feature linear probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
  /// 0 = logistic regression on the features; > 0 adds one ReLU hidden layer.
  std::size_t hidden = 0;
  std::size_t iterations = 300;
  double learning_rate = 0.01;
  std::uint64_t seed = 11;
};

struct ProbeResult {
  double accuracy = 0.0;
  double majority_baseline = 0.0;
  std::size_t classes = 0;
};

/// Trains a classifier for `probe_attribute` on frozen g(x) of the train split
/// and reports test-split top-1 accuracy. The probe attribute must not have
/// been a training condition.
inline ProbeResult linear_probe(const Model& model, const Dataset& ds, std::size_t probe_attribute,
                                const std::vector<std::size_t>& training_conditions, const ProbeOptions& opt = {}) {
  if (probe_attribute >= ds.attributes.size()) throw IndexError("probe attribute out of range");
  for (std::size_t c : training_conditions) {
    if (c == probe_attribute) {
      throw ContractError("probe attribute '" + ds.attributes[c].name + "' was used as a training condition");
    }
  }
  const auto& spec = ds.attributes[probe_attribute];
  if (!spec.is_categorical()) throw ContractError("probe attribute must be categorical");
  if (model.nets.size() != 1) throw ContractError("linear probe needs a single shared network");

  const auto train_idx = ds.indices(Split::train);
  const auto test_idx = ds.indices(Split::test);
  if (train_idx.empty() || test_idx.empty()) throw ContractError("probe needs nonempty train and test splits");
  const EmbeddingNet& net = model.nets.front();
  Tensor train_x = net.features(gather_rows(ds.features, train_idx));
  Tensor test_x = net.features(gather_rows(ds.features, test_idx));

  // Standardize with train statistics.
  const std::size_t b = train_x.cols();
  for (std::size_t j = 0; j < b; ++j) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < train_x.rows(); ++r) mu += train_x.at(r, j);
    mu /= static_cast<double>(train_x.rows());
    for (std::size_t r = 0; r < train_x.rows(); ++r) var += (train_x.at(r, j) - mu) * (train_x.at(r, j) - mu);
    const double sd = std::sqrt(var / static_cast<double>(train_x.rows()));
    const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
    for (std::size_t r = 0; r < train_x.rows(); ++r) train_x.at(r, j) = (train_x.at(r, j) - mu) * inv;
    for (std::size_t r = 0; r < test_x.rows(); ++r) test_x.at(r, j) = (test_x.at(r, j) - mu) * inv;
  }

  const std::size_t k = spec.cardinality;
  auto labels_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(static_cast<std::size_t>(ds.label(i, probe_attribute)));
    return y;
  };
  const auto train_y = labels_of(train_idx);
  const auto test_y = labels_of(test_idx);

  Rng rng(opt.seed);
  std::vector<Param> params;
  std::size_t width = b;
  if (opt.hidden > 0) {
    Tensor w(Shape{opt.hidden, b});
    for (double& v : w.data()) v = std::sqrt(2.0 / static_cast<double>(b)) * standard_normal(rng);
    params.emplace_back(std::move(w), "probe.hidden.weight");
    params.emplace_back(Tensor(Shape{opt.hidden}), "probe.hidden.bias");
    width = opt.hidden;
  }
  params.emplace_back(Tensor(Shape{k, width}), "probe.weight");
  params.emplace_back(Tensor(Shape{k}), "probe.bias");

  auto logits = [&](Tape& tape, const Tensor& x) {
    Var h = tape.constant(x);
    std::size_t p = 0;
    if (opt.hidden > 0) {
      h = relu(add_bias(matmul_nt(h, tape.param(params[0])), tape.param(params[1])));
      p = 2;
    }
    return add_bias(matmul_nt(h, tape.param(params[p])), tape.param(params[p + 1]));
  };

  // Full-batch Adam with standard decay factors.
  std::vector<Tensor> m1, m2;
  for (const auto& p : params) {
    m1.push_back(Tensor::zeros_like(p.value));
    m2.push_back(Tensor::zeros_like(p.value));
  }
  const double d1 = 0.9, d2 = 0.999, eps = 1e-8;
  for (std::size_t it = 1; it <= opt.iterations; ++it) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    const Var loss = softmax_cross_entropy(logits(tape, train_x), train_y);
    tape.backward(loss);
    const double c1 = 1.0 - std::pow(d1, static_cast<double>(it));
    const double c2 = 1.0 - std::pow(d2, static_cast<double>(it));
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t e = 0; e < params[p].value.size(); ++e) {
        const double g = params[p].grad[e];
        m1[p][e] = d1 * m1[p][e] + (1.0 - d1) * g;
        m2[p][e] = d2 * m2[p][e] + (1.0 - d2) * g * g;
        params[p].value[e] -= opt.learning_rate * (m1[p][e] / c1) / (std::sqrt(m2[p][e] / c2) + eps);
      }
    }
  }

  Tape tape;
  const Tensor scores = logits(tape, test_x).value();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == test_y[r] ? 1 : 0;
  }
  std::vector<std::size_t> freq(k, 0);
  for (std::size_t y : train_y) ++freq[y];
  const auto majority = static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
  std::size_t majority_hits = 0;
  for (std::size_t y : test_y) majority_hits += y == majority ? 1 : 0;

  ProbeResult r;
  r.classes = k;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test_y.size());
  r.majority_baseline = static_cast<double>(majority_hits) / static_cast<double>(test_y.size());
  return r;
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Writes "index,split,<attribute names...>,e0..e{d-1}" followed by one row per
/// sample. With a condition, csn models export y * m_c with every dimension
/// whose mask is <= threshold set to exactly zero; specialist sets export the
/// condition's network.
inline void export_embeddings(const Model& model, const Dataset& ds, std::optional<std::size_t> condition,
                              const std::string& path, double threshold = 1e-3) {
  if (model.nets.empty()) throw ContractError("model has no networks");
  const EmbeddingNet* net = &model.nets.front();
  std::optional<Tensor> mask;
  if (condition) {
    if (uses_masks(model.variant)) {
      if (!model.masks || *condition >= model.masks->conditions()) {
        throw RoutingError("no mask for condition " + std::to_string(*condition));
      }
      mask = model.masks->mask(*condition);
    } else if (model.variant == Variant::specialist_set) {
      if (*condition >= model.nets.size()) {
        throw RoutingError("no specialist network for condition " + std::to_string(*condition));
      }
      net = &model.nets[*condition];
    } else {
      throw ContractError("standard models have no per-condition subspaces");
    }
  }

  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write embeddings to " + path);
  const Tensor y = net->embed(ds.features);
  os << "index,split";
  for (const auto& a : ds.attributes) os << ',' << a.name;
  for (std::size_t k = 0; k < y.cols(); ++k) os << ",e" << k;
  os << '\n';
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << ',' << buf;
  };
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << i << ',' << to_string(ds.splits[i]);
    for (double v : ds.labels.row(i)) put(v);
    const auto row = y.row(i);
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (mask) {
        put((*mask)[k] > threshold ? row[k] * (*mask)[k] : 0.0);
      } else {
        put(row[k]);
      }
    }
    os << '\n';
  }
  if (!os) throw IoError("failed writing embeddings to " + path);
}

/// Reads back the embedding columns of an export as an n x d matrix.
inline Tensor load_embedding_export(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw IntegrityError("empty export " + path);
  std::size_t first_e = 0, columns = 0;
  {
    std::istringstream hs(line);
    std::string field;
    for (std::size_t k = 0; std::getline(hs, field, ','); ++k) {
      const bool embedding_column = field.size() > 1 && field[0] == 'e' &&
                                      field.find_first_not_of("0123456789", 1) == std::string::npos;
      if (embedding_column && first_e == 0 && k >= 2) first_e = k;
      ++columns;
    }
  }
  if (first_e == 0) throw IntegrityError("export header has no embedding columns");
  const std::size_t d = columns - first_e;
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string field;
    for (std::size_t k = 0; std::getline(ls, field, ','); ++k)
      if (k >= first_e) values.push_back(std::stod(field));
    ++rows;
  }
  if (rows == 0 || values.size() != rows * d) throw IntegrityError("malformed export " + path);
  return Tensor(Shape{rows, d}, std::move(values));
}

}  // namespace csn
