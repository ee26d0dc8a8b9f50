#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csn/autodiff.hpp"
#include "csn/data.hpp"
#include "csn/errors.hpp"
#include "csn/eval.hpp"
#include "csn/model.hpp"
#include "csn/random.hpp"

namespace csn {

/// ADAM hyperparameters. beta1/beta2 are written the way the experiments
/// report them (0.1 / 0.001); unless `literal_betas` is set they are read as
/// one minus the moment decay factors, i.e. decays of 0.9 and 0.999.
struct OptimizerConfig {
  double alpha = 5e-5;
  double beta1 = 0.1;
  double beta2 = 0.001;
  double epsilon = 1e-8;
  bool literal_betas = false;

  double decay1() const { return literal_betas ? beta1 : 1.0 - beta1; }
  double decay2() const { return literal_betas ? beta2 : 1.0 - beta2; }

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("optimizer.alpha must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2 must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("optimizer.epsilon must be > 0");
  }
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct AdamState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step_count = 0;
};

/// One bias-corrected ADAM update over `params`. Params with trainable == false
/// are left bit-unchanged and keep zero moments.
inline void adam_step(std::span<Param* const> params, AdamState& state, const OptimizerConfig& cfg) {
  if (state.first_moment.empty()) {
    for (const Param* p : params) {
      state.first_moment.push_back(Tensor::zeros_like(p->value));
      state.second_moment.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("ADAM state does not match parameter list");
  for (const Param* p : params) {
    if (!p->trainable) continue;
    if (!p->grad.all_finite()) {
      throw DivergenceError("non-finite gradient in parameter '" + p->name + "'");
    }
  }

  ++state.step_count;
  const double d1 = cfg.decay1(), d2 = cfg.decay2();
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(d1, t);
  const double c2 = 1.0 - std::pow(d2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (!p.trainable) continue;
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    if (m.shape() != p.value.shape()) throw ContractError("ADAM moment shape mismatch for '" + p.name + "'");
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = d1 * m[k] + (1.0 - d1) * g;
      v[k] = d2 * v[k] + (1.0 - d2) * g * g;
      p.value[k] -= cfg.alpha * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.epsilon);
    }
  }
}

struct MaskInit {
  enum class Mode { disjoint, normal };
  Mode mode = Mode::normal;
  double mean = 0.9;
  double variance = 0.7;
  friend bool operator==(const MaskInit&, const MaskInit&) = default;
};

/// Disjoint: beta is 1 on a contiguous block of d / n_c dimensions per
/// condition (the last condition also takes the remainder) and -1 elsewhere.
/// Normal: beta ~ N(mean, variance).
inline MaskBank init_masks(std::size_t d, std::size_t n_c, const MaskInit& init, std::uint64_t seed,
                           bool trainable) {
  if (n_c == 0 || d == 0) throw ConfigError("mask bank needs d >= 1 and n_c >= 1");
  if (n_c > d) throw ConfigError("cannot allocate " + std::to_string(n_c) + " masks over " + std::to_string(d) +
                                 " dimensions");
  Tensor beta(Shape{d, n_c});
  if (init.mode == MaskInit::Mode::disjoint) {
    const std::size_t block = d / n_c;
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t owner = std::min(k / block, n_c - 1);
      for (std::size_t c = 0; c < n_c; ++c) beta.at(k, c) = c == owner ? 1.0 : -1.0;
    }
  } else {
    if (!(init.variance >= 0.0)) throw ConfigError("mask init variance must be >= 0");
    Rng rng(seed);
    const double sd = std::sqrt(init.variance);
    for (double& v : beta.data()) v = init.mean + sd * standard_normal(rng);
  }
  return MaskBank(std::move(beta), trainable);
}

struct ModelConfig {
  std::vector<std::size_t> hidden = {128, 64};
  std::size_t embedding_dim = 64;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  Variant variant = Variant::csn_learned;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  /// Initialization of learned masks; csn_fixed always uses disjoint masks.
  MaskInit mask_init;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("training.batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("training.epochs must be >= 1");
    if (model.embedding_dim == 0) throw ConfigError("model.embedding_dim must be >= 1");
    loss.validate();
    optimizer.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_error = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
};

/// Index of the minimal validation error; ties go to the earliest epoch.
inline std::size_t best_epoch(std::span<const double> val_errors) {
  if (val_errors.empty()) throw ContractError("no epochs recorded");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_errors.size(); ++i)
    if (val_errors[i] < val_errors[best]) best = i;
  return best;
}

inline const Model& early_stop_select(const TrainHistory& history, std::span<const Model> checkpoints) {
  std::vector<double> errors;
  for (const auto& e : history.epochs) errors.push_back(e.val_error);
  const std::size_t best = best_epoch(errors);
  if (best >= checkpoints.size()) throw ContractError("no checkpoint for the best epoch");
  return checkpoints[best];
}

struct TrainResult {
  Model model;  // parameters of the best-validation epoch
  TrainHistory history;
};

/// Called after every epoch with the record, the current model and whether
/// it improved on the best validation error so far.
using EpochCallback = std::function<void(const EpochRecord&, const Model&, bool improved)>;

namespace train_detail {

inline TripletBatch make_batch(const Dataset& ds, std::span<const Triplet> triplets) {
  std::vector<std::size_t> a, c, f, cond;
  for (const auto& t : triplets) {
    a.push_back(t.anchor);
    c.push_back(t.close);
    f.push_back(t.far);
    cond.push_back(t.condition);
  }
  return {gather_rows(ds.features, a), gather_rows(ds.features, c), gather_rows(ds.features, f), std::move(cond)};
}

/// Shuffles each condition's triplets and interleaves them round-robin, so
/// consecutive batches draw conditions in equal proportions.
inline std::vector<Triplet> interleave_by_condition(const std::vector<std::vector<Triplet>>& by_condition, Rng& rng) {
  std::vector<std::vector<Triplet>> lists = by_condition;
  std::size_t longest = 0;
  for (auto& l : lists) {
    shuffle(l.begin(), l.end(), rng);
    longest = std::max(longest, l.size());
  }
  std::vector<Triplet> out;
  for (std::size_t i = 0; i < longest; ++i)
    for (const auto& l : lists)
      if (i < l.size()) out.push_back(l[i]);
  return out;
}

struct Learner {
  EmbeddingNet* net;
  MaskBank* bank;  // null for plain Euclidean losses
  std::vector<std::vector<Triplet>> by_condition;
  std::vector<Param*> params;
  AdamState adam;
};

}  // namespace train_detail

/// Builds the untrained model of a variant. Deterministic in cfg.seed.
inline Model init_model(const TrainConfig& cfg, std::size_t input_dim, std::size_t n_conditions) {
  Model model;
  model.variant = cfg.variant;
  const std::size_t nets = cfg.variant == Variant::specialist_set ? n_conditions : 1;
  for (std::size_t k = 0; k < nets; ++k) {
    model.nets.emplace_back(input_dim, cfg.model.hidden, cfg.model.embedding_dim, derive_seed(cfg.seed, {0x4E37, k}));
  }
  if (cfg.variant == Variant::csn_fixed) {
    model.masks = init_masks(cfg.model.embedding_dim, n_conditions, {MaskInit::Mode::disjoint}, 0, false);
  } else if (cfg.variant == Variant::csn_learned) {
    model.masks = init_masks(cfg.model.embedding_dim, n_conditions, cfg.mask_init, derive_seed(cfg.seed, {0x3A5C}),
                             true);
  }
  return model;
}

/// Trains one variant and returns the parameters of its best-validation epoch.
///
/// standard: one network, plain Euclidean triplet loss over all triplets.
/// specialist_set: one network per condition, each on its own triplets.
/// csn_fixed / csn_learned: one network plus masks under the joint loss,
/// with the masks frozen or trained respectively.
/// One epoch is one pass over the training triplets.
inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, std::span<const Triplet> train_triplets,
                         std::span<const Triplet> val_triplets, std::size_t n_conditions,
                         const EpochCallback& on_epoch = {}) {
  using namespace train_detail;
  cfg.validate();
  if (n_conditions == 0) throw ConfigError("need at least one condition");
  std::vector<std::vector<Triplet>> by_condition(n_conditions);
  for (const auto& t : train_triplets) {
    if (t.condition >= n_conditions) {
      throw ConfigError("triplet condition " + std::to_string(t.condition) + " out of range");
    }
    if (std::max({t.anchor, t.close, t.far}) >= ds.size()) throw IndexError("triplet references unknown sample");
    by_condition[t.condition].push_back(t);
  }
  if (train_triplets.size() < cfg.batch_size) {
    throw ConfigError("fewer training triplets (" + std::to_string(train_triplets.size()) + ") than batch size " +
                      std::to_string(cfg.batch_size));
  }

  TrainResult result;
  Model model = init_model(cfg, ds.feature_dim(), n_conditions);

  std::vector<Learner> learners;
  if (cfg.variant == Variant::specialist_set) {
    for (std::size_t c = 0; c < n_conditions; ++c) {
      if (by_condition[c].size() < cfg.batch_size) {
        throw ConfigError("condition " + std::to_string(c) + " has fewer triplets than the batch size");
      }
      learners.push_back({&model.nets[c], nullptr, {by_condition[c]}, model.nets[c].params(), {}});
    }
  } else {
    MaskBank* bank = model.masks ? &*model.masks : nullptr;
    Learner l{&model.nets[0], bank, by_condition, model.nets[0].params(), {}};
    if (bank != nullptr) l.params.push_back(&bank->beta());
    learners.push_back(std::move(l));
  }

  double best_error = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t li = 0; li < learners.size(); ++li) {
      Learner& l = learners[li];
      Rng rng(derive_seed(cfg.seed, {0xE90C, epoch, li}));
      const auto order = interleave_by_condition(l.by_condition, rng);
      for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        const std::size_t count = std::min(cfg.batch_size, order.size() - begin);
        const TripletBatch batch = make_batch(ds, std::span(order).subspan(begin, count));
        for (Param* p : l.params) p->zero_grad();
        Tape tape;
        const LossTerms terms = csn_loss_terms(tape, *l.net, l.bank, batch, cfg.loss);
        const double value = terms.total.value().item();
        if (!std::isfinite(value)) {
          throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        tape.backward(terms.total);
        adam_step(l.params, l.adam, cfg.optimizer);
        loss_sum += value;
        ++batches;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_error = val_triplets.empty() ? 0.0 : triplet_error(model, val_triplets, ds).overall_error;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool improved = epoch == 0 || rec.val_error < best_error;
    if (improved) {
      best_error = rec.val_error;
      result.history.best_epoch = epoch;
      result.model = model;
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, model, improved);
  }
  return result;
}

}  // namespace csn
