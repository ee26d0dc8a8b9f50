#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csn/autodiff.hpp"
#include "csn/errors.hpp"
#include "csn/random.hpp"
#include "csn/tensor.hpp"

namespace csn {

/// The four model families compared in the experiments.
enum class Variant { standard, specialist_set, csn_fixed, csn_learned };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::standard: return "standard";
    case Variant::specialist_set: return "specialist_set";
    case Variant::csn_fixed: return "csn_fixed";
    case Variant::csn_learned: return "csn_learned";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::standard, Variant::specialist_set, Variant::csn_fixed, Variant::csn_learned})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline bool uses_masks(Variant v) { return v == Variant::csn_fixed || v == Variant::csn_learned; }

struct DenseLayer {
  Param weight;  // out x in
  Param bias;    // out
};

/// f(x) = W g(x): a ReLU MLP g followed by a bias-free linear projection W (d x b).
class EmbeddingNet {
 public:
  EmbeddingNet() = default;

  /// He-initialized network with layer widths input_dim -> hidden... -> embedding_dim.
  EmbeddingNet(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t embedding_dim,
               std::uint64_t seed) {
    if (input_dim == 0 || embedding_dim == 0) throw ConfigError("network dimensions must be positive");
    Rng rng(seed);
    std::size_t fan_in = input_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      if (hidden[i] == 0) throw ConfigError("hidden layer width must be positive");
      const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Tensor w(Shape{hidden[i], fan_in});
      for (double& v : w.data()) v = std_dev * standard_normal(rng);
      hidden_.push_back({Param(std::move(w), "hidden" + std::to_string(i) + ".weight"),
                         Param(Tensor(Shape{hidden[i]}), "hidden" + std::to_string(i) + ".bias")});
      fan_in = hidden[i];
    }
    const double std_dev = std::sqrt(1.0 / static_cast<double>(fan_in));
    Tensor w(Shape{embedding_dim, fan_in});
    for (double& v : w.data()) v = std_dev * standard_normal(rng);
    projection_ = Param(std::move(w), "projection");
  }

  /// Assembles a network from explicit parameters (checkpoint loading, tests).
  EmbeddingNet(std::vector<DenseLayer> hidden, Param projection)
      : hidden_(std::move(hidden)), projection_(std::move(projection)) {
    std::size_t width = input_dim();
    for (const auto& layer : hidden_) {
      if (!layer.weight.value.is_matrix() || layer.weight.value.cols() != width ||
          layer.bias.value.shape() != Shape{layer.weight.value.rows()}) {
        throw DimensionError("hidden layer shapes do not compose at width " + std::to_string(width));
      }
      width = layer.weight.value.rows();
    }
    if (!projection_.value.is_matrix() || projection_.value.cols() != width) {
      throw DimensionError("projection " + to_string(projection_.value.shape()) + " does not accept width " +
                           std::to_string(width));
    }
  }

  std::size_t input_dim() const {
    return hidden_.empty() ? projection_.value.cols() : hidden_.front().weight.value.cols();
  }
  /// b, the width of g(x).
  std::size_t feature_dim() const { return projection_.value.cols(); }
  /// d, the embedding dimension.
  std::size_t embedding_dim() const { return projection_.value.rows(); }

  const std::vector<DenseLayer>& hidden() const { return hidden_; }
  std::vector<DenseLayer>& hidden() { return hidden_; }
  const Param& projection() const { return projection_; }
  Param& projection() { return projection_; }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& layer : hidden_) {
      out.push_back(&layer.weight);
      out.push_back(&layer.bias);
    }
    out.push_back(&projection_);
    return out;
  }

  /// g(x) on the tape.
  Var features(Tape& tape, Var x) {
    check_input(x.value());
    Var h = x;
    for (auto& layer : hidden_) h = relu(add_bias(matmul_nt(h, tape.param(layer.weight)), tape.param(layer.bias)));
    return h;
  }

  /// W g(x) on the tape, one embedding per row of x.
  Var embed(Tape& tape, Var x) { return matmul_nt(features(tape, x), tape.param(projection_)); }

  /// Tape-free g(x).
  Tensor features(const Tensor& x) const {
    check_input(x);
    Tensor h = x;
    for (const auto& layer : hidden_) {
      h = matmul_nt(h, layer.weight.value);
      for (std::size_t r = 0; r < h.rows(); ++r) {
        auto row = h.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
          const double v = row[c] + layer.bias.value[c];
          row[c] = v > 0.0 ? v : 0.0;
        }
      }
    }
    return h;
  }

  /// Tape-free W g(x).
  Tensor embed(const Tensor& x) const { return matmul_nt(features(x), projection_.value); }

  friend bool operator==(const EmbeddingNet& a, const EmbeddingNet& b) {
    if (a.hidden_.size() != b.hidden_.size()) return false;
    for (std::size_t i = 0; i < a.hidden_.size(); ++i) {
      if (a.hidden_[i].weight.value != b.hidden_[i].weight.value) return false;
      if (a.hidden_[i].bias.value != b.hidden_[i].bias.value) return false;
    }
    return a.projection_.value == b.projection_.value;
  }

 private:
  void check_input(const Tensor& x) const {
    if (!x.is_matrix() || x.cols() != input_dim()) {
      throw DimensionError("embed input " + to_string(x.shape()) + " does not match network input dimension " +
                           std::to_string(input_dim()));
    }
  }

  std::vector<DenseLayer> hidden_;
  Param projection_;
};

/// beta (d x n_c); mask c is max(0, beta[:, c]).
class MaskBank {
 public:
  MaskBank() = default;
  MaskBank(Tensor beta, bool trainable) : beta_(std::move(beta), "mask.beta") {
    if (!beta_.value.is_matrix()) throw DimensionError("mask parameters must be a d x n_c matrix");
    beta_.trainable = trainable;
  }

  std::size_t dim() const { return beta_.value.rows(); }
  std::size_t conditions() const { return beta_.value.cols(); }
  bool trainable() const { return beta_.trainable; }
  const Param& beta() const { return beta_; }
  Param& beta() { return beta_; }

  Tensor mask(std::size_t c) const {
    check_condition(c);
    Tensor m(Shape{dim()});
    for (std::size_t k = 0; k < dim(); ++k) m[k] = std::max(0.0, beta_.value.at(k, c));
    return m;
  }

  Var mask(Tape& tape, std::size_t c) {
    check_condition(c);
    return relu(column(tape.param(beta_), c));
  }

  /// Row i is the rectified mask of conditions[i].
  Var masks_for(Tape& tape, const std::vector<std::size_t>& conditions) {
    for (std::size_t c : conditions) check_condition(c);
    return relu(gather_columns(tape.param(beta_), conditions));
  }

  friend bool operator==(const MaskBank& a, const MaskBank& b) {
    return a.beta_.value == b.beta_.value && a.beta_.trainable == b.beta_.trainable;
  }

 private:
  void check_condition(std::size_t c) const {
    if (c >= conditions()) {
      throw IndexError("condition " + std::to_string(c) + " out of range for " + std::to_string(conditions()) +
                       " masks");
    }
  }

  Param beta_;
};

struct LossConfig {
  double margin = 0.2;
  double lambda1 = 5e-3;
  double lambda2 = 5e-4;

  void validate() const {
    for (double v : {margin, lambda1, lambda2})
      if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights and margin must be finite and >= 0");
  }
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

// ---------------------------------------------------------------------------
// Scalar reference forms of the losses
// ---------------------------------------------------------------------------

namespace detail {
inline void require_length(std::size_t n, std::initializer_list<std::size_t> others) {
  for (std::size_t m : others)
    if (m != n) throw DimensionError("vector lengths differ: " + std::to_string(n) + " vs " + std::to_string(m));
}
}  // namespace detail

/// ||y_i * m - y_j * m||_2
inline double masked_distance(std::span<const double> yi, std::span<const double> yj, std::span<const double> m) {
  detail::require_length(yi.size(), {yj.size(), m.size()});
  double ss = 0.0;
  for (std::size_t k = 0; k < yi.size(); ++k) {
    const double diff = yi[k] * m[k] - yj[k] * m[k];
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  detail::require_length(a.size(), {b.size()});
  double ss = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    ss += diff * diff;
  }
  return std::sqrt(ss);
}

inline double triplet_loss_standard(std::span<const double> anchor, std::span<const double> close,
                                    std::span<const double> far, double margin) {
  detail::require_length(anchor.size(), {close.size(), far.size()});
  return std::max(0.0, euclidean_distance(anchor, close) - euclidean_distance(anchor, far) + margin);
}

inline double triplet_loss_masked(std::span<const double> anchor, std::span<const double> close,
                                  std::span<const double> far, std::span<const double> mask, double margin) {
  detail::require_length(anchor.size(), {close.size(), far.size(), mask.size()});
  return std::max(0.0, masked_distance(anchor, close, mask) - masked_distance(anchor, far, mask) + margin);
}

/// Mean over rows of the squared row norm.
inline double embedding_loss(const Tensor& y) {
  double total = 0.0;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double ss = 0.0;
    for (double v : y.row(r)) ss += v * v;
    total += ss;
  }
  return total / static_cast<double>(y.rows());
}

/// L1 norm of the rectified masks.
inline double mask_loss(const MaskBank& bank) {
  double s = 0.0;
  for (double b : bank.beta().value.data()) s += std::max(0.0, b);
  return s;
}

// ---------------------------------------------------------------------------
// Batched, differentiable losses
// ---------------------------------------------------------------------------

/// Inputs of B triplets, one row per triplet member.
struct TripletBatch {
  Tensor anchors;
  Tensor closes;
  Tensor fars;
  std::vector<std::size_t> conditions;

  std::size_t size() const { return conditions.size(); }
};

inline Var embedding_loss(Var y) { return scale(sum_squares(y), 1.0 / static_cast<double>(y.value().rows())); }

inline Var mask_loss(Tape& tape, MaskBank& bank) { return sum(relu(tape.param(bank.beta()))); }

namespace detail {

inline Tensor stack_rows(const TripletBatch& batch) {
  const std::size_t b = batch.size();
  const std::size_t width = batch.anchors.cols();
  for (const Tensor* t : {&batch.anchors, &batch.closes, &batch.fars}) {
    if (!t->is_matrix() || t->rows() != b || t->cols() != width) {
      throw DimensionError("triplet batch members must be " + std::to_string(b) + " x " + std::to_string(width));
    }
  }
  Tensor x(Shape{3 * b, width});
  auto out = x.data().begin();
  for (const Tensor* t : {&batch.anchors, &batch.closes, &batch.fars})
    out = std::copy(t->data().begin(), t->data().end(), out);
  return x;
}

}  // namespace detail

struct LossTerms {
  Var total;
  Var triplet;
  Var embedding;
  std::optional<Var> mask;
};

/// Joint loss: mean masked triplet hinge + lambda1 * L_W + lambda2 * L_M.
/// With no bank, distances are plain Euclidean and the mask term is omitted.
inline LossTerms csn_loss_terms(Tape& tape, EmbeddingNet& net, MaskBank* bank, const TripletBatch& batch,
                                const LossConfig& cfg) {
  if (batch.size() == 0) throw ContractError("csn_loss requires a nonempty batch");
  const std::size_t b = batch.size();
  const Var x = tape.constant(detail::stack_rows(batch));
  const Var y = net.embed(tape, x);
  Var ya = slice_rows(y, 0, b);
  Var yc = slice_rows(y, b, b);
  Var yf = slice_rows(y, 2 * b, b);
  if (bank != nullptr) {
    const Var m = bank->masks_for(tape, batch.conditions);
    ya = elementwise_mul(ya, m);
    yc = elementwise_mul(yc, m);
    yf = elementwise_mul(yf, m);
  }
  const Var d_close = row_norms(sub(ya, yc));
  const Var d_far = row_norms(sub(ya, yf));
  const Var triplet = mean(hinge(add_scalar(sub(d_close, d_far), cfg.margin)));
  const Var emb = embedding_loss(y);
  Var total = add(triplet, scale(emb, cfg.lambda1));
  std::optional<Var> mloss;
  if (bank != nullptr) {
    mloss = mask_loss(tape, *bank);
    total = add(total, scale(*mloss, cfg.lambda2));
  }
  return {total, triplet, emb, mloss};
}

inline Var csn_loss(Tape& tape, EmbeddingNet& net, MaskBank& bank, const TripletBatch& batch,
                    const LossConfig& cfg) {
  return csn_loss_terms(tape, net, &bank, batch, cfg).total;
}

// ---------------------------------------------------------------------------
// Model container and checkpoint file
// ---------------------------------------------------------------------------

/// One trained artifact: a single net (standard, csn_*) or one net per
/// condition (specialist_set), plus masks for the csn variants.
struct Model {
  Variant variant = Variant::standard;
  std::vector<EmbeddingNet> nets;
  std::optional<MaskBank> masks;

  std::size_t embedding_dim() const { return nets.at(0).embedding_dim(); }

  friend bool operator==(const Model& a, const Model& b) {
    return a.variant == b.variant && a.nets == b.nets && a.masks == b.masks;
  }
};

namespace checkpoint_detail {

inline constexpr char kMagic[8] = {'C', 'S', 'N', 'C', 'K', 'P', 'T', '1'};

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IntegrityError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
  put_u64(os, t.rank());
  for (std::size_t d : t.shape()) put_u64(os, d);
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(os, bits);
  }
}

inline Tensor get_tensor(std::istream& is) {
  const std::uint64_t rank = get_u64(is);
  if (rank > 2) throw IntegrityError("checkpoint tensor rank " + std::to_string(rank) + " unsupported");
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) {
    const std::uint64_t d = get_u64(is);
    if (d == 0 || d > (1u << 24)) throw IntegrityError("checkpoint tensor dimension out of range");
    shape.push_back(d);
  }
  std::vector<double> values(element_count(shape));
  for (double& v : values) {
    const std::uint64_t bits = get_u64(is);
    std::memcpy(&v, &bits, sizeof v);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace checkpoint_detail

/// Binary checkpoint, little-endian:
///   magic "CSNCKPT1" | variant tag (u64 length + bytes) | net count
///   per net: hidden layer count, (weight, bias) tensors, projection tensor
///   mask flag, then d, n_c, trainable flag and the beta tensor if present.
/// Tensors are rank, dims, then IEEE-754 bit patterns, so round trips are exact.
inline void save_checkpoint(const Model& model, std::ostream& os) {
  using namespace checkpoint_detail;
  os.write(kMagic, sizeof kMagic);
  const std::string_view tag = to_string(model.variant);
  put_u64(os, tag.size());
  os.write(tag.data(), static_cast<std::streamsize>(tag.size()));
  put_u64(os, model.nets.size());
  for (const auto& net : model.nets) {
    put_u64(os, net.hidden().size());
    for (const auto& layer : net.hidden()) {
      put_tensor(os, layer.weight.value);
      put_tensor(os, layer.bias.value);
    }
    put_tensor(os, net.projection().value);
  }
  put_u64(os, model.masks.has_value() ? 1 : 0);
  if (model.masks) {
    put_u64(os, model.masks->dim());
    put_u64(os, model.masks->conditions());
    put_u64(os, model.masks->trainable() ? 1 : 0);
    put_tensor(os, model.masks->beta().value);
  }
}

inline Model load_checkpoint(std::istream& is) {
  using namespace checkpoint_detail;
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IntegrityError("not a checkpoint file");
  const std::uint64_t tag_len = get_u64(is);
  if (tag_len > 64) throw IntegrityError("checkpoint variant tag too long");
  std::string tag(tag_len, '\0');
  if (!is.read(tag.data(), static_cast<std::streamsize>(tag_len))) throw IntegrityError("checkpoint truncated");
  Model model;
  try {
    model.variant = parse_variant(tag);
  } catch (const ConfigError& e) {
    throw IntegrityError(e.what());
  }
  const std::uint64_t n_nets = get_u64(is);
  if (n_nets == 0 || n_nets > 1024) throw IntegrityError("checkpoint net count out of range");
  for (std::uint64_t n = 0; n < n_nets; ++n) {
    const std::uint64_t layers = get_u64(is);
    if (layers > 64) throw IntegrityError("checkpoint layer count out of range");
    std::vector<DenseLayer> hidden;
    for (std::uint64_t l = 0; l < layers; ++l) {
      Tensor w = get_tensor(is);
      Tensor b = get_tensor(is);
      hidden.push_back({Param(std::move(w), "hidden" + std::to_string(l) + ".weight"),
                        Param(std::move(b), "hidden" + std::to_string(l) + ".bias")});
    }
    Param projection(get_tensor(is), "projection");
    try {
      model.nets.emplace_back(std::move(hidden), std::move(projection));
    } catch (const DimensionError& e) {
      throw IntegrityError(std::string("checkpoint layer shapes inconsistent: ") + e.what());
    }
  }
  if (get_u64(is) == 1) {
    const std::uint64_t d = get_u64(is);
    const std::uint64_t nc = get_u64(is);
    const bool trainable = get_u64(is) == 1;
    Tensor beta = get_tensor(is);
    if (beta.shape() != Shape{d, nc}) throw IntegrityError("checkpoint mask shape disagrees with header");
    model.masks.emplace(std::move(beta), trainable);
  }
  return model;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path);
  save_checkpoint(model, os);
  if (!os) throw IoError("failed writing checkpoint " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace csn
