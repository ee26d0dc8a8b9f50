#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "csn/errors.hpp"
#include "csn/random.hpp"
#include "csn/tensor.hpp"

namespace csn {

enum class AttributeKind { categorical, numeric };

/// One labeled factor of variation. Categorical labels are stored as the
/// class index (0 .. cardinality-1); numeric labels as the raw value in [lo, hi].
struct AttributeSpec {
  std::string name;
  AttributeKind kind = AttributeKind::categorical;
  std::size_t cardinality = 0;
  double lo = 0.0;
  double hi = 1.0;
  bool nuisance = false;

  static AttributeSpec categorical(std::string name, std::size_t cardinality, bool nuisance = false) {
    return {std::move(name), AttributeKind::categorical, cardinality, 0.0, 0.0, nuisance};
  }
  static AttributeSpec numeric(std::string name, double lo, double hi, bool nuisance = false) {
    return {std::move(name), AttributeKind::numeric, 0, lo, hi, nuisance};
  }

  bool is_categorical() const { return kind == AttributeKind::categorical; }

  void validate() const {
    if (name.empty()) throw ConfigError("attribute name must not be empty");
    if (is_categorical() && cardinality < 2) {
      throw ConfigError("categorical attribute '" + name + "' needs cardinality >= 2");
    }
    if (!is_categorical() && !(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) {
      throw ConfigError("numeric attribute '" + name + "' needs a nondegenerate range");
    }
  }

  friend bool operator==(const AttributeSpec&, const AttributeSpec&) = default;
};

enum class Split : std::uint8_t { train = 0, val = 1, test = 2, unassigned = 3 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

inline Split parse_split(std::string_view s) {
  for (Split v : {Split::train, Split::val, Split::test, Split::unassigned})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct Sample {
  std::vector<double> features;
  std::vector<double> labels;
};

/// Flattened inputs (n x feature_dim), labels (n x attributes) and split tags.
struct Dataset {
  std::vector<AttributeSpec> attributes;
  std::size_t image_side = 0;
  Tensor features;
  Tensor labels;
  std::vector<Split> splits;

  std::size_t size() const { return splits.size(); }
  std::size_t feature_dim() const { return features.cols(); }
  double label(std::size_t sample, std::size_t attribute) const { return labels.at(sample, attribute); }

  Sample sample(std::size_t i) const {
    const auto f = features.row(i);
    const auto l = labels.row(i);
    return {{f.begin(), f.end()}, {l.begin(), l.end()}};
  }

  std::size_t attribute_index(std::string_view name) const {
    for (std::size_t a = 0; a < attributes.size(); ++a)
      if (attributes[a].name == name) return a;
    throw ConfigError("unknown attribute '" + std::string(name) + "'");
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  /// Attributes usable as similarity conditions, in declaration order.
  std::vector<std::size_t> condition_attributes() const {
    std::vector<std::size_t> out;
    for (std::size_t a = 0; a < attributes.size(); ++a)
      if (!attributes[a].nuisance) out.push_back(a);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// (anchor, close, far) sample indices under `condition`: the anchor is more
/// similar to `close` than to `far`.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t close = 0;
  std::size_t far = 0;
  std::size_t condition = 0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// ---------------------------------------------------------------------------
// Procedural colored-shape renderer
// ---------------------------------------------------------------------------

namespace shapes {

inline constexpr std::array<std::string_view, 4> kShapeNames = {"triangle", "circle", "square", "cross"};
inline constexpr std::array<std::string_view, 6> kColorNames = {"red", "green", "blue", "yellow", "magenta", "cyan"};
inline constexpr std::array<std::array<double, 3>, 6> kPalette = {{
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {1.0, 1.0, 0.0},
    {1.0, 0.0, 1.0},
    {0.0, 1.0, 1.0},
}};

// Radius as a fraction of the image side, small .. large, and the extra span
// covered by size_jitter.
inline constexpr double kSmallRadius = 0.14;
inline constexpr double kLargeRadius = 0.30;
inline constexpr double kJitterSpan = 0.14;
inline constexpr int kSupersample = 4;

inline bool inside(std::size_t shape, double px, double py, double r) {
  switch (shape) {
    case 0:  // upward triangle inscribed in the circle of radius r
      return py <= 0.5 * r && std::abs(px) <= (py + r) / std::sqrt(3.0);
    case 1:
      return px * px + py * py <= r * r;
    case 2:
      return std::abs(px) <= 0.8 * r && std::abs(py) <= 0.8 * r;
    default: {
      const double arm = 0.3 * r;
      return (std::abs(px) <= r && std::abs(py) <= arm) || (std::abs(py) <= r && std::abs(px) <= arm);
    }
  }
}

}  // namespace shapes

/// The default attribute set: shape x color x size plus a numeric size jitter
/// as the four similarity conditions; position jitter and the shape/color
/// combination are nuisance attributes (the latter is the default probe target).
inline std::vector<AttributeSpec> default_attributes() {
  return {
      AttributeSpec::categorical("shape", 4),
      AttributeSpec::categorical("color", 4),
      AttributeSpec::categorical("size", 2),
      AttributeSpec::numeric("size_jitter", 0.0, 1.0),
      AttributeSpec::numeric("position_x", -1.0, 1.0, true),
      AttributeSpec::numeric("position_y", -1.0, 1.0, true),
      AttributeSpec::categorical("shape_color", 16, true),
  };
}

namespace detail {

struct RenderLayout {
  std::optional<std::size_t> shape, color, size, jitter, pos_x, pos_y, combo;
};

inline RenderLayout resolve_layout(const std::vector<AttributeSpec>& attrs) {
  RenderLayout layout;
  auto expect = [](const AttributeSpec& a, AttributeKind kind) {
    if (a.kind != kind) throw ConfigError("attribute '" + a.name + "' has the wrong kind for the renderer");
  };
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    const auto& a = attrs[i];
    a.validate();
    std::optional<std::size_t>* slot = nullptr;
    if (a.name == "shape") {
      expect(a, AttributeKind::categorical);
      if (a.cardinality > shapes::kShapeNames.size()) throw ConfigError("at most 4 shapes are renderable");
      slot = &layout.shape;
    } else if (a.name == "color") {
      expect(a, AttributeKind::categorical);
      if (a.cardinality > shapes::kPalette.size()) throw ConfigError("at most 6 colors are renderable");
      slot = &layout.color;
    } else if (a.name == "size") {
      expect(a, AttributeKind::categorical);
      slot = &layout.size;
    } else if (a.name == "size_jitter") {
      expect(a, AttributeKind::numeric);
      slot = &layout.jitter;
    } else if (a.name == "position_x") {
      expect(a, AttributeKind::numeric);
      slot = &layout.pos_x;
    } else if (a.name == "position_y") {
      expect(a, AttributeKind::numeric);
      slot = &layout.pos_y;
    } else if (a.name == "shape_color") {
      expect(a, AttributeKind::categorical);
      slot = &layout.combo;
    } else {
      throw ConfigError("attribute '" + a.name + "' is not renderable");
    }
    if (slot->has_value()) throw ConfigError("attribute '" + a.name + "' declared twice");
    *slot = i;
  }
  if (layout.combo) {
    if (!layout.shape || !layout.color) throw ConfigError("shape_color requires shape and color attributes");
    if (attrs[*layout.combo].cardinality != attrs[*layout.shape].cardinality * attrs[*layout.color].cardinality) {
      throw ConfigError("shape_color cardinality must equal shapes x colors");
    }
  }
  return layout;
}

}  // namespace detail

/// Renders one noise-free image_side x image_side x 3 image (row-major, RGB
/// innermost) from a full label vector.
inline std::vector<double> render_sample(const std::vector<AttributeSpec>& attrs, std::span<const double> labels,
                                         std::size_t image_side) {
  const auto layout = detail::resolve_layout(attrs);
  auto value = [&](const std::optional<std::size_t>& slot, double fallback) {
    return slot ? labels[*slot] : fallback;
  };
  auto unit = [&](const std::optional<std::size_t>& slot) {
    if (!slot) return 0.5;
    const auto& a = attrs[*slot];
    return (labels[*slot] - a.lo) / (a.hi - a.lo);
  };

  const auto shape = static_cast<std::size_t>(value(layout.shape, 1.0));
  const auto color = static_cast<std::size_t>(value(layout.color, 0.0));
  double radius_frac = 0.5 * (shapes::kSmallRadius + shapes::kLargeRadius);
  if (layout.size) {
    const double levels = static_cast<double>(attrs[*layout.size].cardinality - 1);
    radius_frac = shapes::kSmallRadius + (shapes::kLargeRadius - shapes::kSmallRadius) * labels[*layout.size] / levels;
  }
  radius_frac += shapes::kJitterSpan * unit(layout.jitter);

  const double side = static_cast<double>(image_side);
  const double radius = side * radius_frac;
  const double cx = 0.5 * side + value(layout.pos_x, 0.0);
  const double cy = 0.5 * side + value(layout.pos_y, 0.0);
  const auto& rgb = shapes::kPalette[color];

  std::vector<double> image(image_side * image_side * 3, 0.0);
  constexpr int ss = shapes::kSupersample;
  for (std::size_t y = 0; y < image_side; ++y) {
    for (std::size_t x = 0; x < image_side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / ss - cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / ss - cy;
          hits += shapes::inside(shape, px, py, radius) ? 1 : 0;
        }
      }
      const double coverage = static_cast<double>(hits) / (ss * ss);
      for (std::size_t ch = 0; ch < 3; ++ch) image[(y * image_side + x) * 3 + ch] = coverage * rgb[ch];
    }
  }
  return image;
}

struct GenerateOptions {
  std::vector<AttributeSpec> attributes = default_attributes();
  std::size_t n = 2000;
  std::size_t image_side = 12;
  double noise_std = 0.1;
  std::uint64_t seed = 7;
  /// Require every combination of categorical attributes to appear.
  bool exhaustive = false;
};

/// Stratified procedural dataset: sample i takes categorical combination
/// (i mod #combinations), numeric attributes are uniform in their range,
/// and Gaussian pixel noise is added. All splits start unassigned.
inline Dataset generate_shapes(const GenerateOptions& opt) {
  if (opt.n == 0) throw ConfigError("dataset size must be at least 1");
  if (opt.image_side < 8) throw ConfigError("image_side must be at least 8");
  if (!(opt.noise_std >= 0.0) || !std::isfinite(opt.noise_std)) throw ConfigError("noise_std must be >= 0");
  const auto layout = detail::resolve_layout(opt.attributes);

  std::vector<std::size_t> strata;
  for (std::size_t a = 0; a < opt.attributes.size(); ++a)
    if (opt.attributes[a].is_categorical() && (!layout.combo || a != *layout.combo)) strata.push_back(a);
  std::size_t combinations = 1;
  for (std::size_t a : strata) combinations *= opt.attributes[a].cardinality;
  if (opt.exhaustive && opt.n < combinations) {
    throw ConfigError("n = " + std::to_string(opt.n) + " cannot cover " + std::to_string(combinations) +
                      " attribute combinations");
  }

  Dataset ds;
  ds.attributes = opt.attributes;
  ds.image_side = opt.image_side;
  const std::size_t feature_dim = opt.image_side * opt.image_side * 3;
  ds.features = Tensor(Shape{opt.n, feature_dim});
  ds.labels = Tensor(Shape{opt.n, opt.attributes.size()});
  ds.splits.assign(opt.n, Split::unassigned);

  for (std::size_t i = 0; i < opt.n; ++i) {
    Rng rng(derive_seed(opt.seed, {0x5A4D, i}));
    auto labels = ds.labels.row(i);
    std::size_t combo = i % combinations;
    for (std::size_t a : strata) {
      const std::size_t card = opt.attributes[a].cardinality;
      labels[a] = static_cast<double>(combo % card);
      combo /= card;
    }
    for (std::size_t a = 0; a < opt.attributes.size(); ++a) {
      const auto& spec = opt.attributes[a];
      if (!spec.is_categorical()) labels[a] = spec.lo + (spec.hi - spec.lo) * uniform01(rng);
    }
    if (layout.combo) {
      labels[*layout.combo] =
          labels[*layout.shape] * static_cast<double>(opt.attributes[*layout.color].cardinality) +
          labels[*layout.color];
    }
    const auto image = render_sample(opt.attributes, labels, opt.image_side);
    auto row = ds.features.row(i);
    for (std::size_t k = 0; k < feature_dim; ++k) {
      row[k] = image[k] + (opt.noise_std > 0.0 ? opt.noise_std * standard_normal(rng) : 0.0);
    }
  }
  return ds;
}

struct SplitFractions {
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;
  friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

/// Seeded permutation followed by contiguous train / val / test assignment.
inline Dataset split(Dataset ds, const SplitFractions& fractions, std::uint64_t seed) {
  if (ds.size() == 0) throw ContractError("cannot split an empty dataset");
  for (double f : {fractions.train, fractions.val, fractions.test})
    if (!(f >= 0.0)) throw ConfigError("split fractions must be nonnegative");
  if (std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = ds.size();
  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(n)));
  const auto n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions.val * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0x5B17}));
  shuffle(order.begin(), order.end(), rng);
  for (std::size_t p = 0; p < n; ++p) {
    ds.splits[order[p]] = p < n_train ? Split::train : (p < n_train + n_val ? Split::val : Split::test);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Triplet sampling
// ---------------------------------------------------------------------------

struct TripletOptions {
  /// Numeric conditions require |anchor - far| >= ratio * |anchor - close|.
  double min_gap_ratio = 2.0;
};

/// Whether (anchor, close, far) satisfies the oracle ordering of `attribute`.
inline bool oracle_holds(const Dataset& ds, std::size_t anchor, std::size_t close, std::size_t far,
                         std::size_t attribute, const TripletOptions& opt = {}) {
  if (anchor == close || anchor == far || close == far) return false;
  const double a = ds.label(anchor, attribute);
  const double c = ds.label(close, attribute);
  const double f = ds.label(far, attribute);
  if (ds.attributes[attribute].is_categorical()) return a == c && a != f;
  const double near_gap = std::abs(a - c);
  const double far_gap = std::abs(a - f);
  return near_gap < far_gap && far_gap >= opt.min_gap_ratio * near_gap;
}

/// k triplets drawn with replacement from `split_tag`; the three indices of a
/// triplet are distinct. The returned triplets carry `condition = attribute`.
inline std::vector<Triplet> sample_triplets(const Dataset& ds, std::size_t attribute, Split split_tag, std::size_t k,
                                            std::uint64_t seed, const TripletOptions& opt = {}) {
  if (attribute >= ds.attributes.size()) throw IndexError("attribute " + std::to_string(attribute) + " out of range");
  const auto& spec = ds.attributes[attribute];
  if (spec.nuisance) throw ConfigError("attribute '" + spec.name + "' is a nuisance attribute, not a condition");
  std::vector<Triplet> out;
  if (k == 0) return out;
  const auto pool = ds.indices(split_tag);
  Rng rng(seed);

  if (spec.is_categorical()) {
    std::map<double, std::vector<std::size_t>> classes;
    for (std::size_t i : pool) classes[ds.label(i, attribute)].push_back(i);
    std::vector<std::size_t> anchors;
    for (const auto& [value, members] : classes)
      if (members.size() >= 2) anchors.insert(anchors.end(), members.begin(), members.end());
    std::sort(anchors.begin(), anchors.end());
    if (classes.size() < 2 || anchors.empty()) {
      throw InfeasibleError("attribute '" + spec.name + "' has fewer than two usable values in split " +
                            std::string(to_string(split_tag)));
    }
    out.reserve(k);
    while (out.size() < k) {
      const std::size_t a = anchors[uniform_index(rng, anchors.size())];
      const double value = ds.label(a, attribute);
      const auto& same = classes[value];
      std::size_t c = a;
      while (c == a) c = same[uniform_index(rng, same.size())];
      std::size_t f = a;
      while (ds.label(f, attribute) == value) f = pool[uniform_index(rng, pool.size())];
      out.push_back({a, c, f, attribute});
    }
    return out;
  }

  if (pool.size() < 3) throw InfeasibleError("split has fewer than three samples for '" + spec.name + "'");
  const std::size_t max_attempts = 1000 * k + 100000;
  std::size_t attempts = 0;
  out.reserve(k);
  while (out.size() < k) {
    if (++attempts > max_attempts) {
      throw InfeasibleError("could not draw numeric triplets for '" + spec.name + "' with gap ratio " +
                            std::to_string(opt.min_gap_ratio));
    }
    const std::size_t a = pool[uniform_index(rng, pool.size())];
    const std::size_t x = pool[uniform_index(rng, pool.size())];
    const std::size_t y = pool[uniform_index(rng, pool.size())];
    if (a == x || a == y || x == y) continue;
    const double la = ds.label(a, attribute);
    const bool x_nearer = std::abs(la - ds.label(x, attribute)) < std::abs(la - ds.label(y, attribute));
    const std::size_t c = x_nearer ? x : y;
    const std::size_t f = x_nearer ? y : x;
    if (oracle_holds(ds, a, c, f, attribute, opt)) out.push_back({a, c, f, attribute});
  }
  return out;
}

/// Random-ordering triplets: distinct indices and a uniformly random
/// condition, with no oracle relation. Used to calibrate chance level.
inline std::vector<Triplet> sample_random_triplets(const Dataset& ds, Split split_tag, std::size_t n_conditions,
                                                   std::size_t k, std::uint64_t seed) {
  const auto pool = ds.indices(split_tag);
  if (pool.size() < 3) throw InfeasibleError("split has fewer than three samples");
  if (n_conditions == 0) throw ConfigError("need at least one condition");
  Rng rng(seed);
  std::vector<Triplet> out;
  out.reserve(k);
  while (out.size() < k) {
    const std::size_t a = pool[uniform_index(rng, pool.size())];
    const std::size_t c = pool[uniform_index(rng, pool.size())];
    const std::size_t f = pool[uniform_index(rng, pool.size())];
    if (a == c || a == f || c == f) continue;
    out.push_back({a, c, f, uniform_index(rng, n_conditions)});
  }
  return out;
}

/// Train / val / test triplet lists with equal per-condition counts.
/// Triplet::condition is the position in `conditions`, not the attribute index.
struct Benchmark {
  std::vector<std::size_t> conditions;
  std::vector<Triplet> train;
  std::vector<Triplet> val;
  std::vector<Triplet> test;
};

inline Benchmark build_benchmark(const Dataset& ds, const std::vector<std::size_t>& conditions, std::size_t k_train,
                                 std::size_t k_val, std::size_t k_test, std::uint64_t seed,
                                 const TripletOptions& opt = {}) {
  if (conditions.empty()) throw ConfigError("benchmark needs at least one condition");
  Benchmark b;
  b.conditions = conditions;
  const std::array<std::pair<Split, std::size_t>, 3> plan = {{{Split::train, k_train}, {Split::val, k_val},
                                                              {Split::test, k_test}}};
  for (const auto& [tag, k] : plan) {
    auto& dst = tag == Split::train ? b.train : (tag == Split::val ? b.val : b.test);
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      const std::uint64_t s = derive_seed(seed, {0x7121, static_cast<std::uint64_t>(tag), ci});
      auto part = sample_triplets(ds, conditions[ci], tag, k, s, opt);
      for (auto& t : part) t.condition = ci;
      dst.insert(dst.end(), part.begin(), part.end());
    }
  }
  return b;
}

/// Searches for two samples x, y and an anchor a such that one condition
/// orders (a, x, y) and another orders (a, y, x). Returns the conflicting pair
/// with Triplet::condition holding attribute indices.
inline std::optional<std::pair<Triplet, Triplet>> find_conflicting_triplets(const Dataset& ds, Split split_tag,
                                                                            const std::vector<std::size_t>& attrs,
                                                                            std::size_t search_limit = 64,
                                                                            const TripletOptions& opt = {}) {
  auto pool = ds.indices(split_tag);
  if (pool.size() > search_limit) pool.resize(search_limit);
  for (std::size_t a : pool)
    for (std::size_t x : pool)
      for (std::size_t y : pool)
        for (std::size_t c1 : attrs)
          if (oracle_holds(ds, a, x, y, c1, opt))
            for (std::size_t c2 : attrs)
              if (c2 != c1 && oracle_holds(ds, a, y, x, c2, opt))
                return std::make_pair(Triplet{a, x, y, c1}, Triplet{a, y, x, c2});
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace data_detail {

inline constexpr char kMagic[8] = {'C', 'S', 'N', 'D', 'A', 'T', 'A', '1'};

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IntegrityError("dataset file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(os, bits);
}
inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace data_detail

/// Little-endian binary layout:
///   "CSNDATA1" | n | feature_dim | image_side | attribute count
///   per attribute: name length, name bytes, kind (0 categorical, 1 numeric),
///                  cardinality, lo, hi, nuisance
///   per sample: split tag, labels (f64 x attributes), features (f64 x feature_dim)
inline void save_dataset(const Dataset& ds, std::ostream& os) {
  using namespace data_detail;
  os.write(kMagic, sizeof kMagic);
  put_u64(os, ds.size());
  put_u64(os, ds.feature_dim());
  put_u64(os, ds.image_side);
  put_u64(os, ds.attributes.size());
  for (const auto& a : ds.attributes) {
    put_u64(os, a.name.size());
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_u64(os, a.is_categorical() ? 0 : 1);
    put_u64(os, a.cardinality);
    put_f64(os, a.lo);
    put_f64(os, a.hi);
    put_u64(os, a.nuisance ? 1 : 0);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    put_u64(os, static_cast<std::uint64_t>(ds.splits[i]));
    for (double v : ds.labels.row(i)) put_f64(os, v);
    for (double v : ds.features.row(i)) put_f64(os, v);
  }
}

inline Dataset load_dataset(std::istream& is) {
  using namespace data_detail;
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IntegrityError("not a dataset file");
  const std::uint64_t n = get_u64(is);
  const std::uint64_t feature_dim = get_u64(is);
  Dataset ds;
  ds.image_side = get_u64(is);
  const std::uint64_t n_attr = get_u64(is);
  if (n == 0 || n > (1u << 26) || feature_dim == 0 || feature_dim > (1u << 24) || n_attr == 0 || n_attr > 256) {
    throw IntegrityError("dataset header out of range");
  }
  for (std::uint64_t k = 0; k < n_attr; ++k) {
    AttributeSpec a;
    const std::uint64_t len = get_u64(is);
    if (len > 256) throw IntegrityError("attribute name too long");
    a.name.resize(len);
    if (!is.read(a.name.data(), static_cast<std::streamsize>(len))) throw IntegrityError("dataset file truncated");
    a.kind = get_u64(is) == 0 ? AttributeKind::categorical : AttributeKind::numeric;
    a.cardinality = get_u64(is);
    a.lo = get_f64(is);
    a.hi = get_f64(is);
    a.nuisance = get_u64(is) == 1;
    ds.attributes.push_back(std::move(a));
  }
  ds.features = Tensor(Shape{n, feature_dim});
  ds.labels = Tensor(Shape{n, n_attr});
  ds.splits.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t tag = get_u64(is);
    if (tag > 3) throw IntegrityError("invalid split tag");
    ds.splits[i] = static_cast<Split>(tag);
    for (double& v : ds.labels.row(i)) v = get_f64(is);
    for (double& v : ds.features.row(i)) v = get_f64(is);
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write dataset " + path);
  save_dataset(ds, os);
  if (!os) throw IoError("failed writing dataset " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read dataset " + path);
  return load_dataset(is);
}

/// One "anchor,close,far,condition_index" line per triplet.
inline void save_triplets(const std::vector<Triplet>& triplets, std::ostream& os) {
  for (const auto& t : triplets) os << t.anchor << ',' << t.close << ',' << t.far << ',' << t.condition << '\n';
}

inline std::vector<Triplet> load_triplets(std::istream& is) {
  std::vector<Triplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::array<std::size_t, 4> f{};
    std::istringstream ls(line);
    for (std::size_t k = 0; k < 4; ++k) {
      std::string field;
      const char delim = k < 3 ? ',' : '\n';
      if (!std::getline(ls, field, delim) || field.empty() ||
          field.find_first_not_of("0123456789") != std::string::npos) {
        throw IntegrityError("malformed triplet on line " + std::to_string(line_no));
      }
      f[k] = std::stoull(field);
    }
    out.push_back({f[0], f[1], f[2], f[3]});
  }
  return out;
}

inline void save_triplets(const std::vector<Triplet>& triplets, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write triplets " + path);
  save_triplets(triplets, os);
}

inline std::vector<Triplet> load_triplets(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read triplets " + path);
  return load_triplets(is);
}

}  // namespace csn
