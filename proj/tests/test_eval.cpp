#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "csn/data.hpp"
#include "csn/eval.hpp"
#include "csn/train.hpp"

using namespace csn;
using Catch::Matchers::WithinAbs;

namespace {

struct Fixture {
  Dataset ds;
  Benchmark bench;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    GenerateOptions g;
    g.n = 400;
    g.seed = 31;
    Fixture out;
    out.ds = split(generate_shapes(g), {}, 32);
    out.bench = build_benchmark(out.ds, out.ds.condition_attributes(), 100, 20, 60, 33);
    return out;
  }();
  return f;
}

Model untrained(Variant v, std::size_t n_c, std::uint64_t seed = 4) {
  TrainConfig cfg;
  cfg.variant = v;
  cfg.model = {{32}, 16};
  cfg.seed = seed;
  return init_model(cfg, fixture().ds.feature_dim(), n_c);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("csn_test_eval_" + name);
}

}  // namespace

TEST_CASE("an embedding that encodes the labels exactly makes no errors") {
  const auto& f = fixture();
  // Distance on condition c = gap between the labels of its attribute.
  auto oracle = [&](std::size_t a, std::size_t b, std::size_t c) {
    const std::size_t attr = f.bench.conditions[c];
    return std::abs(f.ds.label(a, attr) - f.ds.label(b, attr));
  };
  const EvalReport r = triplet_error(oracle, f.bench.test);
  CHECK(r.overall_error == 0.0);
  CHECK(r.n_errors == 0);
  CHECK(r.n_triplets == f.bench.test.size());
}

TEST_CASE("ties count as errors") {
  const auto& f = fixture();
  const EvalReport r = triplet_error([](std::size_t, std::size_t, std::size_t) { return 1.0; }, f.bench.test);
  CHECK(r.overall_error == 1.0);
  for (const auto& [c, e] : r.per_condition_error) CHECK(e == 1.0);
}

TEST_CASE("triplet error is invariant to triplet order", "[property]") {
  const auto& f = fixture();
  const Model m = untrained(Variant::csn_learned, f.bench.conditions.size());
  const EvalReport base = triplet_error(m, f.bench.test, f.ds);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto shuffled = f.bench.test;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const EvalReport r = triplet_error(m, shuffled, f.ds);
    CHECK(r.overall_error == base.overall_error);
    CHECK(r.per_condition_error == base.per_condition_error);
  }
}

TEST_CASE("triplet error is invariant to positive scaling of the embedding", "[property]") {
  const auto& f = fixture();
  for (Variant v : {Variant::standard, Variant::csn_fixed, Variant::csn_learned}) {
    const Model m = untrained(v, f.bench.conditions.size());
    const EvalReport base = triplet_error(m, f.bench.test, f.ds);
    for (double s : {0.125, 3.0, 1024.0}) {
      Model scaled = m;
      for (double& w : scaled.nets.front().projection().value.data()) w *= s;
      CHECK(triplet_error(scaled, f.bench.test, f.ds).per_condition_error == base.per_condition_error);
    }
  }
}

TEST_CASE("overall error is the count-weighted mean of condition errors", "[property]") {
  const auto& f = fixture();
  for (Variant v : {Variant::standard, Variant::specialist_set, Variant::csn_fixed, Variant::csn_learned}) {
    const Model m = untrained(v, f.bench.conditions.size(), 12);
    const EvalReport r = triplet_error(m, f.bench.test, f.ds);
    double weighted = 0.0;
    std::size_t total = 0;
    for (const auto& [c, e] : r.per_condition_error) {
      weighted += e * static_cast<double>(r.per_condition_count.at(c));
      total += r.per_condition_count.at(c);
    }
    CHECK(total == r.n_triplets);
    CHECK_THAT(weighted / static_cast<double>(total), WithinAbs(r.overall_error, 1e-12));
  }
}

TEST_CASE("triplets whose condition has no mask or specialist are rejected") {
  const auto& f = fixture();
  std::vector<Triplet> bad = {f.bench.test.front()};
  bad.front().condition = 9;
  CHECK_THROWS_AS(triplet_error(untrained(Variant::csn_learned, 4), bad, f.ds), RoutingError);
  CHECK_THROWS_AS(triplet_error(untrained(Variant::specialist_set, 4), bad, f.ds), RoutingError);
  CHECK_NOTHROW(triplet_error(untrained(Variant::standard, 4), bad, f.ds));
  CHECK_THROWS_AS(triplet_error(Model{}, bad, f.ds), ContractError);
}

TEST_CASE("mask statistics") {
  const MaskReport fixed = mask_stats(init_masks(64, 4, {MaskInit::Mode::disjoint}, 0, false));
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(fixed.active[c] == 16);
    CHECK(fixed.l1_mass[c] == 16.0);
    CHECK(fixed.sparsity[c] == 0.75);
    for (std::size_t e = 0; e < 4; ++e) CHECK(fixed.overlaps[c][e] == (c == e ? 16u : 0u));
  }
  CHECK(fixed.total_l1() == 64.0);

  Tensor negative(Shape{6, 3});
  negative.fill(-0.5);
  const MaskReport none = mask_stats(MaskBank(negative, true));
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(none.active[c] == 0);
    CHECK(none.sparsity[c] == 1.0);
  }
  CHECK(none.total_l1() == 0.0);

  // Entries at the threshold are inactive.
  Tensor edge(Shape{2, 1});
  edge.at(0, 0) = 1e-3;
  edge.at(1, 0) = 2e-3;
  CHECK(mask_stats(MaskBank(edge, true)).active[0] == 1);
  CHECK_THROWS_AS(mask_stats(MaskBank(edge, true), -1.0), ContractError);
}

TEST_CASE("linear probe contracts") {
  const auto& f = fixture();
  const Model m = untrained(Variant::csn_learned, 4);
  const std::size_t probe = f.ds.attribute_index("shape_color");
  const std::size_t shape = f.ds.attribute_index("shape");
  CHECK_THROWS_AS(linear_probe(m, f.ds, shape, f.bench.conditions), ContractError);
  CHECK_THROWS_AS(linear_probe(m, f.ds, f.ds.attribute_index("size_jitter"), {}), ContractError);
  CHECK_THROWS_AS(linear_probe(m, f.ds, 99, {}), IndexError);
  CHECK_THROWS_AS(linear_probe(untrained(Variant::specialist_set, 4), f.ds, probe, f.bench.conditions),
                  ContractError);
}

TEST_CASE("a probe on untrained features is at least the majority baseline") {
  const auto& f = fixture();
  const std::size_t probe = f.ds.attribute_index("shape_color");
  for (std::uint64_t seed : {1, 2}) {
    const ProbeResult r = linear_probe(untrained(Variant::standard, 4, seed), f.ds, probe, f.bench.conditions);
    CHECK(r.classes == 16);
    CHECK(r.accuracy >= r.majority_baseline);
    CHECK(r.accuracy <= 1.0);
  }
}

TEST_CASE("embedding exports round-trip and zero masked-out dimensions") {
  const auto& f = fixture();
  const Model m = untrained(Variant::csn_fixed, 4);
  const Tensor y = m.nets.front().embed(f.ds.features);

  const auto full = temp_file("full.csv");
  export_embeddings(m, f.ds, std::nullopt, full.string());
  {
    std::ifstream is(full);
    std::size_t lines = 0;
    for (std::string line; std::getline(is, line);) ++lines;
    CHECK(lines == f.ds.size() + 1);
  }
  const Tensor back = load_embedding_export(full.string());
  REQUIRE(back.shape() == y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK_THAT(back[i], WithinAbs(y[i], 1e-12));

  const auto sub = temp_file("sub1.csv");
  export_embeddings(m, f.ds, 1, sub.string());
  const Tensor masked = load_embedding_export(sub.string());
  const Tensor mask = m.masks->mask(1);
  for (std::size_t r = 0; r < masked.rows(); ++r)
    for (std::size_t k = 0; k < masked.cols(); ++k) {
      if (mask[k] > 1e-3) {
        CHECK_THAT(masked.at(r, k), WithinAbs(y.at(r, k) * mask[k], 1e-12));
      } else {
        CHECK(masked.at(r, k) == 0.0);
      }
    }

  CHECK_THROWS_AS(export_embeddings(m, f.ds, 7, sub.string()), RoutingError);
  CHECK_THROWS_AS(export_embeddings(untrained(Variant::standard, 4), f.ds, 0, sub.string()), ContractError);
  std::filesystem::remove(full);
  std::filesystem::remove(sub);
}
