#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "csn/autodiff.hpp"
#include "csn/data.hpp"
#include "csn/model.hpp"
#include "csn/random.hpp"
#include "csn/train.hpp"

namespace csn {

struct CheckResult {
  std::string name;
  bool passed = false;
  double metric = 0.0;  // max relative error, max abs difference or violation count
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }

  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.passed ? 0 : 1;
    return n;
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[256];
    for (const auto& c : checks) {
      std::snprintf(buf, sizeof buf, "%-4s %-34s metric=%.3e tol=%.1e", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                    c.metric, c.tolerance);
      os << buf;
      if (!c.detail.empty()) os << "  " << c.detail;
      os << '\n';
    }
    std::snprintf(buf, sizeof buf, "%zu checks, %zu failed, %.2fs\n", checks.size(), failures(), seconds);
    os << buf;
    return os.str();
  }
};

struct VerifyOptions {
  /// Added to every analytic gradient entry; nonzero only to show the
  /// gradient checks can fail.
  double gradient_fault = 0.0;
  double grad_tolerance = 1e-4;
  double grad_eps = 1e-6;
  std::size_t identity_batches = 1000;
  std::uint64_t seed = 2024;
};

namespace verify_detail {

/// Entries drawn from N(0, 1) but pushed at least `gap` away from zero, so no
/// ReLU or hinge input sits on its kink.
inline Tensor away_from_zero(Shape shape, Rng& rng, double gap = 0.1) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) {
    const double z = standard_normal(rng);
    v = z >= 0.0 ? z + gap : z - gap;
  }
  return t;
}

inline Tensor normal(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = standard_normal(rng);
  return t;
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output entry carries a distinct upstream gradient.
inline Var weighted_sum(Tape& tape, Var v, const Tensor& w) { return sum(elementwise_mul(v, tape.constant(w))); }

inline CheckResult grad_entry(std::string name, const ScalarFn& fn, const std::vector<Param*>& params,
                              const VerifyOptions& opt) {
  const auto r = grad_check_detailed(fn, params, opt.grad_eps, opt.gradient_fault);
  CheckResult c;
  c.name = "grad/" + std::move(name);
  c.metric = r.max_relative_error;
  c.tolerance = opt.grad_tolerance;
  c.passed = std::isfinite(r.max_relative_error) && r.max_relative_error < opt.grad_tolerance;
  c.detail = std::to_string(r.entries_checked) + " entries";
  if (!c.passed) {
    c.detail += ", worst " + params[r.worst_param]->name + "[" + std::to_string(r.worst_entry) + "]";
  }
  return c;
}

inline TripletBatch random_batch(std::size_t b, std::size_t width, std::size_t n_c, Rng& rng) {
  TripletBatch batch{normal({b, width}, rng), normal({b, width}, rng), normal({b, width}, rng), {}};
  for (std::size_t i = 0; i < b; ++i) batch.conditions.push_back(uniform_index(rng, n_c));
  return batch;
}

}  // namespace verify_detail

/// Gradient checks for every tape operation and for the full joint loss.
inline std::vector<CheckResult> verify_gradients(const VerifyOptions& opt) {
  using namespace verify_detail;
  Rng rng(derive_seed(opt.seed, {0x6AD}));
  std::vector<CheckResult> out;

  Param a(normal({3, 4}, rng), "a");
  Param b(normal({4, 5}, rng), "b");
  Param w(normal({5, 4}, rng), "w");
  Param same(normal({3, 4}, rng), "same");
  Param vec(normal({4}, rng), "vec");
  Param kinked(away_from_zero({3, 4}, rng), "kinked");
  const Tensor w34 = normal({3, 4}, rng);
  const Tensor w35 = normal({3, 5}, rng);
  const Tensor w3 = normal({3}, rng);
  const Tensor w24 = normal({2, 4}, rng);
  const Tensor w33 = normal({3, 3}, rng);

  auto add_check = [&](std::string name, ScalarFn fn, std::vector<Param*> params) {
    out.push_back(grad_entry(std::move(name), fn, params, opt));
  };

  add_check("matmul", [&](Tape& t) { return weighted_sum(t, matmul(t.param(a), t.param(b)), w35); }, {&a, &b});
  add_check("matmul_nt", [&](Tape& t) { return weighted_sum(t, matmul_nt(t.param(a), t.param(w)), w35); },
            {&a, &w});
  add_check("add_bias", [&](Tape& t) { return weighted_sum(t, add_bias(t.param(a), t.param(vec)), w34); },
            {&a, &vec});
  add_check("add", [&](Tape& t) { return weighted_sum(t, add(t.param(a), t.param(same)), w34); }, {&a, &same});
  add_check("sub", [&](Tape& t) { return weighted_sum(t, sub(t.param(a), t.param(same)), w34); }, {&a, &same});
  add_check("elementwise_mul", [&](Tape& t) { return weighted_sum(t, elementwise_mul(t.param(a), t.param(same)), w34); },
            {&a, &same});
  add_check("elementwise_mul/row_broadcast",
            [&](Tape& t) { return weighted_sum(t, elementwise_mul(t.param(a), t.param(vec)), w34); }, {&a, &vec});
  add_check("relu", [&](Tape& t) { return weighted_sum(t, relu(t.param(kinked)), w34); }, {&kinked});
  add_check("hinge", [&](Tape& t) { return weighted_sum(t, hinge(t.param(kinked)), w34); }, {&kinked});
  add_check("euclidean_norm", [&](Tape& t) { return euclidean_norm(t.param(vec)); }, {&vec});
  add_check("row_norms", [&](Tape& t) { return weighted_sum(t, row_norms(t.param(a)), w3); }, {&a});
  add_check("sum", [&](Tape& t) { return sum(elementwise_mul(t.param(a), t.param(same))); }, {&a, &same});
  add_check("scale", [&](Tape& t) { return weighted_sum(t, scale(t.param(a), -2.5), w34); }, {&a});
  add_check("mean", [&](Tape& t) { return mean(elementwise_mul(t.param(a), t.param(same))); }, {&a, &same});
  add_check("add_scalar", [&](Tape& t) { return sum_squares(add_scalar(t.param(a), 0.7)); }, {&a});
  add_check("sum_squares", [&](Tape& t) { return sum_squares(t.param(a)); }, {&a});
  add_check("slice_rows", [&](Tape& t) { return weighted_sum(t, slice_rows(t.param(a), 1, 2), w24); }, {&a});
  add_check("column", [&](Tape& t) { return weighted_sum(t, column(t.param(a), 2), w3); }, {&a});
  add_check("gather_columns",
            [&](Tape& t) { return weighted_sum(t, gather_columns(t.param(a), {3, 0, 3}), w33); },
            {&a});
  add_check("softmax_cross_entropy",
            [&](Tape& t) { return softmax_cross_entropy(t.param(a), {1, 3, 0}); }, {&a});

  // Model-level terms on a small net with its own random weights.
  EmbeddingNet net(6, {7, 5}, 8, derive_seed(opt.seed, {0xE7}));
  const Tensor x = normal({4, 6}, rng);
  const Tensor w48 = normal({4, 8}, rng);
  add_check("embed", [&](Tape& t) { return weighted_sum(t, net.embed(t, t.constant(x)), w48); },
            net.params());
  add_check("embedding_loss", [&](Tape& t) { return embedding_loss(net.embed(t, t.constant(x))); }, net.params());

  MaskBank learned(away_from_zero({8, 3}, rng), true);
  add_check("mask_loss", [&](Tape& t) { return mask_loss(t, learned); }, {&learned.beta()});

  // Full joint loss, with and without masks.
  const LossConfig loss;
  const TripletBatch batch = random_batch(6, 6, 3, rng);
  MaskBank fixed = init_masks(8, 3, {MaskInit::Mode::disjoint}, 0, false);
  add_check("joint_loss/fixed_masks", [&](Tape& t) { return csn_loss(t, net, fixed, batch, loss); }, net.params());
  auto with_beta = net.params();
  with_beta.push_back(&learned.beta());
  add_check("joint_loss/learned_masks", [&](Tape& t) { return csn_loss(t, net, learned, batch, loss); }, with_beta);
  add_check("joint_loss/no_masks", [&](Tape& t) { return csn_loss_terms(t, net, nullptr, batch, loss).total; },
            net.params());
  return out;
}

/// With all-ones masks and lambda1 = lambda2 = 0 the joint loss equals the
/// plain triplet loss, batch by batch.
inline CheckResult verify_reduction_identity(const VerifyOptions& opt) {
  Rng rng(derive_seed(opt.seed, {0x1D}));
  EmbeddingNet net(10, {12}, 6, derive_seed(opt.seed, {0x1E}));
  const std::size_t n_c = 3;
  Tensor ones(Shape{6, n_c});
  ones.fill(1.0);
  MaskBank bank(ones, false);
  LossConfig cfg;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  double worst = 0.0;
  for (std::size_t it = 0; it < opt.identity_batches; ++it) {
    const std::size_t b = 1 + uniform_index(rng, 8);
    const TripletBatch batch = verify_detail::random_batch(b, 10, n_c, rng);
    Tape tape;
    const double masked = csn_loss(tape, net, bank, batch, cfg).value().item();
    const Tensor ya = net.embed(batch.anchors), yc = net.embed(batch.closes), yf = net.embed(batch.fars);
    double plain = 0.0;
    for (std::size_t i = 0; i < b; ++i) plain += triplet_loss_standard(ya.row(i), yc.row(i), yf.row(i), cfg.margin);
    plain /= static_cast<double>(b);
    worst = std::max(worst, std::abs(masked - plain));
  }
  return {"reduction_identity", worst <= 1e-12, worst, 1e-12,
          std::to_string(opt.identity_batches) + " batches"};
}

/// Fixed disjoint masks: a batch of condition c leaves every projection row
/// outside mask c's block with exactly zero gradient. lambda1 is zero here
/// because the embedding-norm term acts on the unmasked embedding.
inline CheckResult verify_subspace_locality(const VerifyOptions& opt) {
  Rng rng(derive_seed(opt.seed, {0x10C}));
  const std::size_t d = 12, n_c = 4;
  EmbeddingNet net(9, {10}, d, derive_seed(opt.seed, {0x10D}));
  MaskBank bank = init_masks(d, n_c, {MaskInit::Mode::disjoint}, 0, false);
  LossConfig cfg;
  cfg.lambda1 = 0.0;
  double leaked = 0.0;
  double inside = 0.0;
  for (std::size_t c = 0; c < n_c; ++c) {
    TripletBatch batch = verify_detail::random_batch(8, 9, n_c, rng);
    batch.conditions.assign(8, c);
    for (Param* p : net.params()) p->zero_grad();
    Tape tape;
    tape.backward(csn_loss(tape, net, bank, batch, cfg));
    const Tensor mask = bank.mask(c);
    const Tensor& g = net.projection().grad;
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t k = 0; k < g.cols(); ++k) {
        if (mask[r] > 0.0) inside = std::max(inside, std::abs(g.at(r, k)));
        else leaked = std::max(leaked, std::abs(g.at(r, k)));
      }
  }
  CheckResult r{"subspace_locality", leaked == 0.0 && inside > 0.0, leaked, 0.0, {}};
  if (inside == 0.0) r.detail = "no gradient inside the mask support either";
  return r;
}

/// Loss terms on inputs small enough to work out by hand.
inline std::vector<CheckResult> verify_hand_oracles() {
  std::vector<CheckResult> out;
  auto expect = [&out](std::string name, double got, double want) {
    const double diff = std::abs(got - want);
    out.push_back({"oracle/" + std::move(name), diff <= 1e-12, diff, 1e-12, {}});
  };
  const std::vector<double> yi = {1, 2, 3}, yj = {4, 6, 3}, m = {1, 1, 0}, half = {0.5, 0.5, 7};
  expect("masked_distance", masked_distance(yi, yj, m), 5.0);
  expect("masked_distance/scaled_mask", masked_distance(yi, yj, half), 2.5);
  expect("euclidean_distance", euclidean_distance(yi, yj), 5.0);
  // close at 1, far at 5: 1 - 5 + 0.2 < 0.
  const std::vector<double> anchor = {0, 0}, close = {1, 0}, far = {3, 4};
  expect("triplet_loss/satisfied", triplet_loss_standard(anchor, close, far, 0.2), 0.0);
  expect("triplet_loss/violated", triplet_loss_standard(anchor, far, close, 0.2), 4.2);
  const std::vector<double> only_x = {1, 0};
  // Under mask (1, 0), far sits at 3 and close at 1: satisfied.
  expect("triplet_loss/masked", triplet_loss_masked(anchor, close, far, only_x, 0.2), 0.0);
  expect("triplet_loss/masked_violated", triplet_loss_masked(anchor, far, close, only_x, 0.2), 2.2);

  Tensor y(Shape{3, 2});
  y.at(0, 0) = 0, y.at(0, 1) = 0, y.at(1, 0) = 3, y.at(1, 1) = 4, y.at(2, 0) = 1, y.at(2, 1) = 0;
  expect("embedding_loss", embedding_loss(y), 26.0 / 3.0);
  Tensor beta(Shape{2, 2});
  beta.at(0, 0) = 0.5, beta.at(0, 1) = -1.0, beta.at(1, 0) = -0.25, beta.at(1, 1) = 2.0;
  const MaskBank bank(beta, true);
  expect("mask_loss", mask_loss(bank), 2.5);

  // Identity network, so embeddings equal inputs.
  Tensor id(Shape{2, 2});
  id.at(0, 0) = 1, id.at(1, 1) = 1;
  EmbeddingNet identity({}, Param(id, "projection"));
  MaskBank bank2(beta, true);
  TripletBatch batch{Tensor(Shape{1, 2}), Tensor(Shape{1, 2}), Tensor(Shape{1, 2}), {1}};
  batch.closes.at(0, 0) = 3, batch.closes.at(0, 1) = 4;
  batch.fars.at(0, 0) = 1;
  // Mask 1 is (0, 2): close at 8, far at 0, hinge = 8.2.
  // L_W = (0 + 25 + 1) / 3, L_M = 0.5 + 2 = 2.5.
  const LossConfig cfg;
  Tape tape;
  const auto terms = csn_loss_terms(tape, identity, &bank2, batch, cfg);
  expect("joint_loss/triplet", terms.triplet.value().item(), 8.2);
  expect("joint_loss/total", terms.total.value().item(), 8.2 + 5e-3 * 26.0 / 3.0 + 5e-4 * 2.5);
  return out;
}

/// Every emitted triplet of a small benchmark satisfies its oracle relation.
inline CheckResult verify_triplet_audit(const VerifyOptions& opt) {
  GenerateOptions g;
  g.n = 400;
  g.seed = derive_seed(opt.seed, {0xA0D});
  const Dataset ds = split(generate_shapes(g), {}, derive_seed(opt.seed, {0xA0E}));
  const auto conditions = ds.condition_attributes();
  const Benchmark b = build_benchmark(ds, conditions, 300, 50, 100, derive_seed(opt.seed, {0xA0F}));
  std::size_t bad = 0, total = 0;
  for (const auto* list : {&b.train, &b.val, &b.test})
    for (const auto& t : *list) {
      ++total;
      if (!oracle_holds(ds, t.anchor, t.close, t.far, conditions[t.condition])) ++bad;
    }
  return {"triplet_audit", bad == 0, static_cast<double>(bad), 0.0, std::to_string(total) + " triplets"};
}

inline VerifyReport run_verification(const VerifyOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  VerifyReport report;
  report.checks = verify_gradients(opt);
  report.checks.push_back(verify_reduction_identity(opt));
  report.checks.push_back(verify_subspace_locality(opt));
  for (auto& c : verify_hand_oracles()) report.checks.push_back(std::move(c));
  report.checks.push_back(verify_triplet_audit(opt));
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace csn
