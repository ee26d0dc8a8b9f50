#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "csn/model.hpp"
#include "csn/random.hpp"
#include "csn/train.hpp"
#include "oracle_values.hpp"

using namespace csn;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Tensor normal_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = standard_normal(rng);
  return t;
}

// The fixture used by tests/oracle/derive_values.py.
struct JointFixture {
  EmbeddingNet net;
  MaskBank bank;
  TripletBatch batch;

  JointFixture() {
    DenseLayer h{Param(Tensor::matrix(4, 3, {0.5, -0.2, 0.1, 0.3, 0.8, -0.5, -0.6, 0.4, 0.9, 0.2, 0.2, 0.2}), "w1"),
                 Param(Tensor::vector({0.1, -0.1, 0.05, -0.25}), "b1")};
    Param proj(Tensor::matrix(4, 4, {1.0, -0.5, 0.2, 0.3, 0.4, 0.6, -0.7, 0.1, -0.3, 0.2, 0.5, 0.9, 0.8, -0.1, 0.3, -0.4}),
               "projection");
    net = EmbeddingNet({h}, proj);
    bank = MaskBank(Tensor::matrix(4, 2, {0.9, -0.2, 0.4, 1.1, -0.5, 0.7, 1.3, 0.2}), true);
    batch.anchors = Tensor::matrix(3, 3, {1.0, 0.0, 0.5, 0.2, -0.4, 0.9, -0.3, 0.8, 0.1});
    batch.closes = Tensor::matrix(3, 3, {0.9, 0.1, 0.4, 0.0, -0.5, 1.0, 0.7, 0.2, -0.6});
    batch.fars = Tensor::matrix(3, 3, {-0.8, 0.6, 0.3, 0.5, 0.5, -0.5, -0.2, 0.9, 0.3});
    batch.conditions = {0, 1, 1};
  }
};

}  // namespace

TEST_CASE("embed shapes and trivial networks") {
  EmbeddingNet net(5, {7, 6}, 4, 1);
  CHECK(net.input_dim() == 5);
  CHECK(net.feature_dim() == 6);
  CHECK(net.embedding_dim() == 4);
  CHECK(net.embed(Tensor(Shape{3, 5}, 1.0)).shape() == Shape{3, 4});
  CHECK_THROWS_AS(net.embed(Tensor(Shape{3, 4})), DimensionError);

  for (Param* p : net.params()) p->value.fill(0.0);
  Rng rng(9);
  const Tensor y = net.embed(normal_tensor({3, 5}, rng));
  for (double v : y.data()) CHECK(v == 0.0);

  const Tensor id = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EmbeddingNet identity({{Param(id), Param(Tensor(Shape{3}))}}, Param(id));
  const Tensor x = Tensor::matrix(2, 3, {0.5, 2.0, 0.0, 3.0, 0.25, 1.0});
  CHECK(identity.embed(x) == x);

  CHECK_THROWS_AS(EmbeddingNet({{Param(id), Param(Tensor(Shape{3}))}}, Param(Tensor(Shape{2, 4}))), DimensionError);
}

TEST_CASE("embed matches a hand-composed matrix chain") {
  EmbeddingNet net(4, {5, 3}, 2, 3);
  Rng rng(3);
  const Tensor x = normal_tensor({6, 4}, rng);
  const Tensor y = net.embed(x);
  Tape tape;
  const Tensor y_tape = net.embed(tape, tape.constant(x)).value();
  for (std::size_t r = 0; r < 6; ++r) {
    std::vector<double> h(x.row(r).begin(), x.row(r).end());
    for (const auto& layer : net.hidden()) {
      const Tensor& W = layer.weight.value;
      std::vector<double> next(W.rows());
      for (std::size_t i = 0; i < W.rows(); ++i) {
        double s = layer.bias.value[i];
        for (std::size_t j = 0; j < W.cols(); ++j) s += W.at(i, j) * h[j];
        next[i] = std::max(0.0, s);
      }
      h = next;
    }
    const Tensor& P = net.projection().value;
    for (std::size_t i = 0; i < P.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < P.cols(); ++j) s += P.at(i, j) * h[j];
      CHECK_THAT(y.at(r, i), WithinAbs(s, 1e-12));
      CHECK(y_tape.at(r, i) == y.at(r, i));
    }
  }
}

TEST_CASE("masks rectify beta and reject unknown conditions") {
  const MaskBank bank(Tensor::matrix(3, 2, {0.9, 1, -0.3, 1, 0.0, 1}), true);
  CHECK(bank.mask(0) == Tensor::vector({0.9, 0, 0}));
  CHECK(bank.mask(1) == Tensor::vector({1, 1, 1}));
  CHECK_THROWS_AS(bank.mask(2), IndexError);
}

TEST_CASE("no gradient flows to negative beta entries") {
  MaskBank bank(Tensor::matrix(3, 2, {0.9, -0.4, -0.3, 0.6, 0.2, -1.0}), true);
  Rng rng(4);
  const Tensor y = normal_tensor({2, 3}, rng);
  auto fn = [&](Tape& t) { return sum_squares(elementwise_mul(t.constant(y), bank.masks_for(t, {0, 1}))); };
  CHECK(grad_check(fn, {&bank.beta()}, 1e-6) < 1e-6);
  const Tensor& g = bank.beta().grad;
  const Tensor& b = bank.beta().value;
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (b[k] < 0) CHECK(g[k] == 0.0);
    else CHECK(g[k] != 0.0);
  }
}

TEST_CASE("masked distance examples") {
  const std::vector<double> a = {1, 2}, three = {3, 0}, four = {0, 4};
  CHECK(masked_distance(a, a, std::vector<double>{0.3, 7}) == 0.0);
  CHECK(masked_distance(three, four, std::vector<double>{1, 1}) == 5.0);
  CHECK(masked_distance(three, four, std::vector<double>{1, 0}) == 3.0);
  CHECK_THROWS_AS(masked_distance(three, four, std::vector<double>{1}), DimensionError);
}

TEST_CASE("masked distance is a symmetric weighted metric", "[property]") {
  Rng rng(11);
  for (int it = 0; it < 500; ++it) {
    const std::size_t d = 1 + uniform_index(rng, 8);
    std::vector<double> x(d), y(d), z(d), m(d), ones(d, 1.0);
    for (std::size_t k = 0; k < d; ++k) {
      x[k] = standard_normal(rng);
      y[k] = standard_normal(rng);
      z[k] = standard_normal(rng);
      m[k] = uniform01(rng) < 0.3 ? 0.0 : 2.0 * uniform01(rng);
    }
    CHECK(masked_distance(x, y, m) == masked_distance(y, x, m));
    CHECK(masked_distance(x, z, m) <= masked_distance(x, y, m) + masked_distance(y, z, m) + 1e-12);
    CHECK(masked_distance(x, y, ones) == euclidean_distance(x, y));
    CHECK(triplet_loss_masked(x, y, z, ones, 0.2) == triplet_loss_standard(x, y, z, 0.2));
  }
}

TEST_CASE("triplet loss examples") {
  const std::vector<double> a = {0, 0}, near = {1, 0}, far = {3, 0};
  CHECK(triplet_loss_standard(a, near, far, 0.2) == 0.0);
  CHECK_THAT(triplet_loss_standard(a, far, near, 0.2), WithinAbs(2.2, 1e-15));
  CHECK(triplet_loss_standard(a, a, a, 0.2) == 0.2);
  CHECK(triplet_loss_masked(a, near, far, std::vector<double>{0, 0}, 0.2) == 0.2);
  // sqrt(2) - sqrt(5) + 0.1 < 0.
  CHECK(triplet_loss_masked(std::vector<double>{1, 0, 0}, std::vector<double>{0, 1, 0}, std::vector<double>{0, 0, 2},
                            std::vector<double>{0, 1, 1}, 0.1) == 0.0);
}

TEST_CASE("embedding and mask loss examples") {
  CHECK(embedding_loss(Tensor(Shape{2, 3})) == 0.0);
  CHECK(embedding_loss(Tensor::matrix(1, 2, {3, 4})) == 25.0);
  CHECK(embedding_loss(Tensor::matrix(2, 2, {1, 0, 0, 2})) == 2.5);
  CHECK(mask_loss(MaskBank(Tensor::matrix(2, 2, {-1, 0, -0.5, -2}), true)) == 0.0);
  CHECK(mask_loss(MaskBank(Tensor::matrix(2, 2, {1, 0.5, -2, 0.5}), true)) == 2.0);
  Tensor beta = Tensor::matrix(2, 2, {1, 0.5, -2, 0.5});
  const double before = mask_loss(MaskBank(beta, true));
  beta.at(0, 1) = 0.4;
  CHECK(mask_loss(MaskBank(beta, true)) < before);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  CHECK(cfg.margin == 0.2);
  CHECK(cfg.lambda1 == 5e-3);
  CHECK(cfg.lambda2 == 5e-4);
  cfg.lambda1 = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.margin = std::nan("");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("joint loss matches the independent reference term by term") {
  JointFixture f;
  Tape tape;
  const LossConfig cfg;
  const LossTerms terms = csn_loss_terms(tape, f.net, &f.bank, f.batch, cfg);
  CHECK_THAT(terms.triplet.value().item(), WithinAbs(oracle::kJointTriplet, 1e-14));
  CHECK_THAT(terms.embedding.value().item(), WithinAbs(oracle::kJointEmbedding, 1e-14));
  CHECK_THAT(terms.mask->value().item(), WithinAbs(oracle::kJointMask, 1e-14));
  CHECK_THAT(terms.total.value().item(), WithinAbs(oracle::kJointTotal, 1e-14));

  tape.backward(terms.total);
  const Tensor& gp = f.net.projection().grad;
  for (std::size_t k = 0; k < gp.size(); ++k) CHECK_THAT(gp[k], WithinAbs(oracle::kJointGradProjection[k], 1e-13));
  const Tensor& gb = f.bank.beta().grad;
  for (std::size_t k = 0; k < gb.size(); ++k) CHECK_THAT(gb[k], WithinAbs(oracle::kJointGradBeta[k], 1e-13));
  const Tensor& gw = f.net.hidden()[0].weight.grad;
  for (std::size_t k = 0; k < gw.size(); ++k) CHECK_THAT(gw[k], WithinAbs(oracle::kJointGradHiddenWeight[k], 1e-13));
}

TEST_CASE("joint loss matches a straight-line recomputation") {
  EmbeddingNet net(5, {6}, 4, 17);
  MaskBank bank = init_masks(4, 2, {}, 18, true);
  Rng rng(19);
  TripletBatch batch{normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng), {1, 0, 1}};
  const LossConfig cfg;
  Tape tape;
  const double got = csn_loss(tape, net, bank, batch, cfg).value().item();

  const Tensor ya = net.embed(batch.anchors), yc = net.embed(batch.closes), yf = net.embed(batch.fars);
  double trip = 0.0, norms = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor m = bank.mask(batch.conditions[i]);
    trip += triplet_loss_masked(ya.row(i), yc.row(i), yf.row(i), m.data(), cfg.margin);
    for (const Tensor* y : {&ya, &yc, &yf})
      for (double v : y->row(i)) norms += v * v;
  }
  const double want = trip / 3.0 + cfg.lambda1 * norms / 9.0 + cfg.lambda2 * mask_loss(bank);
  CHECK_THAT(got, WithinAbs(want, 1e-12));
}

TEST_CASE("joint loss degenerate cases") {
  EmbeddingNet net(3, {4}, 4, 2);
  Rng rng(5);
  TripletBatch batch{normal_tensor({5, 3}, rng), normal_tensor({5, 3}, rng), normal_tensor({5, 3}, rng), {0, 1, 0, 1, 1}};
  LossConfig cfg;
  cfg.lambda1 = cfg.lambda2 = 0.0;

  Tensor ones(Shape{4, 2}, 1.0);
  MaskBank all_ones(ones, false);
  Tape t1;
  const double masked = csn_loss(t1, net, all_ones, batch, cfg).value().item();
  const Tensor ya = net.embed(batch.anchors), yc = net.embed(batch.closes), yf = net.embed(batch.fars);
  double plain = 0.0;
  for (std::size_t i = 0; i < 5; ++i) plain += triplet_loss_standard(ya.row(i), yc.row(i), yf.row(i), cfg.margin);
  CHECK_THAT(masked, WithinAbs(plain / 5.0, 1e-15));

  for (Param* p : net.params()) p->value.fill(0.0);
  Tape t2;
  CHECK_THAT(csn_loss(t2, net, all_ones, batch, cfg).value().item(), WithinAbs(0.2, 1e-15));

  TripletBatch empty{Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), Tensor(Shape{1, 3}), {}};
  Tape t3;
  CHECK_THROWS_AS(csn_loss(t3, net, all_ones, empty, cfg), ContractError);
}

TEST_CASE("joint loss gradient check over weights and masks", "[property]") {
  for (std::uint64_t seed = 30; seed < 36; ++seed) {
    EmbeddingNet net(5, {6}, 6, seed);
    MaskBank bank = init_masks(6, 3, {}, seed + 100, true);
    for (double& b : bank.beta().value.data())
      if (std::abs(b) < 0.05) b = 0.3;
    Rng rng(seed + 200);
    TripletBatch batch{normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng), normal_tensor({3, 5}, rng), {0, 1, 2}};
    auto params = net.params();
    params.push_back(&bank.beta());
    const double err = grad_check([&](Tape& t) { return csn_loss(t, net, bank, batch, {}); }, params, 1e-6);
    INFO("seed " << seed);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("fixed disjoint masks isolate each condition's loss", "[property]") {
  const std::size_t d = 8;
  const MaskBank bank = init_masks(d, 4, {MaskInit::Mode::disjoint}, 0, false);
  Rng rng(21);
  for (int it = 0; it < 200; ++it) {
    const std::size_t c = uniform_index(rng, 4);
    const Tensor m = bank.mask(c);
    std::vector<double> a(d), p(d), q(d);
    for (std::size_t k = 0; k < d; ++k) a[k] = standard_normal(rng), p[k] = standard_normal(rng), q[k] = standard_normal(rng);
    const double before = triplet_loss_masked(a, p, q, m.data(), 0.2);
    for (std::size_t k = 0; k < d; ++k)
      if (m[k] == 0.0) a[k] += standard_normal(rng), p[k] -= 3.0, q[k] *= -2.0;
    CHECK(triplet_loss_masked(a, p, q, m.data(), 0.2) == before);
  }
}

TEST_CASE("gradients vanish on embedding dimensions a mask switches off") {
  Rng rng(22);
  Param y(normal_tensor({3, 6}, rng), "y");
  const Tensor m = Tensor::vector({1, 0, 0.5, 0, 2, 0});
  Tape t;
  const Var ym = elementwise_mul(t.param(y), t.constant(m));
  const Var loss = mean(hinge(add_scalar(sub(row_norms(sub(slice_rows(ym, 0, 1), slice_rows(ym, 1, 1))),
                                              row_norms(sub(slice_rows(ym, 0, 1), slice_rows(ym, 2, 1)))),
                                          5.0)));
  t.backward(loss);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 6; ++k)
      if (m[k] == 0.0) CHECK(y.grad.at(r, k) == 0.0);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  for (Variant v : {Variant::standard, Variant::specialist_set, Variant::csn_fixed, Variant::csn_learned}) {
    TrainConfig cfg;
    cfg.variant = v;
    cfg.model = {{7, 5}, 4};
    const Model m = init_model(cfg, 6, 2);
    std::stringstream ss;
    save_checkpoint(m, ss);
    const Model back = load_checkpoint(ss);
    CHECK(back == m);
    CHECK(back.variant == v);
    if (m.masks) CHECK(back.masks->trainable() == m.masks->trainable());
  }
}

TEST_CASE("damaged checkpoints are rejected") {
  TrainConfig cfg;
  cfg.model = {{3}, 2};
  std::stringstream ss;
  save_checkpoint(init_model(cfg, 4, 2), ss);
  const std::string bytes = ss.str();

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_checkpoint(truncated), IntegrityError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream wrong(bad_magic);
  CHECK_THROWS_AS(load_checkpoint(wrong), IntegrityError);
  CHECK_THROWS_AS(load_checkpoint(std::string("/nonexistent/ckpt.bin")), IoError);
}

TEST_CASE("variant names") {
  for (Variant v : {Variant::standard, Variant::specialist_set, Variant::csn_fixed, Variant::csn_learned})
    CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("csn"), ConfigError);
  CHECK(uses_masks(Variant::csn_fixed));
  CHECK_FALSE(uses_masks(Variant::specialist_set));
}
