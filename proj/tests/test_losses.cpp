#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_check.hpp"
#include "moescope/losses.hpp"
#include "moescope/model.hpp"

using namespace moescope;
using nd::Mode;
using nd::Shape;
using nd::Tape;
using nd::Tensor;

namespace {

// Gram-Schmidt orthogonalization of a random square matrix.
Tensor random_orthogonal(int d, std::uint64_t seed) {
  SequentialRng rng(seed);
  std::vector<std::vector<double>> q;
  for (int i = 0; i < d; ++i) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.normal();
    for (const auto& u : q) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += v[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)];
      for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(j)] -= dot * u[static_cast<std::size_t>(j)];
    }
    double norm = nd::l2norm(v);
    for (auto& x : v) x /= norm;
    q.push_back(std::move(v));
  }
  Tensor m(Shape{d, d});
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) m.data()[i * d + j] = q[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

Tensor matmul_plain(const Tensor& a, const Tensor& bt) {
  const auto n = a.dim(0), d = a.dim(1);
  Tensor out(Shape{n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < d; ++k) acc += a.data()[i * d + k] * bt.data()[j * d + k];
      out.data()[i * d + j] = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("nt_xent: all-identical embeddings give ln 3 at N=2, tau-independent") {
  for (double tau : {0.5, 0.17, 2.0}) {
    Tensor v(Shape{4, 3});
    for (int r = 0; r < 4; ++r) {
      v.data()[r * 3 + 0] = 0.2;
      v.data()[r * 3 + 1] = -1.1;
      v.data()[r * 3 + 2] = 0.7;
    }
    Tensor loss = nt_xent(v, tau);
    CHECK(std::fabs(loss.item() - std::log(3.0)) <= 1e-9);
  }
}

TEST_CASE("nt_xent: aligned positives with orthogonal negatives at tau=0.5") {
  Tensor v = Tensor::zeros({4, 2});
  v.data()[0] = 1.0;           // row 0 = e1
  v.data()[2] = 1.0;           // row 1 = e1
  v.data()[5] = 1.0;           // row 2 = e2
  v.data()[7] = 1.0;           // row 3 = e2
  Tensor loss = nt_xent(v, 0.5);
  const double e2 = std::exp(2.0);
  const double expected = -std::log(e2 / (e2 + 2.0));
  CHECK(std::fabs(loss.item() - expected) <= 1e-9);
}

TEST_CASE("nt_xent is invariant under a common orthogonal rotation") {
  SequentialRng rng(5);
  Tensor v = Tensor::randn({8, 6}, rng);
  Tensor rot = random_orthogonal(6, 9);
  Tensor vr = matmul_plain(v, rot);
  CHECK(std::fabs(nt_xent(v, 0.5).item() - nt_xent(vr, 0.5).item()) < 1e-10);
}

TEST_CASE("nt_xent input validation") {
  CHECK_THROWS_AS(nt_xent(Tensor::zeros({3, 2}), 0.5), ValidationError);  // odd rows
  CHECK_THROWS_AS(nt_xent(Tensor::zeros({2, 2}), 0.5), ValidationError);  // N < 2
  SequentialRng rng(6);
  Tensor v = Tensor::randn({4, 3}, rng);
  for (int j = 0; j < 3; ++j) v.data()[2 * 3 + j] = 0.0;  // zero-norm row
  CHECK_THROWS_AS(nt_xent(v, 0.5), NumericError);
  CHECK_THROWS_AS(nt_xent(v, 0.0), ValidationError);
}

TEST_CASE("perturbing a perfectly aligned positive pair strictly increases the loss") {
  // rows 0,1 aligned along e1; rows 2,3 aligned along e2. Directional probes
  // move row 1 along e3, which is orthogonal to every negative, so only the
  // positive-pair alignment changes.
  Tensor v = Tensor::zeros({4, 3});
  v.data()[0] = 1.0;
  v.data()[3] = 1.0;
  v.data()[7] = 1.0;
  v.data()[10] = 1.0;
  const double base = nt_xent(v, 0.5).item();
  for (double delta : {0.3, 0.1, 0.05, -0.05, -0.1, -0.3}) {
    Tensor p = v.clone();
    p.data()[3 + 2] = delta;  // cos(v0, v1) drops below 1; negatives untouched
    CHECK(nt_xent(p, 0.5).item() > base);
  }
}

TEST_CASE("importance_loss oracles") {
  // uniform -> 0
  Tensor u = Tensor::from_vector({0.7, 0.7, 0.7, 0.7});
  CHECK(std::fabs(importance_loss(u, 0.1).item()) <= 1e-12);

  // hand arithmetic: I=[2,0,0,0], w=0.1 -> CV^2 = 3, loss = 0.3
  Tensor i1 = Tensor::from_vector({2.0, 0.0, 0.0, 0.0});
  CHECK(std::fabs(importance_loss(i1, 0.1).item() - 0.3) <= 1e-12);

  // scale invariance
  SequentialRng rng(11);
  Tensor i2(Shape{6});
  for (int i = 0; i < 6; ++i) i2.data()[i] = std::fabs(rng.normal()) + 0.1;
  Tensor i2s = nd::mul_scalar(i2, 37.5);
  CHECK(importance_loss(i2, 0.1).item() ==
        doctest::Approx(importance_loss(i2s, 0.1).item()).epsilon(1e-12));

  // zero iff uniform
  CHECK(importance_loss(i2, 0.1).item() > 1e-6);

  // degenerate mean
  Tensor z = Tensor::zeros({4});
  CHECK_THROWS_AS(importance_loss(z, 0.1), NumericError);
}

TEST_CASE("importance accumulator totals equal batch size") {
  ImportanceAccumulator acc(4);
  SequentialRng rng(13);
  const int batch = 37;
  for (int i = 0; i < batch; ++i) {
    // a normalized sparse weight vector, as the gate produces
    std::vector<double> w(4, 0.0);
    const int a = static_cast<int>(rng.index(4));
    int b = static_cast<int>(rng.index(4));
    if (b == a) b = (a + 1) % 4;
    const double t = rng.uniform();
    w[static_cast<std::size_t>(a)] = t;
    w[static_cast<std::size_t>(b)] = 1.0 - t;
    acc.add(w);
  }
  CHECK(std::fabs(acc.sum() - batch) <= 1e-9);
  for (double v : acc.totals()) CHECK(v >= 0.0);
}

TEST_CASE("total_loss composition") {
  SequentialRng rng(17);
  Tensor v = Tensor::randn({6, 5}, rng);
  Tensor imp = Tensor::from_vector({1.2, 0.8, 1.1, 0.9});

  LossConfig cfg;
  cfg.importance_weight = 0.0;
  auto zero_w = total_loss(v, imp, cfg);
  CHECK(zero_w.total.item() == zero_w.contrastive.item());

  cfg.importance_weight = 0.1;
  Tensor uni = Tensor::full({4}, 0.25);
  auto uniform_i = total_loss(v, uni, cfg);
  CHECK(std::fabs(uniform_i.total.item() - uniform_i.contrastive.item()) <= 1e-12);

  auto both = total_loss(v, imp, cfg);
  CHECK(std::fabs((both.total.item() - both.contrastive.item()) - both.importance.item()) <=
        1e-12);

  cfg.temperature = -1.0;
  CHECK_THROWS_AS(total_loss(v, imp, cfg), ValidationError);
}

TEST_CASE("finite differences: nt_xent and importance_loss gradients") {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    SequentialRng rng(40 + inst);
    Tensor v = Tensor::randn({6, 4}, rng, 1.0, true);
    Tape tape;
    Tensor loss = nt_xent(v, 0.5, &tape);
    tape.backward(loss);
    auto rep = fd::check_grad(v, [&]() { return nt_xent(v, 0.5).item(); }, 1e-5, 24, inst);
    CHECK(rep.max_rel_err < 1e-4);

    Tensor imp(Shape{5});
    for (int i = 0; i < 5; ++i) imp.data()[i] = std::fabs(rng.normal()) + 0.2;
    imp.set_requires_grad(true);
    Tape tape2;
    Tensor li = importance_loss(imp, 0.1, &tape2);
    tape2.backward(li);
    auto rep2 =
        fd::check_grad(imp, [&]() { return importance_loss(imp, 0.1).item(); }, 1e-5, 5, inst);
    CHECK(rep2.max_rel_err < 1e-4);
  }
}

TEST_CASE("end-to-end gradient through gate, experts, projection and both losses") {
  // Small model, full chain: total_loss(project(combine(...)), importance).
  MoeConfig cfg;
  cfg.num_experts = 2;
  cfg.top_k = 1;
  cfg.base_width = 16;
  cfg.input_size = 32;
  cfg.proj_dim = 8;
  cfg.gate_channels = 4;
  MoeModel model = MoeModel::init(cfg, 3);

  SequentialRng rng(19);
  Tensor views(Shape{4, 3, 32, 32});
  for (std::int64_t i = 0; i < views.numel(); ++i) views.data()[i] = rng.uniform();

  LossConfig lc;
  auto run = [&](Tape* tape, std::vector<std::vector<int>>* sel) {
    // Fresh stat-free forward: running-stat updates do not feed the loss in
    // train mode, so mutation is harmless for differencing.
    Tape local;
    Tape* tp = tape ? tape : &local;
    auto tf = model.train_forward(views, *tp, 99);
    if (sel) *sel = tf.selected;
    auto tl = total_loss(tf.projected, nd::column_sum(tf.gate_weights, tape), lc, tape);
    return tl.total;
  };

  std::vector<std::vector<int>> sel_base;
  Tape tape;
  Tensor loss = run(&tape, &sel_base);
  tape.backward(loss);

  std::vector<std::string> names;
  std::vector<Tensor*> params;
  model.visit_params([&](const std::string& nm, Tensor& t) {
    names.push_back(nm);
    params.push_back(&t);
  });

  // sample a handful of parameters spread over the model
  int checked = 0, skipped = 0;
  double worst = 0.0;
  RandomStream pick(555);
  for (std::size_t pi = 0; pi < params.size(); pi += 2) {
    Tensor& p = *params[pi];
    if (!p.has_grad()) continue;  // e.g. an expert that saw no rows
    const auto coord = static_cast<std::int64_t>(pick.bits(pi) % static_cast<std::uint64_t>(p.numel()));
    const double saved = p.data()[coord];
    const double h = 1e-5;
    std::vector<std::vector<int>> sel_up, sel_dn;
    p.data()[coord] = saved + h;
    const double up = run(nullptr, &sel_up).item();
    p.data()[coord] = saved - h;
    const double dn = run(nullptr, &sel_dn).item();
    p.data()[coord] = saved;
    if (sel_up != sel_base || sel_dn != sel_base) {
      ++skipped;  // crossed a top-k selection boundary; derivative undefined
      continue;
    }
    const double fdg = (up - dn) / (2.0 * h);
    const double tg = p.grad_const()[static_cast<std::size_t>(coord)];
    worst = std::max(worst, fd::rel_err(tg, fdg));
    ++checked;
  }
  MESSAGE("checked=", checked, " skipped=", skipped, " worst=", worst);
  CHECK(checked >= 20);
  CHECK(worst < 1e-3);
}
