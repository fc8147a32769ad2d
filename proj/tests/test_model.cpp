#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "moescope/model.hpp"

using namespace moescope;
using nd::Mode;
using nd::Shape;
using nd::Tensor;

namespace {

MoeConfig desk_config(int experts = 4, int k = 2) {
  MoeConfig c;
  c.num_experts = experts;
  c.top_k = k;
  c.base_width = 64;
  c.input_size = 32;
  return c;
}

MoeConfig paper_config(int experts) {
  MoeConfig c;
  c.num_experts = experts;
  c.top_k = 2;
  c.base_width = 256;
  c.input_size = 96;
  return c;
}

Tensor random_images(std::int64_t n, int size, std::uint64_t seed) {
  SequentialRng rng(seed);
  Tensor t(Shape{n, 3, size, size});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("embed_dim arithmetic: 128/90/64 at base width 256") {
  CHECK(paper_config(4).embed_dim() == 128);
  CHECK(paper_config(8).embed_dim() == 90);
  CHECK(paper_config(16).embed_dim() == 64);
  CHECK(desk_config(4).embed_dim() == 32);
  CHECK(desk_config(16).embed_dim() == 16);
}

TEST_CASE("spatial arithmetic: 96 -> 12 after three halvings, 32 -> 4") {
  CHECK(paper_config(4).gating_spatial() == 12);
  CHECK(paper_config(4).expert_spatial() == 3);
  CHECK(desk_config().gating_spatial() == 4);
  CHECK(desk_config().expert_spatial() == 1);
}

TEST_CASE("config validation") {
  MoeConfig c = desk_config();
  c.top_k = 5;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = desk_config();
  c.shared_blocks = 4;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = desk_config();
  c.input_size = 16;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_NOTHROW(desk_config().validate());
}

TEST_CASE("parameter count varies by less than 5% across E at base width 256") {
  double mn = 1e30, mx = 0;
  for (int e : {4, 8, 16}) {
    MoeModel m = MoeModel::init(paper_config(e), 1);
    const auto n = static_cast<double>(m.param_count());
    mn = std::min(mn, n);
    mx = std::max(mx, n);
    MESSAGE("E=", e, " params=", n);
  }
  CHECK((mx - mn) / mn < 0.05);
}

TEST_CASE("gate branch constant path and output dimensionality") {
  MoeModel m = MoeModel::init(desk_config(), 2);
  // zero the gate-g conv entirely; logits must equal the fc bias
  auto& g = m.gate_g();
  std::fill_n(g.conv_w.data(), g.conv_w.numel(), 0.0);
  std::fill_n(g.conv_b.data(), g.conv_b.numel(), 0.0);
  for (int i = 0; i < 4; ++i) g.fc_b.data()[i] = 0.25 * (i + 1);
  Tensor imgs = random_images(3, 32, 7);
  Tensor h = m.shared_forward(imgs, Mode::kEval);
  Tensor logits = m.gate_branch(h, g, Mode::kEval);
  REQUIRE(logits.shape() == Shape{3, 4});
  for (int r = 0; r < 3; ++r) {
    for (int i = 0; i < 4; ++i) {
      CHECK(logits.data()[r * 4 + i] == doctest::Approx(0.25 * (i + 1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("gate input at paper scale compresses 18432 values into E scalars") {
  const MoeConfig c = paper_config(4);
  CHECK(c.embed_dim() * c.gating_spatial() * c.gating_spatial() == 18432);
  // and the branch output is E regardless of the latent size
  MoeModel m = MoeModel::init(desk_config(8, 2), 3);
  Tensor imgs = random_images(2, 32, 8);
  Tensor h = m.shared_forward(imgs, Mode::kEval);
  CHECK(m.gate_branch(h, m.gate_g(), Mode::kEval).shape() == Shape{2, 8});
}

TEST_CASE("noisy_topk_gate eval examples") {
  RandomStream noise(99);

  // k = E: no masking, plain softmax
  const std::vector<double> lg{0.3, -1.0, 0.7};
  const std::vector<double> ln{0.0, 0.0, 0.0};
  GateDecision d = noisy_topk_gate(lg, ln, 3, Mode::kEval, noise);
  CHECK(d.selected == std::vector<int>{0, 1, 2});
  double sum = 0.0;
  for (double w : d.weights) {
    CHECK(w > 0.0);
    sum += w;
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-12);

  // worked example: lg=[3,1,2,0], k=2
  GateDecision d2 = noisy_topk_gate(std::vector<double>{3, 1, 2, 0}, std::vector<double>{0, 0, 0, 0},
                                    2, Mode::kEval, noise);
  CHECK(d2.selected == std::vector<int>{0, 2});
  const double e1 = std::exp(1.0);
  CHECK(d2.weights[0] == doctest::Approx(e1 / (e1 + 1.0)).epsilon(1e-12));
  CHECK(d2.weights[1] == 0.0);
  CHECK(d2.weights[2] == doctest::Approx(1.0 / (e1 + 1.0)).epsilon(1e-12));
  CHECK(d2.weights[3] == 0.0);
  CHECK(d2.weights[0] == doctest::Approx(0.73106).epsilon(1e-4));
}

TEST_CASE("gate contract: support size, normalization, determinism, ties, shift invariance") {
  for (int e : {4, 8, 16}) {
    for (int k : {1, 2}) {
      for (std::uint64_t inst = 0; inst < 200; ++inst) {
        SequentialRng rng(inst * 31 + static_cast<std::uint64_t>(e * 7 + k));
        std::vector<double> lg(static_cast<std::size_t>(e)), ln(static_cast<std::size_t>(e));
        for (auto& v : lg) v = rng.normal() * 2.0;
        for (auto& v : ln) v = rng.normal();
        RandomStream noise(5);
        GateDecision d = noisy_topk_gate(lg, ln, k, Mode::kEval, noise);
        CHECK(static_cast<int>(d.selected.size()) == k);
        double sum = 0.0;
        int nonzero = 0;
        for (double w : d.weights) {
          CHECK(w >= 0.0);
          sum += w;
          if (w != 0.0) ++nonzero;
        }
        CHECK(nonzero == k);
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
        GateDecision d2 = noisy_topk_gate(lg, ln, k, Mode::kEval, noise);
        CHECK(d2.selected == d.selected);
        CHECK(d2.weights == d.weights);
        // support is invariant under a common shift; weights within 1e-12
        std::vector<double> shifted = lg;
        for (auto& v : shifted) v += 3.25;
        GateDecision d3 = noisy_topk_gate(shifted, ln, k, Mode::kEval, noise);
        CHECK(d3.selected == d.selected);
        for (int i = 0; i < e; ++i) {
          CHECK(std::fabs(d3.weights[static_cast<std::size_t>(i)] -
                          d.weights[static_cast<std::size_t>(i)]) <= 1e-12);
        }
      }
    }
  }
  // exact ties break toward the lower index
  RandomStream noise(1);
  GateDecision t = noisy_topk_gate(std::vector<double>{1.0, 1.0, 1.0, 1.0},
                                   std::vector<double>{0, 0, 0, 0}, 2, Mode::kEval, noise);
  CHECK(t.selected == std::vector<int>{0, 1});
}

TEST_CASE("train-mode gate perturbs scores with softplus-scaled noise") {
  RandomStream noise(123);
  const std::vector<double> lg{0.5, 0.1, -0.2, 0.05};
  const std::vector<double> ln{1.0, 1.0, 1.0, 1.0};
  GateDecision d = noisy_topk_gate(lg, ln, 2, Mode::kTrain, noise, 17);
  for (int i = 0; i < 4; ++i) {
    const double expected =
        lg[static_cast<std::size_t>(i)] +
        noise.normal(17 * 4 + static_cast<std::uint64_t>(i)) *
            nd::softplus_scalar(ln[static_cast<std::size_t>(i)]);
    CHECK(d.noisy[static_cast<std::size_t>(i)] == doctest::Approx(expected).epsilon(1e-15));
  }
  CHECK(d.logits == lg);
}

TEST_CASE("expert_forward basics") {
  MoeModel m = MoeModel::init(desk_config(), 11);
  Tensor imgs = random_images(2, 32, 21);
  Tensor h = m.shared_forward(imgs, Mode::kEval);
  Tensor z0 = m.expert_forward(h, 0, Mode::kEval);
  Tensor z1 = m.expert_forward(h, 1, Mode::kEval);
  REQUIRE(z0.shape() == Shape{2, 32});
  double diff = 0.0;
  for (std::int64_t i = 0; i < z0.numel(); ++i) diff += std::fabs(z0.data()[i] - z1.data()[i]);
  CHECK(diff > 1e-6);  // independent parameters give distinct outputs
  Tensor z0b = m.expert_forward(h, 0, Mode::kEval);
  for (std::int64_t i = 0; i < z0.numel(); ++i) CHECK(z0.data()[i] == z0b.data()[i]);
  CHECK_THROWS_AS(m.expert_forward(h, 4, Mode::kEval), ValidationError);
}

TEST_CASE("combine examples") {
  GateDecision d;
  d.selected = {1};
  d.weights = {0.0, 1.0, 0.0};
  std::vector<std::vector<double>> readouts(3);
  readouts[1] = {2.0, -1.0};
  auto z = combine(readouts, d);
  CHECK(z == std::vector<double>{2.0, -1.0});

  GateDecision d2;
  d2.selected = {0, 1};
  d2.weights = {0.5, 0.5};
  std::vector<std::vector<double>> same(2, std::vector<double>{1.5, 2.5});
  auto z2 = combine(same, d2);
  CHECK(z2[0] == doctest::Approx(1.5));
  CHECK(z2[1] == doctest::Approx(2.5));

  GateDecision d3;
  d3.selected = {0, 1};
  d3.weights = {0.73106, 0.26894};
  std::vector<std::vector<double>> basis{{1.0, 0.0}, {0.0, 1.0}};
  auto z3 = combine(basis, d3);
  CHECK(z3[0] == doctest::Approx(0.73106));
  CHECK(z3[1] == doctest::Approx(0.26894));

  GateDecision d4;
  d4.selected = {0, 2};
  d4.weights = {0.5, 0.0, 0.5};
  CHECK_THROWS_AS(combine(basis, d4), ValidationError);
}

TEST_CASE("projection head output dimension and degenerate identity head") {
  MoeConfig cfg = desk_config();
  MoeModel m = MoeModel::init(cfg, 31);
  SequentialRng rng(77);
  Tensor z = Tensor::randn({3, cfg.embed_dim()}, rng);
  Tensor v = m.project(z, Mode::kEval);
  CHECK(v.shape() == Shape{3, 128});

  // Degenerate head: w1 = identity slice (rows pick z coordinates), BN
  // bypassed by running stats (mean 0, var = 1 - eps), w2 = identity.
  // Feed nonnegative z so the ReLU is transparent.
  nd::BnState bypass;
  bypass.running_mean = Tensor::zeros({128});
  bypass.running_var = Tensor::full({128}, 1.0 - 1e-5);
  bypass.initialized = true;
  Tensor w1 = Tensor::zeros({128, cfg.embed_dim()});
  for (int i = 0; i < cfg.embed_dim(); ++i) w1.data()[i * cfg.embed_dim() + i] = 1.0;
  Tensor w2 = Tensor::zeros({128, 128});
  for (int i = 0; i < 128; ++i) w2.data()[i * 128 + i] = 1.0;
  Tensor zero128 = Tensor::zeros({128});
  Tensor gamma = Tensor::full({128}, 1.0);
  Tensor zpos = z.clone();
  for (std::int64_t i = 0; i < zpos.numel(); ++i) zpos.data()[i] = std::fabs(zpos.data()[i]);
  Tensor t = nd::linear(zpos, w1, zero128);
  t = nd::batchnorm(t, gamma, zero128, bypass, Mode::kEval);
  t = nd::relu(t);
  Tensor out = nd::linear(t, w2, zero128);
  for (int r = 0; r < 3; ++r) {
    for (int i = 0; i < cfg.embed_dim(); ++i) {
      CHECK(out.data()[r * 128 + i] ==
            doctest::Approx(zpos.data()[r * cfg.embed_dim() + i]).epsilon(1e-12));
    }
    for (int i = cfg.embed_dim(); i < 128; ++i) CHECK(out.data()[r * 128 + i] == 0.0);
  }
}

TEST_CASE("model_forward: forced readouts, determinism, combine consistency") {
  MoeModel m = MoeModel::init(desk_config(), 41);
  Tensor imgs = random_images(5, 32, 55);

  auto forced = m.forward(imgs, Mode::kEval, true);
  REQUIRE(forced.size() == 5);
  for (const auto& fo : forced) {
    CHECK(fo.expert_readouts.size() == 4);
    CHECK(fo.readout_norms.size() == 4);
    for (int e = 0; e < 4; ++e) {
      CHECK(fo.expert_readouts[static_cast<std::size_t>(e)].size() == 32);
      CHECK(fo.readout_norms[static_cast<std::size_t>(e)] ==
            doctest::Approx(nd::l2norm(fo.expert_readouts[static_cast<std::size_t>(e)]))
                .epsilon(1e-12));
    }
    CHECK(fo.projected.empty());  // analysis paths never read v
  }

  auto unforced = m.forward(imgs, Mode::kEval, false);
  auto again = m.forward(imgs, Mode::kEval, false);
  for (std::size_t i = 0; i < unforced.size(); ++i) {
    CHECK(unforced[i].gate.selected == again[i].gate.selected);
    CHECK(unforced[i].embedding == again[i].embedding);  // bit-identical
    CHECK(unforced[i].gate.selected == forced[i].gate.selected);
    auto z = combine(forced[i].expert_readouts, forced[i].gate);
    REQUIRE(z.size() == unforced[i].embedding.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
      CHECK(std::fabs(z[j] - unforced[i].embedding[j]) < 1e-10);
    }
  }

  // train mode fills the projection
  auto trainfwd = m.forward(imgs, Mode::kTrain, false, 3);
  CHECK(trainfwd[0].projected.size() == 128);

  CHECK_THROWS_AS(m.forward(Tensor::zeros({1, 3, 16, 16}), Mode::kEval, false), ShapeError);
}

TEST_CASE("eval-mode routing is a pure function of the image") {
  MoeModel m = MoeModel::init(desk_config(), 43);
  Tensor imgs = random_images(6, 32, 66);
  auto full = m.forward(imgs, Mode::kEval, false);
  // the same image in a different batch context routes identically
  std::vector<int> pick{3};
  Tensor sub = nd::gather_rows(imgs, pick);
  auto single = m.forward(sub, Mode::kEval, false);
  CHECK(single[0].gate.selected == full[3].gate.selected);
  for (std::size_t i = 0; i < single[0].gate.logits.size(); ++i) {
    CHECK(single[0].gate.logits[i] == doctest::Approx(full[3].gate.logits[i]).epsilon(1e-9));
  }
}

TEST_CASE("train_forward keeps exactly k experts per row and weights sum to 1") {
  MoeModel m = MoeModel::init(desk_config(), 47);
  Tensor views = random_images(8, 32, 77);
  nd::Tape tape;
  auto tf = m.train_forward(views, tape, 5);
  REQUIRE(tf.gate_weights.shape() == Shape{8, 4});
  for (int r = 0; r < 8; ++r) {
    CHECK(tf.selected[static_cast<std::size_t>(r)].size() == 2);
    double sum = 0.0;
    int nz = 0;
    for (int e = 0; e < 4; ++e) {
      const double w = tf.gate_weights.data()[r * 4 + e];
      CHECK(w >= 0.0);
      sum += w;
      if (w != 0.0) ++nz;
    }
    CHECK(nz == 2);
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
  CHECK(tf.projected.shape() == Shape{8, 128});
  CHECK(tf.embedding.shape() == Shape{8, 32});
}

TEST_CASE("checkpoint save/load round trip preserves every tensor and validates shapes") {
  MoeModel m = MoeModel::init(desk_config(), 53);
  // make running stats non-trivial
  Tensor imgs = random_images(8, 32, 88);
  nd::Tape tape;
  m.train_forward(imgs, tape, 1);

  std::stringstream ss;
  m.save(ss, R"({"epoch":7})");
  std::string extra;
  MoeModel loaded = MoeModel::load(ss, &extra);
  CHECK(extra == R"({"epoch":7})");
  CHECK(loaded.config() == m.config());

  // bitwise-equal parameters and state
  std::vector<double> a, b;
  auto dump = [](MoeModel& mm, std::vector<double>* out) {
    mm.visit_params([&](const std::string&, Tensor& t) {
      out->insert(out->end(), t.vec().begin(), t.vec().end());
    });
    mm.visit_state([&](const std::string&, Tensor& t) {
      out->insert(out->end(), t.vec().begin(), t.vec().end());
    });
  };
  dump(m, &a);
  dump(loaded, &b);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // outputs agree bitwise
  auto o1 = m.forward(imgs, Mode::kEval, false);
  auto o2 = loaded.forward(imgs, Mode::kEval, false);
  for (std::size_t i = 0; i < o1.size(); ++i) CHECK(o1[i].embedding == o2[i].embedding);

  // corrupt magic
  std::stringstream bad("XXXXjunk");
  CHECK_THROWS_AS(MoeModel::load(bad), ValidationError);
}
