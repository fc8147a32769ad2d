#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "moescope/corpus.hpp"
#include "moescope/train.hpp"

using namespace moescope;
namespace fs = std::filesystem;
using nd::Tensor;

namespace {

fs::path temp_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("moescope_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

MoeConfig tiny_model_config() {
  MoeConfig c;
  c.num_experts = 2;
  c.top_k = 1;
  c.base_width = 16;
  c.input_size = 32;
  c.proj_dim = 16;
  c.gate_channels = 4;
  return c;
}

TrainConfig tiny_train_config() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 16;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and monotone decay") {
  const std::int64_t total = 1000;
  CHECK(cosine_lr(0, total, 3e-4, 1e-6) == doctest::Approx(3e-4).epsilon(1e-12));
  CHECK(cosine_lr(total, total, 3e-4, 1e-6) == doctest::Approx(1e-6).epsilon(1e-12));
  double prev = cosine_lr(0, total, 3e-4, 1e-6);
  for (std::int64_t s = 1; s <= total; s += 100) {
    const double lr = cosine_lr(s, total, 3e-4, 1e-6);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("global norm clipping rescales to exactly the threshold") {
  Tensor a = Tensor::zeros({3}, true);
  Tensor b = Tensor::zeros({2}, true);
  // gradient of global norm 10: [6,0,0] and [0,8]
  a.grad() = {6.0, 0.0, 0.0};
  b.grad() = {0.0, 8.0};
  std::vector<Tensor*> params{&a, &b};
  const double pre = clip_global_norm(params, 1.0);
  CHECK(pre == doctest::Approx(10.0).epsilon(1e-12));
  double post = 0.0;
  for (double g : a.grad()) post += g * g;
  for (double g : b.grad()) post += g * g;
  CHECK(std::fabs(std::sqrt(post) - 1.0) <= 1e-9);

  // below the threshold nothing changes
  a.grad() = {0.3, 0.0, 0.0};
  b.grad() = {0.0, 0.4};
  clip_global_norm(params, 1.0);
  CHECK(a.grad()[0] == 0.3);
  CHECK(b.grad()[1] == 0.4);
}

TEST_CASE("adam moves parameters against the gradient") {
  Tensor p = Tensor::from_vector({1.0, -2.0}, true);
  p.grad() = {0.5, -0.5};
  Adam opt(0.0);
  std::vector<Tensor*> params{&p};
  opt.step(params, 0.1);
  CHECK(p.data()[0] < 1.0);
  CHECK(p.data()[1] > -2.0);
}

TEST_CASE("kfold_split covers all indices with disjoint near-equal folds") {
  const auto folds = kfold_split(10, 5, 3);
  REQUIRE(folds.size() == 5);
  std::set<int> seen;
  for (const auto& f : folds) {
    CHECK(f.test_idx.size() == 2);
    CHECK(f.train_idx.size() == 8);
    for (int i : f.test_idx) CHECK(seen.insert(i).second);  // disjoint
  }
  CHECK(seen.size() == 10);

  // uneven sizes differ by at most one
  const auto folds7 = kfold_split(17, 7, 1);
  std::size_t mn = 99, mx = 0;
  for (const auto& f : folds7) {
    mn = std::min(mn, f.test_idx.size());
    mx = std::max(mx, f.test_idx.size());
  }
  CHECK(mx - mn <= 1);

  // same seed, same split
  const auto again = kfold_split(10, 5, 3);
  for (std::size_t i = 0; i < folds.size(); ++i) CHECK(folds[i].test_idx == again[i].test_idx);

  CHECK_THROWS_AS(kfold_split(10, 1, 0), ValidationError);
  CHECK_THROWS_AS(kfold_split(3, 5, 0), ValidationError);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.batch_size = 17;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = TrainConfig{};
  t.min_lr = 1.0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("fixed seed reproduces the loss trajectory bit for bit") {
  const Corpus corpus = synth_corpus(60, 32, 8, 17);
  const auto cfg = tiny_train_config();

  auto run = [&](const fs::path& dir) {
    MoeModel model = MoeModel::init(tiny_model_config(), cfg.seed);
    return train(model, corpus, cfg, dir);
  };
  const auto r1 = run(temp_dir("repro1"));
  const auto r2 = run(temp_dir("repro2"));
  REQUIRE(r1.steps.size() == r2.steps.size());
  CHECK(!r1.steps.empty());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].total == r2.steps[i].total);
    CHECK(r1.steps[i].nt_xent == r2.steps[i].nt_xent);
    CHECK(r1.steps[i].importance == r2.steps[i].importance);
  }
  for (std::size_t i = 0; i < r1.epochs.size(); ++i) {
    CHECK(r1.epochs[i].val_total == r2.epochs[i].val_total);
    CHECK(std::isfinite(r1.epochs[i].top2_agreement));
  }

  // (seed, config, corpus) fully determines every parameter value
  MoeModel m1 = MoeModel::init(tiny_model_config(), cfg.seed);
  MoeModel m2 = MoeModel::init(tiny_model_config(), cfg.seed);
  train(m1, corpus, cfg, temp_dir("repro3"));
  train(m2, corpus, cfg, temp_dir("repro4"));
  std::vector<double> p1, p2;
  m1.visit_params([&](const std::string&, Tensor& t) {
    p1.insert(p1.end(), t.vec().begin(), t.vec().end());
  });
  m2.visit_params([&](const std::string&, Tensor& t) {
    p2.insert(p2.end(), t.vec().begin(), t.vec().end());
  });
  REQUIRE(p1.size() == p2.size());
  CHECK(p1 == p2);
}

TEST_CASE("checkpoint retention keeps top-k plus final and the csv logs exist") {
  const Corpus corpus = synth_corpus(60, 32, 8, 19);
  auto cfg = tiny_train_config();
  cfg.epochs = 5;
  cfg.keep_top = 3;
  const auto dir = temp_dir("ckpts");
  MoeModel model = MoeModel::init(tiny_model_config(), cfg.seed);
  const auto result = train(model, corpus, cfg, dir);

  // exactly keep_top + final model files
  std::size_t model_files = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".moek") ++model_files;
  }
  CHECK(model_files == 4);
  CHECK(result.kept_checkpoints.size() == 3);
  CHECK(fs::exists(result.final_checkpoint));
  CHECK(fs::exists(dir / "loss.csv"));
  CHECK(fs::exists(dir / "val.csv"));

  // kept checkpoints are sorted by validation loss
  std::ifstream is(result.kept_checkpoints.front(), std::ios::binary);
  std::string extra;
  MoeModel::load(is, &extra);
  CHECK(extra.find("val_total") != std::string::npos);

  // loss.csv carries the documented columns
  std::ifstream lcsv(dir / "loss.csv");
  std::string header;
  std::getline(lcsv, header);
  CHECK(header == "epoch,step,nt_xent,importance,total");
}

TEST_CASE("resume continues the cosine schedule at the recorded epoch") {
  const Corpus corpus = synth_corpus(60, 32, 8, 23);
  auto cfg = tiny_train_config();
  cfg.epochs = 4;

  // full run
  const auto dir_full = temp_dir("resume_full");
  MoeModel full = MoeModel::init(tiny_model_config(), cfg.seed);
  const auto r_full = train(full, corpus, cfg, dir_full);

  // two epochs, then resume from the final checkpoint for the rest
  auto cfg_head = cfg;
  cfg_head.epochs = 2;
  const auto dir_head = temp_dir("resume_head");
  MoeModel head = MoeModel::init(tiny_model_config(), cfg.seed);
  train(head, corpus, cfg_head, dir_head);

  const auto dir_tail = temp_dir("resume_tail");
  std::ifstream is(dir_head / "final.moek", std::ios::binary);
  std::string extra;
  MoeModel resumed = MoeModel::load(is, &extra);
  const int recorded_epoch = 1;  // 0-based last epoch of the head run
  CHECK(extra.find("\"epoch\":1") != std::string::npos);
  const auto r_tail = train(resumed, corpus, cfg, dir_tail, recorded_epoch + 1);

  // the resumed run starts at the schedule position of the full run
  const auto steps_per_epoch = r_full.steps.size() / 4;
  REQUIRE(r_tail.steps.size() == 2 * steps_per_epoch);
  CHECK(r_tail.steps.front().step == static_cast<std::int64_t>(2 * steps_per_epoch));
  CHECK(r_tail.steps.front().lr ==
        doctest::Approx(r_full.steps[2 * steps_per_epoch].lr).epsilon(1e-12));
  CHECK(r_tail.steps.back().lr == doctest::Approx(r_full.steps.back().lr).epsilon(1e-12));
}

TEST_CASE("training rejects a corpus smaller than one batch") {
  const Corpus corpus = synth_corpus(8, 32, 8, 29);
  auto cfg = tiny_train_config();
  cfg.batch_size = 32;
  MoeModel model = MoeModel::init(tiny_model_config(), 1);
  CHECK_THROWS_AS(train(model, corpus, cfg, temp_dir("small")), ValidationError);
}

TEST_CASE("validation-style loss is deterministic and finite") {
  const Corpus corpus = synth_corpus(24, 32, 8, 31);
  MoeModel model = MoeModel::init(tiny_model_config(), 7);
  nd::Tensor views = nd::gather_rows(corpus.images, {0, 1, 2, 3, 4, 5, 6, 7});
  LossConfig lc;
  const auto a = eval_batch_loss(model, views, lc);
  const auto b = eval_batch_loss(model, views, lc);
  CHECK(a.total.item() == b.total.item());
  CHECK(std::isfinite(a.total.item()));
  CHECK(a.total.item() ==
        doctest::Approx(a.contrastive.item() + a.importance.item()).epsilon(1e-12));
}
