#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moescope/cli.hpp"
#include "moescope/ops.hpp"
#include "moescope/corpus.hpp"
#include "moescope/manifest.hpp"
#include "moescope/model.hpp"
#include "moescope/report.hpp"
#include "moescope/svg.hpp"
#include "moescope/rng.hpp"
#include "moescope/train.hpp"

using namespace moescope;
namespace fs = std::filesystem;
using nd::Shape;
using nd::Tensor;

namespace {

fs::path temp_dir(const std::string& tag) {
  const auto p = fs::temp_directory_path() / ("moescope_fmt_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(std::initializer_list<std::string> args) {
  std::vector<std::string> store{"moescope"};
  store.insert(store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : store) argv.push_back(s.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

MoeConfig tiny_config() {
  MoeConfig c;
  c.num_experts = 2;
  c.top_k = 1;
  c.base_width = 16;
  c.input_size = 32;
  c.proj_dim = 16;
  c.gate_channels = 4;
  return c;
}

}  // namespace

TEST_CASE("corpus file save -> load -> save is byte identical") {
  const auto dir = temp_dir("corpus_roundtrip");
  const Corpus c = synth_corpus(16, 32, 6, 99);
  save_corpus_file(dir / "a.moec", c);
  const Corpus l = load_corpus_file(dir / "a.moec");
  save_corpus_file(dir / "b.moec", l);
  CHECK(file_hash_hex(dir / "a.moec") == file_hash_hex(dir / "b.moec"));
}

TEST_CASE("checkpoint file save -> load -> save is byte identical") {
  const auto dir = temp_dir("ckpt_roundtrip");
  MoeModel m = MoeModel::init(tiny_config(), 5);
  {
    std::ofstream os(dir / "a.moek", std::ios::binary);
    m.save(os, R"({"epoch":3})");
  }
  std::ifstream is(dir / "a.moek", std::ios::binary);
  std::string extra;
  MoeModel l = MoeModel::load(is, &extra);
  {
    std::ofstream os(dir / "b.moek", std::ios::binary);
    l.save(os, extra);
  }
  CHECK(file_hash_hex(dir / "a.moek") == file_hash_hex(dir / "b.moek"));
}

TEST_CASE("svg emitters are byte stable and match the golden files") {
  Tensor m(Shape{2, 3}, std::vector<double>{0.1, 0.5, 0.9, 0.3, 0.7, 0.2});
  const std::string h1 = svg::heatmap(m, {"r0", "r1"}, {"c0", "c1", "c2"}, "demo");
  const std::string h2 = svg::heatmap(m, {"r0", "r1"}, {"c0", "c1", "c2"}, "demo");
  CHECK(h1 == h2);
  CHECK(h1.find("<svg") == 0);

  svg::ScatterSeries s;
  s.x = {0.0, 0.5, 1.0};
  s.y = {1.0, 0.25, 0.75};
  s.color_ids = {0, 1, 2};
  CHECK(svg::scatter(s, "t", "x", "y", true) == svg::scatter(s, "t", "x", "y", true));

  const std::vector<double> xs{2, 3, 4}, ys{0.1, 0.8, 0.4};
  CHECK(svg::line_chart(xs, ys, "t", "k", "s", 1) == svg::line_chart(xs, ys, "t", "k", "s", 1));

  const fs::path golden = fs::path(GOLDEN_DIR);
  CHECK(h1 == slurp(golden / "heatmap_2x3.svg"));
  CHECK(svg::scatter(s, "t", "x", "y", true) == slurp(golden / "scatter_small.svg"));
  CHECK(svg::line_chart(xs, ys, "t", "k", "s", 1) == slurp(golden / "line_small.svg"));
}

TEST_CASE("probe bundle is byte stable across identical runs") {
  const auto dir_a = temp_dir("bundle_a");
  const auto dir_b = temp_dir("bundle_b");
  Corpus corpus = synth_corpus(120, 32, 6, 13);
  MoeModel model = MoeModel::init(tiny_config(), 7);
  report::ProbeOptions opt;
  opt.seed = 3;
  opt.mei_count = 4;
  const auto arts_a = report::write_probe_bundle(dir_a, model, corpus, opt);
  const auto arts_b = report::write_probe_bundle(dir_b, model, corpus, opt);
  REQUIRE(arts_a.size() == arts_b.size());
  for (std::size_t i = 0; i < arts_a.size(); ++i) {
    INFO(arts_a[i].filename().string());
    CHECK(file_hash_hex(arts_a[i]) == file_hash_hex(arts_b[i]));
  }
  CHECK(fs::exists(dir_a / "routing_matrix.csv"));
  CHECK(fs::exists(dir_a / "agreement.csv"));
  CHECK(fs::exists(dir_a / "lasso_gating.csv"));
  CHECK(fs::exists(dir_a / "lasso_readout.csv"));
  CHECK(fs::exists(dir_a / "separability_expert0.csv"));
  CHECK(fs::exists(dir_a / "gating_vs_readout_expert1.svg"));
  CHECK(fs::exists(dir_a / "mei_expert0.svg"));
  CHECK(fs::exists(dir_a / "summary.json"));
}

TEST_CASE("manifest records config and artifact hashes") {
  const auto dir = temp_dir("manifest");
  {
    std::ofstream os(dir / "artifact.txt");
    os << "payload";
  }
  ManifestBuilder mb("demo", R"({"alpha":1})");
  mb.add_artifact(dir / "artifact.txt");
  mb.write(dir / "manifest.json");
  const std::string text = slurp(dir / "manifest.json");
  CHECK(text.find("\"command\": \"demo\"") != std::string::npos);
  CHECK(text.find("config_hash") != std::string::npos);
  CHECK(text.find("artifact.txt") != std::string::npos);
  CHECK(string_hash_hex(R"({"alpha":1})") == string_hash_hex(R"({"alpha":1})"));
}

TEST_CASE("cli: gen is deterministic, validates dims, and honors the env seed") {
  const auto dir = temp_dir("cli_gen");
  CHECK(run_cli({"gen", "--n", "12", "--size", "32", "--dims", "4", "--seed", "9", "--out",
                 (dir / "a").string()}) == 0);
  CHECK(run_cli({"gen", "--n", "12", "--size", "32", "--dims", "4", "--seed", "9", "--out",
                 (dir / "b").string()}) == 0);
  CHECK(file_hash_hex(dir / "a" / "corpus.moec") == file_hash_hex(dir / "b" / "corpus.moec"));
  CHECK(fs::exists(dir / "a" / "manifest.json"));

  // dims=1 violates the domain-factor contract -> validation exit code
  CHECK(run_cli({"gen", "--n", "4", "--dims", "1", "--out", (dir / "c").string()}) == 2);

  // MOESCOPE_SEED fallback matches an explicit --seed
  setenv("MOESCOPE_SEED", "9", 1);
  CHECK(run_cli({"gen", "--n", "12", "--size", "32", "--dims", "4", "--out",
                 (dir / "env").string()}) == 0);
  unsetenv("MOESCOPE_SEED");
  CHECK(file_hash_hex(dir / "env" / "corpus.moec") == file_hash_hex(dir / "a" / "corpus.moec"));
}

TEST_CASE("cli: missing inputs exit with the validation code") {
  const auto dir = temp_dir("cli_missing");
  CHECK(run_cli({"train", "--corpus", (dir / "nope.moec").string(), "--out",
                 (dir / "run").string()}) == 2);
  CHECK(run_cli({"probe", "--corpus", (dir / "nope.moec").string(), "--ckpt",
                 (dir / "nope.moek").string()}) == 2);
  CHECK(run_cli({"report", "--summary", (dir / "nope.json").string()}) == 2);
}

TEST_CASE("cli: full mini pipeline gen -> train x2 -> probe -> stability -> report") {
  const auto dir = temp_dir("cli_pipeline");
  REQUIRE(run_cli({"gen", "--n", "120", "--size", "32", "--dims", "6", "--seed", "21", "--out",
                   dir.string()}) == 0);
  const std::string corpus = (dir / "corpus.moec").string();

  auto train_one = [&](int seed, const std::string& out) {
    return run_cli({"train",        "--corpus",        corpus,
                    "--out",        out,               "--experts",
                    "2",            "--topk",          "1",
                    "--base-width", "16",              "--proj-dim",
                    "16",           "--gate-channels", "4",
                    "--epochs",     "1",               "--batch",
                    "8",            "--seed",          std::to_string(seed)});
  };
  REQUIRE(train_one(1, (dir / "run1").string()) == 0);
  REQUIRE(train_one(2, (dir / "run2").string()) == 0);
  CHECK(fs::exists(dir / "run1" / "final.moek"));
  CHECK(fs::exists(dir / "run1" / "loss.csv"));
  CHECK(fs::exists(dir / "run1" / "manifest.json"));

  REQUIRE(run_cli({"probe", "--corpus", corpus, "--ckpt", (dir / "run1" / "final.moek").string(),
                   "--out", (dir / "probe").string(), "--seed", "4", "--mei-count", "4"}) == 0);
  CHECK(fs::exists(dir / "probe" / "summary.json"));
  CHECK(fs::exists(dir / "probe" / "routing_matrix.svg"));

  // checkpoint glob spanning the run directories
  REQUIRE(run_cli({"stability", "--corpus", corpus, "--ckpt-glob",
                   dir.string() + "/run*/final.moek", "--out", (dir / "stab").string(),
                   "--ref-images", "48"}) == 0);
  CHECK(fs::exists(dir / "stab" / "summary.json"));
  CHECK(fs::exists(dir / "stab" / "silhouette_curve.csv"));
  CHECK(fs::exists(dir / "stab" / "mds.svg"));

  REQUIRE(run_cli({"report", "--summary", (dir / "stab" / "summary.json").string(), "--out",
                   (dir / "rerender").string()}) == 0);
  CHECK(fs::exists(dir / "rerender" / "stability_similarity.svg"));
  CHECK(fs::exists(dir / "rerender" / "mds.svg"));

  // re-rendered plots match the originals byte for byte
  CHECK(file_hash_hex(dir / "rerender" / "mds.svg") == file_hash_hex(dir / "stab" / "mds.svg"));

  // stability with a single checkpoint is rejected
  CHECK(run_cli({"stability", "--corpus", corpus, "--ckpt",
                 (dir / "run1" / "final.moek").string(), "--out", (dir / "stab2").string()}) == 2);
}

TEST_CASE("cli: config file values apply and flags override them") {
  const auto dir = temp_dir("cli_config");
  {
    std::ofstream os(dir / "cfg.json");
    os << R"({"seed": 77, "gen": {"n": 10, "size": 32, "dims": 4, "out": ")"
       << (dir / "fromcfg").string() << R"("}})";
  }
  CHECK(run_cli({"--config", (dir / "cfg.json").string(), "gen"}) == 0);
  CHECK(fs::exists(dir / "fromcfg" / "corpus.moec"));
  // flag overrides the config's n
  CHECK(run_cli({"--config", (dir / "cfg.json").string(), "gen", "--n", "14", "--out",
                 (dir / "override").string()}) == 0);
  const Corpus c = load_corpus_file(dir / "override" / "corpus.moec");
  CHECK(c.size() == 14);
}

TEST_CASE("checkpoint loading rejects a tensor whose shape disagrees with the config") {
  // hand-build a checkpoint whose first tensor has the wrong shape
  MoeModel m = MoeModel::init(tiny_config(), 3);
  std::string first_name;
  m.visit_params([&](const std::string& nm, Tensor&) {
    if (first_name.empty()) first_name = nm;
  });
  std::stringstream os;
  const std::string hdr = std::string(R"({"config":)") + m.config().to_json() + R"(,"extra":{}})";
  os.write("MOEK", 4);
  const std::uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t hlen = hdr.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os << hdr;
  const std::uint64_t count = 1;
  os.write(reinterpret_cast<const char*>(&count), 8);
  const auto nlen = static_cast<std::uint32_t>(first_name.size());
  os.write(reinterpret_cast<const char*>(&nlen), 4);
  os << first_name;
  nd::write_ndt1(os, Tensor::zeros({1, 2, 3}));  // wrong shape on purpose
  CHECK_THROWS_WITH_AS(MoeModel::load(os), doctest::Contains("shape"), ValidationError);
}

TEST_CASE("cli: probe accepts a replacement dimension table from csv") {
  const auto dir = temp_dir("cli_factors");
  REQUIRE(run_cli({"gen", "--n", "80", "--size", "32", "--dims", "4", "--seed", "3", "--out",
                   dir.string()}) == 0);
  const std::string corpus = (dir / "corpus.moec").string();
  REQUIRE(run_cli({"train", "--corpus", corpus, "--out", (dir / "run").string(), "--experts",
                   "2", "--topk", "1", "--base-width", "16", "--proj-dim", "16",
                   "--gate-channels", "4", "--epochs", "1", "--batch", "8", "--seed", "1"}) == 0);
  {
    std::ofstream os(dir / "dims.csv");
    os << "alpha,beta\n";
    SequentialRng rng(5);
    for (int i = 0; i < 80; ++i) os << rng.uniform() << "," << rng.uniform() << "\n";
  }
  REQUIRE(run_cli({"probe", "--corpus", corpus, "--ckpt", (dir / "run" / "final.moek").string(),
                   "--out", (dir / "probe").string(), "--factors-csv", (dir / "dims.csv").string(),
                   "--mei-count", "4", "--skip-separability"}) == 0);
  const std::string lasso = slurp(dir / "probe" / "lasso_readout.csv");
  CHECK(lasso.find("alpha") != std::string::npos);  // the imported names label the rows

  // a wrong-sized table is a validation failure
  {
    std::ofstream os(dir / "bad.csv");
    os << "a\n1\n2\n";
  }
  CHECK(run_cli({"probe", "--corpus", corpus, "--ckpt", (dir / "run" / "final.moek").string(),
                 "--out", (dir / "probe2").string(), "--factors-csv",
                 (dir / "bad.csv").string()}) == 2);
}
