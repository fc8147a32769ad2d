#include "moescope/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "moescope/corpus.hpp"
#include "moescope/manifest.hpp"
#include "moescope/model.hpp"
#include "moescope/report.hpp"
#include "moescope/train.hpp"

namespace moescope::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void diagnostic(const char* category, const std::string& what) {
  json j;
  j["error"] = category;
  j["what"] = what;
  std::cerr << j.dump() << "\n";
}

json load_config_file(int argc, const char* const* argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      std::ifstream is(argv[i + 1]);
      if (!is) throw ValidationError("cannot read config file: " + std::string(argv[i + 1]));
      return json::parse(is);
    }
  }
  return json::object();
}

std::uint64_t default_seed(const json& cfg) {
  if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
  if (const char* env = std::getenv("MOESCOPE_SEED")) {
    return static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
  }
  return 1;
}

// '*' wildcard matching within one path component
bool wild_match(const std::string& name, const std::string& pat) {
  std::size_t np = 0, star = std::string::npos, resume = std::string::npos;
  std::size_t i = 0;
  while (i < name.size()) {
    if (np < pat.size() && pat[np] == name[i]) {
      ++np;
      ++i;
    } else if (np < pat.size() && pat[np] == '*') {
      star = np++;
      resume = i;
    } else if (star != std::string::npos) {
      np = star + 1;
      i = ++resume;
    } else {
      return false;
    }
  }
  while (np < pat.size() && pat[np] == '*') ++np;
  return np == pat.size();
}

void glob_walk(const fs::path& base, const std::vector<std::string>& comps, std::size_t idx,
               std::vector<fs::path>& out) {
  if (idx == comps.size()) {
    if (fs::is_regular_file(base)) out.push_back(base);
    return;
  }
  const std::string& comp = comps[idx];
  if (comp.find('*') == std::string::npos) {
    glob_walk(base / comp, comps, idx + 1, out);
    return;
  }
  if (!fs::is_directory(base)) return;
  for (const auto& entry : fs::directory_iterator(base)) {
    if (wild_match(entry.path().filename().string(), comp)) {
      glob_walk(entry.path(), comps, idx + 1, out);
    }
  }
}

// component-wise glob: each path component may contain '*'
std::vector<fs::path> glob_paths(const std::string& pattern) {
  std::vector<std::string> comps;
  fs::path base = ".";
  fs::path pat(pattern);
  if (pat.is_absolute()) base = pat.root_path();
  for (const auto& part : pat.relative_path()) comps.push_back(part.string());
  std::vector<fs::path> out;
  glob_walk(base, comps, 0, out);
  std::sort(out.begin(), out.end());
  return out;
}

MoeModel load_model_file(const fs::path& p, std::string* extra = nullptr) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot read checkpoint: " + p.string());
  return MoeModel::load(is, extra);
}

int cmd_gen(const json& jc, std::int64_t n, int size, int dims, std::uint64_t seed,
            const fs::path& out_dir, const std::string& name) {
  fs::create_directories(out_dir);
  const Corpus corpus = synth_corpus(n, size, dims, seed);
  const fs::path file = out_dir / name;
  save_corpus_file(file, corpus);

  json resolved = jc;
  resolved["command"] = "gen";
  resolved["n"] = n;
  resolved["size"] = size;
  resolved["dims"] = dims;
  resolved["seed"] = seed;
  ManifestBuilder mb("gen", resolved.dump());
  mb.add_artifact(file);
  mb.write(out_dir / "manifest.json");

  std::int64_t organic = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (corpus.factors.data()[i * dims] < 0.5) ++organic;
  }
  std::cout << "corpus: n=" << n << " size=" << size << " dims=" << dims << " organic=" << organic
            << " geometric=" << (n - organic) << " file=" << file.string()
            << " hash=" << file_hash_hex(file) << "\n";
  return 0;
}

int cmd_train(const json& jc, const fs::path& corpus_path, const fs::path& out_dir,
              MoeConfig mcfg, TrainConfig tcfg, const fs::path& resume) {
  const Corpus corpus = load_corpus_file(corpus_path);
  mcfg.input_size = corpus.image_size();

  MoeModel model = MoeModel::init(mcfg, tcfg.seed);
  int start_epoch = 0;
  if (!resume.empty()) {
    std::string extra;
    model = load_model_file(resume, &extra);
    if (!(model.config() == mcfg)) {
      throw ValidationError("resume: checkpoint config differs from the requested configuration");
    }
    const json je = json::parse(extra);
    start_epoch = je.value("epoch", -1) + 1;
  }

  const TrainResult result = train(model, corpus, tcfg, out_dir, start_epoch);

  json resolved = jc;
  resolved["command"] = "train";
  resolved["model"] = json::parse(mcfg.to_json());
  resolved["epochs"] = tcfg.epochs;
  resolved["batch_size"] = tcfg.batch_size;
  resolved["lr"] = tcfg.lr;
  resolved["weight_decay"] = tcfg.weight_decay;
  resolved["min_lr"] = tcfg.min_lr;
  resolved["clip_norm"] = tcfg.clip_norm;
  resolved["seed"] = tcfg.seed;
  ManifestBuilder mb("train", resolved.dump());
  mb.add_input(corpus_path);
  if (!resume.empty()) mb.add_input(resume);
  for (const auto& p : result.kept_checkpoints) mb.add_artifact(p);
  mb.add_artifact(result.final_checkpoint);
  mb.add_artifact(out_dir / "loss.csv");
  mb.add_artifact(out_dir / "val.csv");
  mb.write(out_dir / "manifest.json");

  const auto& last = result.epochs.back();
  std::cout << "train: epochs=" << tcfg.epochs << " val_total=" << last.val_total
            << " top2_agreement=" << last.top2_agreement
            << " min_route_share=" << last.min_route_share
            << " checkpoints=" << result.kept_checkpoints.size() + 1 << "\n";
  return 0;
}

int cmd_probe(const json& jc, const fs::path& corpus_path, const fs::path& ckpt,
              const fs::path& out_dir, const report::ProbeOptions& opt,
              const fs::path& factors_csv) {
  Corpus corpus = load_corpus_file(corpus_path);
  if (!factors_csv.empty()) {
    std::ifstream is(factors_csv);
    if (!is) throw ValidationError("cannot read factors csv: " + factors_csv.string());
    attach_factors_csv(corpus, is);
  }
  MoeModel model = load_model_file(ckpt);
  const auto artifacts = report::write_probe_bundle(out_dir, model, corpus, opt);

  json resolved = jc;
  resolved["command"] = "probe";
  resolved["seed"] = opt.seed;
  resolved["top_m"] = opt.top_m;
  resolved["weighted_routing"] = opt.weighted_routing;
  ManifestBuilder mb("probe", resolved.dump());
  mb.add_input(corpus_path);
  if (!factors_csv.empty()) mb.add_input(factors_csv);
  mb.add_input(ckpt);
  for (const auto& p : artifacts) mb.add_artifact(p);
  mb.write(out_dir / "manifest.json");
  std::cout << "probe: wrote " << artifacts.size() << " artifacts to " << out_dir.string() << "\n";
  return 0;
}

int cmd_stability(const json& jc, const fs::path& corpus_path, std::vector<fs::path> ckpts,
                  const std::string& glob, const fs::path& out_dir,
                  const report::StabilityOptions& opt) {
  if (!glob.empty()) {
    const auto found = glob_paths(glob);
    ckpts.insert(ckpts.end(), found.begin(), found.end());
  }
  if (ckpts.size() < 2) {
    throw ValidationError("stability: need at least 2 checkpoints, got " +
                          std::to_string(ckpts.size()));
  }
  const Corpus corpus = load_corpus_file(corpus_path);
  std::vector<MoeModel> models;
  for (const auto& p : ckpts) models.push_back(load_model_file(p));
  const auto artifacts = report::write_stability_bundle(out_dir, models, corpus, opt);

  json resolved = jc;
  resolved["command"] = "stability";
  resolved["reference_images"] = opt.reference_images;
  ManifestBuilder mb("stability", resolved.dump());
  mb.add_input(corpus_path);
  for (const auto& p : ckpts) mb.add_input(p);
  for (const auto& p : artifacts) mb.add_artifact(p);
  mb.write(out_dir / "manifest.json");
  std::cout << "stability: " << ckpts.size() << " models, wrote " << artifacts.size()
            << " artifacts to " << out_dir.string() << "\n";
  return 0;
}

int cmd_report(const json& jc, const fs::path& summary, const fs::path& out_dir) {
  const auto artifacts = report::render_from_summary(summary, out_dir);
  json resolved = jc;
  resolved["command"] = "report";
  ManifestBuilder mb("report", resolved.dump());
  mb.add_input(summary);
  for (const auto& p : artifacts) mb.add_artifact(p);
  mb.write(out_dir / "manifest.json");
  std::cout << "report: rendered " << artifacts.size() << " plots to " << out_dir.string() << "\n";
  return 0;
}

int run_impl(int argc, const char* const* argv) {
  const json jc = load_config_file(argc, argv);

  CLI::App app{"sparse contrastive MoE-CNN and expert-interpretability toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values");

  // gen
  auto jgen = jc.value("gen", json::object());
  auto* gen = app.add_subcommand("gen", "generate a synthetic two-domain corpus");
  std::int64_t gen_n = jgen.value("n", 8000);
  int gen_size = jgen.value("size", 32);
  int gen_dims = jgen.value("dims", 8);
  std::uint64_t gen_seed = jgen.value("seed", default_seed(jc));
  std::string gen_out = jgen.value("out", std::string("."));
  std::string gen_name = jgen.value("name", std::string("corpus.moec"));
  gen->add_option("--n", gen_n, "image count");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--dims", gen_dims, "latent factor dimensions (>= 2)");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--name", gen_name, "corpus file name");

  // train
  auto jtr = jc.value("train", json::object());
  auto* tr = app.add_subcommand("train", "contrastive training with checkpoint retention");
  std::string tr_corpus = jtr.value("corpus", std::string());
  std::string tr_out = jtr.value("out", std::string("run"));
  std::string tr_resume = jtr.value("resume", std::string());
  MoeConfig mcfg;
  mcfg.num_experts = jtr.value("experts", 4);
  mcfg.top_k = jtr.value("topk", 2);
  mcfg.base_width = jtr.value("base_width", 64);
  mcfg.proj_dim = jtr.value("proj_dim", 128);
  mcfg.gate_channels = jtr.value("gate_channels", 16);
  bool no_noise = jtr.value("no_noise", false);
  TrainConfig tcfg;
  tcfg.epochs = jtr.value("epochs", 20);
  tcfg.batch_size = jtr.value("batch", 128);
  tcfg.lr = jtr.value("lr", 3e-4);
  tcfg.weight_decay = jtr.value("weight_decay", 1e-5);
  tcfg.min_lr = jtr.value("min_lr", 1e-6);
  tcfg.clip_norm = jtr.value("clip", 1.0);
  tcfg.seed = jtr.value("seed", default_seed(jc));
  tcfg.val_fraction = jtr.value("val_fraction", 0.1);
  tcfg.keep_top = jtr.value("keep_top", 3);
  tcfg.loss.temperature = jtr.value("temperature", 0.5);
  tcfg.loss.importance_weight = jtr.value("importance_weight", 0.1);
  tr->add_option("--corpus", tr_corpus, "corpus file")->required();
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--experts", mcfg.num_experts, "expert count E");
  tr->add_option("--topk", mcfg.top_k, "active experts per image");
  tr->add_option("--base-width", mcfg.base_width, "width scale (256 = reference widths)");
  tr->add_option("--proj-dim", mcfg.proj_dim, "projection head output width");
  tr->add_option("--gate-channels", mcfg.gate_channels, "gate conv channels");
  tr->add_flag("--no-noise", no_noise, "disable noisy gating");
  tr->add_option("--epochs", tcfg.epochs, "training epochs");
  tr->add_option("--batch", tcfg.batch_size, "view rows per step (two per origin)");
  tr->add_option("--lr", tcfg.lr, "peak learning rate");
  tr->add_option("--weight-decay", tcfg.weight_decay, "Adam weight decay");
  tr->add_option("--min-lr", tcfg.min_lr, "cosine floor");
  tr->add_option("--clip", tcfg.clip_norm, "global gradient norm clip");
  tr->add_option("--temperature", tcfg.loss.temperature, "NT-Xent temperature");
  tr->add_option("--importance-weight", tcfg.loss.importance_weight, "importance loss weight");
  tr->add_option("--val-fraction", tcfg.val_fraction, "validation split fraction");
  tr->add_option("--keep-top", tcfg.keep_top, "checkpoints retained by validation loss");
  tr->add_option("--seed", tcfg.seed, "training seed");

  // probe
  auto jpr = jc.value("probe", json::object());
  auto* pr = app.add_subcommand("probe", "run the expert-interpretability analyses");
  std::string pr_corpus = jpr.value("corpus", std::string());
  std::string pr_ckpt = jpr.value("ckpt", std::string());
  std::string pr_out = jpr.value("out", std::string("probe_out"));
  std::string pr_factors = jpr.value("factors_csv", std::string());
  report::ProbeOptions popt;
  popt.seed = jpr.value("seed", default_seed(jc));
  popt.top_m = jpr.value("top_m", 3);
  popt.mei_count = jpr.value("mei_count", 8);
  popt.weighted_routing = jpr.value("weighted_routing", false);
  popt.run_lasso = !jpr.value("skip_lasso", false);
  popt.run_separability = !jpr.value("skip_separability", false);
  bool skip_lasso = false, skip_sep = false;
  pr->add_option("--corpus", pr_corpus, "corpus file")->required();
  pr->add_option("--ckpt", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--out", pr_out, "output directory");
  pr->add_option("--seed", popt.seed, "probe seed");
  pr->add_option("--top-m", popt.top_m, "dimensions per lasso row / routing panel images");
  pr->add_option("--mei-count", popt.mei_count, "images per MEI grid");
  pr->add_flag("--weighted-routing", popt.weighted_routing,
               "gate-weight-mass routing matrix instead of top-k membership");
  pr->add_flag("--skip-lasso", skip_lasso, "skip the dimension regressions");
  pr->add_flag("--skip-separability", skip_sep, "skip the pairwise separability matrices");
  pr->add_option("--factors-csv", pr_factors,
                 "replace the corpus dimension table with this CSV (header row of names)");

  // stability
  auto jst = jc.value("stability", json::object());
  auto* st = app.add_subcommand("stability", "representational stability across checkpoints");
  std::string st_corpus = jst.value("corpus", std::string());
  std::string st_out = jst.value("out", std::string("stability_out"));
  std::string st_glob = jst.value("ckpt_glob", std::string());
  std::vector<std::string> st_ckpts;
  if (jst.contains("ckpts")) st_ckpts = jst.at("ckpts").get<std::vector<std::string>>();
  report::StabilityOptions sopt;
  sopt.reference_images = jst.value("reference_images", 512);
  sopt.exemplars_per_cluster = jst.value("exemplars_per_cluster", 5);
  sopt.meis_per_exemplar = jst.value("meis_per_exemplar", 10);
  st->add_option("--corpus", st_corpus, "corpus file")->required();
  st->add_option("--out", st_out, "output directory");
  st->add_option("--ckpt", st_ckpts, "checkpoint file (repeatable)");
  st->add_option("--ckpt-glob", st_glob, "checkpoint glob, e.g. 'runs/*/final.moek'");
  st->add_option("--ref-images", sopt.reference_images, "reference image count for the RDMs");
  st->add_option("--exemplars", sopt.exemplars_per_cluster, "exemplar experts per cluster");
  st->add_option("--meis", sopt.meis_per_exemplar, "MEIs per exemplar expert");

  // report
  auto jrp = jc.value("report", json::object());
  auto* rp = app.add_subcommand("report", "re-render plots from a summary.json");
  std::string rp_summary = jrp.value("summary", std::string());
  std::string rp_out = jrp.value("out", std::string("report_out"));
  rp->add_option("--summary", rp_summary, "summary.json from probe or stability")->required();
  rp->add_option("--out", rp_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (skip_lasso) popt.run_lasso = false;
  if (skip_sep) popt.run_separability = false;

  if (gen->parsed()) return cmd_gen(jc, gen_n, gen_size, gen_dims, gen_seed, gen_out, gen_name);
  if (tr->parsed()) {
    if (no_noise) mcfg.noise_enabled = false;
    return cmd_train(jc, tr_corpus, tr_out, mcfg, tcfg, tr_resume);
  }
  if (pr->parsed()) return cmd_probe(jc, pr_corpus, pr_ckpt, pr_out, popt, pr_factors);
  if (st->parsed()) {
    std::vector<fs::path> ckpts(st_ckpts.begin(), st_ckpts.end());
    return cmd_stability(jc, st_corpus, ckpts, st_glob, st_out, sopt);
  }
  if (rp->parsed()) return cmd_report(jc, rp_summary, rp_out);
  return 2;
}

}  // namespace

int run(int argc, const char* const* argv) {
  try {
    return run_impl(argc, argv);
  } catch (const NumericError& e) {
    diagnostic("numeric", e.what());
    return 3;
  } catch (const ValidationError& e) {
    diagnostic("validation", e.what());
    return 2;
  } catch (const std::exception& e) {
    diagnostic("validation", e.what());
    return 2;
  }
}

}  // namespace moescope::cli
