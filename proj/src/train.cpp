#include "moescope/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "moescope/augment.hpp"
#include "moescope/probe.hpp"

namespace moescope {

using nd::Mode;
using nd::Shape;
using nd::Tape;
using nd::Tensor;

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (batch_size < 4 || batch_size % 2 != 0) {
    throw ValidationError("train config: batch_size must be even and >= 4 (paired views)");
  }
  if (!(lr > min_lr) || !(min_lr > 0.0)) {
    throw ValidationError("train config: require lr > min_lr > 0");
  }
  if (weight_decay < 0.0 || clip_norm <= 0.0) {
    throw ValidationError("train config: bad weight_decay/clip_norm");
  }
  if (!(val_fraction > 0.0) || !(val_fraction < 1.0)) {
    throw ValidationError("train config: val_fraction must be in (0,1)");
  }
  if (keep_top < 1) throw ValidationError("train config: keep_top must be >= 1");
  loss.validate();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr0, double min_lr) {
  if (total_steps <= 0) return min_lr;
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return min_lr + 0.5 * (lr0 - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

double clip_global_norm(const std::vector<Tensor*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    if (!p->has_grad()) continue;
    for (double g : p->grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto* p : params) {
      if (!p->has_grad()) continue;
      for (auto& g : p->grad()) g *= scale;
    }
  }
  return norm;
}

void Adam::step(const std::vector<Tensor*>& params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params[i]->numel()), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ValidationError("adam: parameter list changed size");
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    auto& g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    double* x = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double gj = g[j] + wd_ * x[j];
      m[j] = b1_ * m[j] + (1.0 - b1_) * gj;
      v[j] = b2_ * v[j] + (1.0 - b2_) * gj * gj;
      x[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

std::vector<FoldSplit> kfold_split(int n, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("kfold: k must be >= 2");
  if (k > n) throw ValidationError("kfold: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  SequentialRng rng(RandomStream(seed).child(0x6b666f6cull).seed());
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.index(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  const int base = n / k, extra = n % k;
  int pos = 0;
  for (int f = 0; f < k; ++f) {
    const int sz = base + (f < extra ? 1 : 0);
    auto& fold = folds[static_cast<std::size_t>(f)];
    fold.test_idx.assign(order.begin() + pos, order.begin() + pos + sz);
    pos += sz;
  }
  for (int f = 0; f < k; ++f) {
    auto& fold = folds[static_cast<std::size_t>(f)];
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      const auto& src = folds[static_cast<std::size_t>(g)].test_idx;
      fold.train_idx.insert(fold.train_idx.end(), src.begin(), src.end());
    }
  }
  return folds;
}

// --- training loop ---------------------------------------------------------

namespace {

Tensor build_views(const Corpus& corpus, const std::vector<int>& origins,
                   const AugmentConfig& aug, const RandomStream& seeds, std::int64_t seed_base) {
  const int s = aug.out_size;
  const auto rows = static_cast<std::int64_t>(origins.size()) * 2;
  Tensor views(Shape{rows, 3, s, s});
  const auto plane = static_cast<std::int64_t>(3) * s * s;
  for (std::size_t j = 0; j < origins.size(); ++j) {
    const int idx = origins[j];
    Tensor img = nd::gather_rows(corpus.images, {idx});
    img = nd::reshape(img, {3, s, s});
    auto [a, b] = augment_pair(
        img, aug, seeds.bits(static_cast<std::uint64_t>(seed_base) + static_cast<std::uint64_t>(idx)));
    std::copy_n(a.data(), plane, views.data() + static_cast<std::int64_t>(2 * j) * plane);
    std::copy_n(b.data(), plane, views.data() + static_cast<std::int64_t>(2 * j + 1) * plane);
  }
  return views;
}

struct RouteStats {
  double min_share = 1.0;
};

RouteStats route_shares(MoeModel& model, const Corpus& corpus, const std::vector<int>& idx,
                        const AugmentConfig& aug) {
  const int e_count = model.config().num_experts;
  const int k = model.config().top_k;
  std::vector<std::int64_t> counts(static_cast<std::size_t>(e_count), 0);
  const int s = corpus.image_size();
  const auto plane = static_cast<std::int64_t>(s) * s;
  const std::size_t chunk = 256;
  for (std::size_t at = 0; at < idx.size(); at += chunk) {
    std::vector<int> part(idx.begin() + static_cast<std::ptrdiff_t>(at),
                          idx.begin() + static_cast<std::ptrdiff_t>(std::min(at + chunk, idx.size())));
    Tensor imgs = nd::gather_rows(corpus.images, part);
    imgs = nd::reshape(imgs, {static_cast<std::int64_t>(part.size()), 3, s, s});
    for (std::int64_t i = 0; i < imgs.dim(0); ++i) {
      for (int ch = 0; ch < 3; ++ch) {
        double* p = imgs.data() + (i * 3 + ch) * plane;
        const double m = aug.norm_mean[static_cast<std::size_t>(ch)];
        const double sd = aug.norm_std[static_cast<std::size_t>(ch)];
        for (std::int64_t q = 0; q < plane; ++q) p[q] = (p[q] - m) / sd;
      }
    }
    Tensor h = model.shared_forward(imgs, Mode::kEval);
    Tensor lg = model.gate_branch(h, model.gate_g(), Mode::kEval);
    for (std::size_t r = 0; r < part.size(); ++r) {
      auto sel = nd::topk_indices(
          std::span<const double>(lg.data() + static_cast<std::int64_t>(r) * e_count,
                                  static_cast<std::size_t>(e_count)),
          k);
      for (int e : sel) ++counts[static_cast<std::size_t>(e)];
    }
  }
  RouteStats rs;
  const double denom = static_cast<double>(idx.size()) * k;
  for (auto c : counts) rs.min_share = std::min(rs.min_share, static_cast<double>(c) / denom);
  return rs;
}

void write_loss_csv(const std::filesystem::path& p, const std::vector<StepLog>& steps) {
  std::ofstream os(p);
  os << "epoch,step,nt_xent,importance,total\n";
  char buf[256];
  for (const auto& s : steps) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.10g,%.10g,%.10g\n", s.epoch,
                  static_cast<long long>(s.step), s.nt_xent, s.importance, s.total);
    os << buf;
  }
}

void write_val_csv(const std::filesystem::path& p, const std::vector<EpochLog>& epochs) {
  std::ofstream os(p);
  os << "epoch,val_nt_xent,val_importance,val_total,top2_agreement,min_route_share\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.val_nt_xent,
                  e.val_importance, e.val_total, e.top2_agreement, e.min_route_share);
    os << buf;
  }
}

}  // namespace

TotalLoss eval_batch_loss(MoeModel& model, const Tensor& views, const LossConfig& cfg) {
  Tape tape;  // values only; never differentiated
  auto tf = model.train_forward(views, tape, 0, Mode::kEval);
  return total_loss(tf.projected, nd::column_sum(tf.gate_weights), cfg);
}

TrainResult train(MoeModel& model, const Corpus& corpus, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, int start_epoch) {
  cfg.validate();
  corpus.validate();
  if (model.config().input_size != corpus.image_size()) {
    throw ValidationError("train: model input size " + std::to_string(model.config().input_size) +
                          " != corpus image size " + std::to_string(corpus.image_size()));
  }
  std::filesystem::create_directories(out_dir);

  const auto n = static_cast<int>(corpus.size());
  const int origins_per_batch = cfg.batch_size / 2;
  if (origins_per_batch < 2) throw ValidationError("train: need at least 2 origins per batch");

  const RandomStream root(cfg.seed);
  const RandomStream aug_seeds = root.child(0xA);
  const RandomStream val_aug_seeds = root.child(0xB);
  const RandomStream noise_seeds = root.child(0xC);

  // fixed validation split
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  {
    SequentialRng rng(root.child(0xD).seed());
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<int>(rng.index(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
  }
  const int val_n = std::max(2, static_cast<int>(std::lround(n * cfg.val_fraction)));
  std::vector<int> val_idx(order.begin(), order.begin() + val_n);
  std::vector<int> train_idx(order.begin() + val_n, order.end());
  if (static_cast<int>(train_idx.size()) < origins_per_batch) {
    throw ValidationError("train: corpus too small for the configured batch size");
  }

  const AugmentConfig aug = AugmentConfig::for_corpus(corpus);

  std::vector<Tensor*> params;
  model.visit_params([&](const std::string&, Tensor& t) { params.push_back(&t); });
  Adam opt(cfg.weight_decay);

  const auto steps_per_epoch =
      static_cast<std::int64_t>(train_idx.size()) / origins_per_batch;
  const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  std::int64_t global_step = static_cast<std::int64_t>(start_epoch) * steps_per_epoch;

  TrainResult result;
  std::vector<std::pair<double, std::filesystem::path>> best;  // (val_total, file)

  auto abort_nonfinite = [&](int epoch, std::int64_t step, const TotalLoss& tl) {
    nlohmann::json diag;
    diag["reason"] = "non-finite loss";
    diag["epoch"] = epoch;
    diag["step"] = step;
    diag["nt_xent"] = tl.contrastive.item();
    diag["importance"] = tl.importance.item();
    std::ofstream os(out_dir / "diagnostic.json");
    os << diag.dump(2) << "\n";
    throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                       std::to_string(step) + " (diagnostic snapshot written)");
  };

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    // epoch shuffle
    std::vector<int> sched = train_idx;
    {
      SequentialRng rng(root.child(0xE000 + static_cast<std::uint64_t>(epoch)).seed());
      for (int i = static_cast<int>(sched.size()) - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.index(static_cast<std::uint64_t>(i + 1)));
        std::swap(sched[static_cast<std::size_t>(i)], sched[static_cast<std::size_t>(j)]);
      }
    }

    for (std::int64_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<int> origins(sched.begin() + b * origins_per_batch,
                               sched.begin() + (b + 1) * origins_per_batch);
      Tensor views = build_views(corpus, origins, aug, aug_seeds,
                                 static_cast<std::int64_t>(epoch) * n);
      Tape tape;
      auto tf = model.train_forward(views, tape, noise_seeds.bits(static_cast<std::uint64_t>(global_step)));
      auto tl = total_loss(tf.projected, nd::column_sum(tf.gate_weights, &tape), cfg.loss, &tape);
      if (!std::isfinite(tl.total.item())) abort_nonfinite(epoch, global_step, tl);

      for (auto* p : params) p->zero_grad();
      tape.backward(tl.total);
      clip_global_norm(params, cfg.clip_norm);
      const double lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.min_lr);
      opt.step(params, lr);

      result.steps.push_back({epoch, global_step, lr, tl.contrastive.item(),
                              tl.importance.item(), tl.total.item()});
      ++global_step;
    }

    // validation + monitors
    double vn = 0.0, vi = 0.0, vt = 0.0;
    std::int64_t vbatches = 0;
    for (std::size_t at = 0; at + static_cast<std::size_t>(origins_per_batch) <= val_idx.size();
         at += static_cast<std::size_t>(origins_per_batch)) {
      std::vector<int> origins(val_idx.begin() + static_cast<std::ptrdiff_t>(at),
                               val_idx.begin() + static_cast<std::ptrdiff_t>(at) + origins_per_batch);
      Tensor views = build_views(corpus, origins, aug, val_aug_seeds,
                                 static_cast<std::int64_t>(epoch) * n);
      auto tl = eval_batch_loss(model, views, cfg.loss);
      vn += tl.contrastive.item();
      vi += tl.importance.item();
      vt += tl.total.item();
      ++vbatches;
    }
    if (vbatches == 0) {
      // validation split smaller than one batch: score it as a single batch
      Tensor views = build_views(corpus, val_idx, aug, val_aug_seeds,
                                 static_cast<std::int64_t>(epoch) * n);
      auto tl = eval_batch_loss(model, views, cfg.loss);
      vn = tl.contrastive.item();
      vi = tl.importance.item();
      vt = tl.total.item();
      vbatches = 1;
    }
    vn /= static_cast<double>(vbatches);
    vi /= static_cast<double>(vbatches);
    vt /= static_cast<double>(vbatches);

    const double agreement = probe::topk_agreement(
        model, corpus, root.child(0xF00 + static_cast<std::uint64_t>(epoch)).seed(),
        std::min<std::int64_t>(256, corpus.size()));
    if (!std::isfinite(agreement)) {
      throw NumericError("train: top-k agreement became non-finite at epoch " +
                         std::to_string(epoch));
    }
    const RouteStats rs = route_shares(model, corpus, val_idx, aug);
    result.epochs.push_back({epoch, vn, vi, vt, agreement, rs.min_share});

    // checkpoint retention
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_epoch%03d.moek", epoch);
    const auto path = out_dir / name;
    nlohmann::json extra;
    extra["epoch"] = epoch;
    extra["global_step"] = global_step;
    extra["val_total"] = vt;
    extra["seed"] = cfg.seed;
    {
      std::ofstream os(path, std::ios::binary);
      write_checkpoint(os, model, extra.dump());
    }
    best.emplace_back(vt, path);
    std::sort(best.begin(), best.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    while (static_cast<int>(best.size()) > cfg.keep_top) {
      std::filesystem::remove(best.back().second);
      best.pop_back();
    }
  }

  // final model, always retained separately
  {
    nlohmann::json extra;
    extra["epoch"] = cfg.epochs - 1;
    extra["global_step"] = global_step;
    extra["final"] = true;
    extra["seed"] = cfg.seed;
    result.final_checkpoint = out_dir / "final.moek";
    std::ofstream os(result.final_checkpoint, std::ios::binary);
    write_checkpoint(os, model, extra.dump());
  }
  for (auto& [v, p] : best) result.kept_checkpoints.push_back(p);

  write_loss_csv(out_dir / "loss.csv", result.steps);
  write_val_csv(out_dir / "val.csv", result.epochs);
  return result;
}

}  // namespace moescope
