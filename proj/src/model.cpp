#include "moescope/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

namespace moescope {

using nd::Mode;
using nd::Shape;
using nd::Tape;
using nd::Tensor;

int MoeConfig::embed_dim() const {
  return static_cast<int>(std::floor(static_cast<double>(base_width) /
                                     std::sqrt(static_cast<double>(num_experts))));
}

namespace {
int halved(int s, int times) {
  for (int i = 0; i < times; ++i) s = (s + 1) / 2;  // stride-2, pad-1, 3x3
  return s;
}
}  // namespace

int MoeConfig::gating_spatial() const { return halved(input_size, shared_blocks); }
int MoeConfig::expert_spatial() const { return halved(input_size, shared_blocks + expert_blocks); }

void MoeConfig::validate() const {
  if (num_experts < 1) throw ValidationError("config: num_experts must be >= 1");
  if (top_k < 1 || top_k > num_experts) {
    throw ValidationError("config: require 1 <= top_k <= num_experts, got k=" +
                          std::to_string(top_k) + " E=" + std::to_string(num_experts));
  }
  if (shared_blocks + expert_blocks != 5) {
    throw ValidationError("config: shared_blocks + expert_blocks must be 5");
  }
  if (base_width < num_experts) throw ValidationError("config: base_width too small for E");
  if (input_size < 32) throw ValidationError("config: input_size must be at least 32");
  if (proj_dim < 1 || gate_channels < 1) throw ValidationError("config: bad head widths");
  if (embed_dim() < 1) throw ValidationError("config: embed_dim must be positive");
}

std::string MoeConfig::to_json() const {
  nlohmann::json j;
  j["num_experts"] = num_experts;
  j["top_k"] = top_k;
  j["base_width"] = base_width;
  j["input_size"] = input_size;
  j["shared_blocks"] = shared_blocks;
  j["expert_blocks"] = expert_blocks;
  j["proj_dim"] = proj_dim;
  j["gate_channels"] = gate_channels;
  j["noise_enabled"] = noise_enabled;
  return j.dump();
}

MoeConfig MoeConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MoeConfig c;
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.shared_blocks = j.at("shared_blocks").get<int>();
  c.expert_blocks = j.at("expert_blocks").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.gate_channels = j.at("gate_channels").get<int>();
  c.noise_enabled = j.at("noise_enabled").get<bool>();
  c.validate();
  return c;
}

// --- init ---------------------------------------------------------------

namespace {

Tensor he_conv(SequentialRng& rng, int cout, int cin, int k) {
  const double std = std::sqrt(2.0 / (cin * k * k));
  return Tensor::randn({cout, cin, k, k}, rng, std, true);
}

Tensor he_linear(SequentialRng& rng, int out, int in) {
  const double std = std::sqrt(2.0 / in);
  return Tensor::randn({out, in}, rng, std, true);
}

nd::BnState fresh_bn(int ch) {
  nd::BnState st;
  st.running_mean = Tensor::zeros({ch});
  st.running_var = Tensor::full({ch}, 1.0);
  st.initialized = true;  // models are usable in eval mode from birth
  return st;
}

ConvBlock make_block(SequentialRng& rng, int cin, int cout) {
  ConvBlock b;
  b.w = he_conv(rng, cout, cin, 3);
  b.b = Tensor::zeros({cout}, true);
  b.res_w = he_conv(rng, cout, cout, 3);
  b.res_b = Tensor::zeros({cout}, true);
  b.gamma = Tensor::full({cout}, 1.0, true);
  b.beta = Tensor::zeros({cout}, true);
  b.bn = fresh_bn(cout);
  return b;
}

}  // namespace

MoeModel MoeModel::init(const MoeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MoeModel m;
  m.cfg_ = cfg;
  SequentialRng rng(RandomStream(seed).child(0x6d6f6465ull).seed());

  const int c = cfg.embed_dim();
  const int widths[3] = {cfg.base_width / 4, cfg.base_width / 2, c};
  int prev = 3;
  for (int i = 0; i < cfg.shared_blocks; ++i) {
    m.shared_.push_back(make_block(rng, prev, widths[i]));
    prev = widths[i];
  }

  auto make_gate = [&](double fc_bias) {
    GateBranch g;
    g.conv_w = he_conv(rng, cfg.gate_channels, c, 3);
    g.conv_b = Tensor::zeros({cfg.gate_channels}, true);
    g.gamma = Tensor::full({cfg.gate_channels}, 1.0, true);
    g.beta = Tensor::zeros({cfg.gate_channels}, true);
    g.bn = fresh_bn(cfg.gate_channels);
    // near-zero logits at init: routing starts balanced with no expert
    // holding a deterministic head start
    g.fc_w = Tensor::randn({cfg.num_experts, cfg.gate_channels}, rng, 0.01, true);
    g.fc_b = Tensor::full({cfg.num_experts}, fc_bias, true);
    return g;
  };
  m.gate_g_ = make_gate(0.0);
  // noise scale starts at softplus(-3) ~ 0.05 so training-time routing
  // tracks the deterministic logits closely enough for the importance loss
  // to balance inference routing, not just the noise-smoothed weights
  m.gate_n_ = make_gate(-3.0);

  const int es = cfg.expert_spatial();
  const int flat = c * es * es;
  const int hidden = 2 * c;
  for (int e = 0; e < cfg.num_experts; ++e) {
    Expert ex;
    for (int i = 0; i < cfg.expert_blocks; ++i) ex.blocks.push_back(make_block(rng, c, c));
    ex.r1_w = he_linear(rng, hidden, flat);
    ex.r1_b = Tensor::zeros({hidden}, true);
    ex.r2_w = he_linear(rng, hidden, hidden);
    ex.r2_b = Tensor::zeros({hidden}, true);
    ex.r3_w = he_linear(rng, c, hidden);
    ex.r3_b = Tensor::zeros({c}, true);
    m.experts_.push_back(std::move(ex));
  }

  m.proj_.w1 = he_linear(rng, cfg.proj_dim, c);
  m.proj_.b1 = Tensor::zeros({cfg.proj_dim}, true);
  m.proj_.gamma = Tensor::full({cfg.proj_dim}, 1.0, true);
  m.proj_.beta = Tensor::zeros({cfg.proj_dim}, true);
  m.proj_.bn = fresh_bn(cfg.proj_dim);
  m.proj_.w2 = he_linear(rng, cfg.proj_dim, cfg.proj_dim);
  m.proj_.b2 = Tensor::zeros({cfg.proj_dim}, true);
  return m;
}

// --- parameter visitation ----------------------------------------------------

void MoeModel::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  auto block = [&](const std::string& p, ConvBlock& b) {
    fn(p + ".conv.w", b.w);
    fn(p + ".conv.b", b.b);
    fn(p + ".res.w", b.res_w);
    fn(p + ".res.b", b.res_b);
    fn(p + ".bn.gamma", b.gamma);
    fn(p + ".bn.beta", b.beta);
  };
  for (std::size_t i = 0; i < shared_.size(); ++i) block("shared" + std::to_string(i), shared_[i]);
  auto gate = [&](const std::string& p, GateBranch& g) {
    fn(p + ".conv.w", g.conv_w);
    fn(p + ".conv.b", g.conv_b);
    fn(p + ".bn.gamma", g.gamma);
    fn(p + ".bn.beta", g.beta);
    fn(p + ".fc.w", g.fc_w);
    fn(p + ".fc.b", g.fc_b);
  };
  gate("gate_g", gate_g_);
  gate("gate_n", gate_n_);
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    const std::string p = "expert" + std::to_string(e);
    for (std::size_t i = 0; i < experts_[e].blocks.size(); ++i) {
      block(p + ".block" + std::to_string(i), experts_[e].blocks[i]);
    }
    fn(p + ".readout0.w", experts_[e].r1_w);
    fn(p + ".readout0.b", experts_[e].r1_b);
    fn(p + ".readout1.w", experts_[e].r2_w);
    fn(p + ".readout1.b", experts_[e].r2_b);
    fn(p + ".readout2.w", experts_[e].r3_w);
    fn(p + ".readout2.b", experts_[e].r3_b);
  }
  fn("proj.fc1.w", proj_.w1);
  fn("proj.fc1.b", proj_.b1);
  fn("proj.bn.gamma", proj_.gamma);
  fn("proj.bn.beta", proj_.beta);
  fn("proj.fc2.w", proj_.w2);
  fn("proj.fc2.b", proj_.b2);
}

void MoeModel::visit_state(const std::function<void(const std::string&, Tensor&)>& fn) {
  auto bn = [&](const std::string& p, nd::BnState& st) {
    fn(p + ".bn.mean", st.running_mean);
    fn(p + ".bn.var", st.running_var);
  };
  for (std::size_t i = 0; i < shared_.size(); ++i) bn("shared" + std::to_string(i), shared_[i].bn);
  bn("gate_g", gate_g_.bn);
  bn("gate_n", gate_n_.bn);
  for (std::size_t e = 0; e < experts_.size(); ++e) {
    for (std::size_t i = 0; i < experts_[e].blocks.size(); ++i) {
      bn("expert" + std::to_string(e) + ".block" + std::to_string(i), experts_[e].blocks[i].bn);
    }
  }
  bn("proj", proj_.bn);
}

std::int64_t MoeModel::param_count() {
  std::int64_t n = 0;
  visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

// --- forward pieces ---------------------------------------------------------

Tensor MoeModel::block_forward(ConvBlock& blk, const Tensor& x, Mode mode, Tape* tape) {
  Tensor t = nd::conv2d(x, blk.w, blk.b, 2, 1, tape);
  // Sub-batches too small to estimate batch statistics (an expert routed a
  // single 1x1 row) fall back to the running estimates.
  Mode bn_mode = mode;
  if (mode == Mode::kTrain && t.dim(0) * t.dim(2) * t.dim(3) < 2) bn_mode = Mode::kEval;
  t = nd::batchnorm(t, blk.gamma, blk.beta, blk.bn, bn_mode, 0.1, 1e-5, tape);
  Tensor res = nd::conv2d(t, blk.res_w, blk.res_b, 1, 1, tape);
  return nd::relu(nd::add(t, res, tape), tape);
}

Tensor MoeModel::shared_forward(const Tensor& images, Mode mode, Tape* tape) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_size ||
      images.dim(3) != cfg_.input_size) {
    throw ShapeError("model: expected images [B,3," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "], got " + nd::shape_str(images.shape()));
  }
  Tensor h = images;
  for (auto& blk : shared_) h = block_forward(blk, h, mode, tape);
  return h;
}

Tensor MoeModel::gate_branch(const Tensor& h, GateBranch& branch, Mode mode, Tape* tape) {
  const int gs = cfg_.gating_spatial();
  if (h.rank() != 4 || h.dim(2) != gs || h.dim(3) != gs) {
    throw ShapeError("gate: expected latent spatial " + std::to_string(gs) + "x" +
                     std::to_string(gs) + ", got " + nd::shape_str(h.shape()));
  }
  Tensor t = nd::conv2d(h, branch.conv_w, branch.conv_b, 1, 1, tape);
  t = nd::batchnorm(t, branch.gamma, branch.beta, branch.bn, mode, 0.1, 1e-5, tape);
  t = nd::relu(t, tape);
  Tensor pooled = nd::gap(t, tape);
  return nd::linear(pooled, branch.fc_w, branch.fc_b, tape);
}

Tensor MoeModel::expert_forward(const Tensor& h, int expert_index, Mode mode, Tape* tape) {
  if (expert_index < 0 || expert_index >= cfg_.num_experts) {
    throw ValidationError("expert index " + std::to_string(expert_index) +
                          " out of range for E=" + std::to_string(cfg_.num_experts));
  }
  Expert& ex = experts_[static_cast<std::size_t>(expert_index)];
  Tensor t = h;
  for (auto& blk : ex.blocks) t = block_forward(blk, t, mode, tape);
  const auto n = t.dim(0);
  t = nd::reshape(t, {n, t.numel() / n}, tape);
  t = nd::relu(nd::linear(t, ex.r1_w, ex.r1_b, tape), tape);
  t = nd::relu(nd::linear(t, ex.r2_w, ex.r2_b, tape), tape);
  return nd::linear(t, ex.r3_w, ex.r3_b, tape);
}

Tensor MoeModel::project(const Tensor& z, Mode mode, Tape* tape) {
  Tensor t = nd::linear(z, proj_.w1, proj_.b1, tape);
  t = nd::batchnorm(t, proj_.gamma, proj_.beta, proj_.bn, mode, 0.1, 1e-5, tape);
  t = nd::relu(t, tape);
  return nd::linear(t, proj_.w2, proj_.b2, tape);
}

// --- spec-level gate ----------------------------------------------------------

GateDecision noisy_topk_gate(std::span<const double> logits_g, std::span<const double> logits_n,
                             int k, Mode mode, const RandomStream& noise, std::uint64_t row) {
  const auto e = logits_g.size();
  if (logits_n.size() != e) throw ShapeError("gate: branch outputs differ in length");
  if (k < 1 || static_cast<std::size_t>(k) > e) {
    throw ValidationError("gate: require 1 <= k <= E");
  }
  GateDecision d;
  d.logits.assign(logits_g.begin(), logits_g.end());
  d.noisy.resize(e);
  for (std::size_t i = 0; i < e; ++i) {
    if (mode == Mode::kTrain) {
      const double eps = noise.normal(row * e + i);
      d.noisy[i] = logits_g[i] + eps * nd::softplus_scalar(logits_n[i]);
    } else {
      d.noisy[i] = logits_g[i];
    }
  }
  d.selected = nd::topk_indices(d.noisy, k);
  double mx = -std::numeric_limits<double>::infinity();
  for (int i : d.selected) mx = std::max(mx, d.noisy[static_cast<std::size_t>(i)]);
  double sum = 0.0;
  d.weights.assign(e, 0.0);
  for (int i : d.selected) {
    const double v = std::exp(d.noisy[static_cast<std::size_t>(i)] - mx);
    d.weights[static_cast<std::size_t>(i)] = v;
    sum += v;
  }
  for (int i : d.selected) d.weights[static_cast<std::size_t>(i)] /= sum;
  return d;
}

std::vector<double> combine(const std::vector<std::vector<double>>& readouts,
                            const GateDecision& decision) {
  std::vector<double> z;
  for (int i : decision.selected) {
    if (static_cast<std::size_t>(i) >= readouts.size() ||
        readouts[static_cast<std::size_t>(i)].empty()) {
      throw ValidationError("combine: missing readout for selected expert " + std::to_string(i));
    }
    const auto& zi = readouts[static_cast<std::size_t>(i)];
    if (z.empty()) z.assign(zi.size(), 0.0);
    if (z.size() != zi.size()) throw ShapeError("combine: readout length mismatch");
    const double w = decision.weights[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < zi.size(); ++j) z[j] += w * zi[j];
  }
  return z;
}

// --- full forward -------------------------------------------------------------

std::vector<ForwardOutput> MoeModel::forward(const Tensor& images, Mode mode,
                                             bool force_all_experts, std::uint64_t noise_seed) {
  if (images.rank() != 4 || images.dim(0) < 1) {
    throw ValidationError("model_forward: batch must contain at least one image");
  }
  const auto n = images.dim(0);
  const int e_count = cfg_.num_experts;
  const int embed = cfg_.embed_dim();

  Tensor h = shared_forward(images, mode, nullptr);
  Tensor lg = gate_branch(h, gate_g_, mode, nullptr);
  Tensor ln = gate_branch(h, gate_n_, mode, nullptr);

  const RandomStream noise(RandomStream(noise_seed).child(0x6e6f6973ull).seed());
  std::vector<ForwardOutput> out(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const double* pg = lg.data() + r * e_count;
    const double* pn = ln.data() + r * e_count;
    const Mode gate_mode = cfg_.noise_enabled ? mode : Mode::kEval;
    out[static_cast<std::size_t>(r)].gate = noisy_topk_gate(
        std::span<const double>(pg, static_cast<std::size_t>(e_count)),
        std::span<const double>(pn, static_cast<std::size_t>(e_count)), cfg_.top_k, gate_mode,
        noise, static_cast<std::uint64_t>(r));
  }

  std::vector<std::vector<double>> z_rows(
      static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(embed), 0.0));
  for (int e = 0; e < e_count; ++e) {
    std::vector<int> rows;
    for (std::int64_t r = 0; r < n; ++r) {
      const auto& sel = out[static_cast<std::size_t>(r)].gate.selected;
      const bool routed = std::find(sel.begin(), sel.end(), e) != sel.end();
      if (force_all_experts || routed) rows.push_back(static_cast<int>(r));
    }
    if (rows.empty()) continue;
    Tensor he = nd::gather_rows(h, rows);
    Tensor ze = expert_forward(he, e, mode, nullptr);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<std::size_t>(rows[i]);
      const double* src = ze.data() + static_cast<std::int64_t>(i) * embed;
      auto& fo = out[r];
      if (force_all_experts) {
        if (fo.expert_readouts.empty()) {
          fo.expert_readouts.resize(static_cast<std::size_t>(e_count));
          fo.readout_norms.assign(static_cast<std::size_t>(e_count), 0.0);
        }
        fo.expert_readouts[static_cast<std::size_t>(e)].assign(src, src + embed);
        fo.readout_norms[static_cast<std::size_t>(e)] =
            nd::l2norm(std::span<const double>(src, static_cast<std::size_t>(embed)));
      }
      const auto& sel = fo.gate.selected;
      if (std::find(sel.begin(), sel.end(), e) != sel.end()) {
        const double w = fo.gate.weights[static_cast<std::size_t>(e)];
        for (int j = 0; j < embed; ++j) z_rows[r][static_cast<std::size_t>(j)] += w * src[j];
      }
    }
  }
  for (std::int64_t r = 0; r < n; ++r) {
    out[static_cast<std::size_t>(r)].embedding = std::move(z_rows[static_cast<std::size_t>(r)]);
  }

  if (mode == Mode::kTrain) {
    Tensor z(Shape{n, embed});
    for (std::int64_t r = 0; r < n; ++r) {
      std::copy_n(out[static_cast<std::size_t>(r)].embedding.data(), embed, z.data() + r * embed);
    }
    Tensor v = project(z, mode, nullptr);
    const auto pd = cfg_.proj_dim;
    for (std::int64_t r = 0; r < n; ++r) {
      out[static_cast<std::size_t>(r)].projected.assign(v.data() + r * pd, v.data() + (r + 1) * pd);
    }
  }
  return out;
}

TrainForward MoeModel::train_forward(const Tensor& views, Tape& tape, std::uint64_t noise_seed,
                                     Mode mode) {
  if (views.rank() != 4 || views.dim(0) < 1) {
    throw ValidationError("train_forward: batch must contain at least one image");
  }
  const auto n = views.dim(0);
  const int e_count = cfg_.num_experts;

  Tensor h = shared_forward(views, mode, &tape);
  Tensor lg = gate_branch(h, gate_g_, mode, &tape);

  Tensor scores;
  if (cfg_.noise_enabled && mode == Mode::kTrain) {
    Tensor ln = gate_branch(h, gate_n_, mode, &tape);
    const RandomStream noise(RandomStream(noise_seed).child(0x6e6f6973ull).seed());
    Tensor eps(Shape{n, e_count});
    for (std::int64_t i = 0; i < eps.numel(); ++i) {
      eps.data()[i] = noise.normal(static_cast<std::uint64_t>(i));
    }
    scores = nd::add(lg, nd::mul(eps, nd::softplus(ln, &tape), &tape), &tape);
  } else {
    scores = lg;
  }

  TrainForward tf;
  Tensor kept = nd::keep_topk_rows(scores, cfg_.top_k, &tape, &tf.selected);
  tf.gate_weights = nd::softmax_masked(kept, &tape);

  Tensor z;
  bool z_set = false;
  for (int e = 0; e < e_count; ++e) {
    std::vector<int> rows;
    for (std::int64_t r = 0; r < n; ++r) {
      const auto& sel = tf.selected[static_cast<std::size_t>(r)];
      if (std::find(sel.begin(), sel.end(), e) != sel.end()) rows.push_back(static_cast<int>(r));
    }
    if (rows.empty()) continue;
    Tensor he = nd::gather_rows(h, rows, &tape);
    Tensor ze = expert_forward(he, e, mode, &tape);
    Tensor w_rows = nd::select_column(nd::gather_rows(tf.gate_weights, rows, &tape), e, &tape);
    Tensor weighted = nd::rowwise_scale(ze, w_rows, &tape);
    Tensor scattered = nd::scatter_rows(weighted, rows, n, &tape);
    z = z_set ? nd::add(z, scattered, &tape) : scattered;
    z_set = true;
  }
  if (!z_set) throw NumericError("train_forward: no expert received any input");
  tf.embedding = z;
  tf.projected = project(z, mode, &tape);
  return tf;
}

// --- checkpoint ------------------------------------------------------------------

namespace {
template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("checkpoint: truncated stream");
  return v;
}
}  // namespace

void write_checkpoint(std::ostream& os, MoeModel& model, const std::string& extra_json) {
  nlohmann::json hdr;
  hdr["config"] = nlohmann::json::parse(model.config().to_json());
  hdr["extra"] = nlohmann::json::parse(extra_json);
  const std::string htext = hdr.dump();

  std::vector<std::pair<std::string, Tensor*>> table;
  model.visit_params([&](const std::string& nm, Tensor& t) { table.emplace_back(nm, &t); });
  model.visit_state([&](const std::string& nm, Tensor& t) { table.emplace_back(nm, &t); });

  os.write("MOEK", 4);
  write_raw<std::uint32_t>(os, 1);
  write_raw<std::uint64_t>(os, htext.size());
  os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  write_raw<std::uint64_t>(os, table.size());
  for (auto& [nm, t] : table) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(nm.size()));
    os.write(nm.data(), static_cast<std::streamsize>(nm.size()));
    nd::write_ndt1(os, *t);
  }
}

MoeModel read_checkpoint(std::istream& is, std::string* extra_json) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MOEK", 4) != 0) throw ValidationError("checkpoint: bad magic");
  const auto version = read_raw<std::uint32_t>(is);
  if (version != 1) {
    throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto hlen = read_raw<std::uint64_t>(is);
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw ValidationError("checkpoint: truncated header");
  nlohmann::json hdr = nlohmann::json::parse(htext);
  MoeConfig cfg = MoeConfig::from_json(hdr.at("config").dump());
  if (extra_json) *extra_json = hdr.at("extra").dump();

  MoeModel model = MoeModel::init(cfg, 0);
  std::map<std::string, Tensor*> slots;
  model.visit_params([&](const std::string& nm, Tensor& t) { slots[nm] = &t; });
  model.visit_state([&](const std::string& nm, Tensor& t) { slots[nm] = &t; });

  const auto count = read_raw<std::uint64_t>(is);
  std::size_t filled = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto nlen = read_raw<std::uint32_t>(is);
    std::string nm(nlen, '\0');
    is.read(nm.data(), nlen);
    if (!is) throw ValidationError("checkpoint: truncated tensor name");
    Tensor loaded = nd::read_ndt1(is);
    auto it = slots.find(nm);
    if (it == slots.end()) throw ValidationError("checkpoint: unknown tensor '" + nm + "'");
    if (loaded.shape() != it->second->shape()) {
      throw ValidationError("checkpoint: tensor '" + nm + "' has shape " +
                            nd::shape_str(loaded.shape()) + ", config expects " +
                            nd::shape_str(it->second->shape()));
    }
    std::copy_n(loaded.data(), loaded.numel(), it->second->data());
    ++filled;
  }
  if (filled != slots.size()) {
    throw ValidationError("checkpoint: tensor table incomplete (" + std::to_string(filled) + "/" +
                          std::to_string(slots.size()) + ")");
  }
  return model;
}

void MoeModel::save(std::ostream& os, const std::string& extra_json) {
  write_checkpoint(os, *this, extra_json);
}

MoeModel MoeModel::load(std::istream& is, std::string* extra_json) {
  return read_checkpoint(is, extra_json);
}

}  // namespace moescope
