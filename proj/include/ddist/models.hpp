#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddist/corpus.hpp"
#include "ddist/nn.hpp"
#include "ddist/tensor.hpp"

namespace ddist {

// ---- latent batches ----

// Rows are one-hot(label) ++ Gaussian tail.
struct LatentBatch {
  Tensor z;  // {B, c + tail}
  std::vector<int> labels;
  int num_classes = 0;
  int tail = 0;

  int batch_size() const { return int(labels.size()); }
};

inline LatentBatch make_latent_batch(const std::vector<int>& labels, int num_classes, int tail,
                                     Rng& rng) {
  require(num_classes >= 1 && tail >= 1, "model: latent dims must be >= 1");
  int B = int(labels.size());
  Arr data = Arr::Zero(std::size_t(B) * (num_classes + tail));
  for (int j = 0; j < B; ++j) {
    require(labels[j] >= 0 && labels[j] < num_classes, "model: latent label out of range");
    long base = long(j) * (num_classes + tail);
    data[base + labels[j]] = 1.0;
    for (int t = 0; t < tail; ++t) data[base + num_classes + t] = rng.normal();
  }
  LatentBatch lb;
  lb.z = Tensor::constant({B, num_classes + tail}, std::move(data));
  lb.labels = labels;
  lb.num_classes = num_classes;
  lb.tail = tail;
  return lb;
}

// ---- checkpoint files ----
// magic, uint32 LE json length, config json (with parameter manifest), then
// all parameters as little-endian float32 in manifest order.

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

inline void save_checkpoint(const std::filesystem::path& path, nlohmann::json config,
                            const ParamStore& ps) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, t] : ps.named)
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
  config["params"] = std::move(manifest);
  std::string header = config.dump();

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "model: cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  std::uint32_t len = std::uint32_t(header.size());
  unsigned char lenb[4] = {(unsigned char)(len & 0xff), (unsigned char)((len >> 8) & 0xff),
                           (unsigned char)((len >> 16) & 0xff), (unsigned char)((len >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(header.data(), std::streamsize(header.size()));
  for (const auto& [_, t] : ps.named) {
    std::vector<float> buf(std::size_t(t.size()));
    for (int i = 0; i < t.size(); ++i) buf[std::size_t(i)] = float(t.value()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size() * sizeof(float)));
  }
  require(out.good(), "model: short write for checkpoint " + path.string());
}

// Reads the config json; on request also fills an existing ParamStore whose
// layout must match the stored manifest.
inline nlohmann::json read_checkpoint_config(const std::filesystem::path& path,
                                             std::ifstream* keep_open = nullptr) {
  static thread_local std::ifstream local;
  std::ifstream& in = keep_open ? *keep_open : local;
  in = std::ifstream(path, std::ios::binary);
  require(in.good(), "model: cannot open checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  in.read(magic, sizeof magic);
  require(in.good() && std::equal(magic, magic + sizeof magic, kCheckpointMagic),
          "model: bad checkpoint magic in " + path.string());
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  std::uint32_t len = lenb[0] | (lenb[1] << 8) | (lenb[2] << 16) | (std::uint32_t(lenb[3]) << 24);
  std::string header(len, '\0');
  in.read(header.data(), len);
  require(in.good(), "model: truncated checkpoint header in " + path.string());
  return nlohmann::json::parse(header);
}

inline nlohmann::json load_checkpoint(const std::filesystem::path& path, ParamStore& ps) {
  std::ifstream in;
  nlohmann::json config = read_checkpoint_config(path, &in);
  const auto& manifest = config.at("params");
  require(manifest.size() == ps.named.size(), "model: checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < ps.named.size(); ++i) {
    auto& [name, t] = ps.named[i];
    require(manifest[i].at("name") == name, "model: checkpoint parameter name mismatch at " + name);
    require(manifest[i].at("shape").get<Shape>() == t.shape(),
            "model: checkpoint parameter shape mismatch at " + name);
    std::vector<float> buf(std::size_t(t.size()));
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    require(in.good(), "model: truncated checkpoint blob in " + path.string());
    for (int k = 0; k < t.size(); ++k) t.raw()[k] = double(buf[std::size_t(k)]);
  }
  return config;
}

// ---- generator ----

enum class Arch { gan_cnn, gan_att };

inline std::string arch_name(Arch a) { return a == Arch::gan_cnn ? "gan_cnn" : "gan_att"; }
inline Arch arch_from_name(const std::string& s) {
  if (s == "gan_cnn") return Arch::gan_cnn;
  if (s == "gan_att") return Arch::gan_att;
  fail("model: unknown architecture '" + s + "'");
}

struct GeneratorConfig {
  Arch arch = Arch::gan_cnn;
  int frames = 8;        // T
  int feature_dim = 16;  // D
  int num_classes = 4;
  int latent_tail = 16;  // n_e
  int channels = 8;
  // The per-channel normalization the generator was trained in; sampling maps
  // outputs back to raw feature space through it.
  FeatureStats stats = FeatureStats::identity(16);

  nlohmann::json to_json() const {
    nlohmann::json j = {{"kind", "generator"},   {"arch", arch_name(arch)},   {"frames", frames},
            {"feature_dim", feature_dim}, {"num_classes", num_classes},
            {"latent_tail", latent_tail}, {"channels", channels}};
    ddist::to_json(j["stats"], stats);
    return j;
  }
  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.arch = arch_from_name(j.at("arch").get<std::string>());
    c.frames = j.at("frames");
    c.feature_dim = j.at("feature_dim");
    c.num_classes = j.at("num_classes");
    c.latent_tail = j.at("latent_tail");
    c.channels = j.at("channels");
    if (j.contains("stats"))
      ddist::from_json(j.at("stats"), c.stats);
    else
      c.stats = FeatureStats::identity(c.feature_dim);
    return c;
  }
};

namespace detail {
// Seed extent for one spatial dimension: target must be s * 2^k with s <= 4.
inline int seed_extent(int target) {
  int s = target;
  while (s > 4 && s % 2 == 0) s /= 2;
  require(s <= 4, "model: output extent " + std::to_string(target) +
                      " not reachable from a <=4 seed by doubling");
  return s;
}
}  // namespace detail

// Conditional generator. A dense seed layer maps z to a {channels, h0, w0}
// map; transposed convolutions double the spatial extent until (T, D) is
// reached; mixing convolutions follow (dilated 1,2,4 for gan_att, which also
// gets one time-axis self-attention block after its 4th conv layer). The
// output head is a linear conv with no squashing nonlinearity.
class Generator {
 public:
  GeneratorConfig cfg;
  ParamStore ps;

  Generator(const GeneratorConfig& config, Rng& rng) : cfg(config) {
    int T = cfg.frames, D = cfg.feature_dim, C = cfg.channels;
    h0_ = detail::seed_extent(T);
    w0_ = detail::seed_extent(D);
    int dh = 0, dw = 0;
    for (int t = h0_; t < T; t *= 2) ++dh;
    for (int t = w0_; t < D; t *= 2) ++dw;
    int stages = std::max(dh, dw);

    seed_fc_ = Dense::create(ps, "seed", cfg.num_classes + cfg.latent_tail, C * h0_ * w0_, rng);
    seed_bn_ = BatchNormCh::create(ps, "seed_bn", C);

    int mixing = cfg.arch == Arch::gan_att ? 3 : 2;
    for (int i = 0; i < stages + mixing; ++i) {
      Block blk;
      if (i < stages) {
        ConvGeom g;
        g.in_c = g.out_c = C;
        g.sh = i < dh ? 2 : 1;
        g.sw = i < dw ? 2 : 1;
        g.kh = g.sh == 2 ? 4 : 3;
        g.kw = g.sw == 2 ? 4 : 3;
        g.ph = g.pw = 1;
        blk.transposed = true;
        blk.tconv = ConvT2d::create(ps, "up" + std::to_string(i), g, rng);
      } else {
        ConvGeom g;
        g.in_c = g.out_c = C;
        if (cfg.arch == Arch::gan_att) {
          int dil = 1 << (i - stages);  // 1, 2, 4
          g.dh = g.dw = dil;
          g.ph = g.pw = dil;
        }
        blk.transposed = false;
        blk.conv = Conv2d::create(ps, "mix" + std::to_string(i), g, rng);
      }
      blk.bn = BatchNormCh::create(ps, "bn" + std::to_string(i), C);
      blocks_.push_back(std::move(blk));
    }

    if (cfg.arch == Arch::gan_att) {
      // after the 4th conv layer, but never before upsampling has finished
      attn_after_ = std::max(stages - 1, std::min(3, int(blocks_.size()) - 1));
      attn_ = std::make_unique<SelfAttention>(
          SelfAttention::create(ps, "attn", C * D, std::max(4, C * D / 4), rng));
    }

    ConvGeom out_g;
    out_g.in_c = C;
    out_g.out_c = 1;
    out_conv_ = Conv2d::create(ps, "out", out_g, rng);
  }

  int latent_dim() const { return cfg.num_classes + cfg.latent_tail; }
  int layer_count() const { return int(blocks_.size()) + 2; }  // seed + blocks + out

  // z {B, c+n_e} -> {B, T, D}
  Tensor forward(const LatentBatch& lb) const {
    const Tensor& z = lb.z;
    require(z.shape().size() == 2 && z.shape()[1] == latent_dim(),
            "model: latent width mismatch");
    int B = z.shape()[0];
    int C = cfg.channels;
    int h = h0_, w = w0_;
    Tensor x = reshape(seed_fc_.forward(z), {B, C, h, w});
    x = leaky_relu(seed_bn_.forward(x, B, h, w), kSlope);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Block& blk = blocks_[i];
      if (blk.transposed) {
        x = blk.tconv->forward(x, B, h, w);
        h = blk.tconv->out_h(h);
        w = blk.tconv->out_w(w);
      } else {
        x = blk.conv->forward(x, B, h, w);
      }
      x = leaky_relu(blk.bn.forward(x, B, h, w), kSlope);
      if (attn_ && int(i) == attn_after_) x = attn_->forward(x, B, C, h, w);
    }
    x = out_conv_.forward(x, B, h, w);  // {B, 1, T, D}, linear output
    return reshape(x, {B, cfg.frames, cfg.feature_dim});
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, cfg.to_json(), ps); }

  static Generator load(const std::filesystem::path& path) {
    nlohmann::json config = read_checkpoint_config(path);
    require(config.value("kind", "") == "generator", "model: not a generator checkpoint");
    Rng init_rng(1);
    Generator g(GeneratorConfig::from_json(config), init_rng);
    load_checkpoint(path, g.ps);
    return g;
  }

 private:
  static constexpr double kSlope = 0.2;

  struct Block {
    bool transposed = false;
    std::optional<Conv2d> conv;
    std::optional<ConvT2d> tconv;
    BatchNormCh bn;
  };

  Dense seed_fc_;
  BatchNormCh seed_bn_;
  std::vector<Block> blocks_;
  std::unique_ptr<SelfAttention> attn_;
  int attn_after_ = -1;
  Conv2d out_conv_;
  int h0_ = 4, w0_ = 4;
};

// ---- discriminator ----

struct DiscriminatorConfig {
  int frames = 8;
  int feature_dim = 16;
  int num_classes = 4;
  int layers = 8;  // M
  int channels = 8;
};

struct DiscriminatorOutput {
  Tensor scores;                     // {B, 1}
  Tensor class_logits;               // {B, c}
  std::vector<Tensor> feature_maps;  // M per-layer post-activation maps
};

// Stacked 3x3 convolutions with per-layer normalization and leaky-relu, then
// two parallel linear heads on the flattened final map.
class Discriminator {
 public:
  DiscriminatorConfig cfg;
  ParamStore ps;

  Discriminator(const DiscriminatorConfig& config, Rng& rng) : cfg(config) {
    require(cfg.layers >= 1, "model: discriminator needs at least one layer");
    int h = cfg.frames, w = cfg.feature_dim;
    for (int i = 0; i < cfg.layers; ++i) {
      ConvGeom g;
      g.in_c = i == 0 ? 1 : cfg.channels;
      g.out_c = cfg.channels;
      g.sh = h > 2 ? 2 : 1;
      g.sw = w > 2 ? 2 : 1;
      convs_.push_back(Conv2d::create(ps, "conv" + std::to_string(i), g, rng));
      norms_.push_back(LayerNormCh::create(ps, "ln" + std::to_string(i), cfg.channels));
      h = g.out_h(h);
      w = g.out_w(w);
      dims_.push_back({h, w});
    }
    flat_ = cfg.channels * h * w;
    score_head_ = Dense::create(ps, "score", flat_, 1, rng);
    class_head_ = Dense::create(ps, "class", flat_, cfg.num_classes, rng);
  }

  int layer_count() const { return cfg.layers; }  // M

  // x {B, T, D}
  DiscriminatorOutput forward(const Tensor& x) const {
    require(x.shape().size() == 3 && x.shape()[1] == cfg.frames &&
                x.shape()[2] == cfg.feature_dim,
            "model: discriminator input shape mismatch");
    int B = x.shape()[0];
    Tensor h = reshape(x, {B, 1, cfg.frames, cfg.feature_dim});
    DiscriminatorOutput out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      int hh = dims_[i].first, ww = dims_[i].second;
      h = convs_[i].forward(h, B, i == 0 ? cfg.frames : dims_[i - 1].first,
                            i == 0 ? cfg.feature_dim : dims_[i - 1].second);
      h = leaky_relu(norms_[i].forward(h, B, hh, ww), 0.2);
      out.feature_maps.push_back(h);
    }
    Tensor flat = reshape(h, {B, flat_});
    out.scores = score_head_.forward(flat);
    out.class_logits = class_head_.forward(flat);
    return out;
  }

 private:
  std::vector<Conv2d> convs_;
  std::vector<LayerNormCh> norms_;
  std::vector<std::pair<int, int>> dims_;
  int flat_ = 0;
  Dense score_head_, class_head_;
};

// ---- downstream classifier ----

struct DownstreamConfig {
  int feature_dim = 16;
  int num_classes = 4;
  int hidden = 32;  // h; the first-layer embedding width
  FeatureStats stats = FeatureStats::identity(16);

  nlohmann::json to_json() const {
    nlohmann::json j = {{"kind", "downstream"},
                        {"feature_dim", feature_dim},
                        {"num_classes", num_classes},
                        {"hidden", hidden}};
    ddist::to_json(j["stats"], stats);
    return j;
  }
  static DownstreamConfig from_json(const nlohmann::json& j) {
    DownstreamConfig c;
    c.feature_dim = j.at("feature_dim");
    c.num_classes = j.at("num_classes");
    c.hidden = j.at("hidden");
    ddist::from_json(j.at("stats"), c.stats);
    return c;
  }
};

struct DownstreamOutput {
  Tensor probs;       // {B, c} softmax rows
  Tensor logits;      // {B, c}
  Tensor embeddings;  // {B, h} first-layer post-activation
};

// Normalize per channel (stats baked in at training time), mean-pool over
// time, one hidden linear layer (the probe embedding), then the class head.
class Downstream {
 public:
  DownstreamConfig cfg;
  ParamStore ps;

  Downstream(const DownstreamConfig& config, Rng& rng) : cfg(config) {
    require(int(cfg.stats.mean.size()) == cfg.feature_dim, "model: stats width mismatch");
    fc1_ = Dense::create(ps, "fc1", cfg.feature_dim, cfg.hidden, rng);
    fc2_ = Dense::create(ps, "fc2", cfg.hidden, cfg.num_classes, rng);
    Arr m(cfg.feature_dim), s(cfg.feature_dim);
    for (int d = 0; d < cfg.feature_dim; ++d) {
      m[d] = cfg.stats.mean[d];
      s[d] = cfg.stats.stddev[d];
    }
    mean_ = Tensor::constant({1, cfg.feature_dim}, std::move(m));
    stddev_ = Tensor::constant({1, cfg.feature_dim}, std::move(s));
  }

  // x {B, T, D} raw (unnormalized) features
  DownstreamOutput forward(const Tensor& x) const {
    require(x.shape().size() == 3 && x.shape()[2] == cfg.feature_dim,
            "model: downstream input shape mismatch");
    int B = x.shape()[0], T = x.shape()[1], D = cfg.feature_dim;
    Tensor flat = reshape(x, {B * T, D});
    flat = divide(sub(flat, tile_rows(mean_, B * T)), tile_rows(stddev_, B * T));
    Tensor pooled = pool_time(flat, B, T, D);  // {B, D}
    DownstreamOutput out;
    out.embeddings = leaky_relu(fc1_.forward(pooled), 0.2);
    out.logits = fc2_.forward(out.embeddings);
    out.probs = softmax_rows(out.logits);
    return out;
  }

  std::vector<Arr> snapshot() const {
    std::vector<Arr> out;
    for (const auto& [_, t] : ps.named) out.push_back(t.value());
    return out;
  }
  void restore(const std::vector<Arr>& snap) {
    require(snap.size() == ps.named.size(), "model: snapshot size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) ps.named[i].second.raw() = snap[i];
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, cfg.to_json(), ps); }

  static Downstream load(const std::filesystem::path& path) {
    nlohmann::json config = read_checkpoint_config(path);
    require(config.value("kind", "") == "downstream", "model: not a downstream checkpoint");
    Rng init_rng(1);
    Downstream f(DownstreamConfig::from_json(config), init_rng);
    load_checkpoint(path, f.ps);
    return f;
  }

 private:
  // {B*T, D} -> {B, D} mean over T
  Tensor pool_time(const Tensor& flat, int B, int T, int D) const {
    long long key = (static_cast<long long>(B) << 32) | (static_cast<long long>(T) << 16) | D;
    auto& pm = pool_cache_[key];
    if (!pm) {
      std::vector<int> map(std::size_t(B) * D * T);
      std::size_t p = 0;
      for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
          for (int t = 0; t < T; ++t, ++p) map[p] = (b * T + t) * D + d;
      pm = make_index_map(std::move(map));
    }
    Tensor grouped = gather_pad(flat, pm, {B * D, T});
    return reshape(rowmean(grouped), {B, D});
  }

  Dense fc1_, fc2_;
  Tensor mean_, stddev_;
  mutable std::unordered_map<long long, IndexMap> pool_cache_;
};

}  // namespace ddist
