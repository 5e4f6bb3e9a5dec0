#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddist/checkpoint_pool.hpp"
#include "ddist/corpus.hpp"
#include "ddist/losses.hpp"
#include "ddist/models.hpp"
#include "ddist/optim.hpp"

namespace ddist {

struct DistillConfig {
  Arch arch = Arch::gan_cnn;
  int frames = 8;        // T
  int feature_dim = 16;  // D
  int num_classes = 4;
  int latent_tail = 16;  // n_e
  int gen_channels = 8;
  int disc_layers = 8;  // M
  int disc_channels = 8;

  LossWeights weights;
  int batch_size = 16;
  int n_critic = 5;
  int stage1_steps = 0;  // generator steps with the plain GAN objective
  int stage2_steps = 0;  // generator steps with the full distillation objective
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    weights.validate();
    require(frames >= 1 && feature_dim >= 1 && num_classes >= 1 && latent_tail >= 1,
            "distill: model dims must be >= 1");
    require(gen_channels >= 1 && disc_channels >= 1 && disc_layers >= 1,
            "distill: channel/layer counts must be >= 1");
    require(batch_size >= 2, "distill: batch_size must be >= 2 (diversity pairs)");
    require(batch_size >= num_classes, "distill: stratified batches need batch_size >= classes");
    require(n_critic >= 1, "distill: n_critic must be >= 1");
    require(stage1_steps >= 0 && stage2_steps >= 0, "distill: step counts must be >= 0");
    require(lr >= 0.0, "distill: lr must be nonnegative");
  }

  GeneratorConfig generator_config(const FeatureStats& stats) const {
    GeneratorConfig g;
    g.arch = arch;
    g.frames = frames;
    g.feature_dim = feature_dim;
    g.num_classes = num_classes;
    g.latent_tail = latent_tail;
    g.channels = gen_channels;
    g.stats = stats;
    return g;
  }
  DiscriminatorConfig discriminator_config() const {
    DiscriminatorConfig d;
    d.frames = frames;
    d.feature_dim = feature_dim;
    d.num_classes = num_classes;
    d.layers = disc_layers;
    d.channels = disc_channels;
    return d;
  }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"arch", arch_name(c.arch)},
       {"frames", c.frames},
       {"feature_dim", c.feature_dim},
       {"num_classes", c.num_classes},
       {"latent_tail", c.latent_tail},
       {"gen_channels", c.gen_channels},
       {"disc_layers", c.disc_layers},
       {"disc_channels", c.disc_channels},
       {"lambda1", c.weights.lambda1},
       {"lambda2", c.weights.lambda2},
       {"lambda3", c.weights.lambda3},
       {"lambda4", c.weights.lambda4},
       {"lambda5", c.weights.lambda5},
       {"lambda6", c.weights.lambda6},
       {"tau", c.weights.tau},
       {"batch_size", c.batch_size},
       {"n_critic", c.n_critic},
       {"stage1_steps", c.stage1_steps},
       {"stage2_steps", c.stage2_steps},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.arch = arch_from_name(j.value("arch", arch_name(d.arch)));
  c.frames = j.value("frames", d.frames);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.latent_tail = j.value("latent_tail", d.latent_tail);
  c.gen_channels = j.value("gen_channels", d.gen_channels);
  c.disc_layers = j.value("disc_layers", d.disc_layers);
  c.disc_channels = j.value("disc_channels", d.disc_channels);
  c.weights.lambda1 = j.value("lambda1", d.weights.lambda1);
  c.weights.lambda2 = j.value("lambda2", d.weights.lambda2);
  c.weights.lambda3 = j.value("lambda3", d.weights.lambda3);
  c.weights.lambda4 = j.value("lambda4", d.weights.lambda4);
  c.weights.lambda5 = j.value("lambda5", d.weights.lambda5);
  c.weights.lambda6 = j.value("lambda6", d.weights.lambda6);
  c.weights.tau = j.value("tau", d.weights.tau);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_critic = j.value("n_critic", d.n_critic);
  c.stage1_steps = j.value("stage1_steps", d.stage1_steps);
  c.stage2_steps = j.value("stage2_steps", d.stage2_steps);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.seed = j.value("seed", d.seed);
}

struct TrainLog {
  std::vector<nlohmann::json> records;

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    require(out.good(), "distill: cannot write log " + path.string());
    for (const auto& r : records) out << r.dump() << "\n";
    require(out.good(), "distill: short write for log");
  }
};

// One adversarial training run. Owns both networks and their optimizers; the
// caller drives it through step_d / step_g or the top-level distill().
class Distiller {
 public:
  DistillConfig cfg;
  Generator g;
  Discriminator d;

  Distiller(const DistillConfig& config, const FeatureDataset& dataset, Rng init_rng)
      : cfg(config),
        g(config.generator_config(compute_stats(dataset)), init_rng),
        d(config.discriminator_config(), init_rng),
        opt_g_(config.lr, config.beta1, config.beta2),
        opt_d_(config.lr, config.beta1, config.beta2),
        dataset_(&dataset) {
    cfg.validate();
    require(dataset.feature_dim == cfg.feature_dim, "distill: dataset feature_dim mismatch");
    require(dataset.num_classes == cfg.num_classes, "distill: dataset num_classes mismatch");
    by_class_.resize(std::size_t(cfg.num_classes));
    for (std::size_t i = 0; i < dataset.items.size(); ++i)
      by_class_[std::size_t(dataset.items[i].label)].push_back(int(i));
    for (int k = 0; k < cfg.num_classes; ++k)
      require(!by_class_[std::size_t(k)].empty(),
              "distill: class " + std::to_string(k) + " has no training items");
    g_params_ = g.ps.tensors();
    d_params_ = d.ps.tensors();
  }

  // Every batch cycles the class label round-robin so all classes appear.
  std::vector<int> stratified_batch(Rng& rng) const {
    std::vector<int> idx;
    idx.reserve(std::size_t(cfg.batch_size));
    for (int j = 0; j < cfg.batch_size; ++j) {
      const auto& bucket = by_class_[std::size_t(j % cfg.num_classes)];
      idx.push_back(bucket[rng.uniform_int(bucket.size())]);
    }
    return idx;
  }

  // Real features in the space the GAN trains in (normalized per channel).
  Tensor normalized_batch(const std::vector<int>& idx) const {
    Tensor raw = batch_features(*dataset_, idx, cfg.frames);
    const FeatureStats& st = g.cfg.stats;
    Arr out = raw.value();
    int D = cfg.feature_dim;
    for (long i = 0; i < out.size(); ++i) {
      int ch = int(i % D);
      out[i] = (out[i] - st.mean[ch]) / st.stddev[ch];
    }
    return Tensor::constant(raw.shape(), std::move(out));
  }

  // Map normalized generator output back to raw feature space, differentiably.
  Tensor denormalize(const Tensor& x) const {
    const FeatureStats& st = g.cfg.stats;
    int D = cfg.feature_dim;
    int rows = x.size() / D;
    Arr m(D), s(D);
    for (int ch = 0; ch < D; ++ch) {
      m[ch] = st.mean[ch];
      s[ch] = st.stddev[ch];
    }
    Tensor flat = reshape(x, {rows, D});
    Tensor raw = add(mul(flat, tile_rows(Tensor::constant({1, D}, std::move(s)), rows)),
                     tile_rows(Tensor::constant({1, D}, std::move(m)), rows));
    return reshape(raw, x.shape());
  }

  double step_d(Rng& rng, nlohmann::json* record = nullptr) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<int> idx = stratified_batch(rng);
    std::vector<int> labels = batch_labels(*dataset_, idx);
    Tensor real = normalized_batch(idx);
    LatentBatch z = make_latent_batch(labels, cfg.num_classes, cfg.latent_tail, rng);
    auto parts = detail::d_loss_core(d, g, real, z, labels, labels, cfg.weights, rng, true);
    double loss = parts.total.item();
    require(std::isfinite(loss), "distill: non-finite discriminator loss, aborting");
    auto grads = gradients(parts.total, d_params_);
    opt_d_.step(d_params_, grads);
    if (record) {
      *record = {{"kind", "d"},
                 {"loss", loss},
                 {"adv", parts.adv},
                 {"gp", parts.gp},
                 {"ce_real", parts.ce_real},
                 {"ce_fake", parts.ce_fake},
                 {"rng_digest", rng.state()},
                 {"wall_ms", wall_ms(t0)}};
    }
    return loss;
  }

  double step_g(int stage, const CheckpointPool* pool, Rng& rng,
                nlohmann::json* record = nullptr) {
    require(stage == 1 || stage == 2, "distill: stage must be 1 or 2");
    const LossWeights& w = cfg.weights;
    bool need_pool = stage == 2 && w.lambda6 > 0.0;
    require(!need_pool || pool != nullptr, "distill: stage 2 with softmax matching needs a pool");
    auto t0 = std::chrono::steady_clock::now();

    std::vector<int> idx = stratified_batch(rng);
    std::vector<int> labels = batch_labels(*dataset_, idx);
    Tensor real = normalized_batch(idx);
    LatentBatch z = make_latent_batch(labels, cfg.num_classes, cfg.latent_tail, rng);

    GDDParts parts;
    if (stage == 1) {
      auto core = detail::g_loss_core(d, g, real, z, labels, w, true);
      parts.total = core.total;
      parts.adv = core.adv;
      parts.ce = core.ce;
      parts.fm = core.fm;
    } else {
      std::unique_ptr<LatentBatch> z2;
      if (w.lambda5 > 0.0)
        z2 = std::make_unique<LatentBatch>(
            make_latent_batch(labels, cfg.num_classes, cfg.latent_tail, rng));
      DownstreamFn fn;
      std::unique_ptr<Downstream> f;
      if (w.lambda6 > 0.0 && pool != nullptr) {
        f = std::make_unique<Downstream>(sample_checkpoint(*pool, rng));
        fn = [&f](const Tensor& x) { return f->forward(x); };
      }
      Tensor real_raw = batch_features(*dataset_, idx, cfg.frames);
      parts = g_dd_loss(d, g, fn, real, real_raw, z, z2.get(), labels, w,
                        [this](const Tensor& x) { return denormalize(x); });
    }
    double loss = parts.total.item();
    require(std::isfinite(loss), "distill: non-finite generator loss, aborting");
    auto grads = gradients(parts.total, g_params_);
    opt_g_.step(g_params_, grads);
    if (record) {
      *record = {{"kind", "g"},        {"stage", stage},     {"loss", loss},
                 {"adv", parts.adv},   {"ce", parts.ce},     {"fm", parts.fm},
                 {"div", parts.div},   {"sml", parts.sml},   {"rng_digest", rng.state()},
                 {"wall_ms", wall_ms(t0)}};
    }
    return loss;
  }

 private:
  static double wall_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  }

  Adam opt_g_, opt_d_;
  const FeatureDataset* dataset_;
  std::vector<std::vector<int>> by_class_;
  std::vector<Tensor> g_params_, d_params_;
};

struct DistillResult {
  Generator generator;
  TrainLog log;
};

inline DistillResult distill(const FeatureDataset& dataset, const CheckpointPool* pool,
                             const DistillConfig& cfg) {
  cfg.validate();
  require(!dataset.items.empty(), "distill: empty dataset");
  Rng root(cfg.seed);
  Rng init_rng = root.fork(1);
  Rng train_rng = root.fork(2);
  Distiller run(cfg, dataset, init_rng);

  TrainLog log;
  int total = cfg.stage1_steps + cfg.stage2_steps;
  for (int step = 0; step < total; ++step) {
    int stage = step < cfg.stage1_steps ? 1 : 2;
    for (int k = 0; k < cfg.n_critic; ++k) {
      nlohmann::json rec;
      run.step_d(train_rng, &rec);
      rec["step"] = step;
      log.records.push_back(std::move(rec));
    }
    nlohmann::json rec;
    run.step_g(stage, pool, train_rng, &rec);
    rec["step"] = step;
    log.records.push_back(std::move(rec));
  }
  return DistillResult{std::move(run.g), std::move(log)};
}

}  // namespace ddist
