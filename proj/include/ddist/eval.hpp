#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddist/corpus.hpp"
#include "ddist/losses.hpp"
#include "ddist/models.hpp"
#include "ddist/optim.hpp"

namespace ddist {

struct DownstreamHp {
  int hidden = 32;
  int frames = 8;  // batch length normalization target during training
  int batch_size = 16;
  int max_epochs = 60;
  int patience = 5;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;

  void validate() const {
    require(hidden >= 1 && frames >= 1 && batch_size >= 1, "eval: hp counts must be >= 1");
    require(max_epochs >= 0 && patience >= 1, "eval: bad epoch budget");
    require(lr > 0.0, "eval: lr must be positive");
  }
};

inline void to_json(nlohmann::json& j, const DownstreamHp& h) {
  j = {{"hidden", h.hidden},       {"frames", h.frames}, {"batch_size", h.batch_size},
       {"max_epochs", h.max_epochs}, {"patience", h.patience}, {"lr", h.lr},
       {"beta1", h.beta1},         {"beta2", h.beta2}};
}

inline void from_json(const nlohmann::json& j, DownstreamHp& h) {
  DownstreamHp d;
  h.hidden = j.value("hidden", d.hidden);
  h.frames = j.value("frames", d.frames);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.max_epochs = j.value("max_epochs", d.max_epochs);
  h.patience = j.value("patience", d.patience);
  h.lr = j.value("lr", d.lr);
  h.beta1 = j.value("beta1", d.beta1);
  h.beta2 = j.value("beta2", d.beta2);
}

struct ConvergenceStats {
  int epochs_run = 0;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_uar = 0.0;
  double train_wall_seconds = 0.0;
  std::vector<int> missing_train_classes;  // warning, not an error
};

// ---- evaluation ----

struct EvalReport {
  double uar = 0.0;
  std::vector<double> per_class_recall;  // -1 for classes absent from the test set
  std::vector<std::pair<std::string, int>> predictions;
  double train_wall_seconds = 0.0;
  int epochs_to_converge = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j["uar"] = r.uar;
  j["per_class_recall"] = r.per_class_recall;
  j["train_wall_seconds"] = r.train_wall_seconds;
  j["epochs_to_converge"] = r.epochs_to_converge;
  j["predictions"] = nlohmann::json::array();
  for (const auto& [id, p] : r.predictions) j["predictions"].push_back({{"utt_id", id}, {"pred", p}});
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  j.at("uar").get_to(r.uar);
  j.at("per_class_recall").get_to(r.per_class_recall);
  r.train_wall_seconds = j.value("train_wall_seconds", 0.0);
  r.epochs_to_converge = j.value("epochs_to_converge", 0);
  r.predictions.clear();
  for (const auto& p : j.at("predictions"))
    r.predictions.emplace_back(p.at("utt_id").get<std::string>(), p.at("pred").get<int>());
}

inline int predict_one(const Downstream& f, const Utterance& u) {
  int T = int(u.features.rows()), D = int(u.features.cols());
  Arr data(std::size_t(T) * D);
  long p = 0;
  for (int t = 0; t < T; ++t)
    for (int d = 0; d < D; ++d) data[p++] = double(u.features(t, d));
  Tensor probs = f.forward(Tensor::constant({1, T, D}, std::move(data))).probs;
  int best = 0;
  for (int c = 1; c < f.cfg.num_classes; ++c)
    if (probs.value()[c] > probs.value()[best]) best = c;
  return best;
}

inline EvalReport evaluate(const Downstream& f, const FeatureDataset& test) {
  require(!test.items.empty(), "eval: empty test set");
  require(test.feature_dim == f.cfg.feature_dim, "eval: feature_dim mismatch");
  int c = f.cfg.num_classes;
  std::vector<int> correct(c, 0), total(c, 0);
  EvalReport r;
  for (const auto& u : test.items) {
    int pred = predict_one(f, u);
    r.predictions.emplace_back(u.utt_id, pred);
    ++total[u.label];
    if (pred == u.label) ++correct[u.label];
  }
  r.per_class_recall.assign(std::size_t(c), -1.0);
  double acc = 0.0;
  int present = 0;
  for (int k = 0; k < c; ++k)
    if (total[k] > 0) {
      r.per_class_recall[std::size_t(k)] = double(correct[k]) / double(total[k]);
      acc += r.per_class_recall[std::size_t(k)];
      ++present;
    }
  r.uar = acc / double(present);
  return r;
}

// UAR only, without prediction bookkeeping.
inline double validation_uar(const Downstream& f, const FeatureDataset& val) {
  return evaluate(f, val).uar;
}

// ---- training ----

// Called after each completed epoch; used by the checkpoint pool harvester.
using EpochHook = std::function<void(int epoch, const Downstream& f, double val_uar)>;

inline std::pair<Downstream, ConvergenceStats> train_downstream(const FeatureDataset& train,
                                                                const FeatureDataset& val,
                                                                const DownstreamHp& hp,
                                                                std::uint64_t seed,
                                                                const EpochHook& hook = nullptr) {
  hp.validate();
  require(!train.items.empty(), "eval: empty training set");
  require(!val.items.empty(), "eval: empty validation set");
  require(train.feature_dim == val.feature_dim, "eval: train/val feature_dim mismatch");
  auto t0 = std::chrono::steady_clock::now();

  DownstreamConfig cfg;
  cfg.feature_dim = train.feature_dim;
  cfg.num_classes = train.num_classes;
  cfg.hidden = hp.hidden;
  cfg.stats = compute_stats(train);
  Rng rng(seed);
  Downstream f(cfg, rng);

  ConvergenceStats stats;
  auto hist = class_histogram(train);
  for (int k = 0; k < train.num_classes; ++k)
    if (hist[k] == 0) stats.missing_train_classes.push_back(k);

  Adam opt(hp.lr, hp.beta1, hp.beta2);
  auto params = f.ps.tensors();
  std::vector<int> order(train.items.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Arr> best = f.snapshot();
  int since_best = 0;
  for (int epoch = 1; epoch <= hp.max_epochs; ++epoch) {
    // Fisher-Yates with the run rng keeps epochs reproducible
    for (int i = int(order.size()) - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[rng.uniform_int(std::uint64_t(i) + 1)]);
    for (std::size_t at = 0; at < order.size(); at += std::size_t(hp.batch_size)) {
      std::vector<int> idx(order.begin() + long(at),
                           order.begin() + long(std::min(at + std::size_t(hp.batch_size),
                                                         order.size())));
      Tensor x = batch_features(train, idx, hp.frames);
      Tensor loss = class_ce(f.forward(x).logits, batch_labels(train, idx));
      require(std::isfinite(loss.item()), "eval: non-finite training loss");
      auto grads = gradients(loss, params);
      opt.step(params, grads);
    }
    double uar = validation_uar(f, val);
    stats.epochs_run = epoch;
    if (hook) hook(epoch, f, uar);
    if (uar > stats.best_val_uar) {
      stats.best_val_uar = uar;
      stats.best_epoch = epoch;
      best = f.snapshot();
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      break;
    }
  }
  f.restore(best);
  stats.train_wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(f), std::move(stats)};
}

}  // namespace ddist
