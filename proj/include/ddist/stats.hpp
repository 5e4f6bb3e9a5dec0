#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddist/corpus.hpp"
#include "ddist/optim.hpp"
#include "ddist/nn.hpp"

namespace ddist {

// ---- McNemar's test on paired predictions ----

struct McNemarResult {
  int b = 0;        // A correct, B wrong
  int c_count = 0;  // A wrong, B correct
  double p_value = 1.0;
  bool significant = false;
  std::string method;  // "exact" or "chi2_corrected"
};

inline void to_json(nlohmann::json& j, const McNemarResult& r) {
  j = {{"b", r.b},
       {"c", r.c_count},
       {"p_value", r.p_value},
       {"significant", r.significant},
       {"method", r.method}};
}

namespace detail {

// P(X <= k) for X ~ Binomial(n, 1/2), via lgamma for numeric range.
inline double binom_cdf_half(int k, int n) {
  double acc = 0.0;
  for (int i = 0; i <= k; ++i) {
    double logp = std::lgamma(double(n) + 1) - std::lgamma(double(i) + 1) -
                  std::lgamma(double(n - i) + 1) - double(n) * std::log(2.0);
    acc += std::exp(logp);
  }
  return acc;
}

}  // namespace detail

inline McNemarResult mcnemar_counts(int b, int c_count, double alpha) {
  require(b >= 0 && c_count >= 0, "stats: discordant counts must be >= 0");
  require(alpha > 0.0 && alpha < 1.0, "stats: alpha must be in (0,1)");
  McNemarResult r;
  r.b = b;
  r.c_count = c_count;
  int n = b + c_count;
  if (n == 0) {
    r.p_value = 1.0;
    r.method = "exact";
  } else if (n <= 25) {
    r.p_value = std::min(1.0, 2.0 * detail::binom_cdf_half(std::min(b, c_count), n));
    r.method = "exact";
  } else {
    double stat = std::pow(std::abs(double(b) - double(c_count)) - 1.0, 2.0) / double(n);
    // two-tailed survival of chi-square(1): erfc(sqrt(stat/2))
    r.p_value = std::erfc(std::sqrt(stat / 2.0));
    r.method = "chi2_corrected";
  }
  r.significant = r.p_value < alpha;
  return r;
}

inline McNemarResult mcnemar_test(const std::vector<int>& preds_a,
                                  const std::vector<int>& preds_b,
                                  const std::vector<int>& labels, double alpha) {
  require(preds_a.size() == preds_b.size() && preds_a.size() == labels.size(),
          "stats: mcnemar inputs must have equal length");
  int b = 0, c_count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool a_ok = preds_a[i] == labels[i];
    bool b_ok = preds_b[i] == labels[i];
    if (a_ok && !b_ok) ++b;
    if (!a_ok && b_ok) ++c_count;
  }
  return mcnemar_counts(b, c_count, alpha);
}

// ---- storage accounting ----

struct StorageReport {
  std::uintmax_t baseline_bytes = 0;
  std::uintmax_t feats_bytes = 0;
  std::uintmax_t artifact_bytes = 0;
  double reduction_vs_audio = 0.0;  // percent
  double reduction_vs_feats = 0.0;  // percent
};

inline void to_json(nlohmann::json& j, const StorageReport& r) {
  j = {{"baseline_bytes", r.baseline_bytes},
       {"feats_bytes", r.feats_bytes},
       {"artifact_bytes", r.artifact_bytes},
       {"reduction_vs_audio", r.reduction_vs_audio},
       {"reduction_vs_feats", r.reduction_vs_feats}};
}

inline double reduction_percent(std::uintmax_t baseline, std::uintmax_t artifact) {
  require(baseline > 0, "stats: baseline size must be positive");
  return (1.0 - double(artifact) / double(baseline)) * 100.0;
}

inline StorageReport storage_report(std::uintmax_t baseline_bytes, std::uintmax_t feats_bytes,
                                    const std::filesystem::path& artifact_path) {
  require(std::filesystem::exists(artifact_path),
          "stats: missing artifact " + artifact_path.string());
  StorageReport r;
  r.baseline_bytes = baseline_bytes;
  r.feats_bytes = feats_bytes;
  r.artifact_bytes = std::filesystem::file_size(artifact_path);
  r.reduction_vs_audio = reduction_percent(baseline_bytes, r.artifact_bytes);
  r.reduction_vs_feats = reduction_percent(feats_bytes, r.artifact_bytes);
  return r;
}

// ---- speaker-identity probe ----

using EmbedFn = std::function<Arr(const Utterance&)>;

// Stratified 80/20 split per speaker, then a single linear softmax classifier
// from embeddings to speaker ids; returns held-out accuracy. Measures how much
// speaker information the embedding carries linearly.
inline double speaker_probe(const EmbedFn& embed, const FeatureDataset& ds,
                            std::uint64_t split_seed) {
  require(!ds.items.empty(), "stats: speaker probe needs data");
  std::map<std::string, std::vector<int>> by_speaker;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    require(!ds.items[i].speaker_id.empty(), "stats: empty speaker_id in probe dataset");
    by_speaker[ds.items[i].speaker_id].push_back(int(i));
  }
  require(by_speaker.size() >= 2, "stats: speaker probe needs >= 2 speakers");

  int S = int(by_speaker.size());
  std::map<std::string, int> speaker_index;
  for (const auto& [spk, _] : by_speaker) speaker_index.emplace(spk, int(speaker_index.size()));

  Rng rng(split_seed);
  std::vector<int> train_idx, test_idx;
  for (auto& [spk, idx] : by_speaker) {
    for (int i = int(idx.size()) - 1; i > 0; --i)
      std::swap(idx[std::size_t(i)], idx[rng.uniform_int(std::uint64_t(i) + 1)]);
    std::size_t n_test = std::max<std::size_t>(1, idx.size() / 5);
    if (n_test >= idx.size()) n_test = idx.size() - 1;  // keep at least one training item
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < n_test ? test_idx : train_idx).push_back(idx[i]);
  }
  require(!train_idx.empty() && !test_idx.empty(), "stats: degenerate probe split");

  std::vector<Arr> emb(ds.items.size());
  int width = -1;
  auto embedding_of = [&](int i) -> const Arr& {
    if (emb[std::size_t(i)].size() == 0) {
      emb[std::size_t(i)] = embed(ds.items[std::size_t(i)]);
      if (width < 0) width = int(emb[std::size_t(i)].size());
      require(int(emb[std::size_t(i)].size()) == width, "stats: embedding width drift");
    }
    return emb[std::size_t(i)];
  };
  embedding_of(train_idx[0]);

  Tensor W = Tensor::param({width, S}, Arr::Zero(width * S));
  Tensor bias = Tensor::param({1, S}, Arr::Zero(S));
  std::vector<Tensor> params = {W, bias};
  Adam opt(0.05, 0.9, 0.999);

  int B = int(train_idx.size());
  Arr x(std::size_t(B) * width);
  std::vector<int> y(static_cast<std::size_t>(B), 0);
  for (int j = 0; j < B; ++j) {
    const Arr& e = embedding_of(train_idx[std::size_t(j)]);
    for (int k = 0; k < width; ++k) x[long(j) * width + k] = e[k];
    y[std::size_t(j)] = speaker_index.at(ds.items[std::size_t(train_idx[std::size_t(j)])].speaker_id);
  }
  Tensor X = Tensor::constant({B, width}, std::move(x));

  for (int it = 0; it < 200; ++it) {
    Tensor logits = add(matmul(X, W), tile_rows(bias, B));
    Tensor lse = logsumexp_rows(logits);
    Tensor loss = mean(sub(lse, pick_per_row(logits, y)));
    auto grads = gradients(loss, params);
    opt.step(params, grads);
  }

  int correct = 0;
  for (int i : test_idx) {
    const Arr& e = embedding_of(i);
    int best = 0;
    double best_v = -1e300;
    for (int s = 0; s < S; ++s) {
      double v = bias.value()[s];
      for (int k = 0; k < width; ++k) v += e[k] * W.value()[long(k) * S + s];
      if (v > best_v) {
        best_v = v;
        best = s;
      }
    }
    if (best == speaker_index.at(ds.items[std::size_t(i)].speaker_id)) ++correct;
  }
  return double(correct) / double(test_idx.size());
}

}  // namespace ddist
