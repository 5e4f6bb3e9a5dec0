#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "ddist/corpus.hpp"
#include "ddist/models.hpp"

namespace ddist {

struct ClassBudget {
  std::vector<int> counts;

  int total() const { return std::accumulate(counts.begin(), counts.end(), 0); }

  void validate() const {
    require(!counts.empty(), "sampler: budget needs at least one class");
    for (int n : counts) require(n >= 0, "sampler: budget counts must be >= 0");
    require(total() > 0, "sampler: budget must request at least one item");
  }
};

enum class BudgetMode { balanced, match, ppc };

inline BudgetMode budget_mode_from_name(const std::string& s) {
  if (s == "balanced") return BudgetMode::balanced;
  if (s == "match") return BudgetMode::match;
  if (s == "ppc") return BudgetMode::ppc;
  fail("sampler: unknown budget mode '" + s + "'");
}

// balanced: total split evenly, remainder to the lowest-indexed classes.
// match: counts proportional to the reference histogram, largest-remainder
// rounding (ties to the lower class index), summing exactly to total.
// ppc: the given count for every class.
inline ClassBudget make_budget(BudgetMode mode, int total_or_ppc,
                               const FeatureDataset* reference, int num_classes) {
  require(num_classes >= 1, "sampler: num_classes must be >= 1");
  require(total_or_ppc >= 1, "sampler: budget size must be >= 1");
  ClassBudget b;
  switch (mode) {
    case BudgetMode::ppc:
      b.counts.assign(std::size_t(num_classes), total_or_ppc);
      break;
    case BudgetMode::balanced: {
      require(total_or_ppc >= num_classes, "sampler: balanced total must be >= num_classes");
      int base = total_or_ppc / num_classes, rem = total_or_ppc % num_classes;
      for (int k = 0; k < num_classes; ++k) b.counts.push_back(base + (k < rem ? 1 : 0));
      break;
    }
    case BudgetMode::match: {
      require(reference != nullptr, "sampler: match mode needs a reference dataset");
      require(!reference->items.empty(), "sampler: match mode reference is empty");
      require(reference->num_classes == num_classes, "sampler: reference class count mismatch");
      auto hist = class_histogram(*reference);
      int n = int(reference->items.size());
      std::vector<double> frac(static_cast<std::size_t>(num_classes), 0.0);
      int assigned = 0;
      for (int k = 0; k < num_classes; ++k) {
        double exact = double(total_or_ppc) * double(hist[k]) / double(n);
        int fl = int(std::floor(exact));
        b.counts.push_back(fl);
        frac[std::size_t(k)] = exact - double(fl);
        assigned += fl;
      }
      std::vector<int> order(static_cast<std::size_t>(num_classes), 0);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int c) { return frac[std::size_t(a)] > frac[std::size_t(c)]; });
      for (int i = 0; i < total_or_ppc - assigned; ++i) ++b.counts[std::size_t(order[std::size_t(i)])];
      break;
    }
  }
  b.validate();
  return b;
}

// Draw budget.counts[k] synthetic utterances of each class k from the trained
// generator; output lives in raw feature space (the generator's normalization
// is undone) so it composes with downstream training unchanged.
inline FeatureDataset sample_dataset(const Generator& g, const ClassBudget& budget,
                                     std::uint64_t seed) {
  budget.validate();
  require(int(budget.counts.size()) == g.cfg.num_classes, "sampler: budget class count mismatch");
  require(int(g.cfg.stats.mean.size()) == g.cfg.feature_dim,
          "sampler: generator stats width mismatch");
  Rng rng(seed);

  FeatureDataset ds;
  ds.feature_dim = g.cfg.feature_dim;
  ds.num_classes = g.cfg.num_classes;
  for (int k = 0; k < ds.num_classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));

  int T = g.cfg.frames, D = g.cfg.feature_dim;
  const FeatureStats& st = g.cfg.stats;
  // Generate per-class chunks so the generator's batch normalization sees a
  // uniform-class batch, and so big budgets stay bounded in memory.
  const int kChunk = 64;
  for (int k = 0; k < ds.num_classes; ++k) {
    int made = 0;
    while (made < budget.counts[std::size_t(k)]) {
      int B = std::min(kChunk, budget.counts[std::size_t(k)] - made);
      LatentBatch z = make_latent_batch(std::vector<int>(std::size_t(B), k), ds.num_classes,
                                        g.cfg.latent_tail, rng);
      Tensor out = g.forward(z);
      for (int b = 0; b < B; ++b, ++made) {
        Utterance u;
        u.utt_id = "synth_c" + std::to_string(k) + "_i" + std::to_string(made);
        u.label = k;
        u.features.resize(T, D);
        for (int t = 0; t < T; ++t)
          for (int d = 0; d < D; ++d)
            u.features(t, d) = float(out.value()[(long(b) * T + t) * D + d] * st.stddev[d] +
                                     st.mean[d]);
        require(u.features.allFinite(), "sampler: generator produced non-finite features");
        ds.items.push_back(std::move(u));
      }
    }
  }
  ds.validate();
  return ds;
}

}  // namespace ddist
