#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <vector>

#include <json.hpp>

#include "ddist/eval.hpp"
#include "ddist/models.hpp"

namespace ddist {

// A frozen set of downstream classifier snapshots taken along one training
// run; the softmax matching loss draws from it uniformly.
struct CheckpointPool {
  struct Entry {
    int epoch = 0;
    double val_uar = 0.0;
    std::vector<Arr> params;
  };

  DownstreamConfig cfg;
  std::vector<Entry> entries;

  void validate() const {
    require(entries.size() >= 2, "pool: at least 2 checkpoints required");
    for (std::size_t i = 1; i < entries.size(); ++i)
      require(entries[i].epoch > entries[i - 1].epoch, "pool: epochs must increase");
    for (const auto& e : entries)
      require(e.params.size() == entries[0].params.size(), "pool: snapshot layout mismatch");
  }

  // Materialize one entry as a usable model.
  Downstream instantiate(std::size_t index) const {
    require(index < entries.size(), "pool: checkpoint index out of range");
    Rng init_rng(1);
    Downstream f(cfg, init_rng);
    f.restore(entries[index].params);
    return f;
  }
};

inline CheckpointPool harvest_pool(const FeatureDataset& train, const FeatureDataset& val,
                                   const std::vector<int>& epochs_to_snapshot,
                                   const DownstreamHp& hp, std::uint64_t seed) {
  require(!epochs_to_snapshot.empty(), "pool: snapshot schedule is empty");
  require(epochs_to_snapshot.size() >= 2, "pool: at least 2 checkpoints required");
  for (std::size_t i = 0; i < epochs_to_snapshot.size(); ++i) {
    require(epochs_to_snapshot[i] >= 1, "pool: snapshot epochs start at 1");
    if (i) require(epochs_to_snapshot[i] > epochs_to_snapshot[i - 1],
                   "pool: snapshot epochs must be strictly increasing");
  }
  DownstreamHp run_hp = hp;
  run_hp.max_epochs = std::max(hp.max_epochs, epochs_to_snapshot.back());
  require(epochs_to_snapshot.back() <= run_hp.max_epochs,
          "pool: snapshot epoch exceeds the epoch budget");
  run_hp.patience = run_hp.max_epochs;  // harvesting must reach the last snapshot

  CheckpointPool pool;
  auto hook = [&](int epoch, const Downstream& f, double uar) {
    if (std::find(epochs_to_snapshot.begin(), epochs_to_snapshot.end(), epoch) ==
        epochs_to_snapshot.end())
      return;
    CheckpointPool::Entry e;
    e.epoch = epoch;
    e.val_uar = uar;
    e.params = f.snapshot();
    pool.entries.push_back(std::move(e));
  };
  auto [model, stats] = train_downstream(train, val, run_hp, seed, hook);
  pool.cfg = model.cfg;
  require(pool.entries.size() == epochs_to_snapshot.size(),
          "pool: training ended before the snapshot schedule completed");
  pool.validate();
  return pool;
}

// Uniform draw; the returned model is a private copy, so evaluation through it
// can never touch the pool.
inline Downstream sample_checkpoint(const CheckpointPool& pool, Rng& rng) {
  pool.validate();
  std::size_t i = std::size_t(rng.uniform_int(pool.entries.size()));
  return pool.instantiate(i);
}

// ---- pool directory: index.json plus one checkpoint file per entry ----

inline void save_pool(const CheckpointPool& pool, const std::filesystem::path& dir) {
  pool.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(std::filesystem::is_directory(dir), "pool: cannot create directory " + dir.string());
  nlohmann::json index;
  index["entries"] = nlohmann::json::array();
  for (std::size_t i = 0; i < pool.entries.size(); ++i) {
    const auto& e = pool.entries[i];
    std::string file = "ckpt_epoch_" + std::to_string(e.epoch) + ".bin";
    Downstream f = pool.instantiate(i);
    f.save(dir / file);
    index["entries"].push_back({{"epoch", e.epoch}, {"val_uar", e.val_uar}, {"file", file}});
  }
  std::ofstream out(dir / "index.json");
  require(out.good(), "pool: cannot write index in " + dir.string());
  out << index.dump(2) << "\n";
  require(out.good(), "pool: short write for index");
}

inline CheckpointPool load_pool(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  require(in.good(), "pool: cannot open index in " + dir.string());
  nlohmann::json index;
  in >> index;
  CheckpointPool pool;
  bool first = true;
  for (const auto& item : index.at("entries")) {
    Downstream f = Downstream::load(dir / item.at("file").get<std::string>());
    if (first) {
      pool.cfg = f.cfg;
      first = false;
    }
    CheckpointPool::Entry e;
    e.epoch = item.at("epoch").get<int>();
    e.val_uar = item.at("val_uar").get<double>();
    e.params = f.snapshot();
    pool.entries.push_back(std::move(e));
  }
  pool.validate();
  return pool;
}

}  // namespace ddist
