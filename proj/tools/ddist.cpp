// Pipeline front door: every stage of the distillation workflow as a
// subcommand, each writing a provenance record next to its output.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddist/checkpoint_pool.hpp"
#include "ddist/corpus.hpp"
#include "ddist/distiller.hpp"
#include "ddist/eval.hpp"
#include "ddist/models.hpp"
#include "ddist/sampler.hpp"
#include "ddist/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
  std::ifstream in(path);
  ddist::require(in.good(), "cli: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    ddist::fail("cli: bad JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  ddist::require(out.good(), "cli: cannot write " + path);
  out << j.dump(2) << "\n";
  ddist::require(out.good(), "cli: short write for " + path);
}

// Every successful run leaves <out>.provenance.json: enough to re-run the
// command and to tie artifacts back to their inputs.
void write_provenance(const std::string& out, const std::string& subcommand, const json& config,
                      std::uint64_t seed) {
  json p = {{"subcommand", subcommand},
            {"seed", seed},
            {"version", ddist::kVersion},
            {"config", config},
            {"config_digest", ddist::fnv1a(config.dump())}};
  write_json(p, out + ".provenance.json");
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

// Predictions: either a bare JSON array of class indices, or an EvalReport.
// When reports are used the items are aligned by utt_id against the labels
// manifest; bare arrays align positionally.
std::vector<int> load_predictions(const std::string& path,
                                  std::vector<std::string>* ids_out = nullptr) {
  json j = load_json(path);
  std::vector<int> preds;
  if (j.is_array()) {
    preds = j.get<std::vector<int>>();
  } else {
    for (const auto& p : j.at("predictions")) {
      preds.push_back(p.at("pred").get<int>());
      if (ids_out) ids_out->push_back(p.at("utt_id").get<std::string>());
    }
  }
  return preds;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct CommonOpts {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dataset distillation toolkit for sequence features"};
  app.require_subcommand(1);
  CommonOpts opt;
  app.add_option("--config", opt.config, "configuration file (JSON)");
  app.add_option("--seed", opt.seed, "rng seed");
  app.add_option("--out", opt.out, "output path");
  app.fallthrough();

  // ---- synth-corpus ----
  auto* synth = app.add_subcommand("synth-corpus", "generate a synthetic labeled corpus");
  std::string synth_spec;
  synth->add_option("--spec", synth_spec, "corpus spec JSON (falls back to --config)");
  synth->callback([&]() {
    std::string spec_path = synth_spec.empty() ? opt.config : synth_spec;
    ddist::require(!opt.out.empty(), "cli: --out directory required");
    ddist::SynthCorpusSpec spec;
    json j = spec_path.empty() ? json(spec) : load_json(spec_path);
    spec = j.get<ddist::SynthCorpusSpec>();
    auto ds = ddist::generate_synth_corpus(spec, opt.seed);
    auto manifest = ddist::write_dataset(ds, opt.out);
    write_provenance(opt.out, "synth-corpus", j, opt.seed);
    std::cout << json{{"manifest", manifest.string()}, {"items", ds.items.size()}}.dump()
              << "\n";
  });

  // ---- harvest-pool ----
  auto* harvest = app.add_subcommand("harvest-pool", "train a downstream model, snapshot epochs");
  std::string hv_train, hv_val, hv_epochs = "1,2,4,8,16,32";
  harvest->add_option("--train", hv_train, "training manifest")->required();
  harvest->add_option("--val", hv_val, "validation manifest")->required();
  harvest->add_option("--epochs", hv_epochs, "comma-separated snapshot epochs");
  harvest->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out pool directory required");
    ddist::DownstreamHp hp;
    json hpj = opt.config.empty() ? json(hp) : load_json(opt.config);
    hp = hpj.get<ddist::DownstreamHp>();
    auto train = ddist::load_dataset(hv_train);
    auto val = ddist::load_dataset(hv_val);
    auto pool = ddist::harvest_pool(train, val, parse_int_list(hv_epochs), hp, opt.seed);
    ddist::save_pool(pool, opt.out);
    json cfg = {{"hp", hpj}, {"epochs", hv_epochs}, {"train", hv_train}, {"val", hv_val}};
    write_provenance(opt.out, "harvest-pool", cfg, opt.seed);
    json out = {{"checkpoints", pool.entries.size()}};
    for (const auto& e : pool.entries)
      out["val_uar"].push_back({{"epoch", e.epoch}, {"uar", e.val_uar}});
    std::cout << out.dump() << "\n";
  });

  // ---- distill ----
  auto* dist = app.add_subcommand("distill", "train the generator on a real dataset");
  std::string ds_train, ds_pool, ds_log;
  dist->add_option("--train", ds_train, "training manifest")->required();
  dist->add_option("--pool", ds_pool, "checkpoint pool directory");
  dist->add_option("--log", ds_log, "train log path (default <out>.log.jsonl)");
  dist->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out checkpoint path required");
    ddist::require(!opt.config.empty(), "cli: --config distillation config required");
    json cfgj = load_json(opt.config);
    ddist::DistillConfig cfg = cfgj.get<ddist::DistillConfig>();
    if (app.count("--seed") > 0) cfg.seed = opt.seed;
    auto data = ddist::load_dataset(ds_train);
    ddist::CheckpointPool pool;
    bool have_pool = !ds_pool.empty();
    if (have_pool) pool = ddist::load_pool(ds_pool);
    auto result = ddist::distill(data, have_pool ? &pool : nullptr, cfg);
    result.generator.save(opt.out);
    result.log.save(ds_log.empty() ? opt.out + ".log.jsonl" : ds_log);
    write_provenance(opt.out, "distill", cfgj, cfg.seed);
    std::cout << json{{"generator", opt.out}, {"steps", result.log.records.size()}}.dump()
              << "\n";
  });

  // ---- sample ----
  auto* smp = app.add_subcommand("sample", "draw a synthetic dataset from a generator");
  std::string sp_gen, sp_mode = "ppc", sp_ref;
  int sp_count = 50;
  smp->add_option("--generator", sp_gen, "generator checkpoint")->required();
  smp->add_option("--mode", sp_mode, "budget mode: ppc | balanced | match");
  smp->add_option("--count", sp_count, "points per class (ppc) or total (balanced/match)");
  smp->add_option("--reference", sp_ref, "reference manifest for match mode");
  smp->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out directory required");
    ddist::Generator g = ddist::Generator::load(sp_gen);
    ddist::FeatureDataset ref;
    bool have_ref = !sp_ref.empty();
    if (have_ref) ref = ddist::load_dataset(sp_ref);
    auto budget = ddist::make_budget(ddist::budget_mode_from_name(sp_mode), sp_count,
                                     have_ref ? &ref : nullptr, g.cfg.num_classes);
    auto ds = ddist::sample_dataset(g, budget, opt.seed);
    auto manifest = ddist::write_dataset(ds, opt.out);
    json cfg = {{"generator", sp_gen}, {"mode", sp_mode}, {"count", sp_count},
                {"budget", budget.counts}};
    write_provenance(opt.out, "sample", cfg, opt.seed);
    std::cout << json{{"manifest", manifest.string()}, {"histogram", ddist::class_histogram(ds)}}
                     .dump()
              << "\n";
  });

  // ---- train-downstream ----
  auto* td = app.add_subcommand("train-downstream", "train the downstream classifier");
  std::string td_train, td_val;
  td->add_option("--train", td_train, "training manifest (real or synthetic)")->required();
  td->add_option("--val", td_val, "validation manifest (real)")->required();
  td->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out checkpoint path required");
    ddist::DownstreamHp hp;
    json hpj = opt.config.empty() ? json(hp) : load_json(opt.config);
    hp = hpj.get<ddist::DownstreamHp>();
    auto train = ddist::load_dataset(td_train);
    auto val = ddist::load_dataset(td_val);
    auto [model, stats] = ddist::train_downstream(train, val, hp, opt.seed);
    model.save(opt.out);
    json out = {{"model", opt.out},
                {"epochs_run", stats.epochs_run},
                {"best_epoch", stats.best_epoch},
                {"best_val_uar", stats.best_val_uar},
                {"train_wall_seconds", stats.train_wall_seconds},
                {"missing_train_classes", stats.missing_train_classes}};
    write_json(out, opt.out + ".train.json");
    write_provenance(opt.out, "train-downstream", hpj, opt.seed);
    std::cout << out.dump() << "\n";
  });

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a downstream model on a test manifest");
  std::string ev_model, ev_test;
  ev->add_option("--model", ev_model, "downstream checkpoint")->required();
  ev->add_option("--test", ev_test, "test manifest")->required();
  ev->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out report path required");
    ddist::Downstream f = ddist::Downstream::load(ev_model);
    auto test = ddist::load_dataset(ev_test);
    ddist::EvalReport r = ddist::evaluate(f, test);
    json j;
    ddist::to_json(j, r);
    write_json(j, opt.out);
    write_provenance(opt.out, "eval", json{{"model", ev_model}, {"test", ev_test}}, opt.seed);
    std::cout << json{{"uar", r.uar}}.dump() << "\n";
  });

  // ---- mcnemar ----
  auto* mc = app.add_subcommand("mcnemar", "paired significance test between two systems");
  std::string mc_a, mc_b, mc_labels;
  double mc_alpha = 0.05;
  mc->add_option("--preds-a", mc_a, "predictions (JSON array or eval report)")->required();
  mc->add_option("--preds-b", mc_b, "predictions (JSON array or eval report)")->required();
  mc->add_option("--labels", mc_labels, "labels (JSON array or dataset manifest)")->required();
  mc->add_option("--alpha", mc_alpha, "significance level");
  mc->callback([&]() {
    std::vector<std::string> ids_a, ids_b;
    std::vector<int> preds_a = load_predictions(mc_a, &ids_a);
    std::vector<int> preds_b = load_predictions(mc_b, &ids_b);
    json lj = load_json(mc_labels);
    std::vector<int> labels;
    if (lj.is_array()) {
      labels = lj.get<std::vector<int>>();
      ddist::require(ids_a.empty() || ids_a == ids_b,
                     "cli: eval reports with differing utt_id order need a manifest for labels");
    } else {
      std::map<std::string, int> by_id;
      for (const auto& item : lj.at("items"))
        by_id[item.at("utt_id").get<std::string>()] = item.at("label").get<int>();
      ddist::require(!ids_a.empty() && !ids_b.empty(),
                     "cli: manifest labels require eval-report predictions");
      std::map<std::string, int> bmap;
      for (std::size_t i = 0; i < ids_b.size(); ++i) bmap[ids_b[i]] = preds_b[i];
      std::vector<int> b_aligned;
      for (std::size_t i = 0; i < ids_a.size(); ++i) {
        ddist::require(by_id.count(ids_a[i]) && bmap.count(ids_a[i]),
                       "cli: utt_id '" + ids_a[i] + "' missing from labels or system B");
        labels.push_back(by_id.at(ids_a[i]));
        b_aligned.push_back(bmap.at(ids_a[i]));
      }
      preds_b = std::move(b_aligned);
    }
    auto r = ddist::mcnemar_test(preds_a, preds_b, labels, mc_alpha);
    json j;
    ddist::to_json(j, r);
    if (!opt.out.empty()) write_json(j, opt.out);
    std::cout << j.dump() << "\n";
  });

  // ---- storage-report ----
  auto* st = app.add_subcommand("storage-report", "size reduction of an artifact vs baselines");
  std::uintmax_t st_base = 0, st_feats = 0;
  std::string st_artifact;
  st->add_option("--baseline-bytes", st_base, "raw audio bytes")->required();
  st->add_option("--feats-bytes", st_feats, "extracted feature bytes")->required();
  st->add_option("--artifact", st_artifact, "artifact file (e.g. generator checkpoint)")
      ->required();
  st->callback([&]() {
    auto r = ddist::storage_report(st_base, st_feats, st_artifact);
    json j;
    ddist::to_json(j, r);
    j["reduction_vs_audio_display"] = pct(r.reduction_vs_audio);
    j["reduction_vs_feats_display"] = pct(r.reduction_vs_feats);
    if (!opt.out.empty()) write_json(j, opt.out);
    std::cout << j.dump() << "\n";
  });

  // ---- probe-speaker ----
  auto* pr = app.add_subcommand("probe-speaker",
                                "linear speaker-identification probe on model embeddings");
  std::string pr_model, pr_data;
  pr->add_option("--model", pr_model, "downstream checkpoint")->required();
  pr->add_option("--data", pr_data, "manifest with speaker ids")->required();
  pr->callback([&]() {
    ddist::Downstream f = ddist::Downstream::load(pr_model);
    auto ds = ddist::load_dataset(pr_data);
    ddist::EmbedFn embed = [&f](const ddist::Utterance& u) {
      int T = int(u.features.rows()), D = int(u.features.cols());
      ddist::Arr data(std::size_t(T) * D);
      long p = 0;
      for (int t = 0; t < T; ++t)
        for (int d = 0; d < D; ++d) data[p++] = double(u.features(t, d));
      return f.forward(ddist::Tensor::constant({1, T, D}, std::move(data))).embeddings.value();
    };
    double acc = ddist::speaker_probe(embed, ds, opt.seed);
    json j = {{"accuracy", acc}};
    if (!opt.out.empty()) {
      write_json(j, opt.out);
      write_provenance(opt.out, "probe-speaker", json{{"model", pr_model}, {"data", pr_data}},
                       opt.seed);
    }
    std::cout << j.dump() << "\n";
  });

  // ---- report ----
  auto* rp = app.add_subcommand("report", "render eval/significance/storage results as Markdown");
  std::vector<std::string> rp_evals, rp_mcnemars;
  std::string rp_storage;
  rp->add_option("--eval", rp_evals, "NAME=path to an eval report (repeatable)");
  rp->add_option("--mcnemar", rp_mcnemars, "NAME=path to a mcnemar result (repeatable)");
  rp->add_option("--storage", rp_storage, "path to a storage report");
  rp->callback([&]() {
    ddist::require(!opt.out.empty(), "cli: --out markdown path required");
    std::ostringstream md;
    md << "# Results\n";
    if (!rp_evals.empty()) {
      md << "\n## Downstream performance\n\n| System | UAR | Per-class recall |\n"
         << "| --- | --- | --- |\n";
      for (const auto& spec : rp_evals) {
        auto eq = spec.find('=');
        ddist::require(eq != std::string::npos, "cli: --eval expects NAME=path");
        json j = load_json(spec.substr(eq + 1));
        std::ostringstream rec;
        for (const auto& v : j.at("per_class_recall"))
          rec << (rec.tellp() > 0 ? ", " : "") << v.dump();
        md << "| " << spec.substr(0, eq) << " | " << pct(j.at("uar").get<double>() * 100.0)
           << " | " << rec.str() << " |\n";
      }
    }
    if (!rp_mcnemars.empty()) {
      md << "\n## Significance\n\n| Comparison | b | c | p-value | significant |\n"
         << "| --- | --- | --- | --- | --- |\n";
      for (const auto& spec : rp_mcnemars) {
        auto eq = spec.find('=');
        ddist::require(eq != std::string::npos, "cli: --mcnemar expects NAME=path");
        json j = load_json(spec.substr(eq + 1));
        md << "| " << spec.substr(0, eq) << " | " << j.at("b") << " | " << j.at("c") << " | "
           << j.at("p_value") << " | " << (j.at("significant").get<bool>() ? "yes" : "no")
           << " |\n";
      }
    }
    if (!rp_storage.empty()) {
      json j = load_json(rp_storage);
      md << "\n## Storage\n\n| Baseline | Bytes | Reduction |\n| --- | --- | --- |\n"
         << "| audio | " << j.at("baseline_bytes") << " | "
         << pct(j.at("reduction_vs_audio").get<double>()) << "% |\n"
         << "| features | " << j.at("feats_bytes") << " | "
         << pct(j.at("reduction_vs_feats").get<double>()) << "% |\n"
         << "| artifact | " << j.at("artifact_bytes") << " | - |\n";
    }
    std::ofstream out(opt.out);
    ddist::require(out.good(), "cli: cannot write " + opt.out);
    out << md.str();
    std::cout << json{{"report", opt.out}}.dump() << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
