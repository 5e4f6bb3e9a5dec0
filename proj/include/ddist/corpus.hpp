#pragma once

#include <Eigen/Dense>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "ddist/common.hpp"
#include "ddist/tensor.hpp"

// Dataset container and on-disk format: a JSON manifest plus one raw blob per
// utterance (row-major frames x feature_dim, little-endian float32, no header).
// Features are held as float32 in memory so write/load round-trips bit-exactly.

namespace ddist {

using FeatMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Utterance {
  std::string utt_id;
  FeatMat features;  // T x D
  int label = 0;
  std::string speaker_id;  // empty for synthetic samples
};

struct FeatureDataset {
  int feature_dim = 0;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<Utterance> items;

  std::size_t size() const { return items.size(); }

  void validate() const {
    require(feature_dim > 0, "corpus: feature_dim must be positive");
    require(num_classes > 0, "corpus: num_classes must be positive");
    require(int(class_names.size()) == num_classes, "corpus: class_names count mismatch");
    std::unordered_set<std::string> ids;
    for (const auto& u : items) {
      require(u.features.rows() >= 1, "corpus: utterance '" + u.utt_id + "' has no frames");
      require(int(u.features.cols()) == feature_dim,
              "corpus: utterance '" + u.utt_id + "' feature_dim mismatch");
      require(u.label >= 0 && u.label < num_classes,
              "corpus: label out of range for utterance '" + u.utt_id + "'");
      require(u.features.allFinite(),
              "corpus: non-finite feature value in utterance '" + u.utt_id + "'");
      require(ids.insert(u.utt_id).second, "corpus: duplicate utt_id '" + u.utt_id + "'");
    }
  }
};

struct SynthCorpusSpec {
  int num_classes = 4;
  int feature_dim = 16;
  int frames = 8;
  std::vector<int> utterances_per_class = {30, 30, 30, 30};
  int speakers_per_class = 4;
  double class_mean_scale = 1.0;
  double speaker_offset_scale = 0.5;
  double noise_scale = 0.5;
  double ar_coefficient = 0.7;

  void validate() const {
    require(num_classes >= 1 && feature_dim >= 1 && frames >= 1,
            "corpus: synth spec counts must be >= 1");
    require(int(utterances_per_class.size()) == num_classes,
            "corpus: utterances_per_class must list every class");
    for (int n : utterances_per_class) require(n >= 1, "corpus: utterances_per_class >= 1");
    require(speakers_per_class >= 1, "corpus: speakers_per_class >= 1");
    require(class_mean_scale >= 0 && speaker_offset_scale >= 0 && noise_scale >= 0,
            "corpus: scales must be nonnegative");
    require(ar_coefficient >= 0.0 && ar_coefficient < 1.0,
            "corpus: ar_coefficient must be in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const SynthCorpusSpec& s) {
  j = {{"num_classes", s.num_classes},
       {"feature_dim", s.feature_dim},
       {"frames", s.frames},
       {"utterances_per_class", s.utterances_per_class},
       {"speakers_per_class", s.speakers_per_class},
       {"class_mean_scale", s.class_mean_scale},
       {"speaker_offset_scale", s.speaker_offset_scale},
       {"noise_scale", s.noise_scale},
       {"ar_coefficient", s.ar_coefficient}};
}

inline void from_json(const nlohmann::json& j, SynthCorpusSpec& s) {
  j.at("num_classes").get_to(s.num_classes);
  j.at("feature_dim").get_to(s.feature_dim);
  j.at("frames").get_to(s.frames);
  j.at("utterances_per_class").get_to(s.utterances_per_class);
  j.at("speakers_per_class").get_to(s.speakers_per_class);
  s.class_mean_scale = j.value("class_mean_scale", 1.0);
  s.speaker_offset_scale = j.value("speaker_offset_scale", 0.5);
  s.noise_scale = j.value("noise_scale", 0.5);
  s.ar_coefficient = j.value("ar_coefficient", 0.7);
}

// ---- on-disk format ----

inline std::filesystem::path write_dataset(const FeatureDataset& ds,
                                           const std::filesystem::path& dir) {
  ds.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(std::filesystem::is_directory(dir), "corpus: cannot create directory " + dir.string());

  nlohmann::json manifest;
  manifest["feature_dim"] = ds.feature_dim;
  manifest["num_classes"] = ds.num_classes;
  manifest["class_names"] = ds.class_names;
  manifest["items"] = nlohmann::json::array();

  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const Utterance& u = ds.items[i];
    char blob_name[32];
    std::snprintf(blob_name, sizeof blob_name, "utt_%06zu.bin", i);
    std::ofstream blob(dir / blob_name, std::ios::binary);
    require(blob.good(), "corpus: cannot write blob in " + dir.string());
    blob.write(reinterpret_cast<const char*>(u.features.data()),
               std::streamsize(sizeof(float)) * u.features.size());
    require(blob.good(), "corpus: short write for blob " + std::string(blob_name));
    manifest["items"].push_back({{"utt_id", u.utt_id},
                                 {"label", u.label},
                                 {"speaker_id", u.speaker_id},
                                 {"frames", int(u.features.rows())},
                                 {"blob", blob_name}});
  }

  auto manifest_path = dir / "manifest.json";
  std::ofstream out(manifest_path);
  require(out.good(), "corpus: cannot write manifest " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  require(out.good(), "corpus: short write for manifest");
  return manifest_path;
}

inline FeatureDataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(in.good(), "corpus: cannot open manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail("corpus: bad manifest JSON: " + std::string(e.what()));
  }

  FeatureDataset ds;
  ds.feature_dim = manifest.at("feature_dim").get<int>();
  ds.num_classes = manifest.at("num_classes").get<int>();
  ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();

  auto base = manifest_path.parent_path();
  for (const auto& item : manifest.at("items")) {
    Utterance u;
    u.utt_id = item.at("utt_id").get<std::string>();
    u.label = item.at("label").get<int>();
    u.speaker_id = item.value("speaker_id", std::string{});
    int frames = item.at("frames").get<int>();
    require(frames >= 1, "corpus: frames must be >= 1 for '" + u.utt_id + "'");
    auto blob_path = base / item.at("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    require(blob.good(), "corpus: missing blob " + blob_path.string());
    auto expected = std::uintmax_t(frames) * ds.feature_dim * sizeof(float);
    require(std::filesystem::file_size(blob_path) == expected,
            "corpus: blob size disagrees with manifest shape for '" + u.utt_id + "'");
    u.features.resize(frames, ds.feature_dim);
    blob.read(reinterpret_cast<char*>(u.features.data()), std::streamsize(expected));
    require(std::size_t(blob.gcount()) == expected, "corpus: short read for '" + u.utt_id + "'");
    ds.items.push_back(std::move(u));
  }
  ds.validate();
  return ds;
}

// ---- synthetic desk-scale corpus ----

inline FeatureDataset generate_synth_corpus(const SynthCorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  FeatureDataset ds;
  ds.feature_dim = spec.feature_dim;
  ds.num_classes = spec.num_classes;
  for (int k = 0; k < spec.num_classes; ++k) ds.class_names.push_back("class_" + std::to_string(k));

  int D = spec.feature_dim;
  for (int k = 0; k < spec.num_classes; ++k) {
    Eigen::VectorXd mu(D);
    for (int d = 0; d < D; ++d) mu[d] = rng.normal() * spec.class_mean_scale;

    std::vector<Eigen::VectorXd> speaker_offset(spec.speakers_per_class);
    for (auto& off : speaker_offset) {
      off.resize(D);
      for (int d = 0; d < D; ++d) off[d] = rng.normal() * spec.speaker_offset_scale;
    }

    for (int i = 0; i < spec.utterances_per_class[k]; ++i) {
      int s = i % spec.speakers_per_class;
      Utterance u;
      u.utt_id = "c" + std::to_string(k) + "_u" + std::to_string(i);
      u.label = k;
      u.speaker_id = "spk_" + std::to_string(k) + "_" + std::to_string(s);
      u.features.resize(spec.frames, D);
      Eigen::VectorXd noise = Eigen::VectorXd::Zero(D);
      for (int t = 0; t < spec.frames; ++t) {
        for (int d = 0; d < D; ++d) {
          double eps = rng.normal() * spec.noise_scale;
          noise[d] = (t == 0) ? eps : spec.ar_coefficient * noise[d] + eps;
          u.features(t, d) = float(mu[d] + speaker_offset[s][d] + noise[d]);
        }
      }
      ds.items.push_back(std::move(u));
    }
  }
  ds.validate();
  return ds;
}

// ---- length normalization and accounting ----

// Center-crop long inputs, right-pad short ones by repeating the final frame.
inline FeatMat fix_length(const FeatMat& features, int target_frames) {
  require(target_frames >= 1, "corpus: target frame count must be >= 1");
  int T = int(features.rows());
  if (T == target_frames) return features;
  FeatMat out(target_frames, features.cols());
  if (T > target_frames) {
    int start = (T - target_frames) / 2;
    out = features.middleRows(start, target_frames);
  } else {
    out.topRows(T) = features;
    for (int t = T; t < target_frames; ++t) out.row(t) = features.row(T - 1);
  }
  return out;
}

inline std::vector<int> class_histogram(const FeatureDataset& ds) {
  std::vector<int> counts(ds.num_classes, 0);
  for (const auto& u : ds.items) ++counts[u.label];
  return counts;
}

// ---- normalization statistics ----

// Per-channel mean/stddev over all frames of a (real, training) dataset.
// Applied identically to real and synthetic features downstream; the stddev is
// floored to keep degenerate channels usable.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;

  static FeatureStats identity(int feature_dim) {
    FeatureStats s;
    s.mean = Eigen::VectorXd::Zero(feature_dim);
    s.stddev = Eigen::VectorXd::Ones(feature_dim);
    return s;
  }
};

inline FeatureStats compute_stats(const FeatureDataset& ds) {
  require(!ds.items.empty(), "corpus: stats need a nonempty dataset");
  int D = ds.feature_dim;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(D), sumsq = Eigen::VectorXd::Zero(D);
  std::size_t n = 0;
  for (const auto& u : ds.items) {
    for (int t = 0; t < u.features.rows(); ++t) {
      Eigen::VectorXd row = u.features.row(t).cast<double>();
      sum += row;
      sumsq += row.cwiseProduct(row);
    }
    n += std::size_t(u.features.rows());
  }
  FeatureStats s;
  s.mean = sum / double(n);
  s.stddev = ((sumsq / double(n)) - s.mean.cwiseProduct(s.mean)).cwiseMax(0.0).cwiseSqrt();
  s.stddev = s.stddev.cwiseMax(1e-6);
  return s;
}

inline void to_json(nlohmann::json& j, const FeatureStats& s) {
  j = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
       {"stddev", std::vector<double>(s.stddev.data(), s.stddev.data() + s.stddev.size())}};
}

inline void from_json(const nlohmann::json& j, FeatureStats& s) {
  auto m = j.at("mean").get<std::vector<double>>();
  auto d = j.at("stddev").get<std::vector<double>>();
  s.mean = Eigen::Map<Eigen::VectorXd>(m.data(), long(m.size()));
  s.stddev = Eigen::Map<Eigen::VectorXd>(d.data(), long(d.size()));
}

// ---- batch assembly ----

// Stack utterances (length-normalized to `frames`) into a {B, T, D} constant.
inline Tensor batch_features(const FeatureDataset& ds, const std::vector<int>& indices,
                             int frames) {
  int B = int(indices.size()), D = ds.feature_dim;
  Arr data(std::size_t(B) * frames * D);
  long p = 0;
  for (int idx : indices) {
    FeatMat f = fix_length(ds.items[idx].features, frames);
    for (int t = 0; t < frames; ++t)
      for (int d = 0; d < D; ++d) data[p++] = double(f(t, d));
  }
  return Tensor::constant({B, frames, D}, std::move(data));
}

inline std::vector<int> batch_labels(const FeatureDataset& ds, const std::vector<int>& indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (int idx : indices) labels.push_back(ds.items[idx].label);
  return labels;
}

}  // namespace ddist
