#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ddist/stats.hpp"
#include "test_util.hpp"

using namespace ddist;
namespace fs = std::filesystem;

TEST_CASE("mcnemar degenerate and hand-checked cases") {
  auto r0 = mcnemar_counts(0, 0, 0.05);
  CHECK(r0.p_value == 1.0);
  CHECK_FALSE(r0.significant);
  CHECK(r0.method == "exact");

  auto r1 = mcnemar_counts(10, 0, 0.05);
  CHECK(r1.p_value == Catch::Approx(0.001953125).epsilon(1e-12));
  CHECK(r1.significant);
  CHECK(r1.method == "exact");

  auto r2 = mcnemar_counts(5, 5, 0.05);
  CHECK(r2.p_value == Catch::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(r2.significant);
}

TEST_CASE("mcnemar exact branch matches brute-force binomial enumeration") {
  // Pascal's triangle in exact integer arithmetic
  long long choose[21][21] = {};
  for (int n = 0; n <= 20; ++n) {
    choose[n][0] = 1;
    for (int k = 1; k <= n; ++k)
      choose[n][k] = choose[n - 1][k - 1] + (k <= n - 1 ? choose[n - 1][k] : 0);
  }
  for (int b = 0; b <= 20; ++b)
    for (int c = 0; b + c <= 20; ++c) {
      if (b + c == 0) continue;
      int n = b + c, m = std::min(b, c);
      long long tail = 0;
      for (int i = 0; i <= m; ++i) tail += choose[n][i];
      double expected = std::min(1.0, 2.0 * double(tail) / std::pow(2.0, n));
      auto r = mcnemar_counts(b, c, 0.05);
      INFO("b=" << b << " c=" << c);
      CHECK(r.method == "exact");
      CHECK(r.p_value == Catch::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("mcnemar large-sample branch uses the corrected chi-square") {
  auto r = mcnemar_counts(30, 10, 0.05);
  CHECK(r.method == "chi2_corrected");
  CHECK(r.p_value == Catch::Approx(0.002663119259138554).epsilon(1e-9));
  CHECK(r.significant);
}

TEST_CASE("mcnemar is symmetric in the two systems") {
  for (auto [b, c] : std::vector<std::pair<int, int>>{{3, 7}, {0, 12}, {18, 22}, {40, 5}}) {
    auto r1 = mcnemar_counts(b, c, 0.05);
    auto r2 = mcnemar_counts(c, b, 0.05);
    CHECK(r1.p_value == r2.p_value);
    CHECK(r1.b == r2.c_count);
  }
}

TEST_CASE("mcnemar counts discordant pairs from prediction lists") {
  //            labels:   0  1  2  0  1  2
  std::vector<int> labels{0, 1, 2, 0, 1, 2};
  std::vector<int> a{0, 1, 2, 0, 1, 0};  // wrong on last
  std::vector<int> b{0, 1, 0, 1, 1, 2};  // wrong on items 2, 3
  auto r = mcnemar_test(a, b, labels, 0.05);
  CHECK(r.b == 2);        // a right, b wrong: items 2 and 3
  CHECK(r.c_count == 1);  // a wrong, b right: item 5
  CHECK_THROWS(mcnemar_test(a, b, {0, 1}, 0.05));
}

TEST_CASE("storage reduction percentages match the reference byte counts") {
  CHECK(reduction_percent(1'800'000'000ULL, 100'000'000ULL) ==
        Catch::Approx(94.4444444444).margin(1e-6));
  CHECK(reduction_percent(2'400'000'000ULL, 100'000'000ULL) ==
        Catch::Approx(95.8333333333).margin(1e-6));

  auto path = fs::temp_directory_path() / "ddist_test_artifact.bin";
  {
    std::ofstream out(path, std::ios::binary);
    std::vector<char> buf(1000, 'x');
    out.write(buf.data(), std::streamsize(buf.size()));
  }
  auto r = storage_report(1000, 4000, path);
  CHECK(r.artifact_bytes == 1000);
  CHECK(r.reduction_vs_audio == Catch::Approx(0.0).margin(1e-12));
  CHECK(r.reduction_vs_feats == Catch::Approx(75.0).margin(1e-12));
  CHECK_THROWS(storage_report(1000, 4000, "/nonexistent/thing.bin"));
}

namespace {

FeatureDataset speaker_corpus(double offset_scale, std::uint64_t seed) {
  SynthCorpusSpec spec;
  spec.num_classes = 2;
  spec.feature_dim = 8;
  spec.frames = 6;
  spec.utterances_per_class = {60, 60};
  spec.speakers_per_class = 3;
  spec.speaker_offset_scale = offset_scale;
  spec.noise_scale = 0.3;
  return generate_synth_corpus(spec, seed);
}

Arr mean_pool_embed(const Utterance& u) {
  Arr e = Arr::Zero(u.features.cols());
  for (int t = 0; t < u.features.rows(); ++t)
    for (int d = 0; d < u.features.cols(); ++d) e[d] += double(u.features(t, d));
  return e / double(u.features.rows());
}

}  // namespace

TEST_CASE("speaker probe scores an informative embedding perfectly") {
  FeatureDataset ds = speaker_corpus(1.0, 5);
  std::map<std::string, int> idx;
  for (const auto& u : ds.items) idx.emplace(u.speaker_id, int(idx.size()));
  EmbedFn one_hot = [&](const Utterance& u) {
    Arr e = Arr::Zero(long(idx.size()));
    e[idx.at(u.speaker_id)] = 1.0;
    return e;
  };
  CHECK(speaker_probe(one_hot, ds, 3) == 1.0);
}

TEST_CASE("speaker probe is at chance for speaker-independent embeddings") {
  FeatureDataset ds = speaker_corpus(1.0, 6);  // 6 speakers total
  Rng noise(77);
  double acc = 0.0;
  int runs = 5;
  for (int s = 0; s < runs; ++s) {
    EmbedFn random_embed = [&](const Utterance&) { return ddist::testutil::random_arr(8, noise); };
    acc += speaker_probe(random_embed, ds, std::uint64_t(s) + 3);
  }
  acc /= double(runs);
  CHECK(acc == Catch::Approx(1.0 / 6.0).margin(0.1));
}

TEST_CASE("speaker probe tracks actual speaker signal in the features") {
  double with_signal = speaker_probe(mean_pool_embed, speaker_corpus(3.0, 9), 3);
  double without = speaker_probe(mean_pool_embed, speaker_corpus(0.0, 9), 3);
  CHECK(with_signal > without + 0.1);
  // with no speaker offsets the probe can at best recover the class (2 of 6
  // speakers share each class), so accuracy stays well below the informed run
  CHECK(without <= 0.65);
  CHECK(with_signal >= 0.6);
}

TEST_CASE("speaker probe input validation") {
  FeatureDataset ds = speaker_corpus(1.0, 4);
  for (auto& u : ds.items) u.speaker_id = "only_one";
  CHECK_THROWS(speaker_probe(mean_pool_embed, ds, 1));
  ds.items[0].speaker_id = "";
  CHECK_THROWS(speaker_probe(mean_pool_embed, ds, 1));
}
