#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ddist/losses.hpp"
#include "test_util.hpp"

using namespace ddist;
using ddist::testutil::random_arr;

namespace {

Tensor random_real(int B, int T, int D, Rng& rng) {
  return Tensor::constant({B, T, D}, random_arr(B * T * D, rng));
}

struct DeskRig {
  GeneratorConfig gcfg;
  DiscriminatorConfig dcfg;
  Generator g;
  Discriminator d;

  static DeskRig make(std::uint64_t seed, int B = 4, int layers = 3) {
    GeneratorConfig gc;
    gc.frames = 4;
    gc.feature_dim = 4;
    gc.num_classes = 3;
    gc.latent_tail = 3;
    gc.channels = 3;
    DiscriminatorConfig dc;
    dc.frames = 4;
    dc.feature_dim = 4;
    dc.num_classes = 3;
    dc.layers = layers;
    dc.channels = 3;
    Rng rng(seed);
    return DeskRig{gc, dc, Generator(gc, rng), Discriminator(dc, rng)};
  }
};

}  // namespace

TEST_CASE("class cross-entropy matches closed forms") {
  // uniform logits over 4 classes
  Tensor logits = Tensor::zeros({2, 4});
  CHECK(class_ce(logits, {0, 3}).item() == Catch::Approx(std::log(4.0)).epsilon(1e-12));

  // a dominant correct logit drives the loss to zero
  Arr v = Arr::Zero(4);
  v[1] = 30.0;
  CHECK(class_ce(Tensor::constant({1, 4}, std::move(v)), {1}).item() ==
        Catch::Approx(0.0).margin(1e-12));

  // loss decreases as the correct logit grows
  double prev = 1e9;
  for (double s : {0.0, 1.0, 2.0, 4.0}) {
    Arr u = Arr::Zero(3);
    u[2] = s;
    double ce = class_ce(Tensor::constant({1, 3}, std::move(u)), {2}).item();
    CHECK(ce < prev);
    prev = ce;
  }
}

TEST_CASE("gradient penalty closed forms through a pluggable scorer") {
  Rng rng(31);
  int B = 5, S = 6;
  Tensor real = Tensor::constant({B, S}, random_arr(B * S, rng));
  Tensor fake = Tensor::constant({B, S}, random_arr(B * S, rng));
  std::vector<double> alpha(B);
  for (auto& a : alpha) a = rng.uniform();

  // unit-norm linear scorer: the input gradient has norm exactly 1 everywhere
  Arr w = random_arr(S, rng);
  double n = std::sqrt((w * w).sum());
  w /= n;
  Tensor wt = Tensor::constant({S, 1}, std::move(w));
  ScoreFn unit = [&](const Tensor& x) { return matmul(x, wt); };
  CHECK(gradient_penalty_at(unit, real, fake, alpha).item() == Catch::Approx(0.0).margin(1e-5));

  // doubling scorer on one coordinate: gradient norm 2, penalty (2-1)^2 = 1
  Tensor r1 = Tensor::constant({3, 1}, random_arr(3, rng));
  Tensor f1 = Tensor::constant({3, 1}, random_arr(3, rng));
  ScoreFn twice = [](const Tensor& x) { return mul_scalar(x, 2.0); };
  CHECK(gradient_penalty_at(twice, r1, f1, {0.2, 0.5, 0.9}).item() ==
        Catch::Approx(1.0).margin(1e-6));

  // a real discriminator gives a finite nonnegative value
  auto rig = DeskRig::make(41);
  Tensor real3 = random_real(4, 4, 4, rng);
  Tensor fake3 = random_real(4, 4, 4, rng);
  double gp = gradient_penalty(rig.d, real3, fake3, rng).item();
  CHECK(gp >= 0.0);
  CHECK(std::isfinite(gp));
}

TEST_CASE("discriminator adversarial loss is the score gap plus weighted penalty") {
  auto rig = DeskRig::make(51);
  Rng rng(52);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(53);
  LatentBatch z = make_latent_batch({0, 1, 2, 0}, 3, 3, zrng);

  LossWeights w;
  w.lambda1 = 0.0;
  Rng loss_rng(54);
  double got = d_adversarial_loss(rig.d, rig.g, real, z, w, loss_rng).item();
  Tensor fake = rig.g.forward(z);
  double want = mean(rig.d.forward(fake).scores).item() - mean(rig.d.forward(real).scores).item();
  CHECK(got == Catch::Approx(want).epsilon(1e-12));

  // with the penalty enabled, replaying the alpha draws reproduces the total
  w.lambda1 = 10.0;
  Rng r_a(55), r_b(55);
  double total = d_adversarial_loss(rig.d, rig.g, real, z, w, r_a).item();
  double gp = gradient_penalty(rig.d, real, detach(fake), r_b).item();
  CHECK(total == Catch::Approx(want + 10.0 * gp).epsilon(1e-12));
}

TEST_CASE("zero class weights reduce the total d loss to the adversarial one bit for bit") {
  auto rig = DeskRig::make(61);
  Rng rng(62);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(63);
  LatentBatch z = make_latent_batch({1, 1, 2, 0}, 3, 3, zrng);
  std::vector<int> labels_real = {0, 2, 1, 1};

  LossWeights w;
  w.lambda2 = 0.0;
  w.lambda3 = 0.0;
  Rng r_a(64), r_b(64);
  double a = d_total_loss(rig.d, rig.g, real, z, labels_real, z.labels, w, r_a).item();
  double b = d_adversarial_loss(rig.d, rig.g, real, z, w, r_b).item();
  CHECK(a == b);
  CHECK(r_a.next_u64() == r_b.next_u64());  // identical stream consumption

  // and with class heads on, the total strictly adds the CE terms
  LossWeights w2;
  Rng r_c(64), r_d(64);
  double with_ce = d_total_loss(rig.d, rig.g, real, z, labels_real, z.labels, w2, r_c).item();
  double base = d_adversarial_loss(rig.d, rig.g, real, z, w2, r_d).item();
  Tensor fake = detach(rig.g.forward(z));
  double ce_r = class_ce(rig.d.forward(real).class_logits, labels_real).item();
  double ce_f = class_ce(rig.d.forward(fake).class_logits, z.labels).item();
  CHECK(with_ce == Catch::Approx(base + ce_r + ce_f).epsilon(1e-12));
}

TEST_CASE("feature matching loss from constant maps") {
  auto c = [](Shape s, double v) {
    Arr a(shape_size(s));
    a.setConstant(v);
    return Tensor::constant(std::move(s), std::move(a));
  };
  // every layer off by 2
  std::vector<Tensor> real = {c({2, 3}, 0.0), c({2, 2}, 1.0)};
  std::vector<Tensor> fake = {c({2, 3}, 2.0), c({2, 2}, 3.0)};
  CHECK(feature_matching_loss(real, fake).item() == Catch::Approx(2.0).epsilon(1e-12));

  // one matching layer and one off by 4 average to 2
  std::vector<Tensor> fake2 = {c({2, 3}, 0.0), c({2, 2}, 5.0)};
  CHECK(feature_matching_loss(real, fake2).item() == Catch::Approx(2.0).epsilon(1e-12));

  CHECK(feature_matching_loss(real, real).item() == 0.0);
  CHECK_THROWS(feature_matching_loss(real, {real[0]}));
}

TEST_CASE("generator total loss decomposes into its weighted terms") {
  auto rig = DeskRig::make(71);
  Rng rng(72);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(73);
  LatentBatch z = make_latent_batch({2, 0, 1, 2}, 3, 3, zrng);

  LossWeights w;
  w.lambda3 = 0.7;
  w.lambda4 = 3.0;
  double total = g_total_loss(rig.d, rig.g, real, z, z.labels, w).item();

  Tensor fake = rig.g.forward(z);
  auto on_fake = rig.d.forward(fake);
  auto on_real = rig.d.forward(real);
  double adv = -mean(on_fake.scores).item();
  double ce = class_ce(on_fake.class_logits, z.labels).item();
  double fm = feature_matching_loss(on_real.feature_maps, on_fake.feature_maps).item();
  CHECK(total == Catch::Approx(adv + 0.7 * ce + 3.0 * fm).epsilon(1e-12));

  // zeroed extras reduce to the pure adversarial objective bit for bit
  LossWeights w0;
  w0.lambda3 = 0.0;
  w0.lambda4 = 0.0;
  CHECK(g_total_loss(rig.d, rig.g, real, z, z.labels, w0).item() ==
        g_adversarial_loss(rig.d, rig.g, z).item());
}

TEST_CASE("softmax matching loss closed forms") {
  // identical inputs match exactly
  auto rig = DeskRig::make(81);
  Rng rng(82);
  DownstreamConfig fcfg;
  fcfg.feature_dim = 4;
  fcfg.num_classes = 3;
  fcfg.hidden = 6;
  fcfg.stats = FeatureStats::identity(4);
  Downstream f(fcfg, rng);
  Tensor x = random_real(4, 4, 4, rng);
  std::vector<int> labels = {0, 1, 2, 0};
  CHECK(softmax_matching_loss(f, x, x, labels, labels, 1e-7).item() == 0.0);

  // nonnegativity on unrelated batches
  Tensor y = random_real(4, 4, 4, rng);
  double kl = softmax_matching_loss(f, x, y, labels, labels, 1e-7).item();
  CHECK(kl >= 0.0);
  CHECK(std::isfinite(kl));

  // point mass against uniform has divergence log 2
  DownstreamFn fn = [](const Tensor& in) {
    bool is_real = in.value()[0] > 0.5;
    Arr p(2);
    if (is_real) {
      p[0] = 1.0;
      p[1] = 0.0;
    } else {
      p[0] = 0.5;
      p[1] = 0.5;
    }
    DownstreamOutput out;
    out.probs = Tensor::constant({1, 2}, std::move(p));
    return out;
  };
  Tensor real_flag = Tensor::ones({1, 1, 1});
  Tensor fake_flag = Tensor::zeros({1, 1, 1});
  double got = softmax_matching_loss(fn, real_flag, fake_flag, {0}, {0}, 1e-7).item();
  CHECK(got == Catch::Approx(std::log(2.0)).margin(1e-4));

  CHECK_THROWS(softmax_matching_loss(f, x, y, {0, 1, 2, 0}, {0, 1, 2, 1}, 1e-7));
}

TEST_CASE("diversity penalty closed forms") {
  Rng rng(91);
  int B = 4, tail = 3, c = 2;
  LatentBatch z1 = make_latent_batch({0, 1, 0, 1}, c, tail, rng);
  LatentBatch z2 = make_latent_batch({0, 1, 0, 1}, c, tail, rng);

  // a generator that copies the latent tail has ratio exactly 1
  auto tail_of = [&](const LatentBatch& z) {
    Arr t(B * tail);
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < tail; ++k) t[b * tail + k] = z.z.value()[b * (c + tail) + c + k];
    return Tensor::constant({B, tail}, std::move(t));
  };
  double v = diversity_penalty_outputs(tail_of(z1), tail_of(z2), z1, z2, 10.0, 1e-8).item();
  CHECK(v == Catch::Approx(-1.0).margin(1e-6));

  // identical outputs collapse the penalty to zero
  Tensor same = tail_of(z1);
  CHECK(diversity_penalty_outputs(same, same, z1, z2, 10.0, 1e-8).item() == 0.0);

  // tau caps the magnitude: scaled-up outputs saturate at -tau
  Tensor big = mul_scalar(tail_of(z1), 1e6);
  Tensor big2 = mul_scalar(tail_of(z2), 1e6);
  CHECK(diversity_penalty_outputs(big, big2, z1, z2, 10.0, 1e-8).item() ==
        Catch::Approx(-10.0).epsilon(1e-12));

  // general position: always in [-tau, 0]
  for (int trial = 0; trial < 20; ++trial) {
    Tensor o1 = Tensor::constant({B, 5}, random_arr(B * 5, rng, 3.0));
    Tensor o2 = Tensor::constant({B, 5}, random_arr(B * 5, rng, 3.0));
    double p = diversity_penalty_outputs(o1, o2, z1, z2, 2.5, 1e-8).item();
    CHECK(p <= 0.0);
    CHECK(p >= -2.5);
  }

  LatentBatch z3 = make_latent_batch({1, 1, 0, 1}, c, tail, rng);
  CHECK_THROWS(diversity_penalty_outputs(same, same, z1, z3, 10.0, 1e-8));
}

TEST_CASE("full distillation objective decomposes and reduces") {
  auto rig = DeskRig::make(101);
  Rng rng(102);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(103);
  LatentBatch z = make_latent_batch({0, 2, 1, 1}, 3, 3, zrng);
  LatentBatch z2 = make_latent_batch({0, 2, 1, 1}, 3, 3, zrng);

  DownstreamConfig fcfg;
  fcfg.feature_dim = 4;
  fcfg.num_classes = 3;
  fcfg.hidden = 6;
  fcfg.stats = FeatureStats::identity(4);
  Rng frng(104);
  Downstream f(fcfg, frng);

  LossWeights w;
  DownstreamFn fn = [&f](const Tensor& x) { return f.forward(x); };
  auto parts = g_dd_loss(rig.d, rig.g, fn, real, real, z, &z2, z.labels, w, nullptr);
  CHECK(parts.total.item() ==
        Catch::Approx(parts.adv + w.lambda3 * parts.ce + w.lambda4 * parts.fm +
                      w.lambda5 * parts.div + w.lambda6 * parts.sml)
            .epsilon(1e-10));
  CHECK(parts.div <= 0.0);
  CHECK(parts.sml >= 0.0);

  // convenience overload agrees with the explicit one
  CHECK(g_dd_loss(rig.d, rig.g, f, real, z, z2, z.labels, w).item() == parts.total.item());

  // zeroing the distillation terms reduces to the stage-1 objective bit for bit
  LossWeights w0;
  w0.lambda5 = 0.0;
  w0.lambda6 = 0.0;
  auto reduced = g_dd_loss(rig.d, rig.g, nullptr, real, real, z, nullptr, z.labels, w0, nullptr);
  CHECK(reduced.total.item() == g_total_loss(rig.d, rig.g, real, z, z.labels, w0).item());
}

TEST_CASE("generator objective gradients agree with finite differences") {
  auto rig = DeskRig::make(111, 4, 2);
  Rng rng(112);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(113);
  LatentBatch z = make_latent_batch({0, 1, 2, 0}, 3, 3, zrng);
  LatentBatch z2 = make_latent_batch({0, 1, 2, 0}, 3, 3, zrng);

  DownstreamConfig fcfg;
  fcfg.feature_dim = 4;
  fcfg.num_classes = 3;
  fcfg.hidden = 6;
  fcfg.stats = FeatureStats::identity(4);
  Rng frng(114);
  Downstream f(fcfg, frng);

  LossWeights w;
  w.lambda3 = 0.5;
  w.lambda4 = 2.0;
  w.lambda5 = 1.0;
  w.lambda6 = 1.0;
  auto build = [&]() { return g_dd_loss(rig.d, rig.g, f, real, z, z2, z.labels, w); };
  Rng crng(115);
  auto res = ddist::testutil::grad_check(build, rig.g.ps.tensors(), 60, crng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("discriminator objective gradients agree with finite differences") {
  auto rig = DeskRig::make(121, 4, 2);
  Rng rng(122);
  Tensor real = random_real(4, 4, 4, rng);
  Rng zrng(123);
  LatentBatch z = make_latent_batch({2, 1, 0, 1}, 3, 3, zrng);
  std::vector<int> labels_real = {1, 0, 2, 2};
  Tensor fake = detach(rig.g.forward(z));
  std::vector<double> alpha = {0.1, 0.4, 0.6, 0.9};

  LossWeights w;
  auto build = [&]() {
    auto on_fake = rig.d.forward(fake);
    auto on_real = rig.d.forward(real);
    Tensor total = sub(mean(on_fake.scores), mean(on_real.scores));
    total = add(total, mul_scalar(gradient_penalty_at(rig.d, real, fake, alpha), w.lambda1));
    total = add(total, mul_scalar(class_ce(on_real.class_logits, labels_real), w.lambda2));
    total = add(total, mul_scalar(class_ce(on_fake.class_logits, z.labels), w.lambda3));
    return total;
  };
  Rng crng(124);
  auto res = ddist::testutil::grad_check(build, rig.d.ps.tensors(), 60, crng);
  CHECK(res.max_rel_err < 1e-4);
}
