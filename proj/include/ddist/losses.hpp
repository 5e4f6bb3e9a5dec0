#pragma once

#include <functional>
#include <vector>

#include "ddist/models.hpp"
#include "ddist/nn.hpp"
#include "ddist/tensor.hpp"

// Training objectives as pure differentiable scalars. Zero-weighted terms are
// skipped entirely (not multiplied by zero) so weight ablations reduce
// bit-exactly to the smaller objective and consume no extra rng draws.

namespace ddist {

struct LossWeights {
  double lambda1 = 10.0;  // gradient penalty
  double lambda2 = 1.0;   // CE on real, discriminator
  double lambda3 = 1.0;   // CE on fake, both sides
  double lambda4 = 10.0;  // feature matching
  double lambda5 = 1.0;   // diversity penalty
  double lambda6 = 1.0;   // softmax matching
  double tau = 10.0;
  double div_epsilon = 1e-8;
  double prob_epsilon = 1e-7;

  void validate() const {
    for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6})
      require(std::isfinite(l) && l >= 0.0, "loss: weights must be finite and >= 0");
    require(tau > 0.0, "loss: tau must be positive");
    require(div_epsilon > 0.0 && prob_epsilon > 0.0, "loss: epsilons must be positive");
  }
};

// Mean cross-entropy from logits; computed via logsumexp.
inline Tensor class_ce(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.shape().size() == 2, "loss: class_ce needs {B,c} logits");
  require(int(labels.size()) == logits.shape()[0], "loss: class_ce label count mismatch");
  Tensor lse = logsumexp_rows(logits);
  Tensor chosen = pick_per_row(logits, labels);
  return mean(sub(lse, chosen));
}

// Two-sided interpolated gradient penalty: mean over the batch of
// (||grad_x score(x_hat)||_2 - 1)^2 at x_hat = a*real + (1-a)*fake.
using ScoreFn = std::function<Tensor(const Tensor&)>;  // x -> {B,1} scores

inline Tensor gradient_penalty_at(const ScoreFn& score, const Tensor& real, const Tensor& fake,
                                  const std::vector<double>& alpha) {
  require(same_shape(real.shape(), fake.shape()), "loss: gradient_penalty shape mismatch");
  int B = real.shape()[0];
  require(int(alpha.size()) == B, "loss: one alpha per sample required");
  int S = real.size() / B;

  Arr mixed(real.size());
  for (int b = 0; b < B; ++b)
    for (int s = 0; s < S; ++s) {
      long i = long(b) * S + s;
      mixed[i] = alpha[b] * real.value()[i] + (1.0 - alpha[b]) * fake.value()[i];
    }
  Tensor x_hat = Tensor::param(real.shape(), std::move(mixed));

  Tensor score_sum = sum(score(x_hat));
  Tensor gx = reshape(gradients(score_sum, {x_hat})[0], {B, S});
  Tensor norm = sqrt_t(add_scalar(rowsum(mul(gx, gx)), 1e-12));
  Tensor excess = add_scalar(norm, -1.0);
  return mean(mul(excess, excess));
}

inline Tensor gradient_penalty_at(const Discriminator& d, const Tensor& real, const Tensor& fake,
                                  const std::vector<double>& alpha) {
  return gradient_penalty_at([&d](const Tensor& x) { return d.forward(x).scores; }, real, fake,
                             alpha);
}

inline Tensor gradient_penalty(const ScoreFn& score, const Tensor& real, const Tensor& fake,
                               Rng& rng) {
  int B = real.shape()[0];
  std::vector<double> alpha(static_cast<std::size_t>(B));
  for (auto& a : alpha) a = rng.uniform();
  return gradient_penalty_at(score, real, fake, alpha);
}

inline Tensor gradient_penalty(const Discriminator& d, const Tensor& real, const Tensor& fake,
                               Rng& rng) {
  return gradient_penalty([&d](const Tensor& x) { return d.forward(x).scores; }, real, fake, rng);
}

namespace detail {

struct DLossParts {
  Tensor total;
  double adv = 0, gp = 0, ce_real = 0, ce_fake = 0;
};

inline DLossParts d_loss_core(const Discriminator& d, const Generator& g, const Tensor& real,
                              const LatentBatch& z, const std::vector<int>& labels_real,
                              const std::vector<int>& labels_fake, const LossWeights& w, Rng& rng,
                              bool with_ce) {
  require(real.shape()[0] == z.batch_size(), "loss: real/latent batch size mismatch");
  Tensor fake = detach(g.forward(z));  // the d objective treats the generator as fixed
  DiscriminatorOutput on_fake = d.forward(fake);
  DiscriminatorOutput on_real = d.forward(real);

  DLossParts parts;
  Tensor adv = sub(mean(on_fake.scores), mean(on_real.scores));
  parts.adv = adv.item();
  Tensor total = adv;
  if (w.lambda1 > 0.0) {
    Tensor gp = gradient_penalty(d, real, fake, rng);
    parts.gp = gp.item();
    total = add(total, mul_scalar(gp, w.lambda1));
  }
  if (with_ce && w.lambda2 > 0.0) {
    Tensor ce = class_ce(on_real.class_logits, labels_real);
    parts.ce_real = ce.item();
    total = add(total, mul_scalar(ce, w.lambda2));
  }
  if (with_ce && w.lambda3 > 0.0) {
    Tensor ce = class_ce(on_fake.class_logits, labels_fake);
    parts.ce_fake = ce.item();
    total = add(total, mul_scalar(ce, w.lambda3));
  }
  parts.total = total;
  return parts;
}

}  // namespace detail

inline Tensor d_adversarial_loss(const Discriminator& d, const Generator& g, const Tensor& real,
                                 const LatentBatch& z, const LossWeights& w, Rng& rng) {
  return detail::d_loss_core(d, g, real, z, {}, {}, w, rng, false).total;
}

inline Tensor d_total_loss(const Discriminator& d, const Generator& g, const Tensor& real,
                           const LatentBatch& z, const std::vector<int>& labels_real,
                           const std::vector<int>& labels_fake, const LossWeights& w, Rng& rng) {
  return detail::d_loss_core(d, g, real, z, labels_real, labels_fake, w, rng, true).total;
}

inline Tensor g_adversarial_loss(const Discriminator& d, const Generator& g,
                                 const LatentBatch& z) {
  return neg(mean(d.forward(g.forward(z)).scores));
}

// (1/M) sum_l mean |real_map_l - fake_map_l|
inline Tensor feature_matching_loss(const std::vector<Tensor>& maps_real,
                                    const std::vector<Tensor>& maps_fake) {
  require(!maps_real.empty() && maps_real.size() == maps_fake.size(),
          "loss: feature map list length mismatch");
  Tensor acc;
  for (std::size_t l = 0; l < maps_real.size(); ++l) {
    require(same_shape(maps_real[l].shape(), maps_fake[l].shape()),
            "loss: feature map shape mismatch at layer " + std::to_string(l));
    Tensor term = mean(abs_t(sub(maps_real[l], maps_fake[l])));
    acc = l == 0 ? term : add(acc, term);
  }
  return mul_scalar(acc, 1.0 / double(maps_real.size()));
}

namespace detail {

struct GLossParts {
  Tensor total;
  Tensor fake;
  double adv = 0, ce = 0, fm = 0, div = 0, sml = 0;
};

inline GLossParts g_loss_core(const Discriminator& d, const Generator& g, const Tensor& real,
                              const LatentBatch& z, const std::vector<int>& labels_fake,
                              const LossWeights& w, bool with_extras) {
  Tensor fake = g.forward(z);
  DiscriminatorOutput on_fake = d.forward(fake);

  GLossParts parts;
  parts.fake = fake;
  Tensor total = neg(mean(on_fake.scores));
  parts.adv = total.item();
  if (with_extras && w.lambda3 > 0.0) {
    Tensor ce = class_ce(on_fake.class_logits, labels_fake);
    parts.ce = ce.item();
    total = add(total, mul_scalar(ce, w.lambda3));
  }
  if (with_extras && w.lambda4 > 0.0) {
    DiscriminatorOutput on_real = d.forward(real);
    Tensor fm = feature_matching_loss(on_real.feature_maps, on_fake.feature_maps);
    parts.fm = fm.item();
    total = add(total, mul_scalar(fm, w.lambda4));
  }
  parts.total = total;
  return parts;
}

}  // namespace detail

inline Tensor g_total_loss(const Discriminator& d, const Generator& g, const Tensor& real,
                           const LatentBatch& z, const std::vector<int>& labels_fake,
                           const LossWeights& w) {
  return detail::g_loss_core(d, g, real, z, labels_fake, w, true).total;
}

// Rowwise KL(p || q) between downstream softmax outputs on paired same-class
// real and synthetic batches; both sides clamped and renormalized.
using DownstreamFn = std::function<DownstreamOutput(const Tensor&)>;

inline Tensor softmax_matching_loss(const DownstreamFn& f, const Tensor& real, const Tensor& fake,
                                    const std::vector<int>& labels_real,
                                    const std::vector<int>& labels_fake, double prob_epsilon) {
  require(same_shape(real.shape(), fake.shape()), "loss: sml shape mismatch");
  require(labels_real == labels_fake, "loss: sml requires same-class pairing by batch index");
  auto clamp_renorm = [&](Tensor p) {
    p = clamp(p, prob_epsilon, 1.0);
    return divide(p, tile_cols(rowsum(p), p.shape()[1]));
  };
  Tensor p = clamp_renorm(f(real).probs);
  Tensor q = clamp_renorm(f(fake).probs);
  Tensor kl = mul(p, sub(log_t(p), log_t(q)));
  int B = real.shape()[0];
  return mul_scalar(sum(kl), 1.0 / double(B));
}

inline Tensor softmax_matching_loss(const Downstream& f, const Tensor& real, const Tensor& fake,
                                    const std::vector<int>& labels_real,
                                    const std::vector<int>& labels_fake, double prob_epsilon) {
  return softmax_matching_loss(DownstreamFn([&f](const Tensor& x) { return f.forward(x); }), real,
                               fake, labels_real, labels_fake, prob_epsilon);
}

// -mean_j min( mean|g(z1_j)-g(z2_j)| / (mean|tail1_j-tail2_j| + eps), tau )
// z1 and z2 must pair latents of the same class; the denominator is a
// constant of the draw.
inline Tensor diversity_penalty_outputs(const Tensor& out1, const Tensor& out2,
                                        const LatentBatch& z1, const LatentBatch& z2, double tau,
                                        double div_epsilon) {
  require(z1.batch_size() == z2.batch_size(), "loss: diversity batch size mismatch");
  require(z1.labels == z2.labels, "loss: diversity penalty compares same-class latent pairs");
  require(tau > 0.0, "loss: tau must be positive");
  int B = z1.batch_size();
  int width = z1.num_classes + z1.tail;

  Arr denom(B);
  for (int b = 0; b < B; ++b) {
    double acc = 0.0;
    for (int t = 0; t < z1.tail; ++t) {
      long i = long(b) * width + z1.num_classes + t;
      acc += std::abs(z1.z.value()[i] - z2.z.value()[i]);
    }
    denom[b] = acc / double(z1.tail) + div_epsilon;
  }

  int S = out1.size() / B;
  Tensor num = rowmean(abs_t(sub(reshape(out1, {B, S}), reshape(out2, {B, S}))));
  Tensor ratio = divide(num, Tensor::constant({B, 1}, std::move(denom)));
  return neg(mean(min_scalar(ratio, tau)));
}

inline Tensor diversity_penalty(const Generator& g, const LatentBatch& z1, const LatentBatch& z2,
                                double tau, double div_epsilon,
                                const Tensor* out1_shared = nullptr) {
  Tensor out1 = out1_shared ? *out1_shared : g.forward(z1);
  return diversity_penalty_outputs(out1, g.forward(z2), z1, z2, tau, div_epsilon);
}

struct GDDParts {
  Tensor total;
  double adv = 0, ce = 0, fm = 0, div = 0, sml = 0;
};

// Full stage-2 generator objective. `z2` and `f_sampled` may be unset when the
// corresponding weight is zero. `real_for_f` is the real batch in the space
// the downstream model expects (it can differ from `real` when the GAN runs on
// normalized features); `fake_to_f` maps generator output into that space.
inline GDDParts g_dd_loss(const Discriminator& d, const Generator& g, const DownstreamFn& f_sampled,
                          const Tensor& real, const Tensor& real_for_f, const LatentBatch& z,
                          const LatentBatch* z2, const std::vector<int>& labels_fake,
                          const LossWeights& w,
                          const std::function<Tensor(const Tensor&)>& fake_to_f) {
  auto core = detail::g_loss_core(d, g, real, z, labels_fake, w, true);
  GDDParts parts;
  parts.adv = core.adv;
  parts.ce = core.ce;
  parts.fm = core.fm;
  Tensor total = core.total;
  if (w.lambda5 > 0.0) {
    require(z2 != nullptr, "loss: diversity penalty needs a second latent batch");
    Tensor div = diversity_penalty(g, z, *z2, w.tau, w.div_epsilon, &core.fake);
    parts.div = div.item();
    total = add(total, mul_scalar(div, w.lambda5));
  }
  if (w.lambda6 > 0.0) {
    require(bool(f_sampled), "loss: softmax matching needs a sampled downstream model");
    Tensor fake_f = fake_to_f ? fake_to_f(core.fake) : core.fake;
    Tensor sml = softmax_matching_loss(f_sampled, real_for_f, fake_f, labels_fake, z.labels,
                                       w.prob_epsilon);
    parts.sml = sml.item();
    total = add(total, mul_scalar(sml, w.lambda6));
  }
  parts.total = total;
  return parts;
}

// Convenience overload matching the plain contract (no space change).
inline Tensor g_dd_loss(const Discriminator& d, const Generator& g, const Downstream& f_sampled,
                        const Tensor& real, const LatentBatch& z, const LatentBatch& z2,
                        const std::vector<int>& labels_fake, const LossWeights& w) {
  DownstreamFn fn = [&f_sampled](const Tensor& x) { return f_sampled.forward(x); };
  return g_dd_loss(d, g, fn, real, real, z, &z2, labels_fake, w, nullptr).total;
}

}  // namespace ddist
