#include <catch2/catch_amalgamated.hpp>

#include "ddist/nn.hpp"
#include "ddist/tensor.hpp"
#include "test_util.hpp"

using namespace ddist;
using ddist::testutil::grad_check;
using ddist::testutil::random_arr;

TEST_CASE("elementwise op values") {
  Arr a(4), b(4);
  a << 1.0, -2.0, 3.0, 0.5;
  b << 2.0, 2.0, -1.0, 4.0;
  Tensor ta = Tensor::constant({4}, a);
  Tensor tb = Tensor::constant({4}, b);
  CHECK(add(ta, tb).value()[0] == 3.0);
  CHECK(sub(ta, tb).value()[1] == -4.0);
  CHECK(mul(ta, tb).value()[2] == -3.0);
  CHECK(divide(ta, tb).value()[3] == 0.125);
  CHECK(abs_t(ta).value()[1] == 2.0);
  CHECK(leaky_relu(ta, 0.2).value()[1] == Catch::Approx(-0.4));
  CHECK(min_scalar(ta, 1.5).value()[2] == 1.5);
  CHECK(sum(ta).item() == Catch::Approx(2.5));
  CHECK(mean(ta).item() == Catch::Approx(0.625));
}

TEST_CASE("matmul and transpose values") {
  Arr a(6);
  a << 1, 2, 3, 4, 5, 6;
  Tensor A = Tensor::constant({2, 3}, a);
  Tensor At = transpose(A);
  CHECK(At.shape() == Shape{3, 2});
  CHECK(At.value()[1] == 4.0);
  Tensor P = matmul(A, At);  // {2,2}
  CHECK(P.value()[0] == Catch::Approx(14.0));
  CHECK(P.value()[1] == Catch::Approx(32.0));
  CHECK(P.value()[3] == Catch::Approx(77.0));
}

TEST_CASE("gather/scatter round behavior") {
  Arr a(4);
  a << 10, 20, 30, 40;
  Tensor t = Tensor::constant({4}, a);
  auto m = make_index_map({3, -1, 0, 0, 2});
  Tensor g = gather_pad(t, m, {5});
  CHECK(g.value()[0] == 40.0);
  CHECK(g.value()[1] == 0.0);
  CHECK(g.value()[3] == 10.0);
  Tensor s = scatter_add(g, m, {4});
  CHECK(s.value()[0] == 20.0);  // 10 scattered twice
  CHECK(s.value()[1] == 0.0);
  CHECK(s.value()[3] == 40.0);
}

TEST_CASE("gradients of composed expression match finite differences") {
  Rng rng(7);
  Tensor W = Tensor::param({3, 4}, random_arr(12, rng));
  Tensor b = Tensor::param({1, 4}, random_arr(4, rng));
  Tensor x = Tensor::constant({5, 3}, random_arr(15, rng));

  auto build = [&] {
    Tensor h = leaky_relu(add(matmul(x, W), tile_rows(b, 5)), 0.2);
    Tensor p = softmax_rows(h);
    Tensor q = sqrt_t(add_scalar(mul(p, p), 0.3));
    return mean(mul(q, log_t(add_scalar(abs_t(h), 1.0))));
  };
  auto res = grad_check(build, {W, b}, 60, rng);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("second-order: gradient-norm losses are differentiable") {
  // Same structure as the WGAN-GP penalty: the loss is built from the
  // gradient of a score w.r.t. its input, then differentiated w.r.t. weights.
  Rng rng(11);
  Tensor W = Tensor::param({6, 1}, random_arr(6, rng));
  Tensor x = Tensor::param({4, 6}, random_arr(24, rng));

  auto build = [&] {
    Tensor score = sum(mul(matmul(x, W), matmul(x, W)));  // nonlinear in x
    Tensor gx = gradients(score, {x})[0];
    Tensor sq = rowsum(mul(gx, gx));
    Tensor n = sqrt_t(add_scalar(sq, 1e-12));
    Tensor d = add_scalar(n, -1.0);
    return mean(mul(d, d));
  };
  auto res = grad_check(build, {W}, 30, rng);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("gradients prune unrelated parameters") {
  Rng rng(3);
  Tensor a = Tensor::param({2, 2}, random_arr(4, rng));
  Tensor c = Tensor::param({2, 2}, random_arr(4, rng));
  Tensor loss = sum(mul(a, a));
  auto g = gradients(loss, {a, c});
  CHECK(g[1].value().abs().maxCoeff() == 0.0);
  CHECK((g[0].value() - 2.0 * a.value()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("concat_rows forward and backward") {
  Rng rng(5);
  Tensor a = Tensor::param({2, 3}, random_arr(6, rng));
  Tensor b = Tensor::param({1, 3}, random_arr(3, rng));
  auto build = [&] {
    Tensor c = concat_rows({a, b});
    return sum(mul(c, exp_t(mul_scalar(c, 0.5))));
  };
  Tensor c = concat_rows({a, b});
  CHECK(c.shape() == Shape{3, 3});
  CHECK(c.value()[6] == b.value()[0]);
  auto res = grad_check(build, {a, b}, 9, rng);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one and logsumexp is stable") {
  Rng rng(13);
  Arr big = random_arr(8, rng, 300.0);  // would overflow a naive exp
  Tensor t = Tensor::constant({2, 4}, big);
  Tensor p = softmax_rows(t);
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += p.value()[r * 4 + j];
    CHECK(s == Catch::Approx(1.0).epsilon(1e-9));
  }
  CHECK(std::isfinite(logsumexp_rows(t).value()[0]));
}

TEST_CASE("layers match finite differences") {
  Rng rng(17);
  ParamStore ps;
  ConvGeom g;
  g.in_c = 2;
  g.out_c = 3;
  g.sh = 1;
  g.sw = 2;
  Conv2d conv = Conv2d::create(ps, "conv", g, rng);
  LayerNormCh ln = LayerNormCh::create(ps, "ln", 3);
  BatchNormCh bn = BatchNormCh::create(ps, "bn", 3);
  Tensor x = Tensor::constant({2, 2, 4, 4}, random_arr(2 * 2 * 16, rng));

  auto build = [&] {
    Tensor h = conv.forward(x, 2, 4, 4);
    h = ln.forward(h, 2, 4, 2);
    h = leaky_relu(h, 0.2);
    h = bn.forward(h, 2, 4, 2);
    return mean(mul(h, h));
  };
  auto res = grad_check(build, ps.tensors(), 50, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("transposed conv upsamples and differentiates") {
  Rng rng(19);
  ParamStore ps;
  ConvGeom g;
  g.in_c = 2;
  g.out_c = 2;
  g.kh = 4;
  g.kw = 4;
  g.sh = 2;
  g.sw = 2;
  g.ph = 1;
  g.pw = 1;
  ConvT2d tc = ConvT2d::create(ps, "tc", g, rng);
  Tensor x = Tensor::constant({2, 2, 3, 3}, random_arr(2 * 2 * 9, rng));
  Tensor y = tc.forward(x, 2, 3, 3);
  CHECK(y.shape() == Shape{2, 2, 6, 6});
  auto build = [&] { return mean(abs_t(tc.forward(x, 2, 3, 3))); };
  auto res = grad_check(build, ps.tensors(), 30, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("self attention keeps shape and differentiates") {
  Rng rng(23);
  ParamStore ps;
  SelfAttention att = SelfAttention::create(ps, "att", 2 * 3, 4, rng);
  Tensor x = Tensor::constant({2, 2, 5, 3}, random_arr(2 * 2 * 5 * 3, rng));
  Tensor y = att.forward(x, 2, 2, 5, 3);
  CHECK(y.shape() == Shape{2, 2, 5, 3});
  auto build = [&] {
    Tensor h = att.forward(x, 2, 2, 5, 3);
    return mean(mul(h, h));
  };
  auto res = grad_check(build, ps.tensors(), 40, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("rng determinism and uniformity basics") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1);
  double s = 0;
  for (int i = 0; i < 20000; ++i) s += c.uniform();
  CHECK(s / 20000.0 == Catch::Approx(0.5).margin(0.01));
}
