#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ddist/tensor.hpp"

// Layers composed from tensor.hpp primitives. Convolutions run as
// im2col gathers plus one matmul; batch size is free per call, index maps are
// cached per (layer, batch size).

namespace ddist {

// ---- rowwise helpers on rank-2 tensors ----

inline Tensor rowsum(const Tensor& a) {
  return matmul(a, Tensor::ones({a.shape()[1], 1}));
}

inline Tensor rowmean(const Tensor& a) {
  return mul_scalar(rowsum(a), 1.0 / double(a.shape()[1]));
}

inline Tensor colsum(const Tensor& a) {
  return matmul(Tensor::ones({1, a.shape()[0]}), a);
}

// Stable softmax over rows. The rowwise max is detached; softmax is shift
// invariant so both value and gradient are exact.
inline Tensor softmax_rows(const Tensor& logits) {
  int m = logits.shape()[0], n = logits.shape()[1];
  Arr mx(m);
  detail::CMatMap lm(logits.value().data(), m, n);
  for (int i = 0; i < m; ++i) mx[i] = lm.row(i).maxCoeff();
  Tensor shift = tile_cols(Tensor::constant({m, 1}, std::move(mx)), n);
  Tensor e = exp_t(sub(logits, shift));
  return divide(e, tile_cols(rowsum(e), n));
}

inline Tensor logsumexp_rows(const Tensor& logits) {
  int m = logits.shape()[0], n = logits.shape()[1];
  Arr mx(m);
  detail::CMatMap lm(logits.value().data(), m, n);
  for (int i = 0; i < m; ++i) mx[i] = lm.row(i).maxCoeff();
  Tensor mc = Tensor::constant({m, 1}, mx);
  Tensor e = exp_t(sub(logits, tile_cols(mc, n)));
  return add(log_t(rowsum(e)), mc);
}

// out[j] = a[j, idx[j]], shape {B,1}
inline Tensor pick_per_row(const Tensor& a, const std::vector<int>& idx) {
  int m = a.shape()[0], n = a.shape()[1];
  require(int(idx.size()) == m, "nn: pick_per_row index count mismatch");
  std::vector<int> map(m);
  for (int j = 0; j < m; ++j) {
    require(idx[j] >= 0 && idx[j] < n, "nn: pick_per_row index out of range");
    map[j] = j * n + idx[j];
  }
  return gather_pad(a, make_index_map(std::move(map)), {m, 1});
}

// ---- parameter registry ----

struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> named;

  Tensor add(const std::string& name, Shape shape, Arr init) {
    Tensor t = Tensor::param(std::move(shape), std::move(init));
    named.emplace_back(name, t);
    return t;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(named.size());
    for (const auto& [_, t] : named) out.push_back(t);
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : named) n += std::size_t(t.size());
    return n;
  }
};

inline Arr normal_init(int n, double stddev, Rng& rng) {
  Arr a(n);
  for (int i = 0; i < n; ++i) a[i] = rng.normal() * stddev;
  return a;
}

// ---- dense ----

struct Dense {
  Tensor W;  // {in, out}
  Tensor b;  // {1, out}

  static Dense create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    Dense d;
    d.W = ps.add(name + ".W", {in, out}, normal_init(in * out, std::sqrt(2.0 / in), rng));
    d.b = ps.add(name + ".b", {1, out}, Arr::Zero(out));
    return d;
  }

  Tensor forward(const Tensor& x) const {  // x {B, in}
    return add(matmul(x, W), tile_rows(b, x.shape()[0]));
  }
};

// ---- convolution geometry ----

struct ConvGeom {
  int in_c = 1, out_c = 1;
  int kh = 3, kw = 3;
  int sh = 1, sw = 1;
  int ph = 1, pw = 1;
  int dh = 1, dw = 1;

  int out_h(int h) const { return (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1; }
  int out_w(int w) const { return (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1; }
};

namespace detail {

// patches {in_c*kh*kw, B*oh*ow}, column index = ((b*oh + i)*ow + j)
inline std::vector<int> im2col_map(const ConvGeom& g, int B, int H, int W) {
  int oh = g.out_h(H), ow = g.out_w(W);
  int cols = B * oh * ow;
  int rows = g.in_c * g.kh * g.kw;
  std::vector<int> map(std::size_t(rows) * cols);
  std::size_t p = 0;
  for (int c = 0; c < g.in_c; ++c)
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj)
        for (int b = 0; b < B; ++b)
          for (int i = 0; i < oh; ++i) {
            int y = i * g.sh - g.ph + ki * g.dh;
            for (int j = 0; j < ow; ++j, ++p) {
              int x = j * g.sw - g.pw + kj * g.dw;
              map[p] = (y >= 0 && y < H && x >= 0 && x < W)
                           ? ((b * g.in_c + c) * H + y) * W + x
                           : -1;
            }
          }
  return map;
}

// {out_c, B*oh*ow} -> {B, out_c, oh, ow}
inline std::vector<int> chan_major_to_batch_major(int B, int C, int S) {
  std::vector<int> map(std::size_t(B) * C * S);
  std::size_t p = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < S; ++s, ++p) map[p] = (c * B + b) * S + s;
  return map;
}

// {B, C, S} -> {C, B*S}
inline std::vector<int> batch_major_to_chan_major(int B, int C, int S) {
  std::vector<int> map(std::size_t(B) * C * S);
  std::size_t p = 0;
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s, ++p) map[p] = (b * C + c) * S + s;
  return map;
}

// per-channel vector {C,1} broadcast over batch: {B*C, 1}
inline std::vector<int> channel_repeat_map(int B, int C) {
  std::vector<int> map(std::size_t(B) * C);
  std::size_t p = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c, ++p) map[p] = c;
  return map;
}

}  // namespace detail

// 2D convolution on activations shaped {B, C, H, W} (flat).
struct Conv2d {
  ConvGeom geom;
  Tensor W;  // {out_c, in_c*kh*kw}
  Tensor b;  // {out_c, 1}
  mutable std::unordered_map<long long, IndexMap> im2col_cache, perm_cache, bias_cache;

  static Conv2d create(ParamStore& ps, const std::string& name, ConvGeom g, Rng& rng) {
    Conv2d c;
    c.geom = g;
    int fan_in = g.in_c * g.kh * g.kw;
    c.W = ps.add(name + ".W", {g.out_c, fan_in},
                 normal_init(g.out_c * fan_in, std::sqrt(2.0 / fan_in), rng));
    c.b = ps.add(name + ".b", {g.out_c, 1}, Arr::Zero(g.out_c));
    return c;
  }

  // x {B, in_c, H, W} -> {B, out_c, oh, ow}
  Tensor forward(const Tensor& x, int B, int H, int Wd) const {
    int oh = geom.out_h(H), ow = geom.out_w(Wd);
    long long key = (static_cast<long long>(B) << 40) | (static_cast<long long>(H) << 20) | Wd;
    auto& im = im2col_cache[key];
    if (!im) im = make_index_map(detail::im2col_map(geom, B, H, Wd));
    auto& pm = perm_cache[key];
    if (!pm) pm = make_index_map(detail::chan_major_to_batch_major(B, geom.out_c, oh * ow));
    auto& bm = bias_cache[key];
    if (!bm) bm = make_index_map(detail::channel_repeat_map(B, geom.out_c));

    int fan_in = geom.in_c * geom.kh * geom.kw;
    Tensor patches = gather_pad(x, im, {fan_in, B * oh * ow});
    Tensor y = matmul(W, patches);                                   // {out_c, B*oh*ow}
    y = gather_pad(y, pm, {B * geom.out_c, oh * ow});                // batch-major rows
    Tensor bias = gather_pad(b, bm, {B * geom.out_c, 1});
    y = add(y, tile_cols(bias, oh * ow));
    return reshape(y, {B, geom.out_c, oh, ow});
  }
};

// Transposed 2D convolution; output spatial size (H-1)*s - 2p + k.
struct ConvT2d {
  ConvGeom geom;  // in_c/out_c from the transposed op's point of view
  Tensor W;       // {out_c*kh*kw, in_c}
  Tensor b;       // {out_c, 1}
  mutable std::unordered_map<long long, IndexMap> perm_cache, col2im_cache, bias_cache;

  static ConvT2d create(ParamStore& ps, const std::string& name, ConvGeom g, Rng& rng) {
    ConvT2d c;
    c.geom = g;
    int rows = g.out_c * g.kh * g.kw;
    c.W = ps.add(name + ".W", {rows, g.in_c},
                 normal_init(rows * g.in_c, std::sqrt(2.0 / (g.in_c * g.kh * g.kw)), rng));
    c.b = ps.add(name + ".b", {g.out_c, 1}, Arr::Zero(g.out_c));
    return c;
  }

  int out_h(int h) const { return (h - 1) * geom.sh - 2 * geom.ph + geom.kh; }
  int out_w(int w) const { return (w - 1) * geom.sw - 2 * geom.pw + geom.kw; }

  // x {B, in_c, H, W} -> {B, out_c, OH, OW}
  Tensor forward(const Tensor& x, int B, int H, int Wd) const {
    int OH = out_h(H), OW = out_w(Wd);
    long long key = (static_cast<long long>(B) << 40) | (static_cast<long long>(H) << 20) | Wd;
    auto& pm = perm_cache[key];
    if (!pm) pm = make_index_map(detail::batch_major_to_chan_major(B, geom.in_c, H * Wd));
    auto& cm = col2im_cache[key];
    if (!cm) {
      // cols {out_c*kh*kw, B*H*W} scatter into {B, out_c, OH, OW}
      std::vector<int> map(std::size_t(geom.out_c) * geom.kh * geom.kw * B * H * Wd);
      std::size_t p = 0;
      for (int c = 0; c < geom.out_c; ++c)
        for (int ki = 0; ki < geom.kh; ++ki)
          for (int kj = 0; kj < geom.kw; ++kj)
            for (int bb = 0; bb < B; ++bb)
              for (int i = 0; i < H; ++i) {
                int y = i * geom.sh - geom.ph + ki;
                for (int j = 0; j < Wd; ++j, ++p) {
                  int xx = j * geom.sw - geom.pw + kj;
                  map[p] = (y >= 0 && y < OH && xx >= 0 && xx < OW)
                               ? ((bb * geom.out_c + c) * OH + y) * OW + xx
                               : -1;
                }
              }
      cm = make_index_map(std::move(map));
    }
    auto& bm = bias_cache[key];
    if (!bm) bm = make_index_map(detail::channel_repeat_map(B, geom.out_c));

    Tensor xc = gather_pad(x, pm, {geom.in_c, B * H * Wd});
    Tensor cols = matmul(W, xc);  // {out_c*kh*kw, B*H*W}
    Tensor y = scatter_add(cols, cm, {B * geom.out_c, OH * OW});
    Tensor bias = gather_pad(b, bm, {B * geom.out_c, 1});
    y = add(y, tile_cols(bias, OH * OW));
    return reshape(y, {B, geom.out_c, OH, OW});
  }
};

// Layer normalization over (C, H, W) per sample, per-channel affine.
struct LayerNormCh {
  int channels = 1;
  double eps = 1e-5;
  Tensor gamma, beta;  // {C, 1}
  mutable std::unordered_map<int, IndexMap> chan_cache;

  static LayerNormCh create(ParamStore& ps, const std::string& name, int channels) {
    LayerNormCh ln;
    ln.channels = channels;
    ln.gamma = ps.add(name + ".gamma", {channels, 1}, Arr::Ones(channels));
    ln.beta = ps.add(name + ".beta", {channels, 1}, Arr::Zero(channels));
    return ln;
  }

  // x {B, C, H, W}
  Tensor forward(const Tensor& x, int B, int H, int W) const {
    int S = channels * H * W;
    Tensor x2 = reshape(x, {B, S});
    Tensor mu = rowmean(x2);
    Tensor xc = sub(x2, tile_cols(mu, S));
    Tensor var = rowmean(mul(xc, xc));
    Tensor xn = divide(xc, tile_cols(sqrt_t(add_scalar(var, eps)), S));
    auto& bm = chan_cache[B];
    if (!bm) bm = make_index_map(detail::channel_repeat_map(B, channels));
    Tensor gb = gather_pad(gamma, bm, {B * channels, 1});
    Tensor bb = gather_pad(beta, bm, {B * channels, 1});
    Tensor y = reshape(xn, {B * channels, H * W});
    y = add(mul(y, tile_cols(gb, H * W)), tile_cols(bb, H * W));
    return reshape(y, {B, channels, H, W});
  }
};

// Batch normalization per channel over batch and spatial dims, batch statistics.
struct BatchNormCh {
  int channels = 1;
  double eps = 1e-5;
  Tensor gamma, beta;  // {C, 1}
  mutable std::unordered_map<long long, IndexMap> perm_cache, iperm_cache;

  static BatchNormCh create(ParamStore& ps, const std::string& name, int channels) {
    BatchNormCh bn;
    bn.channels = channels;
    bn.gamma = ps.add(name + ".gamma", {channels, 1}, Arr::Ones(channels));
    bn.beta = ps.add(name + ".beta", {channels, 1}, Arr::Zero(channels));
    return bn;
  }

  Tensor forward(const Tensor& x, int B, int H, int W) const {
    int S = B * H * W;
    long long key = (static_cast<long long>(B) << 20) | (H * W);
    auto& pm = perm_cache[key];
    if (!pm) pm = make_index_map(detail::batch_major_to_chan_major(B, channels, H * W));
    auto& im = iperm_cache[key];
    if (!im) {
      // inverse permutation: {C, B*H*W} -> {B, C, H, W}
      std::vector<int> map(std::size_t(B) * channels * H * W);
      std::size_t p = 0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < channels; ++c)
          for (int s = 0; s < H * W; ++s, ++p) map[p] = (c * B + b) * H * W + s;
      im = make_index_map(std::move(map));
    }
    Tensor xc2 = gather_pad(x, pm, {channels, S});
    Tensor mu = rowmean(xc2);
    Tensor xc = sub(xc2, tile_cols(mu, S));
    Tensor var = rowmean(mul(xc, xc));
    Tensor xn = divide(xc, tile_cols(sqrt_t(add_scalar(var, eps)), S));
    Tensor y = add(mul(xn, tile_cols(gamma, S)), tile_cols(beta, S));
    return reshape(gather_pad(y, im, {B, channels, H * W}), {B, channels, H, W});
  }
};

// Single-head self-attention over the time axis. Tokens are time steps, token
// embedding is the flattened (channel, feature) slice; residual connection at
// the output.
struct SelfAttention {
  int embed = 0;  // C * W of the incoming map
  int dk = 0;
  Tensor Wq, Wk, Wv, Wo;
  mutable std::unordered_map<long long, IndexMap> tok_cache, itok_cache;

  static SelfAttention create(ParamStore& ps, const std::string& name, int embed, int dk,
                              Rng& rng) {
    SelfAttention a;
    a.embed = embed;
    a.dk = dk;
    double s = std::sqrt(1.0 / embed);
    a.Wq = ps.add(name + ".Wq", {embed, dk}, normal_init(embed * dk, s, rng));
    a.Wk = ps.add(name + ".Wk", {embed, dk}, normal_init(embed * dk, s, rng));
    a.Wv = ps.add(name + ".Wv", {embed, dk}, normal_init(embed * dk, s, rng));
    a.Wo = ps.add(name + ".Wo", {dk, embed}, normal_init(dk * embed, s, rng));
    return a;
  }

  // x {B, C, T, W}; attention mixes along T
  Tensor forward(const Tensor& x, int B, int C, int T, int W) const {
    require(C * W == embed, "nn: attention embed mismatch");
    long long key = (static_cast<long long>(B) << 40) | (static_cast<long long>(C) << 24) | (T << 12) | W;
    auto& tm = tok_cache[key];
    auto& im = itok_cache[key];
    if (!tm) {
      // {B,C,T,W} -> {B*T, C*W}: tokens contiguous per sample
      std::vector<int> fwd(std::size_t(B) * C * T * W), inv(fwd.size());
      std::size_t p = 0;
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t)
          for (int c = 0; c < C; ++c)
            for (int w = 0; w < W; ++w, ++p) {
              int src = ((b * C + c) * T + t) * W + w;
              fwd[p] = src;
              inv[src] = int(p);
            }
      tm = make_index_map(std::move(fwd));
      std::vector<int> inv2(inv.size());
      for (std::size_t i = 0; i < inv.size(); ++i) inv2[i] = inv[i];
      im = make_index_map(std::move(inv2));
    }
    Tensor tok = gather_pad(x, tm, {B * T, embed});
    double scale = 1.0 / std::sqrt(double(dk));
    std::vector<Tensor> outs;
    outs.reserve(B);
    for (int b = 0; b < B; ++b) {
      std::vector<int> idx(std::size_t(T) * embed);
      std::iota(idx.begin(), idx.end(), b * T * embed);
      Tensor xb = gather_pad(tok, make_index_map(std::move(idx)), {T, embed});
      Tensor q = matmul(xb, Wq), k = matmul(xb, Wk), v = matmul(xb, Wv);
      Tensor att = softmax_rows(mul_scalar(matmul(q, transpose(k)), scale));
      outs.push_back(matmul(matmul(att, v), Wo));
    }
    Tensor mixed = concat_rows(outs);     // {B*T, embed}
    Tensor y = add(tok, mixed);           // residual
    return reshape(gather_pad(y, im, {B, C, T * W}), {B, C, T, W});
  }
};

}  // namespace ddist
