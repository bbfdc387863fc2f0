#pragma once

// Differentiable modules built on the kernels. Modules hold no activation
// state: forward pushes what backward needs onto a caller-owned Cache, so
// concurrent forward passes over shared frozen parameters are safe and
// training can run batch samples in parallel with per-sample caches and
// gradient buffers.

#include <string>
#include <vector>

#include "ensldm/nn/kernels.hpp"
#include "ensldm/rng.hpp"
#include "ensldm/tensor.hpp"

namespace ensldm::nn {

template <class T>
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor<T> w;
  };
  std::vector<Entry> entries;

  int add(const std::string& name, std::vector<int> shape) {
    entries.push_back(Entry{name, Tensor<T>(std::move(shape))});
    return static_cast<int>(entries.size()) - 1;
  }

  Tensor<T>& operator[](int i) { return entries[static_cast<size_t>(i)].w; }
  const Tensor<T>& operator[](int i) const { return entries[static_cast<size_t>(i)].w; }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.w.numel();
    return n;
  }
};

/// Gradient buffer aligned with a ParamStore.
template <class T>
struct Grads {
  std::vector<Tensor<T>> g;

  Grads() = default;
  explicit Grads(const ParamStore<T>& ps) {
    g.reserve(ps.entries.size());
    for (const auto& e : ps.entries) g.emplace_back(e.w.shape);
  }

  void zero() {
    for (auto& t : g) t.fill(T(0));
  }

  /// Element-wise accumulate; callers sum per-sample buffers in a fixed
  /// order so results do not depend on the thread count.
  void add(const Grads& o) {
    for (size_t i = 0; i < g.size(); ++i) {
      for (int64_t j = 0; j < g[i].numel(); ++j) g[i][j] += o.g[i][j];
    }
  }
};

/// LIFO of forward activations; backward pops in exact reverse order.
template <class T>
struct Cache {
  std::vector<Tensor<T>> stack;

  void push(Tensor<T> t) { stack.push_back(std::move(t)); }
  Tensor<T> pop() {
    require(!stack.empty(), "Cache: pop from empty stack");
    Tensor<T> t = std::move(stack.back());
    stack.pop_back();
    return t;
  }
};

template <class T>
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor<T>> m, v;

  explicit Adam(const ParamStore<T>& ps, double lr_ = 1e-3) : lr(lr_) {
    for (const auto& e : ps.entries) {
      m.emplace_back(e.w.shape);
      v.emplace_back(e.w.shape);
    }
  }

  void step(ParamStore<T>& ps, const Grads<T>& gr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < ps.entries.size(); ++i) {
      Tensor<T>& w = ps.entries[i].w;
      const Tensor<T>& g = gr.g[i];
      for (int64_t j = 0; j < w.numel(); ++j) {
        double gj = g[j];
        double mj = beta1 * m[i][j] + (1.0 - beta1) * gj;
        double vj = beta2 * v[i][j] + (1.0 - beta2) * gj * gj;
        m[i][j] = static_cast<T>(mj);
        v[i][j] = static_cast<T>(vj);
        w[j] -= static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps));
      }
    }
  }
};

inline int pick_groups(int channels, int want = 8) {
  int g = std::min(want, channels);
  while (g > 1 && channels % g != 0) --g;
  return g;
}

// ---------------------------------------------------------------------------
// Primitive modules.

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
         int pad, Rng& rng, bool zero_init = false)
      : stride_(stride), pad_(pad) {
    w_ = ps.add(name + ".w", {out_ch, in_ch, k, k});
    b_ = ps.add(name + ".b", {out_ch});
    if (!zero_init) {
      double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
      for (int64_t i = 0; i < ps[w_].numel(); ++i) {
        ps[w_][i] = static_cast<T>(rng.uniform(-bound, bound));
      }
      for (int64_t i = 0; i < ps[b_].numel(); ++i) {
        ps[b_][i] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> y = conv2d_forward(x, ps[w_], ps[b_], stride_, pad_);
    if (cache) cache->push(x);
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    Tensor<T> x = cache.pop();
    conv2d_backward_params(x, dy, stride_, pad_, gr.g[static_cast<size_t>(w_)],
                           gr.g[static_cast<size_t>(b_)]);
    return conv2d_backward_input(dy, ps[w_], x.shape, stride_, pad_);
  }

 private:
  int w_ = -1, b_ = -1;
  int stride_ = 1, pad_ = 0;
};

/// Linear layer over the last axis; any leading shape is treated as rows.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in_f, int out_f, Rng& rng,
         bool zero_init = false)
      : in_f_(in_f), out_f_(out_f) {
    w_ = ps.add(name + ".w", {out_f, in_f});
    b_ = ps.add(name + ".b", {out_f});
    if (!zero_init) {
      double bound = 1.0 / std::sqrt(static_cast<double>(in_f));
      for (int64_t i = 0; i < ps[w_].numel(); ++i) {
        ps[w_][i] = static_cast<T>(rng.uniform(-bound, bound));
      }
      for (int64_t i = 0; i < ps[b_].numel(); ++i) {
        ps[b_][i] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> x2 = as_rows(x);
    Tensor<T> y = linear_forward(x2, ps[w_], ps[b_]);
    if (cache) cache->push(x);
    y.shape = out_shape(x.shape);
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    Tensor<T> x = cache.pop();
    Tensor<T> x2 = as_rows(x);
    Tensor<T> dy2 = dy;
    dy2.shape = {x2.dim(0), out_f_};
    linear_backward_params(x2, dy2, gr.g[static_cast<size_t>(w_)], gr.g[static_cast<size_t>(b_)]);
    Tensor<T> dx = linear_backward_input(dy2, ps[w_], x2.dim(0));
    dx.shape = x.shape;
    return dx;
  }

 private:
  Tensor<T> as_rows(const Tensor<T>& x) const {
    Tensor<T> r = x;
    r.shape = {static_cast<int>(x.numel() / in_f_), in_f_};
    return r;
  }
  std::vector<int> out_shape(const std::vector<int>& in) const {
    std::vector<int> s = in;
    s.back() = out_f_;
    return s;
  }

  int w_ = -1, b_ = -1;
  int in_f_ = 0, out_f_ = 0;
};

enum class Act { kSiLU, kGELU, kLeakyReLU };

template <class T>
class Activation {
 public:
  Activation() = default;
  explicit Activation(Act kind, double slope = 0.2) : kind_(kind), slope_(static_cast<T>(slope)) {}

  Tensor<T> forward(const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = apply(x[i]);
    if (cache) cache->push(x);
    return y;
  }

  Tensor<T> backward(Cache<T>& cache, const Tensor<T>& dy) const {
    Tensor<T> x = cache.pop();
    Tensor<T> dx(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] = dy[i] * grad(x[i]);
    return dx;
  }

 private:
  T apply(T x) const {
    switch (kind_) {
      case Act::kSiLU: return silu(x);
      case Act::kGELU: return gelu(x);
      default: return leaky_relu(x, slope_);
    }
  }
  T grad(T x) const {
    switch (kind_) {
      case Act::kSiLU: return silu_grad(x);
      case Act::kGELU: return gelu_grad(x);
      default: return leaky_relu_grad(x, slope_);
    }
  }

  Act kind_ = Act::kSiLU;
  T slope_ = T(0.2);
};

template <class T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& name, int channels, int groups = 8)
      : groups_(pick_groups(channels, groups)) {
    g_ = ps.add(name + ".gamma", {channels});
    b_ = ps.add(name + ".beta", {channels});
    for (int64_t i = 0; i < ps[g_].numel(); ++i) ps[g_][i] = T(1);
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> y(x.shape);
    Tensor<T> mean({x.dim(0), groups_}), rstd({x.dim(0), groups_});
    groupnorm_forward(x, ps[g_], ps[b_], groups_, y, mean, rstd);
    if (cache) {
      cache->push(x);
      cache->push(mean);
      cache->push(rstd);
    }
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    Tensor<T> rstd = cache.pop();
    Tensor<T> mean = cache.pop();
    Tensor<T> x = cache.pop();
    Tensor<T> dx(x.shape);
    groupnorm_backward(dy, x, ps[g_], mean, rstd, groups_, dx, gr.g[static_cast<size_t>(g_)],
                       gr.g[static_cast<size_t>(b_)]);
    return dx;
  }

 private:
  int g_ = -1, b_ = -1;
  int groups_ = 8;
};

/// LayerNorm over the last axis.
template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int features) : features_(features) {
    g_ = ps.add(name + ".gamma", {features});
    b_ = ps.add(name + ".beta", {features});
    for (int64_t i = 0; i < ps[g_].numel(); ++i) ps[g_][i] = T(1);
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> x2 = x;
    int rows = static_cast<int>(x.numel() / features_);
    x2.shape = {rows, features_};
    Tensor<T> y(x2.shape), mean({rows, 1}), rstd({rows, 1});
    layernorm_forward(x2, ps[g_], ps[b_], y, mean, rstd);
    if (cache) {
      cache->push(x2);
      cache->push(mean);
      cache->push(rstd);
    }
    y.shape = x.shape;
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    Tensor<T> rstd = cache.pop();
    Tensor<T> mean = cache.pop();
    Tensor<T> x2 = cache.pop();
    Tensor<T> dy2 = dy;
    dy2.shape = x2.shape;
    Tensor<T> dx(x2.shape);
    layernorm_backward(dy2, x2, ps[g_], mean, rstd, dx, gr.g[static_cast<size_t>(g_)],
                       gr.g[static_cast<size_t>(b_)]);
    dx.shape = dy.shape;
    return dx;
  }

 private:
  int g_ = -1, b_ = -1;
  int features_ = 0;
};

// ---------------------------------------------------------------------------
// Token reshapes. Pure transposes: each is its own backward with the
// arguments swapped, so they need no cache.

/// [N, C, H, W] -> [N, H*W, C]
template <class T>
Tensor<T> to_tokens_spatial(const Tensor<T>& x) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({N, HW, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* src = x.data() + (static_cast<int64_t>(n) * C + c) * HW;
      T* dst = y.data() + static_cast<int64_t>(n) * HW * C + c;
      for (int s = 0; s < HW; ++s) dst[static_cast<int64_t>(s) * C] = src[s];
    }
  }
  return y;
}

/// [N, H*W, C] -> [N, C, H, W]
template <class T>
Tensor<T> from_tokens_spatial(const Tensor<T>& t, int h, int w) {
  const int N = t.dim(0), HW = t.dim(1), C = t.dim(2);
  Tensor<T> y({N, C, h, w});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* src = t.data() + static_cast<int64_t>(n) * HW * C + c;
      T* dst = y.data() + (static_cast<int64_t>(n) * C + c) * HW;
      for (int s = 0; s < HW; ++s) dst[s] = src[static_cast<int64_t>(s) * C];
    }
  }
  return y;
}

/// [L, C, H, W] -> [(L/p)*H*W, p, C]; tokens are within-patch time steps.
template <class T>
Tensor<T> to_tokens_temporal(const Tensor<T>& x, int p) {
  const int L = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int G = L / p;
  Tensor<T> y({G * HW, p, C});
  for (int g = 0; g < G; ++g) {
    for (int li = 0; li < p; ++li) {
      for (int c = 0; c < C; ++c) {
        const T* src = x.data() + (static_cast<int64_t>(g * p + li) * C + c) * HW;
        for (int s = 0; s < HW; ++s) {
          y.data()[((static_cast<int64_t>(g) * HW + s) * p + li) * C + c] = src[s];
        }
      }
    }
  }
  return y;
}

/// Inverse of to_tokens_temporal.
template <class T>
Tensor<T> from_tokens_temporal(const Tensor<T>& t, int p, int C, int h, int w) {
  const int HW = h * w;
  const int G = t.dim(0) / HW;
  Tensor<T> y({G * p, C, h, w});
  for (int g = 0; g < G; ++g) {
    for (int li = 0; li < p; ++li) {
      for (int c = 0; c < C; ++c) {
        T* dst = y.data() + (static_cast<int64_t>(g * p + li) * C + c) * HW;
        for (int s = 0; s < HW; ++s) {
          dst[s] = t.data()[((static_cast<int64_t>(g) * HW + s) * p + li) * C + c];
        }
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Multi-head attention over [B, N, C] token tensors.

template <class T>
class MultiheadAttention {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<T>& ps, const std::string& name, int width, int heads, Rng& rng,
                     bool zero_init_out = true)
      : width_(width), heads_(heads) {
    if (width % heads != 0) {
      throw ConfigError("attention: width " + std::to_string(width) +
                        " not divisible by heads " + std::to_string(heads));
    }
    wq_ = Linear<T>(ps, name + ".q", width, width, rng);
    wk_ = Linear<T>(ps, name + ".k", width, width, rng);
    wv_ = Linear<T>(ps, name + ".v", width, width, rng);
    wo_ = Linear<T>(ps, name + ".out", width, width, rng, zero_init_out);
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    const int B = x.dim(0), N = x.dim(1);
    const int d = width_ / heads_;
    Tensor<T> q = split_heads(wq_.forward(ps, x, cache), B, N, d);
    Tensor<T> k = split_heads(wk_.forward(ps, x, cache), B, N, d);
    Tensor<T> v = split_heads(wv_.forward(ps, x, cache), B, N, d);
    Tensor<T> a({B, heads_, N, N});
    Tensor<T> y({B, heads_, N, d});
    attention_forward(q, k, v, a, y);
    Tensor<T> merged = merge_heads(y, B, N);
    Tensor<T> out = wo_.forward(ps, merged, cache);
    if (cache) {
      cache->push(q);
      cache->push(k);
      cache->push(v);
      cache->push(a);
    }
    return out;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    const int B = dy.dim(0), N = dy.dim(1);
    const int d = width_ / heads_;
    Tensor<T> a = cache.pop();
    Tensor<T> v = cache.pop();
    Tensor<T> k = cache.pop();
    Tensor<T> q = cache.pop();
    Tensor<T> dmerged = wo_.backward(ps, gr, cache, dy);
    Tensor<T> dy4 = split_heads(dmerged, B, N, d);
    Tensor<T> dq(q.shape), dk(k.shape), dv(v.shape);
    attention_backward(dy4, q, k, v, a, dq, dk, dv);
    Tensor<T> dx = wv_.backward(ps, gr, cache, merge_heads(dv, B, N));
    Tensor<T> dxk = wk_.backward(ps, gr, cache, merge_heads(dk, B, N));
    Tensor<T> dxq = wq_.backward(ps, gr, cache, merge_heads(dq, B, N));
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dxk[i] + dxq[i];
    return dx;
  }

 private:
  /// [B, N, C] -> [B, heads, N, d]
  Tensor<T> split_heads(const Tensor<T>& x, int B, int N, int d) const {
    Tensor<T> y({B, heads_, N, d});
    for (int b = 0; b < B; ++b) {
      for (int n = 0; n < N; ++n) {
        const T* src = x.data() + (static_cast<int64_t>(b) * N + n) * width_;
        for (int h = 0; h < heads_; ++h) {
          T* dst = y.data() + (((static_cast<int64_t>(b) * heads_ + h) * N) + n) * d;
          for (int dd = 0; dd < d; ++dd) dst[dd] = src[h * d + dd];
        }
      }
    }
    return y;
  }

  /// [B, heads, N, d] -> [B, N, C]
  Tensor<T> merge_heads(const Tensor<T>& x, int B, int N) const {
    const int d = width_ / heads_;
    Tensor<T> y({B, N, width_});
    for (int b = 0; b < B; ++b) {
      for (int n = 0; n < N; ++n) {
        T* dst = y.data() + (static_cast<int64_t>(b) * N + n) * width_;
        for (int h = 0; h < heads_; ++h) {
          const T* src = x.data() + (((static_cast<int64_t>(b) * heads_ + h) * N) + n) * d;
          for (int dd = 0; dd < d; ++dd) dst[h * d + dd] = src[dd];
        }
      }
    }
    return y;
  }

  int width_ = 0, heads_ = 1;
  Linear<T> wq_, wk_, wv_, wo_;
};

// ---------------------------------------------------------------------------
// Diffusion-step embedding: sinusoidal features through a 2-layer MLP.

template <class T>
class StepEmbedding {
 public:
  StepEmbedding() = default;
  StepEmbedding(ParamStore<T>& ps, const std::string& name, int sin_dim, int emb_dim, Rng& rng)
      : sin_dim_(sin_dim) {
    l1_ = Linear<T>(ps, name + ".l1", sin_dim, emb_dim, rng);
    l2_ = Linear<T>(ps, name + ".l2", emb_dim, emb_dim, rng);
  }

  /// Deterministic in t. Output shape [1, emb_dim].
  Tensor<T> forward(const ParamStore<T>& ps, int t, Cache<T>* cache) const {
    Tensor<T> s({1, sin_dim_});
    const int half = sin_dim_ / 2;
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / half);
      s[i] = static_cast<T>(std::sin(t * freq));
      s[half + i] = static_cast<T>(std::cos(t * freq));
    }
    Tensor<T> h = l1_.forward(ps, s, cache);
    Tensor<T> ha = act_.forward(h, cache);
    return l2_.forward(ps, ha, cache);
  }

  void backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache, const Tensor<T>& demb) const {
    Tensor<T> d2 = l2_.backward(ps, gr, cache, demb);
    Tensor<T> d1 = act_.backward(cache, d2);
    l1_.backward(ps, gr, cache, d1);
  }

 private:
  int sin_dim_ = 0;
  Linear<T> l1_, l2_;
  Activation<T> act_{Act::kSiLU};
};

// ---------------------------------------------------------------------------
// Residual block: pre-activation norm, two 3x3 convs, learned skip on channel
// change, optional down/up-sampling inside the block, optional additive
// step-embedding injection after the first conv.

enum class Resample { kNone, kDown, kUp };

template <class T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, int in_ch, int out_ch, int emb_dim,
           Resample resample, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), emb_dim_(emb_dim), resample_(resample) {
    gn1_ = GroupNorm<T>(ps, name + ".norm1", in_ch);
    conv1_ = Conv2d<T>(ps, name + ".conv1", in_ch, out_ch, 3, resample == Resample::kDown ? 2 : 1,
                       1, rng);
    if (emb_dim > 0) emb_proj_ = Linear<T>(ps, name + ".emb", emb_dim, out_ch, rng);
    gn2_ = GroupNorm<T>(ps, name + ".norm2", out_ch);
    conv2_ = Conv2d<T>(ps, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng, /*zero_init=*/true);
    has_skip_conv_ = (in_ch != out_ch) || resample == Resample::kDown;
    if (has_skip_conv_) {
      skip_ = Conv2d<T>(ps, name + ".skip", in_ch, out_ch, 1,
                        resample == Resample::kDown ? 2 : 1, 0, rng);
    }
  }

  /// For kUp blocks target_h/target_w give the output size; other modes
  /// ignore them.
  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, const Tensor<T>& emb,
                    Cache<T>* cache, int target_h = 0, int target_w = 0) const {
    Tensor<T> h = gn1_.forward(ps, x, cache);
    h = act_.forward(h, cache);
    Tensor<T> skip_in = x;
    if (resample_ == Resample::kUp) {
      int th = target_h > 0 ? target_h : x.dim(2) * 2;
      int tw = target_w > 0 ? target_w : x.dim(3) * 2;
      if (cache) {
        // backward needs the pre-upsample size
        Tensor<T> dims({2});
        dims[0] = static_cast<T>(x.dim(2));
        dims[1] = static_cast<T>(x.dim(3));
        cache->push(dims);
      }
      h = upsample_nearest(h, th, tw);
      skip_in = upsample_nearest(x, th, tw);
    }
    h = conv1_.forward(ps, h, cache);
    if (emb_dim_ > 0) {
      Tensor<T> ea = emb_act_.forward(emb, cache);
      Tensor<T> ep = emb_proj_.forward(ps, ea, cache);  // [1, out_ch]
      add_channel_bias(h, ep);
    }
    h = gn2_.forward(ps, h, cache);
    h = act_.forward(h, cache);
    h = conv2_.forward(ps, h, cache);
    Tensor<T> s = has_skip_conv_ ? skip_.forward(ps, skip_in, cache) : skip_in;
    if (!has_skip_conv_ && cache && resample_ == Resample::kUp) {
      // nothing extra: identity skip over the upsampled input
    }
    Tensor<T> y(h.shape);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = s[i] + h[i];
    return y;
  }

  /// Returns dx; accumulates the step-embedding gradient into demb when the
  /// block carries an embedding projection.
  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache, const Tensor<T>& dy,
                     Tensor<T>* demb) const {
    Tensor<T> dskip_in;
    if (has_skip_conv_) {
      dskip_in = skip_.backward(ps, gr, cache, dy);
    } else {
      dskip_in = dy;
    }
    Tensor<T> dh = conv2_.backward(ps, gr, cache, dy);
    dh = act_.backward(cache, dh);
    dh = gn2_.backward(ps, gr, cache, dh);
    if (emb_dim_ > 0) {
      Tensor<T> dep = reduce_channel_bias(dh);
      Tensor<T> dea = emb_proj_.backward(ps, gr, cache, dep);
      Tensor<T> de = emb_act_.backward(cache, dea);
      require(demb != nullptr, "ResBlock: missing demb accumulator");
      for (int64_t i = 0; i < de.numel(); ++i) (*demb)[i] += de[i];
    }
    dh = conv1_.backward(ps, gr, cache, dh);
    if (resample_ == Resample::kUp) {
      Tensor<T> dims = cache.pop();
      int h0 = static_cast<int>(dims[0]), w0 = static_cast<int>(dims[1]);
      dh = upsample_nearest_backward(dh, h0, w0);
      dskip_in = upsample_nearest_backward(dskip_in, h0, w0);
    }
    dh = act_.backward(cache, dh);
    dh = gn1_.backward(ps, gr, cache, dh);
    for (int64_t i = 0; i < dh.numel(); ++i) dh[i] += dskip_in[i];
    return dh;
  }

 private:
  static void add_channel_bias(Tensor<T>& h, const Tensor<T>& e) {
    const int N = h.dim(0), C = h.dim(1), HW = h.dim(2) * h.dim(3);
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        T* p = h.data() + (static_cast<int64_t>(n) * C + c) * HW;
        T ec = e[c];
        for (int i = 0; i < HW; ++i) p[i] += ec;
      }
    }
  }

  static Tensor<T> reduce_channel_bias(const Tensor<T>& dh) {
    const int N = dh.dim(0), C = dh.dim(1), HW = dh.dim(2) * dh.dim(3);
    Tensor<T> de({1, C});
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const T* p = dh.data() + (static_cast<int64_t>(n) * C + c) * HW;
        T acc = T(0);
        for (int i = 0; i < HW; ++i) acc += p[i];
        de[c] += acc;
      }
    }
    return de;
  }

  int in_ch_ = 0, out_ch_ = 0, emb_dim_ = 0;
  Resample resample_ = Resample::kNone;
  bool has_skip_conv_ = false;
  GroupNorm<T> gn1_, gn2_;
  Conv2d<T> conv1_, conv2_, skip_;
  Linear<T> emb_proj_;
  Activation<T> act_{Act::kSiLU};
  Activation<T> emb_act_{Act::kSiLU};
};

// ---------------------------------------------------------------------------
// Spatial self-attention for conv feature maps: x + proj(MHA(tokens(GN(x)))).

template <class T>
class SpatialAttention {
 public:
  SpatialAttention() = default;
  SpatialAttention(ParamStore<T>& ps, const std::string& name, int channels, int heads, Rng& rng) {
    norm_ = GroupNorm<T>(ps, name + ".norm", channels);
    attn_ = MultiheadAttention<T>(ps, name + ".attn", channels, heads, rng, /*zero_init_out=*/true);
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    Tensor<T> n = norm_.forward(ps, x, cache);
    Tensor<T> tok = to_tokens_spatial(n);
    Tensor<T> a = attn_.forward(ps, tok, cache);
    Tensor<T> add = from_tokens_spatial(a, x.dim(2), x.dim(3));
    Tensor<T> y(x.shape);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = x[i] + add[i];
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    Tensor<T> dtok = to_tokens_spatial(dy);
    Tensor<T> da = attn_.backward(ps, gr, cache, dtok);
    Tensor<T> dn = from_tokens_spatial(da, dy.dim(2), dy.dim(3));
    Tensor<T> dx = norm_.backward(ps, gr, cache, dn);
    for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    return dx;
  }

 private:
  GroupNorm<T> norm_;
  MultiheadAttention<T> attn_;
};

// ---------------------------------------------------------------------------
// Transformer block: spatial attention, temporal attention within
// non-overlapping patches, then a GELU MLP, each behind a LayerNorm and a
// residual connection. Temporal positions are encoded relative to the patch
// start, which keeps whole-patch permutation equivariance.

template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  /// patch <= 0 builds the block without its temporal-attention stage.
  TransformerBlock(ParamStore<T>& ps, const std::string& name, int channels, int heads, int patch,
                   int mlp_ratio, Rng& rng)
      : channels_(channels), patch_(patch), has_temporal_(patch > 0) {
    ln_s_ = LayerNorm<T>(ps, name + ".norm_s", channels);
    attn_s_ = MultiheadAttention<T>(ps, name + ".attn_s", channels, heads, rng, true);
    if (has_temporal_) {
      ln_t_ = LayerNorm<T>(ps, name + ".norm_t", channels);
      attn_t_ = MultiheadAttention<T>(ps, name + ".attn_t", channels, heads, rng, true);
      pos_ = make_pos(patch, channels);
    }
    ln_m_ = LayerNorm<T>(ps, name + ".norm_m", channels);
    mlp1_ = Linear<T>(ps, name + ".mlp1", channels, channels * mlp_ratio, rng);
    mlp2_ = Linear<T>(ps, name + ".mlp2", channels * mlp_ratio, channels, rng, true);
  }

  Tensor<T> forward(const ParamStore<T>& ps, const Tensor<T>& x, Cache<T>* cache) const {
    const int L = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (has_temporal_ && L % patch_ != 0) {
      throw ConfigError("transformer block: patch " + std::to_string(patch_) +
                        " does not divide sequence length " + std::to_string(L));
    }
    // Spatial attention.
    Tensor<T> tok = to_tokens_spatial(x);
    Tensor<T> n1 = ln_s_.forward(ps, tok, cache);
    Tensor<T> sa = attn_s_.forward(ps, n1, cache);
    Tensor<T> x1 = x;
    {
      Tensor<T> add = from_tokens_spatial(sa, h, w);
      for (int64_t i = 0; i < x1.numel(); ++i) x1[i] += add[i];
    }
    // Temporal attention within patches.
    Tensor<T> x2 = x1;
    if (has_temporal_) {
      Tensor<T> tokt = to_tokens_temporal(x1, patch_);
      Tensor<T> n2 = ln_t_.forward(ps, tokt, cache);
      add_pos(n2);
      Tensor<T> ta = attn_t_.forward(ps, n2, cache);
      Tensor<T> add = from_tokens_temporal(ta, patch_, channels_, h, w);
      for (int64_t i = 0; i < x2.numel(); ++i) x2[i] += add[i];
    }
    // MLP.
    Tensor<T> tok3 = to_tokens_spatial(x2);
    Tensor<T> n3 = ln_m_.forward(ps, tok3, cache);
    Tensor<T> m = mlp1_.forward(ps, n3, cache);
    m = gelu_.forward(m, cache);
    m = mlp2_.forward(ps, m, cache);
    Tensor<T> x3 = x2;
    {
      Tensor<T> add = from_tokens_spatial(m, h, w);
      for (int64_t i = 0; i < x3.numel(); ++i) x3[i] += add[i];
    }
    return x3;
  }

  Tensor<T> backward(const ParamStore<T>& ps, Grads<T>& gr, Cache<T>& cache,
                     const Tensor<T>& dy) const {
    const int h = dy.dim(2), w = dy.dim(3);
    // MLP branch.
    Tensor<T> dm = to_tokens_spatial(dy);
    dm = mlp2_.backward(ps, gr, cache, dm);
    dm = gelu_.backward(cache, dm);
    dm = mlp1_.backward(ps, gr, cache, dm);
    dm = ln_m_.backward(ps, gr, cache, dm);
    Tensor<T> dx2 = dy;
    {
      Tensor<T> add = from_tokens_spatial(dm, h, w);
      for (int64_t i = 0; i < dx2.numel(); ++i) dx2[i] += add[i];
    }
    // Temporal branch.
    Tensor<T> dx1 = dx2;
    if (has_temporal_) {
      Tensor<T> dta = to_tokens_temporal(dx2, patch_);
      dta = attn_t_.backward(ps, gr, cache, dta);
      dta = ln_t_.backward(ps, gr, cache, dta);
      Tensor<T> add = from_tokens_temporal(dta, patch_, channels_, h, w);
      for (int64_t i = 0; i < dx1.numel(); ++i) dx1[i] += add[i];
    }
    // Spatial branch.
    Tensor<T> dsa = to_tokens_spatial(dx1);
    dsa = attn_s_.backward(ps, gr, cache, dsa);
    dsa = ln_s_.backward(ps, gr, cache, dsa);
    Tensor<T> dx = dx1;
    {
      Tensor<T> add = from_tokens_spatial(dsa, h, w);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += add[i];
    }
    return dx;
  }

 private:
  static Tensor<T> make_pos(int patch, int channels) {
    Tensor<T> pe({patch, channels});
    for (int p = 0; p < patch; ++p) {
      for (int c = 0; c < channels / 2; ++c) {
        double freq = std::exp(-std::log(10000.0) * c / std::max(1, channels / 2));
        pe.data()[static_cast<int64_t>(p) * channels + 2 * c] = static_cast<T>(std::sin(p * freq));
        pe.data()[static_cast<int64_t>(p) * channels + 2 * c + 1] =
            static_cast<T>(std::cos(p * freq));
      }
    }
    return pe;
  }

  void add_pos(Tensor<T>& tok) const {
    const int B = tok.dim(0), N = tok.dim(1), C = tok.dim(2);
    for (int b = 0; b < B; ++b) {
      for (int n = 0; n < N; ++n) {
        T* p = tok.data() + (static_cast<int64_t>(b) * N + n) * C;
        const T* q = pos_.data() + static_cast<int64_t>(n) * C;
        for (int c = 0; c < C; ++c) p[c] += q[c];
      }
    }
  }

  int channels_ = 0, patch_ = 1;
  bool has_temporal_ = true;
  LayerNorm<T> ln_s_, ln_t_, ln_m_;
  MultiheadAttention<T> attn_s_, attn_t_;
  Linear<T> mlp1_, mlp2_;
  Activation<T> gelu_{Act::kGELU};
  Tensor<T> pos_;
};

// ---------------------------------------------------------------------------
// Channel concat/split helpers for skip connections and input packing.

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Tensor<T> y({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.data() + static_cast<int64_t>(n) * Ca * HW, static_cast<size_t>(Ca) * HW,
                y.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW);
    std::copy_n(b.data() + static_cast<int64_t>(n) * Cb * HW, static_cast<size_t>(Cb) * HW,
                y.data() + static_cast<int64_t>(n) * (Ca + Cb) * HW + static_cast<int64_t>(Ca) * HW);
  }
  return y;
}

template <class T>
void split_channels(const Tensor<T>& y, int Ca, Tensor<T>& a, Tensor<T>& b) {
  const int N = y.dim(0), C = y.dim(1), HW = y.dim(2) * y.dim(3);
  const int Cb = C - Ca;
  a = Tensor<T>({N, Ca, y.dim(2), y.dim(3)});
  b = Tensor<T>({N, Cb, y.dim(2), y.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(y.data() + static_cast<int64_t>(n) * C * HW, static_cast<size_t>(Ca) * HW,
                a.data() + static_cast<int64_t>(n) * Ca * HW);
    std::copy_n(y.data() + static_cast<int64_t>(n) * C * HW + static_cast<int64_t>(Ca) * HW,
                static_cast<size_t>(Cb) * HW, b.data() + static_cast<int64_t>(n) * Cb * HW);
  }
}

}  // namespace ensldm::nn
