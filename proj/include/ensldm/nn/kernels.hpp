#pragma once

// Dense NN kernels. Every kernel comes in two variants: a serial reference
// (namespace serial) and an OpenMP one (namespace par) that distributes the
// same per-row helper across threads. Parallelism is always over disjoint
// output slices, each computed with the identical inner loop, so par and
// serial results are bitwise equal for any thread count. The top-level
// wrappers dispatch on the configured thread cap and fall back to serial
// inside an enclosing parallel region.

#include <cmath>
#include <limits>
#include <vector>

#include "ensldm/tensor.hpp"
#include "ensldm/threads.hpp"

namespace ensldm::nn {

// ---------------------------------------------------------------------------
// Per-slice helpers shared by both variants.

namespace detail {

/// One output row y[n, oc, oy, :] of a 2-D convolution.
template <class T>
void conv2d_out_row(const T* x, const T* w, const T* b, T* y, int C, int H, int W, int OC, int KH,
                    int KW, int OW, int stride, int pad, int n, int oc, int oy) {
  (void)OC;
  const T* woc = w + static_cast<int64_t>(oc) * C * KH * KW;
  const T* xn = x + static_cast<int64_t>(n) * C * H * W;
  for (int ox = 0; ox < OW; ++ox) {
    T acc = b ? b[oc] : T(0);
    for (int c = 0; c < C; ++c) {
      const T* xc = xn + static_cast<int64_t>(c) * H * W;
      const T* wc = woc + static_cast<int64_t>(c) * KH * KW;
      for (int ky = 0; ky < KH; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= H) continue;
        const T* xrow = xc + static_cast<int64_t>(iy) * W;
        const T* wrow = wc + static_cast<int64_t>(ky) * KW;
        for (int kx = 0; kx < KW; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= W) continue;
          acc += xrow[ix] * wrow[kx];
        }
      }
    }
    y[ox] = acc;
  }
}

/// One input-gradient row dx[n, c, iy, :].
template <class T>
void conv2d_in_row(const T* dy, const T* w, T* dx, int C, int H, int W, int OC, int KH, int KW,
                   int OH, int OW, int stride, int pad, int n, int c, int iy) {
  for (int ix = 0; ix < W; ++ix) {
    T acc = T(0);
    for (int oc = 0; oc < OC; ++oc) {
      const T* dyc = dy + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
      const T* wc = w + (static_cast<int64_t>(oc) * C + c) * KH * KW;
      for (int ky = 0; ky < KH; ++ky) {
        int num_y = iy + pad - ky;
        if (num_y < 0 || num_y % stride != 0) continue;
        int oy = num_y / stride;
        if (oy >= OH) continue;
        for (int kx = 0; kx < KW; ++kx) {
          int num_x = ix + pad - kx;
          if (num_x < 0 || num_x % stride != 0) continue;
          int ox = num_x / stride;
          if (ox >= OW) continue;
          acc += dyc[static_cast<int64_t>(oy) * OW + ox] * wc[static_cast<int64_t>(ky) * KW + kx];
        }
      }
    }
    dx[ix] = acc;
  }
}

/// Weight gradient for one (oc, c) kernel slice, accumulated in place.
template <class T>
void conv2d_w_slice(const T* x, const T* dy, T* dw, int N, int C, int H, int W, int OC, int KH,
                    int KW, int OH, int OW, int stride, int pad, int oc, int c) {
  for (int ky = 0; ky < KH; ++ky) {
    for (int kx = 0; kx < KW; ++kx) {
      T acc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* dyc = dy + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
        const T* xc = x + (static_cast<int64_t>(n) * C + c) * H * W;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            acc += dyc[static_cast<int64_t>(oy) * OW + ox] * xc[static_cast<int64_t>(iy) * W + ix];
          }
        }
      }
      dw[static_cast<int64_t>(ky) * KW + kx] += acc;
    }
  }
}

/// One linear output row y[r, :].
template <class T>
void linear_row(const T* x, const T* w, const T* b, T* y, int I, int O, int r) {
  const T* xr = x + static_cast<int64_t>(r) * I;
  for (int o = 0; o < O; ++o) {
    const T* wo = w + static_cast<int64_t>(o) * I;
    T acc = b ? b[o] : T(0);
    for (int i = 0; i < I; ++i) acc += xr[i] * wo[i];
    y[static_cast<int64_t>(r) * O + o] = acc;
  }
}

template <class T>
void linear_in_row(const T* dy, const T* w, T* dx, int I, int O, int r) {
  const T* dyr = dy + static_cast<int64_t>(r) * O;
  T* dxr = dx + static_cast<int64_t>(r) * I;
  for (int i = 0; i < I; ++i) {
    T acc = T(0);
    for (int o = 0; o < O; ++o) acc += dyr[o] * w[static_cast<int64_t>(o) * I + i];
    dxr[i] = acc;
  }
}

/// Weight/bias gradient rows for one output feature o, accumulated.
template <class T>
void linear_w_row(const T* x, const T* dy, T* dw, T* db, int R, int I, int O, int o) {
  T* dwo = dw + static_cast<int64_t>(o) * I;
  T bacc = T(0);
  for (int r = 0; r < R; ++r) {
    T g = dy[static_cast<int64_t>(r) * O + o];
    bacc += g;
    const T* xr = x + static_cast<int64_t>(r) * I;
    for (int i = 0; i < I; ++i) dwo[i] += g * xr[i];
  }
  if (db) db[o] += bacc;
}

/// Scaled dot-product attention for one query row (b, h, i): fills the
/// softmax row A[b,h,i,:] and the output row y[b,h,i,:].
template <class T>
void attention_row(const T* q, const T* k, const T* v, T* a, T* y, int N, int D, int64_t bh,
                   int i) {
  const T scale = T(1) / std::sqrt(static_cast<T>(D));
  const T* qi = q + (bh * N + i) * D;
  const T* kb = k + bh * N * D;
  const T* vb = v + bh * N * D;
  T* arow = a + (bh * N + i) * N;
  T* yrow = y + (bh * N + i) * D;
  T mx = -std::numeric_limits<T>::infinity();
  for (int j = 0; j < N; ++j) {
    T dot = T(0);
    const T* kj = kb + static_cast<int64_t>(j) * D;
    for (int d = 0; d < D; ++d) dot += qi[d] * kj[d];
    arow[j] = dot * scale;
    if (arow[j] > mx) mx = arow[j];
  }
  T sum = T(0);
  for (int j = 0; j < N; ++j) {
    arow[j] = std::exp(arow[j] - mx);
    sum += arow[j];
  }
  for (int j = 0; j < N; ++j) arow[j] /= sum;
  for (int d = 0; d < D; ++d) yrow[d] = T(0);
  for (int j = 0; j < N; ++j) {
    const T* vj = vb + static_cast<int64_t>(j) * D;
    T aij = arow[j];
    for (int d = 0; d < D; ++d) yrow[d] += aij * vj[d];
  }
}

/// Attention backward for one (b, h) slice.
template <class T>
void attention_bwd_slice(const T* dy, const T* q, const T* k, const T* v, const T* a, T* dq, T* dk,
                         T* dv, int N, int D, int64_t bh) {
  const T scale = T(1) / std::sqrt(static_cast<T>(D));
  const T* qb = q + bh * N * D;
  const T* kb = k + bh * N * D;
  const T* vb = v + bh * N * D;
  const T* ab = a + bh * N * N;
  const T* dyb = dy + bh * N * D;
  T* dqb = dq + bh * N * D;
  T* dkb = dk + bh * N * D;
  T* dvb = dv + bh * N * D;

  // dV = A^T dY
  for (int j = 0; j < N; ++j) {
    for (int d = 0; d < D; ++d) {
      T acc = T(0);
      for (int i = 0; i < N; ++i) acc += ab[static_cast<int64_t>(i) * N + j] * dyb[static_cast<int64_t>(i) * D + d];
      dvb[static_cast<int64_t>(j) * D + d] = acc;
    }
  }
  // dS = A o (dA - rowsum(dA o A)), dA = dY V^T
  std::vector<T> ds(static_cast<size_t>(N) * N);
  for (int i = 0; i < N; ++i) {
    T inner = T(0);
    std::vector<T> da(static_cast<size_t>(N));
    for (int j = 0; j < N; ++j) {
      T acc = T(0);
      for (int d = 0; d < D; ++d) acc += dyb[static_cast<int64_t>(i) * D + d] * vb[static_cast<int64_t>(j) * D + d];
      da[static_cast<size_t>(j)] = acc;
      inner += acc * ab[static_cast<int64_t>(i) * N + j];
    }
    for (int j = 0; j < N; ++j) {
      ds[static_cast<size_t>(i) * N + j] =
          ab[static_cast<int64_t>(i) * N + j] * (da[static_cast<size_t>(j)] - inner);
    }
  }
  // dQ = dS K * scale, dK = dS^T Q * scale
  for (int i = 0; i < N; ++i) {
    for (int d = 0; d < D; ++d) {
      T acc = T(0);
      for (int j = 0; j < N; ++j) acc += ds[static_cast<size_t>(i) * N + j] * kb[static_cast<int64_t>(j) * D + d];
      dqb[static_cast<int64_t>(i) * D + d] = acc * scale;
    }
  }
  for (int j = 0; j < N; ++j) {
    for (int d = 0; d < D; ++d) {
      T acc = T(0);
      for (int i = 0; i < N; ++i) acc += ds[static_cast<size_t>(i) * N + j] * qb[static_cast<int64_t>(i) * D + d];
      dkb[static_cast<int64_t>(j) * D + d] = acc * scale;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Serial reference implementations.

namespace serial {

template <class T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                    int pad, Tensor<T>& y) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = y.dim(2), OW = y.dim(3);
  for (int n = 0; n < N; ++n) {
    for (int oc = 0; oc < OC; ++oc) {
      for (int oy = 0; oy < OH; ++oy) {
        T* yrow = y.data() + ((static_cast<int64_t>(n) * OC + oc) * OH + oy) * OW;
        detail::conv2d_out_row(x.data(), w.data(), b.numel() ? b.data() : nullptr, yrow, C, H, W,
                               OC, KH, KW, OW, stride, pad, n, oc, oy);
      }
    }
  }
}

template <class T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                           Tensor<T>& dx) {
  const int N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = dy.dim(2), OW = dy.dim(3);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int iy = 0; iy < H; ++iy) {
        T* dxrow = dx.data() + ((static_cast<int64_t>(n) * C + c) * H + iy) * W;
        detail::conv2d_in_row(dy.data(), w.data(), dxrow, C, H, W, OC, KH, KW, OH, OW, stride,
                              pad, n, c, iy);
      }
    }
  }
}

template <class T>
void conv2d_backward_params(const Tensor<T>& x, const Tensor<T>& dy, int stride, int pad,
                            Tensor<T>& dw, Tensor<T>& db) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = dw.dim(0), KH = dw.dim(2), KW = dw.dim(3);
  const int OH = dy.dim(2), OW = dy.dim(3);
  for (int oc = 0; oc < OC; ++oc) {
    for (int c = 0; c < C; ++c) {
      T* dwoc = dw.data() + (static_cast<int64_t>(oc) * C + c) * KH * KW;
      detail::conv2d_w_slice(x.data(), dy.data(), dwoc, N, C, H, W, OC, KH, KW, OH, OW, stride,
                             pad, oc, c);
    }
  }
  if (db.numel()) {
    for (int oc = 0; oc < OC; ++oc) {
      T acc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = dy.data() + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) acc += p[i];
      }
      db[oc] += acc;
    }
  }
}

template <class T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y) {
  const int R = x.dim(0), I = x.dim(1), O = w.dim(0);
  for (int r = 0; r < R; ++r) {
    detail::linear_row(x.data(), w.data(), b.numel() ? b.data() : nullptr, y.data(), I, O, r);
  }
}

template <class T>
void linear_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx) {
  const int R = dx.dim(0), I = dx.dim(1), O = w.dim(0);
  for (int r = 0; r < R; ++r) detail::linear_in_row(dy.data(), w.data(), dx.data(), I, O, r);
}

template <class T>
void linear_backward_params(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db) {
  const int R = x.dim(0), I = x.dim(1), O = dw.dim(0);
  for (int o = 0; o < O; ++o) {
    detail::linear_w_row(x.data(), dy.data(), dw.data(), db.numel() ? db.data() : nullptr, R, I, O,
                         o);
  }
}

/// Q, K, V are [B, H, N, D]; fills y (same shape) and the softmax rows a
/// [B, H, N, N].
template <class T>
void attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>& a,
                       Tensor<T>& y) {
  const int B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  for (int64_t bh = 0; bh < static_cast<int64_t>(B) * Hh; ++bh) {
    for (int i = 0; i < N; ++i) {
      detail::attention_row(q.data(), k.data(), v.data(), a.data(), y.data(), N, D, bh, i);
    }
  }
}

template <class T>
void attention_backward(const Tensor<T>& dy, const Tensor<T>& q, const Tensor<T>& k,
                        const Tensor<T>& v, const Tensor<T>& a, Tensor<T>& dq, Tensor<T>& dk,
                        Tensor<T>& dv) {
  const int B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  for (int64_t bh = 0; bh < static_cast<int64_t>(B) * Hh; ++bh) {
    detail::attention_bwd_slice(dy.data(), q.data(), k.data(), v.data(), a.data(), dq.data(),
                                dk.data(), dv.data(), N, D, bh);
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP implementations: same row helpers, distributed over threads.

namespace par {

template <class T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                    int pad, Tensor<T>& y) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = y.dim(2), OW = y.dim(3);
  const int64_t rows = static_cast<int64_t>(N) * OC * OH;
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int64_t r = 0; r < rows; ++r) {
    int oy = static_cast<int>(r % OH);
    int oc = static_cast<int>((r / OH) % OC);
    int n = static_cast<int>(r / (static_cast<int64_t>(OH) * OC));
    T* yrow = y.data() + r * OW;
    detail::conv2d_out_row(x.data(), w.data(), b.numel() ? b.data() : nullptr, yrow, C, H, W, OC,
                           KH, KW, OW, stride, pad, n, oc, oy);
  }
}

template <class T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                           Tensor<T>& dx) {
  const int N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = dy.dim(2), OW = dy.dim(3);
  const int64_t rows = static_cast<int64_t>(N) * C * H;
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int64_t r = 0; r < rows; ++r) {
    int iy = static_cast<int>(r % H);
    int c = static_cast<int>((r / H) % C);
    int n = static_cast<int>(r / (static_cast<int64_t>(H) * C));
    T* dxrow = dx.data() + r * W;
    detail::conv2d_in_row(dy.data(), w.data(), dxrow, C, H, W, OC, KH, KW, OH, OW, stride, pad, n,
                          c, iy);
  }
}

template <class T>
void conv2d_backward_params(const Tensor<T>& x, const Tensor<T>& dy, int stride, int pad,
                            Tensor<T>& dw, Tensor<T>& db) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = dw.dim(0), KH = dw.dim(2), KW = dw.dim(3);
  const int OH = dy.dim(2), OW = dy.dim(3);
  const int64_t slices = static_cast<int64_t>(OC) * C;
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int64_t s = 0; s < slices; ++s) {
    int c = static_cast<int>(s % C);
    int oc = static_cast<int>(s / C);
    T* dwoc = dw.data() + s * KH * KW;
    detail::conv2d_w_slice(x.data(), dy.data(), dwoc, N, C, H, W, OC, KH, KW, OH, OW, stride, pad,
                           oc, c);
  }
  if (db.numel()) {
#pragma omp parallel for schedule(static) num_threads(max_threads())
    for (int oc = 0; oc < OC; ++oc) {
      T acc = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = dy.data() + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) acc += p[i];
      }
      db[oc] += acc;
    }
  }
}

template <class T>
void linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& y) {
  const int R = x.dim(0), I = x.dim(1), O = w.dim(0);
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int r = 0; r < R; ++r) {
    detail::linear_row(x.data(), w.data(), b.numel() ? b.data() : nullptr, y.data(), I, O, r);
  }
}

template <class T>
void linear_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx) {
  const int R = dx.dim(0), I = dx.dim(1), O = w.dim(0);
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int r = 0; r < R; ++r) detail::linear_in_row(dy.data(), w.data(), dx.data(), I, O, r);
}

template <class T>
void linear_backward_params(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db) {
  const int R = x.dim(0), I = x.dim(1), O = dw.dim(0);
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int o = 0; o < O; ++o) {
    detail::linear_w_row(x.data(), dy.data(), dw.data(), db.numel() ? db.data() : nullptr, R, I, O,
                         o);
  }
}

template <class T>
void attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>& a,
                       Tensor<T>& y) {
  const int B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  const int64_t rows = static_cast<int64_t>(B) * Hh * N;
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int64_t r = 0; r < rows; ++r) {
    int64_t bh = r / N;
    int i = static_cast<int>(r % N);
    detail::attention_row(q.data(), k.data(), v.data(), a.data(), y.data(), N, D, bh, i);
  }
}

template <class T>
void attention_backward(const Tensor<T>& dy, const Tensor<T>& q, const Tensor<T>& k,
                        const Tensor<T>& v, const Tensor<T>& a, Tensor<T>& dq, Tensor<T>& dk,
                        Tensor<T>& dv) {
  const int B = q.dim(0), Hh = q.dim(1), N = q.dim(2), D = q.dim(3);
  const int64_t slices = static_cast<int64_t>(B) * Hh;
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (int64_t bh = 0; bh < slices; ++bh) {
    detail::attention_bwd_slice(dy.data(), q.data(), k.data(), v.data(), a.data(), dq.data(),
                                dk.data(), dv.data(), N, D, bh);
  }
}

}  // namespace par

// ---------------------------------------------------------------------------
// Dispatching wrappers.

inline bool use_parallel() { return max_threads() > 1 && !in_parallel_region(); }

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                         int pad) {
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) + " != kernel channels " +
                     std::to_string(w.dim(1)));
  }
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<T> y({N, OC, OH, OW});
  if (use_parallel()) {
    par::conv2d_forward(x, w, b, stride, pad, y);
  } else {
    serial::conv2d_forward(x, w, b, stride, pad, y);
  }
  return y;
}

template <class T>
Tensor<T> conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w,
                                const std::vector<int>& x_shape, int stride, int pad) {
  Tensor<T> dx(x_shape);
  if (use_parallel()) {
    par::conv2d_backward_input(dy, w, stride, pad, dx);
  } else {
    serial::conv2d_backward_input(dy, w, stride, pad, dx);
  }
  return dx;
}

template <class T>
void conv2d_backward_params(const Tensor<T>& x, const Tensor<T>& dy, int stride, int pad,
                            Tensor<T>& dw, Tensor<T>& db) {
  if (use_parallel()) {
    par::conv2d_backward_params(x, dy, stride, pad, dw, db);
  } else {
    serial::conv2d_backward_params(x, dy, stride, pad, dw, db);
  }
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.dim(1) != w.dim(1)) throw ShapeError("linear: feature dim mismatch");
  Tensor<T> y({x.dim(0), w.dim(0)});
  if (use_parallel()) {
    par::linear_forward(x, w, b, y);
  } else {
    serial::linear_forward(x, w, b, y);
  }
  return y;
}

template <class T>
Tensor<T> linear_backward_input(const Tensor<T>& dy, const Tensor<T>& w, int rows) {
  Tensor<T> dx({rows, w.dim(1)});
  if (use_parallel()) {
    par::linear_backward_input(dy, w, dx);
  } else {
    serial::linear_backward_input(dy, w, dx);
  }
  return dx;
}

template <class T>
void linear_backward_params(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db) {
  if (use_parallel()) {
    par::linear_backward_params(x, dy, dw, db);
  } else {
    serial::linear_backward_params(x, dy, dw, db);
  }
}

template <class T>
void attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>& a,
                       Tensor<T>& y) {
  if (use_parallel()) {
    par::attention_forward(q, k, v, a, y);
  } else {
    serial::attention_forward(q, k, v, a, y);
  }
}

template <class T>
void attention_backward(const Tensor<T>& dy, const Tensor<T>& q, const Tensor<T>& k,
                        const Tensor<T>& v, const Tensor<T>& a, Tensor<T>& dq, Tensor<T>& dk,
                        Tensor<T>& dv) {
  if (use_parallel()) {
    par::attention_backward(dy, q, k, v, a, dq, dk, dv);
  } else {
    serial::attention_backward(dy, q, k, v, a, dq, dk, dv);
  }
}

// ---------------------------------------------------------------------------
// Normalization, activations and resampling. These are bandwidth bound at the
// sizes this project runs, so a single implementation serves both paths.

/// GroupNorm over [N, C, H, W]; saves per-(n, group) mean and rstd for the
/// backward pass. Statistics accumulate in double.
template <class T>
void groupnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       int groups, Tensor<T>& y, Tensor<T>& mean, Tensor<T>& rstd) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int cpg = C / groups;
  const double eps = 1e-5;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      double sum = 0.0, sumsq = 0.0;
      const int64_t count = static_cast<int64_t>(cpg) * HW;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* p = x.data() + (static_cast<int64_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          sum += static_cast<double>(p[i]);
          sumsq += static_cast<double>(p[i]) * p[i];
        }
      }
      double m = sum / static_cast<double>(count);
      double var = sumsq / static_cast<double>(count) - m * m;
      double rs = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
      mean[static_cast<int64_t>(n) * groups + g] = static_cast<T>(m);
      rstd[static_cast<int64_t>(n) * groups + g] = static_cast<T>(rs);
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* p = x.data() + (static_cast<int64_t>(n) * C + c) * HW;
        T* q = y.data() + (static_cast<int64_t>(n) * C + c) * HW;
        T ga = gamma[c], be = beta[c];
        for (int i = 0; i < HW; ++i) {
          q[i] = static_cast<T>((static_cast<double>(p[i]) - m) * rs) * ga + be;
        }
      }
    }
  }
}

template <class T>
void groupnorm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& mean, const Tensor<T>& rstd, int groups, Tensor<T>& dx,
                        Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const int cpg = C / groups;
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const double m = mean[static_cast<int64_t>(n) * groups + g];
      const double rs = rstd[static_cast<int64_t>(n) * groups + g];
      const int64_t count = static_cast<int64_t>(cpg) * HW;
      // First pass: dgamma/dbeta and the two group reductions.
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* xp = x.data() + (static_cast<int64_t>(n) * C + c) * HW;
        const T* dyp = dy.data() + (static_cast<int64_t>(n) * C + c) * HW;
        double dg = 0.0, db = 0.0;
        for (int i = 0; i < HW; ++i) {
          double xh = (static_cast<double>(xp[i]) - m) * rs;
          double dxh = static_cast<double>(dyp[i]) * gamma[c];
          dg += static_cast<double>(dyp[i]) * xh;
          db += dyp[i];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        dgamma[c] += static_cast<T>(dg);
        dbeta[c] += static_cast<T>(db);
      }
      double m1 = sum_dxh / static_cast<double>(count);
      double m2 = sum_dxh_xh / static_cast<double>(count);
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* xp = x.data() + (static_cast<int64_t>(n) * C + c) * HW;
        const T* dyp = dy.data() + (static_cast<int64_t>(n) * C + c) * HW;
        T* dxp = dx.data() + (static_cast<int64_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          double xh = (static_cast<double>(xp[i]) - m) * rs;
          double dxh = static_cast<double>(dyp[i]) * gamma[c];
          dxp[i] = static_cast<T>(rs * (dxh - m1 - xh * m2));
        }
      }
    }
  }
}

/// LayerNorm over the last axis of [R, C].
template <class T>
void layernorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& y, Tensor<T>& mean, Tensor<T>& rstd) {
  const int R = x.dim(0), C = x.dim(1);
  const double eps = 1e-5;
  for (int r = 0; r < R; ++r) {
    const T* p = x.data() + static_cast<int64_t>(r) * C;
    double sum = 0.0, sumsq = 0.0;
    for (int c = 0; c < C; ++c) {
      sum += static_cast<double>(p[c]);
      sumsq += static_cast<double>(p[c]) * p[c];
    }
    double m = sum / C;
    double var = sumsq / C - m * m;
    double rs = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
    mean[r] = static_cast<T>(m);
    rstd[r] = static_cast<T>(rs);
    T* q = y.data() + static_cast<int64_t>(r) * C;
    for (int c = 0; c < C; ++c) {
      q[c] = static_cast<T>((static_cast<double>(p[c]) - m) * rs) * gamma[c] + beta[c];
    }
  }
}

template <class T>
void layernorm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& mean, const Tensor<T>& rstd, Tensor<T>& dx,
                        Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const int R = x.dim(0), C = x.dim(1);
  for (int r = 0; r < R; ++r) {
    const T* xp = x.data() + static_cast<int64_t>(r) * C;
    const T* dyp = dy.data() + static_cast<int64_t>(r) * C;
    T* dxp = dx.data() + static_cast<int64_t>(r) * C;
    const double m = mean[r], rs = rstd[r];
    double m1 = 0.0, m2 = 0.0;
    for (int c = 0; c < C; ++c) {
      double xh = (static_cast<double>(xp[c]) - m) * rs;
      double dxh = static_cast<double>(dyp[c]) * gamma[c];
      dgamma[c] += static_cast<T>(static_cast<double>(dyp[c]) * xh);
      dbeta[c] += dyp[c];
      m1 += dxh;
      m2 += dxh * xh;
    }
    m1 /= C;
    m2 /= C;
    for (int c = 0; c < C; ++c) {
      double xh = (static_cast<double>(xp[c]) - m) * rs;
      double dxh = static_cast<double>(dyp[c]) * gamma[c];
      dxp[c] = static_cast<T>(rs * (dxh - m1 - xh * m2));
    }
  }
}

template <class T>
T silu(T x) {
  T s = T(1) / (T(1) + std::exp(-x));
  return x * s;
}

template <class T>
T silu_grad(T x) {
  T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <class T>
T gelu_grad(T x) {
  T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  T pdf = std::exp(-x * x / T(2)) / std::sqrt(T(2) * T(kPi));
  return cdf + x * pdf;
}

template <class T>
T leaky_relu(T x, T slope) {
  return x > T(0) ? x : slope * x;
}

template <class T>
T leaky_relu_grad(T x, T slope) {
  return x > T(0) ? T(1) : slope;
}

/// Nearest-neighbour upsampling to an explicit target size; source index is
/// floor(i * H / OH), which inverts the stride-2 convolutions for both even
/// and odd sizes.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int oh, int ow) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> y({N, C, oh, ow});
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const T* xp = x.data() + nc * H * W;
    T* yp = y.data() + nc * static_cast<int64_t>(oh) * ow;
    for (int i = 0; i < oh; ++i) {
      int si = i * H / oh;
      for (int j = 0; j < ow; ++j) {
        int sj = j * W / ow;
        yp[static_cast<int64_t>(i) * ow + j] = xp[static_cast<int64_t>(si) * W + sj];
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int h, int w) {
  const int N = dy.dim(0), C = dy.dim(1), OH = dy.dim(2), OW = dy.dim(3);
  Tensor<T> dx({N, C, h, w});
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const T* dyp = dy.data() + nc * static_cast<int64_t>(OH) * OW;
    T* dxp = dx.data() + nc * static_cast<int64_t>(h) * w;
    for (int i = 0; i < OH; ++i) {
      int si = i * h / OH;
      for (int j = 0; j < OW; ++j) {
        int sj = j * w / OW;
        dxp[static_cast<int64_t>(si) * w + sj] += dyp[static_cast<int64_t>(i) * OW + j];
      }
    }
  }
  return dx;
}

}  // namespace ensldm::nn
