#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ensldm/nn/kernels.hpp"
#include "ensldm/threads.hpp"
#include "testutil.hpp"

using namespace ensldm;
using namespace ensldm::nn;
using testutil::bitwise_equal;
using testutil::random_tensor;

namespace {

/// Independent direct convolution, loops ordered differently from the
/// implementation.
template <class T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                       int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<T> y({N, OC, OH, OW});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int ky = 0; ky < KH; ++ky) {
        for (int kx = 0; kx < KW; ++kx) {
          for (int oc = 0; oc < OC; ++oc) {
            T wv = w.data()[((static_cast<int64_t>(oc) * C + c) * KH + ky) * KW + kx];
            for (int oy = 0; oy < OH; ++oy) {
              int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int ox = 0; ox < OW; ++ox) {
                int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                y.data()[((static_cast<int64_t>(n) * OC + oc) * OH + oy) * OW + ox] +=
                    wv * x.data()[((static_cast<int64_t>(n) * C + c) * H + iy) * W + ix];
              }
            }
          }
        }
      }
    }
  }
  if (b.numel()) {
    for (int n = 0; n < N; ++n) {
      for (int oc = 0; oc < OC; ++oc) {
        for (int i = 0; i < OH * OW; ++i) {
          y.data()[(static_cast<int64_t>(n) * OC + oc) * OH * OW + i] += b[oc];
        }
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("conv2d forward matches a naive double-precision oracle") {
  Rng rng(1);
  for (auto [stride, H, W] : {std::tuple{1, 6, 12}, std::tuple{2, 6, 12}, std::tuple{2, 3, 5}}) {
    Tensor<double> x = random_tensor<double>({2, 3, H, W}, rng);
    Tensor<double> w = random_tensor<double>({4, 3, 3, 3}, rng);
    Tensor<double> b = random_tensor<double>({4}, rng);
    Tensor<double> got = conv2d_forward(x, w, b, stride, 1);
    Tensor<double> want = conv2d_naive(x, w, b, stride, 1);
    CHECK(testutil::max_abs_diff(got, want) <= 1e-12);
  }
}

TEST_CASE("serial and parallel kernels agree bitwise") {
  set_max_threads(2);
  Rng rng(2);

  SUBCASE("conv2d forward/backward") {
    for (int stride : {1, 2}) {
      Tensor<float> x = random_tensor<float>({3, 5, 7, 9}, rng);
      Tensor<float> w = random_tensor<float>({6, 5, 3, 3}, rng);
      Tensor<float> b = random_tensor<float>({6}, rng);
      const int OH = (7 + 2 - 3) / stride + 1, OW = (9 + 2 - 3) / stride + 1;
      Tensor<float> ys({3, 6, OH, OW}), yp(ys.shape);
      serial::conv2d_forward(x, w, b, stride, 1, ys);
      par::conv2d_forward(x, w, b, stride, 1, yp);
      CHECK(bitwise_equal(ys, yp));

      Tensor<float> dxs(x.shape), dxp(x.shape);
      serial::conv2d_backward_input(ys, w, stride, 1, dxs);
      par::conv2d_backward_input(ys, w, stride, 1, dxp);
      CHECK(bitwise_equal(dxs, dxp));

      Tensor<float> dws(w.shape), dbs({6}), dwp(w.shape), dbp({6});
      serial::conv2d_backward_params(x, ys, stride, 1, dws, dbs);
      par::conv2d_backward_params(x, ys, stride, 1, dwp, dbp);
      CHECK(bitwise_equal(dws, dwp));
      CHECK(bitwise_equal(dbs, dbp));
    }
  }

  SUBCASE("linear") {
    Tensor<float> x = random_tensor<float>({17, 13}, rng);
    Tensor<float> w = random_tensor<float>({11, 13}, rng);
    Tensor<float> b = random_tensor<float>({11}, rng);
    Tensor<float> ys({17, 11}), yp({17, 11});
    serial::linear_forward(x, w, b, ys);
    par::linear_forward(x, w, b, yp);
    CHECK(bitwise_equal(ys, yp));

    Tensor<float> dxs({17, 13}), dxp({17, 13});
    serial::linear_backward_input(ys, w, dxs);
    par::linear_backward_input(ys, w, dxp);
    CHECK(bitwise_equal(dxs, dxp));

    Tensor<float> dws(w.shape), dbs({11}), dwp(w.shape), dbp({11});
    serial::linear_backward_params(x, ys, dws, dbs);
    par::linear_backward_params(x, ys, dwp, dbp);
    CHECK(bitwise_equal(dws, dwp));
    CHECK(bitwise_equal(dbs, dbp));
  }

  SUBCASE("attention") {
    Tensor<float> q = random_tensor<float>({2, 3, 5, 4}, rng);
    Tensor<float> k = random_tensor<float>({2, 3, 5, 4}, rng);
    Tensor<float> v = random_tensor<float>({2, 3, 5, 4}, rng);
    Tensor<float> as({2, 3, 5, 5}), ap(as.shape), ys(q.shape), yp(q.shape);
    serial::attention_forward(q, k, v, as, ys);
    par::attention_forward(q, k, v, ap, yp);
    CHECK(bitwise_equal(ys, yp));
    CHECK(bitwise_equal(as, ap));

    Tensor<float> dy = random_tensor<float>(q.shape, rng);
    Tensor<float> dqs(q.shape), dks(q.shape), dvs(q.shape);
    Tensor<float> dqp(q.shape), dkp(q.shape), dvp(q.shape);
    serial::attention_backward(dy, q, k, v, as, dqs, dks, dvs);
    par::attention_backward(dy, q, k, v, ap, dqp, dkp, dvp);
    CHECK(bitwise_equal(dqs, dqp));
    CHECK(bitwise_equal(dks, dkp));
    CHECK(bitwise_equal(dvs, dvp));
  }
}

TEST_CASE("attention with zero scores averages the value rows") {
  Rng rng(3);
  const int N = 6, D = 4;
  Tensor<float> q({1, 1, N, D});  // zero
  Tensor<float> k = random_tensor<float>({1, 1, N, D}, rng);
  Tensor<float> v = random_tensor<float>({1, 1, N, D}, rng);
  Tensor<float> a({1, 1, N, N}), y({1, 1, N, D});
  serial::attention_forward(q, k, v, a, y);
  for (int i = 0; i < N; ++i) {
    for (int d = 0; d < D; ++d) {
      double mean = 0.0;
      for (int j = 0; j < N; ++j) mean += v.data()[static_cast<int64_t>(j) * D + d];
      mean /= N;
      CHECK(static_cast<double>(y.data()[static_cast<int64_t>(i) * D + d]) ==
            doctest::Approx(mean).epsilon(1e-5));
    }
  }
}

TEST_CASE("single-token attention returns the value row") {
  Rng rng(4);
  Tensor<float> q = random_tensor<float>({1, 2, 1, 8}, rng);
  Tensor<float> k = random_tensor<float>({1, 2, 1, 8}, rng);
  Tensor<float> v = random_tensor<float>({1, 2, 1, 8}, rng);
  Tensor<float> a({1, 2, 1, 1}), y({1, 2, 1, 8});
  serial::attention_forward(q, k, v, a, y);
  CHECK(bitwise_equal(y, v));
}

TEST_CASE("attention matches a brute-force double-precision softmax oracle") {
  Rng rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const int N = 4, D = 3;
    Tensor<float> q = random_tensor<float>({1, 1, N, D}, rng);
    Tensor<float> k = random_tensor<float>({1, 1, N, D}, rng);
    Tensor<float> v = random_tensor<float>({1, 1, N, D}, rng);
    Tensor<float> a({1, 1, N, N}), y({1, 1, N, D});
    serial::attention_forward(q, k, v, a, y);
    // Oracle: plain softmax in double without max subtraction.
    for (int i = 0; i < N; ++i) {
      double ps[N], sum = 0.0;
      for (int j = 0; j < N; ++j) {
        double dot = 0.0;
        for (int d = 0; d < D; ++d) {
          dot += static_cast<double>(q.data()[i * D + d]) * k.data()[j * D + d];
        }
        ps[j] = std::exp(dot / std::sqrt(static_cast<double>(D)));
        sum += ps[j];
      }
      for (int d = 0; d < D; ++d) {
        double want = 0.0;
        for (int j = 0; j < N; ++j) want += ps[j] / sum * v.data()[j * D + d];
        double got = y.data()[i * D + d];
        CHECK(testutil::rel_err(got, want) <= 1e-5);
      }
    }
  }
}

TEST_CASE("upsample backward is the adjoint of upsample") {
  Rng rng(6);
  for (auto [h, w, oh, ow] : {std::tuple{3, 5, 6, 10}, std::tuple{2, 3, 3, 6}}) {
    Tensor<double> x = random_tensor<double>({1, 2, h, w}, rng);
    Tensor<double> y = random_tensor<double>({1, 2, oh, ow}, rng);
    Tensor<double> ux = upsample_nearest(x, oh, ow);
    Tensor<double> uty = upsample_nearest_backward(y, h, w);
    double lhs = 0.0, rhs = 0.0;
    for (int64_t i = 0; i < ux.numel(); ++i) lhs += ux[i] * y[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * uty[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("groupnorm normalizes per group") {
  Rng rng(7);
  Tensor<double> x = random_tensor<double>({2, 8, 4, 4}, rng, 3.0);
  Tensor<double> gamma({8}), beta({8});
  gamma.fill(1.0);
  Tensor<double> y(x.shape), mean({2, 4}), rstd({2, 4});
  groupnorm_forward(x, gamma, beta, 4, y, mean, rstd);
  for (int n = 0; n < 2; ++n) {
    for (int g = 0; g < 4; ++g) {
      double s = 0.0, ss = 0.0;
      int count = 0;
      for (int c = g * 2; c < (g + 1) * 2; ++c) {
        for (int i = 0; i < 16; ++i) {
          double val = y.data()[(static_cast<int64_t>(n) * 8 + c) * 16 + i];
          s += val;
          ss += val * val;
          ++count;
        }
      }
      double m = s / count;
      double var = ss / count - m * m;
      CHECK(std::abs(m) <= 1e-10);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
}

TEST_CASE("activation gradients match finite differences") {
  for (double x : {-2.0, -0.5, 0.0, 0.5, 2.0}) {
    const double h = 1e-6;
    CHECK(silu_grad(x) == doctest::Approx((silu(x + h) - silu(x - h)) / (2 * h)).epsilon(1e-5));
    CHECK(gelu_grad(x) == doctest::Approx((gelu(x + h) - gelu(x - h)) / (2 * h)).epsilon(1e-5));
  }
}
