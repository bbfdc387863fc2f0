// Times the serial reference kernels against their OpenMP counterparts and
// checks that both produce bitwise-identical results (the parallel variants
// partition output slices, so any divergence is a bug).

#include <chrono>
#include <cstdio>
#include <string>

#include "ensldm/nn/kernels.hpp"
#include "ensldm/rng.hpp"
#include "ensldm/threads.hpp"

using namespace ensldm;
using namespace ensldm::nn;

namespace {

Tensor<float> random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.gaussian());
  return t;
}

double time_ms(const std::function<void()>& fn, int iters) {
  fn();  // warm up
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (!a.same_shape(b)) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

void report(const std::string& name, double serial_ms, double par_ms, bool identical) {
  std::printf("%-24s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   bitwise %s\n", name.c_str(),
              serial_ms, par_ms, serial_ms / par_ms, identical ? "OK" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  int iters = 20;
  bool quick = false;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--quick") quick = true;
    if (a == "--iters" && i + 1 < argc) iters = std::atoi(argv[++i]);
  }
  if (quick) iters = 3;

  std::printf("threads: %d\n", max_threads());
  Rng rng(7);

  // Convolution at VAE working size.
  {
    const int C = 16, H = quick ? 24 : 48, W = quick ? 48 : 96, OC = 16, K = 3;
    Tensor<float> x = random_tensor({4, C, H, W}, rng);
    Tensor<float> w = random_tensor({OC, C, K, K}, rng);
    Tensor<float> b = random_tensor({OC}, rng);
    const int OH = H, OW = W;
    Tensor<float> ys({4, OC, OH, OW}), yp({4, OC, OH, OW});
    double ts = time_ms([&] { serial::conv2d_forward(x, w, b, 1, 1, ys); }, iters);
    double tp = time_ms([&] { par::conv2d_forward(x, w, b, 1, 1, yp); }, iters);
    report("conv2d_forward", ts, tp, bitwise_equal(ys, yp));

    Tensor<float> dxs(x.shape), dxp(x.shape);
    double ts2 = time_ms([&] { serial::conv2d_backward_input(ys, w, 1, 1, dxs); }, iters);
    double tp2 = time_ms([&] { par::conv2d_backward_input(ys, w, 1, 1, dxp); }, iters);
    report("conv2d_backward_input", ts2, tp2, bitwise_equal(dxs, dxp));

    Tensor<float> dws(w.shape), dbs({OC}), dwp(w.shape), dbp({OC});
    double ts3 = time_ms(
        [&] {
          dws.fill(0);
          dbs.fill(0);
          serial::conv2d_backward_params(x, ys, 1, 1, dws, dbs);
        },
        iters);
    double tp3 = time_ms(
        [&] {
          dwp.fill(0);
          dbp.fill(0);
          par::conv2d_backward_params(x, ys, 1, 1, dwp, dbp);
        },
        iters);
    report("conv2d_backward_params", ts3, tp3, bitwise_equal(dws, dwp) && bitwise_equal(dbs, dbp));
  }

  // Linear at attention-projection size.
  {
    const int R = quick ? 512 : 2048, I = 128, O = 128;
    Tensor<float> x = random_tensor({R, I}, rng);
    Tensor<float> w = random_tensor({O, I}, rng);
    Tensor<float> b = random_tensor({O}, rng);
    Tensor<float> ys({R, O}), yp({R, O});
    double ts = time_ms([&] { serial::linear_forward(x, w, b, ys); }, iters);
    double tp = time_ms([&] { par::linear_forward(x, w, b, yp); }, iters);
    report("linear_forward", ts, tp, bitwise_equal(ys, yp));
  }

  // Attention at transformer working size.
  {
    const int B = quick ? 36 : 72, Hh = 4, N = 24, D = 16;
    Tensor<float> q = random_tensor({B, Hh, N, D}, rng);
    Tensor<float> k = random_tensor({B, Hh, N, D}, rng);
    Tensor<float> v = random_tensor({B, Hh, N, D}, rng);
    Tensor<float> as({B, Hh, N, N}), ap({B, Hh, N, N});
    Tensor<float> ys({B, Hh, N, D}), yp({B, Hh, N, D});
    double ts = time_ms([&] { serial::attention_forward(q, k, v, as, ys); }, iters);
    double tp = time_ms([&] { par::attention_forward(q, k, v, ap, yp); }, iters);
    report("attention_forward", ts, tp, bitwise_equal(ys, yp) && bitwise_equal(as, ap));

    Tensor<float> dy = random_tensor({B, Hh, N, D}, rng);
    Tensor<float> dqs(q.shape), dks(k.shape), dvs(v.shape);
    Tensor<float> dqp(q.shape), dkp(k.shape), dvp(v.shape);
    double ts2 =
        time_ms([&] { serial::attention_backward(dy, q, k, v, as, dqs, dks, dvs); }, iters);
    double tp2 = time_ms([&] { par::attention_backward(dy, q, k, v, as, dqp, dkp, dvp); }, iters);
    report("attention_backward", ts2, tp2,
           bitwise_equal(dqs, dqp) && bitwise_equal(dks, dkp) && bitwise_equal(dvs, dvp));
  }

  return 0;
}
