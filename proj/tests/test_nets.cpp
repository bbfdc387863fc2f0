#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ensldm/nets.hpp"
#include "ensldm/threads.hpp"
#include "testutil.hpp"

using namespace ensldm;
using testutil::bitwise_equal;
using testutil::random_tensor;

namespace {

UNetConfig tiny_ar_cfg() {
  UNetConfig cfg;
  cfg.mode = "ar";
  cfg.in_chans = 8;  // c=2, window=2: c*(n+2)
  cfg.out_chans = 2;
  cfg.base_width = 8;
  cfg.width_mult = {1, 2};
  cfg.window = 2;
  cfg.emb_sin = 8;
  cfg.emb_width = 16;
  return cfg;
}

UNetConfig tiny_tx_cfg(int seq_len = 8) {
  UNetConfig cfg;
  cfg.mode = "transformer";
  cfg.in_chans = 4;  // 2c
  cfg.out_chans = 2;
  cfg.base_width = 8;
  cfg.width_mult = {1, 2};
  cfg.seq_len = seq_len;
  cfg.emb_sin = 8;
  cfg.emb_width = 16;
  return cfg;
}

template <class T>
void randomize_params(nn::ParamStore<T>& ps, Rng& rng, double scale = 0.25) {
  for (auto& e : ps.entries) {
    for (int64_t i = 0; i < e.w.numel(); ++i) e.w[i] = static_cast<T>(scale * rng.gaussian());
  }
}

}  // namespace

TEST_CASE("cascade plan") {
  SUBCASE("depth 1 attends over the full sequence") {
    CascadePlan p = cascade_plan(24, 1);
    REQUIRE(p.patch.size() == 1);
    CHECK(p.patch[0] == 24);
    CHECK(p.heads[0] == 2);
  }
  SUBCASE("seq_len 16 depth 3 gives 4, 8, 16") {
    CascadePlan p = cascade_plan(16, 3);
    CHECK(p.patch == std::vector<int>{4, 8, 16});
  }
  SUBCASE("bottleneck patch always spans the sequence") {
    for (int depth = 1; depth <= 3; ++depth) {
      CascadePlan p = cascade_plan(24, depth);
      CHECK(p.patch.back() == 24);
      for (size_t l = 1; l < p.patch.size(); ++l) CHECK(p.patch[l] >= p.patch[l - 1]);
    }
  }
  SUBCASE("head counts are non-decreasing for depths 1..5") {
    for (int depth = 1; depth <= 5; ++depth) {
      CascadePlan p = cascade_plan(16 * (1 << (depth - 1)), depth);
      for (size_t l = 1; l < p.heads.size(); ++l) CHECK(p.heads[l] >= p.heads[l - 1]);
      CHECK(p.heads.back() <= 8);
    }
  }
  SUBCASE("misaligned seq_len is a config error") {
    CHECK_THROWS_AS(cascade_plan(18, 3), ConfigError);
    CHECK_THROWS_AS(cascade_plan(20, 3), ConfigError);  // 8 does not divide 20
  }
}

TEST_CASE("pack_time_channels") {
  Rng rng(1);
  SUBCASE("n=1 is the identity") {
    Tensor<float> f = random_tensor<float>({1, 4, 3, 5}, rng);
    Tensor<float> packed = pack_time_channels(std::vector<Tensor<float>>{f});
    CHECK(bitwise_equal(packed, f));
  }
  SUBCASE("n=3, c=4 packs to 12 channels and unpacks bitwise") {
    std::vector<Tensor<float>> frames;
    for (int i = 0; i < 3; ++i) frames.push_back(random_tensor<float>({1, 4, 3, 5}, rng));
    Tensor<float> packed = pack_time_channels(frames);
    CHECK(packed.dim(1) == 12);
    auto back = unpack_time_channels(packed, 3);
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(bitwise_equal(back[static_cast<size_t>(i)], frames[static_cast<size_t>(i)]));
  }
  SUBCASE("time order maps to channel-block order") {
    std::vector<Tensor<float>> frames;
    for (int i = 0; i < 3; ++i) {
      Tensor<float> f({1, 2, 2, 2});
      f.fill(static_cast<float>(i + 1));
      frames.push_back(f);
    }
    Tensor<float> packed = pack_time_channels(frames);
    for (int ch = 0; ch < 6; ++ch) {
      float want = static_cast<float>(ch / 2 + 1);
      for (int i = 0; i < 4; ++i) CHECK(packed.data()[ch * 4 + i] == want);
    }
  }
}

TEST_CASE("zero-initialized head makes the denoiser output zero") {
  Rng rng(2);
  SUBCASE("ar") {
    UNet<float> net(tiny_ar_cfg(), rng);
    Tensor<float> x = random_tensor<float>({1, 8, 4, 8}, rng);
    Tensor<float> y = net.forward(x, 5, nullptr);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0f);
  }
  SUBCASE("transformer") {
    UNet<float> net(tiny_tx_cfg(), rng);
    Tensor<float> x = random_tensor<float>({8, 4, 4, 8}, rng);
    Tensor<float> y = net.forward(x, 5, nullptr);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0f);
  }
}

TEST_CASE("denoiser output has the target latent shape on a 4x8 latent grid") {
  Rng rng(3);
  SUBCASE("ar") {
    UNet<float> net(tiny_ar_cfg(), rng);
    randomize_params(net.params(), rng);
    Tensor<float> x = random_tensor<float>({1, 8, 4, 8}, rng);
    Tensor<float> y = net.forward(x, 3, nullptr);
    CHECK(y.shape == std::vector<int>{1, 2, 4, 8});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::isfinite(y[i]));
  }
  SUBCASE("transformer") {
    UNet<float> net(tiny_tx_cfg(), rng);
    randomize_params(net.params(), rng);
    Tensor<float> x = random_tensor<float>({8, 4, 4, 8}, rng);
    Tensor<float> y = net.forward(x, 3, nullptr);
    CHECK(y.shape == std::vector<int>{8, 2, 4, 8});
  }
  SUBCASE("odd latent sizes resample cleanly") {
    UNetConfig cfg = tiny_ar_cfg();
    cfg.width_mult = {1, 2, 2};
    Rng r2(4);
    UNet<float> net(cfg, r2);
    randomize_params(net.params(), r2);
    Tensor<float> x = random_tensor<float>({1, 8, 6, 12}, r2);
    Tensor<float> y = net.forward(x, 0, nullptr);
    CHECK(y.shape == std::vector<int>{1, 2, 6, 12});
  }
}

TEST_CASE("adjoint identity: <u, J v> equals <J^T u, v> against finite differences") {
  // 2-level width-8 net in double; checks the input-gradient path of the
  // whole network against a directional finite difference.
  Rng rng(5);
  UNetConfig cfg = tiny_ar_cfg();
  UNet<double> net(cfg, rng);
  randomize_params(net.params(), rng);
  Tensor<double> x = random_tensor<double>({1, 8, 4, 8}, rng);
  Tensor<double> u = random_tensor<double>({1, 2, 4, 8}, rng);
  Tensor<double> v = random_tensor<double>({1, 8, 4, 8}, rng);

  nn::Cache<double> cache;
  net.forward(x, 2, &cache);
  nn::Grads<double> gr(net.params());
  Tensor<double> jtu = net.backward(gr, cache, u);
  double lhs = 0.0;
  for (int64_t i = 0; i < v.numel(); ++i) lhs += jtu[i] * v[i];

  const double h = 1e-6;
  Tensor<double> xp = x, xm = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    xp[i] += h * v[i];
    xm[i] -= h * v[i];
  }
  Tensor<double> fp = net.forward(xp, 2, nullptr);
  Tensor<double> fm = net.forward(xm, 2, nullptr);
  double rhs = 0.0;
  for (int64_t i = 0; i < u.numel(); ++i) rhs += u[i] * (fp[i] - fm[i]) / (2 * h);
  CHECK(testutil::rel_err(lhs, rhs) <= 1e-4);
}

TEST_CASE("transformer block with zero output weights is the identity") {
  Rng rng(6);
  nn::ParamStore<float> ps;
  nn::TransformerBlock<float> block(ps, "b", 8, 2, 4, 2, rng);
  Tensor<float> x = random_tensor<float>({8, 8, 3, 4}, rng);
  Tensor<float> y = block.forward(ps, x, nullptr);
  CHECK(bitwise_equal(x, y));
}

TEST_CASE("patch size 1 keeps the block frame-local") {
  Rng rng(7);
  nn::ParamStore<float> ps;
  nn::TransformerBlock<float> block(ps, "b", 8, 2, 1, 2, rng);
  // Give the attention and MLP real output weights so the block does work.
  for (auto& e : ps.entries) {
    for (int64_t i = 0; i < e.w.numel(); ++i) e.w[i] = static_cast<float>(0.2 * rng.gaussian());
  }
  Tensor<float> x = random_tensor<float>({4, 8, 2, 3}, rng);
  Tensor<float> x2 = x;
  // Perturb only frame 2.
  for (int64_t i = 0; i < 8 * 2 * 3; ++i) x2[2 * 8 * 2 * 3 + i] += 0.5f;
  Tensor<float> y1 = block.forward(ps, x, nullptr);
  Tensor<float> y2 = block.forward(ps, x2, nullptr);
  for (int l = 0; l < 4; ++l) {
    bool same = true;
    for (int64_t i = 0; i < 8 * 2 * 3; ++i) {
      if (y1[l * 8 * 2 * 3 + i] != y2[l * 8 * 2 * 3 + i]) same = false;
    }
    CHECK(same == (l != 2));
  }
}

TEST_CASE("bottleneck patch spans the full sequence: every step sees every step") {
  // Gradient probe through temporal attention at the bottleneck: with random
  // parameters, d out_t / d in_s must be nonzero for frames in the same patch.
  Rng rng(8);
  UNetConfig cfg = tiny_tx_cfg(8);
  UNet<double> net(cfg, rng);
  randomize_params(net.params(), rng, 0.3);
  Tensor<double> x = random_tensor<double>({8, 4, 4, 8}, rng);

  // Sensitivity of output frame 0 to input frame 7 (only connected through
  // temporal attention whose bottleneck patch covers all 8 frames).
  nn::Cache<double> cache;
  Tensor<double> y0 = net.forward(x, 1, &cache);
  nn::Grads<double> gr(net.params());
  Tensor<double> dy(y0.shape);
  const int frame_elems = 2 * 4 * 8;
  for (int i = 0; i < frame_elems; ++i) dy[i] = 1.0;  // d(sum of frame 0)
  Tensor<double> dx = net.backward(gr, cache, dy);
  double sens = 0.0;
  for (int i = 0; i < 4 * 4 * 8; ++i) sens += std::abs(dx[static_cast<int64_t>(7) * 4 * 4 * 8 + i]);
  CHECK(sens > 0.0);
}

TEST_CASE("whole-patch permutation equivariance with bottleneck attention disabled") {
  Rng rng(9);
  UNetConfig cfg = tiny_tx_cfg(8);
  cfg.temporal_attn = {1, 0};  // level-0 patches of 4, bottleneck disabled
  UNet<double> net(cfg, rng);
  randomize_params(net.params(), rng, 0.3);

  Tensor<double> x = random_tensor<double>({8, 4, 4, 8}, rng);
  const int fe = 4 * 4 * 8;
  // Swap patches [0..3] and [4..7].
  Tensor<double> xp(x.shape);
  for (int l = 0; l < 8; ++l) {
    int src = (l + 4) % 8;
    std::copy_n(x.data() + static_cast<int64_t>(src) * fe, fe,
                xp.data() + static_cast<int64_t>(l) * fe);
  }
  Tensor<double> y = net.forward(x, 3, nullptr);
  Tensor<double> yp = net.forward(xp, 3, nullptr);
  const int ofe = 2 * 4 * 8;
  for (int l = 0; l < 8; ++l) {
    int src = (l + 4) % 8;
    for (int i = 0; i < ofe; ++i) {
      CHECK(yp[static_cast<int64_t>(l) * ofe + i] ==
            doctest::Approx(y[static_cast<int64_t>(src) * ofe + i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("parameter manifest is deterministic in the config") {
  Rng r1(10), r2(11);
  UNet<float> a(tiny_tx_cfg(), r1), b(tiny_tx_cfg(), r2);
  REQUIRE(a.params().entries.size() == b.params().entries.size());
  for (size_t i = 0; i < a.params().entries.size(); ++i) {
    CHECK(a.params().entries[i].name == b.params().entries[i].name);
    CHECK(a.params().entries[i].w.shape == b.params().entries[i].w.shape);
  }
}

TEST_CASE("forward is pure: repeated calls are bitwise identical") {
  Rng rng(12);
  UNet<float> net(tiny_ar_cfg(), rng);
  randomize_params(net.params(), rng);
  Tensor<float> x = random_tensor<float>({1, 8, 4, 8}, rng);
  Tensor<float> y1 = net.forward(x, 9, nullptr);
  Tensor<float> y2 = net.forward(x, 9, nullptr);
  CHECK(bitwise_equal(y1, y2));
}

TEST_CASE("channel mismatch raises a shape error naming the stem") {
  Rng rng(13);
  UNet<float> net(tiny_ar_cfg(), rng);
  Tensor<float> x = random_tensor<float>({1, 5, 4, 8}, rng);
  CHECK_THROWS_WITH_AS(net.forward(x, 0, nullptr),
                       doctest::Contains("stem"), ShapeError);
}

TEST_CASE("unet config validation") {
  UNetConfig cfg = tiny_tx_cfg(6);  // not a multiple of 2^(depth-1)=2? 6 is; but patch 4 fails
  CHECK_THROWS_AS(cfg.finalize(), ConfigError);
  UNetConfig bad = tiny_ar_cfg();
  bad.mode = "other";
  CHECK_THROWS_AS(bad.finalize(), ConfigError);
  UNetConfig heads = tiny_tx_cfg(8);
  heads.heads = {3, 3};  // width 8 not divisible by 3
  CHECK_THROWS_AS(heads.finalize(), ConfigError);
}
