#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "ensldm/nets.hpp"
#include "ensldm/vae.hpp"
#include "testutil.hpp"

// Central finite-difference checks of the analytic gradients, all in double.
// A coordinate passes when the relative error against the two-sided
// difference is at most 1e-4; at least 95% of sampled coordinates must pass.

using namespace ensldm;
using testutil::random_tensor;

namespace {

struct CheckResult {
  int checked = 0;
  int passed = 0;
};

/// loss_fn() evaluates the scalar loss with the current parameters;
/// grad contains the analytic gradient for the same loss.
CheckResult check_store(nn::ParamStore<double>& ps, const nn::Grads<double>& grad,
                        const std::function<double()>& loss_fn, Rng& rng, int max_coords) {
  int64_t total = ps.total_params();
  CheckResult res;
  for (int k = 0; k < max_coords; ++k) {
    // Uniform over all coordinates of all tensors.
    int64_t flat = static_cast<int64_t>(rng.uniform() * static_cast<double>(total));
    flat = std::min(flat, total - 1);
    size_t ti = 0;
    while (flat >= ps.entries[ti].w.numel()) {
      flat -= ps.entries[ti].w.numel();
      ++ti;
    }
    double& w = ps.entries[ti].w[flat];
    const double orig = w;
    const double h = 1e-5 * std::max(1.0, std::abs(orig));
    w = orig + h;
    double lp = loss_fn();
    w = orig - h;
    double lm = loss_fn();
    w = orig;
    double num = (lp - lm) / (2 * h);
    double ana = grad.g[ti][flat];
    double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
    res.checked += 1;
    if (std::abs(num - ana) / denom <= 1e-4) res.passed += 1;
  }
  return res;
}

}  // namespace

TEST_CASE("full VAE objective gradient vs finite differences") {
  VaeConfig cfg;
  cfg.f = 2;
  cfg.c = 2;
  cfg.enc_widths = {4, 6};
  cfg.disc_width = 4;
  cfg.lambda_adv = 0.05;
  cfg.lambda_kl = 1e-2;
  Rng rng(21);
  Vae<double> vae(cfg, 8, 8, rng);
  Discriminator<double> disc(cfg.disc_width, rng);

  Rng drng(22);
  Tensor<double> x = random_tensor<double>({1, 1, 8, 8}, drng);
  Tensor<double> eps = random_tensor<double>({1, 2, 4, 4}, drng);  // fixed reparam noise

  auto loss_fn = [&]() {
    Tensor<double> post = vae.encode_forward(x, nullptr);
    Tensor<double> mean, logvar;
    split_posterior(post, mean, logvar);
    Tensor<double> z = reparameterize(mean, logvar, eps);
    Tensor<double> xt = vae.decode_forward(z, nullptr);
    double rec = loss_rec(x, xt);
    double kl = loss_kl(mean, logvar);
    Tensor<double> logits = disc.forward(xt, nullptr);
    double gen = adv_gen_loss_from_logits(logits);
    return cfg.lambda_rec * rec + cfg.lambda_adv * gen + cfg.lambda_kl * kl;
  };

  // Analytic gradient w.r.t. every VAE parameter.
  nn::Grads<double> grads(vae.params());
  {
    nn::Cache<double> ecache, dcache, ccache;
    Tensor<double> post = vae.encode_forward(x, &ecache);
    Tensor<double> mean, logvar;
    split_posterior(post, mean, logvar);
    Tensor<double> z = reparameterize(mean, logvar, eps);
    Tensor<double> xt = vae.decode_forward(z, &dcache);
    Tensor<double> dxt = loss_rec_grad(x, xt);
    for (int64_t i = 0; i < dxt.numel(); ++i) dxt[i] *= cfg.lambda_rec;
    Tensor<double> logits = disc.forward(xt, &ccache);
    Tensor<double> dlogits = adv_gen_grad_logits(logits);
    for (int64_t i = 0; i < dlogits.numel(); ++i) dlogits[i] *= cfg.lambda_adv;
    nn::Grads<double> disc_scratch(disc.params());
    Tensor<double> dxt_adv = disc.backward(disc_scratch, ccache, dlogits);
    for (int64_t i = 0; i < dxt.numel(); ++i) dxt[i] += dxt_adv[i];
    Tensor<double> dz = vae.decode_backward(grads, dcache, dxt);
    Tensor<double> dmean_kl(mean.shape), dlv_kl(logvar.shape);
    loss_kl_grad(mean, logvar, dmean_kl, dlv_kl);
    Tensor<double> dmean(mean.shape), dlv(logvar.shape);
    for (int64_t i = 0; i < dmean.numel(); ++i) {
      dmean[i] = dz[i] + cfg.lambda_kl * dmean_kl[i];
      dlv[i] = 0.5 * dz[i] * eps[i] * std::exp(0.5 * logvar[i]) + cfg.lambda_kl * dlv_kl[i];
    }
    vae.encode_backward(grads, ecache, nn::concat_channels(dmean, dlv));
  }

  Rng crng(23);
  CheckResult res = check_store(vae.params(), grads, loss_fn, crng, 300);
  CHECK(res.passed >= static_cast<int>(0.95 * res.checked));
  MESSAGE("vae coords passed: ", res.passed, "/", res.checked);
}

TEST_CASE("discriminator loss gradient vs finite differences") {
  Rng rng(31);
  Discriminator<double> disc(4, rng);
  Tensor<double> x_real = random_tensor<double>({1, 1, 8, 8}, rng);
  Tensor<double> x_fake = random_tensor<double>({1, 1, 8, 8}, rng);

  auto loss_fn = [&]() {
    Tensor<double> lr = disc.forward(x_real, nullptr);
    Tensor<double> lf = disc.forward(x_fake, nullptr);
    return adv_losses_from_logits(lr, lf).first;
  };

  nn::Grads<double> grads(disc.params());
  {
    nn::Cache<double> cr, cf;
    Tensor<double> lr = disc.forward(x_real, &cr);
    Tensor<double> lf = disc.forward(x_fake, &cf);
    Tensor<double> dreal(lr.shape), dfake(lf.shape);
    adv_disc_grad_logits(lr, lf, dreal, dfake);
    disc.backward(grads, cf, dfake);
    disc.backward(grads, cr, dreal);
  }

  Rng crng(32);
  CheckResult res = check_store(disc.params(), grads, loss_fn, crng, 200);
  CHECK(res.passed >= static_cast<int>(0.95 * res.checked));
}

namespace {

void denoiser_gradcheck(const UNetConfig& cfg, const Tensor<double>& input, int t_step,
                        uint64_t seed) {
  Rng rng(seed);
  UNet<double> net(cfg, rng);
  // Give the zero-initialized output layers signal so their inputs get
  // gradients too.
  for (auto& e : net.params().entries) {
    bool zeroed = true;
    for (int64_t i = 0; i < e.w.numel(); ++i) zeroed = zeroed && e.w[i] == 0.0;
    if (zeroed) {
      for (int64_t i = 0; i < e.w.numel(); ++i) e.w[i] = 0.05 * rng.gaussian();
    }
  }
  Rng drng(seed + 1);
  Tensor<double> target = random_tensor<double>(
      {input.dim(0) == 1 ? 1 : input.dim(0), cfg.out_chans, input.dim(2), input.dim(3)}, drng);

  auto loss_fn = [&]() {
    Tensor<double> pred = net.forward(input, t_step, nullptr);
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
      double d = pred[i] - target[i];
      acc += d * d;
    }
    return acc / static_cast<double>(pred.numel());
  };

  nn::Grads<double> grads(net.params());
  {
    nn::Cache<double> cache;
    Tensor<double> pred = net.forward(input, t_step, &cache);
    Tensor<double> dpred(pred.shape);
    for (int64_t i = 0; i < pred.numel(); ++i) {
      dpred[i] = 2.0 * (pred[i] - target[i]) / static_cast<double>(pred.numel());
    }
    net.backward(grads, cache, dpred);
  }

  Rng crng(seed + 2);
  CheckResult res = check_store(net.params(), grads, loss_fn, crng, 300);
  CHECK(res.passed >= static_cast<int>(0.95 * res.checked));
  MESSAGE(cfg.mode, " coords passed: ", res.passed, "/", res.checked);
}

}  // namespace

TEST_CASE("ar denoiser gradient vs finite differences") {
  UNetConfig cfg;
  cfg.mode = "ar";
  cfg.in_chans = 8;
  cfg.out_chans = 2;
  cfg.base_width = 8;
  cfg.width_mult = {1, 2};
  cfg.window = 2;
  cfg.emb_sin = 8;
  cfg.emb_width = 16;
  Rng drng(41);
  Tensor<double> input = random_tensor<double>({1, 8, 4, 8}, drng);
  denoiser_gradcheck(cfg, input, 7, 42);
}

TEST_CASE("transformer denoiser gradient vs finite differences") {
  UNetConfig cfg;
  cfg.mode = "transformer";
  cfg.in_chans = 4;
  cfg.out_chans = 2;
  cfg.base_width = 8;
  cfg.width_mult = {1, 2};
  cfg.seq_len = 8;
  cfg.emb_sin = 8;
  cfg.emb_width = 16;
  Rng drng(51);
  Tensor<double> input = random_tensor<double>({8, 4, 4, 8}, drng);
  denoiser_gradcheck(cfg, input, 3, 52);
}
