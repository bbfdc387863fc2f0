#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ensldm/core.hpp"
#include "ensldm/dataio.hpp"
#include "ensldm/nn/layers.hpp"

namespace ensldm {

struct VaeConfig {
  int f = 4;  // spatial compression per dimension, power of two
  int c = 4;  // latent channels
  std::vector<int> enc_widths = {16, 32, 32};  // one width per resolution, full -> 1/f
  std::vector<int> dec_widths;                 // default: reversed enc_widths
  double lambda_rec = 1.0;
  double lambda_adv = 0.05;
  double lambda_kl = 1e-4;
  int disc_width = 16;
  double lr = 1e-3;
  int batch = 16;
  int epochs = 12;
  int max_fields_per_epoch = 0;  // 0 = use every field each epoch
  uint64_t seed = 1;

  int stages() const { return static_cast<int>(enc_widths.size()) - 1; }
  void finalize();
};

/// One compressed field: sampled values plus the diagonal Gaussian posterior.
struct LatentField {
  int c = 0, h = 0, w = 0;
  std::vector<float> z;
  std::vector<float> mean;
  std::vector<float> logvar;
};

/// Time-ordered latent representation of one member.
struct LatentSeq {
  int c = 0, h = 0, w = 0;
  YearMonth start;
  std::string member_id;
  std::vector<std::vector<float>> frames;  // z values, [c*h*w] each

  int n_months() const { return static_cast<int>(frames.size()); }
};

CgfData latent_to_cgf(const LatentSeq& seq);
LatentSeq latent_from_cgf(const CgfData& data);

// ---------------------------------------------------------------------------
// Losses (double accumulation).

/// Per-cell mean squared difference.
template <class T>
double loss_rec(const Tensor<T>& x, const Tensor<T>& xt) {
  check_same_shape(x, xt, "loss_rec");
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double d = static_cast<double>(x[i]) - xt[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.numel());
}

/// d loss_rec / d xt.
template <class T>
Tensor<T> loss_rec_grad(const Tensor<T>& x, const Tensor<T>& xt) {
  Tensor<T> g(xt.shape);
  const double s = 2.0 / static_cast<double>(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) {
    g[i] = static_cast<T>(s * (static_cast<double>(xt[i]) - x[i]));
  }
  return g;
}

/// KL(q || N(0, I)) per cell: 0.5 (mu^2 + sigma^2 - log sigma^2 - 1),
/// averaged over cells.
template <class T>
double loss_kl(const Tensor<T>& mean, const Tensor<T>& logvar) {
  check_same_shape(mean, logvar, "loss_kl");
  double acc = 0.0;
  for (int64_t i = 0; i < mean.numel(); ++i) {
    double mu = mean[i], lv = logvar[i];
    acc += 0.5 * (mu * mu + std::exp(lv) - lv - 1.0);
  }
  return acc / static_cast<double>(mean.numel());
}

template <class T>
void loss_kl_grad(const Tensor<T>& mean, const Tensor<T>& logvar, Tensor<T>& dmean,
                  Tensor<T>& dlogvar) {
  const double s = 1.0 / static_cast<double>(mean.numel());
  for (int64_t i = 0; i < mean.numel(); ++i) {
    dmean[i] = static_cast<T>(s * mean[i]);
    dlogvar[i] = static_cast<T>(0.5 * s * (std::exp(static_cast<double>(logvar[i])) - 1.0));
  }
}

constexpr double kLogitClamp = 30.0;

/// Discriminator and non-saturating generator objectives from raw logits:
/// disc = -[mean log D(x) + mean log(1 - D(xt))], gen = -mean log D(xt),
/// with D = sigmoid(logit) and logits clamped to +-30.
template <class T>
std::pair<double, double> adv_losses_from_logits(const Tensor<T>& logits_real,
                                                 const Tensor<T>& logits_fake) {
  auto softplus = [](double x) {
    // log(1 + e^x) without overflow
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  };
  double disc = 0.0;
  for (int64_t i = 0; i < logits_real.numel(); ++i) {
    double l = std::clamp(static_cast<double>(logits_real[i]), -kLogitClamp, kLogitClamp);
    disc += softplus(-l);  // -log sigmoid(l)
  }
  double gen = 0.0, disc_fake = 0.0;
  for (int64_t i = 0; i < logits_fake.numel(); ++i) {
    double l = std::clamp(static_cast<double>(logits_fake[i]), -kLogitClamp, kLogitClamp);
    disc_fake += softplus(l);  // -log(1 - sigmoid(l))
    gen += softplus(-l);
  }
  disc = disc / static_cast<double>(logits_real.numel()) +
         disc_fake / static_cast<double>(logits_fake.numel());
  gen /= static_cast<double>(logits_fake.numel());
  return {disc, gen};
}

/// Generator objective alone: -mean log D(xt) from fake logits.
template <class T>
double adv_gen_loss_from_logits(const Tensor<T>& logits_fake) {
  auto softplus = [](double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  };
  double gen = 0.0;
  for (int64_t i = 0; i < logits_fake.numel(); ++i) {
    double l = std::clamp(static_cast<double>(logits_fake[i]), -kLogitClamp, kLogitClamp);
    gen += softplus(-l);
  }
  return gen / static_cast<double>(logits_fake.numel());
}

/// d gen / d logits_fake (non-saturating form).
template <class T>
Tensor<T> adv_gen_grad_logits(const Tensor<T>& logits_fake) {
  Tensor<T> g(logits_fake.shape);
  const double s = 1.0 / static_cast<double>(logits_fake.numel());
  for (int64_t i = 0; i < logits_fake.numel(); ++i) {
    double l = static_cast<double>(logits_fake[i]);
    if (std::abs(l) > kLogitClamp) {
      g[i] = T(0);
      continue;
    }
    double sig = 1.0 / (1.0 + std::exp(-l));
    g[i] = static_cast<T>(s * (sig - 1.0));
  }
  return g;
}

/// d disc / d logits for both halves.
template <class T>
void adv_disc_grad_logits(const Tensor<T>& logits_real, const Tensor<T>& logits_fake,
                          Tensor<T>& dreal, Tensor<T>& dfake) {
  const double sr = 1.0 / static_cast<double>(logits_real.numel());
  for (int64_t i = 0; i < logits_real.numel(); ++i) {
    double l = static_cast<double>(logits_real[i]);
    if (std::abs(l) > kLogitClamp) {
      dreal[i] = T(0);
      continue;
    }
    double sig = 1.0 / (1.0 + std::exp(-l));
    dreal[i] = static_cast<T>(sr * (sig - 1.0));
  }
  const double sf = 1.0 / static_cast<double>(logits_fake.numel());
  for (int64_t i = 0; i < logits_fake.numel(); ++i) {
    double l = static_cast<double>(logits_fake[i]);
    if (std::abs(l) > kLogitClamp) {
      dfake[i] = T(0);
      continue;
    }
    double sig = 1.0 / (1.0 + std::exp(-l));
    dfake[i] = static_cast<T>(sf * sig);
  }
}

/// lambda_rec * L_rec + lambda_adv * L_adv(gen side) + lambda_kl * L_KL.
inline double loss_total(double rec, double adv_gen, double kl, const VaeConfig& cfg) {
  return cfg.lambda_rec * rec + cfg.lambda_adv * adv_gen + cfg.lambda_kl * kl;
}

// ---------------------------------------------------------------------------
// Models.

/// Strided-conv patch discriminator, logits map output.
template <class T>
class Discriminator {
 public:
  Discriminator(int width, Rng& rng) {
    c1_ = nn::Conv2d<T>(ps_, "disc.conv1", 1, width, 3, 2, 1, rng);
    c2_ = nn::Conv2d<T>(ps_, "disc.conv2", width, 2 * width, 3, 2, 1, rng);
    c3_ = nn::Conv2d<T>(ps_, "disc.conv3", 2 * width, 1, 3, 1, 1, rng);
  }

  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

  Tensor<T> forward(const Tensor<T>& x, nn::Cache<T>* cache) const {
    Tensor<T> h = c1_.forward(ps_, x, cache);
    h = act1_.forward(h, cache);
    h = c2_.forward(ps_, h, cache);
    h = act2_.forward(h, cache);
    return c3_.forward(ps_, h, cache);
  }

  Tensor<T> backward(nn::Grads<T>& gr, nn::Cache<T>& cache, const Tensor<T>& dy) const {
    Tensor<T> dh = c3_.backward(ps_, gr, cache, dy);
    dh = act2_.backward(cache, dh);
    dh = c2_.backward(ps_, gr, cache, dh);
    dh = act1_.backward(cache, dh);
    return c1_.backward(ps_, gr, cache, dh);
  }

 private:
  nn::ParamStore<T> ps_;
  nn::Conv2d<T> c1_, c2_, c3_;
  nn::Activation<T> act1_{nn::Act::kLeakyReLU}, act2_{nn::Act::kLeakyReLU};
};

/// Convolutional VAE. The encoder halves the resolution stages() times and
/// emits a [2c, h, w] posterior (mean, logvar); the decoder mirrors it with
/// nearest-upsampling blocks. Inputs are normalized single-channel fields.
template <class T>
class Vae {
 public:
  Vae(VaeConfig cfg, int grid_h, int grid_w, Rng& rng) : cfg_(std::move(cfg)), h_in_(grid_h), w_in_(grid_w) {
    cfg_.finalize();
    if (grid_h % cfg_.f != 0 || grid_w % cfg_.f != 0) {
      throw ShapeError("vae: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                       " not divisible by f=" + std::to_string(cfg_.f));
    }
    const int S = cfg_.stages();
    stem_ = nn::Conv2d<T>(ps_, "enc.stem", 1, cfg_.enc_widths[0], 3, 1, 1, rng);
    for (int s = 0; s < S; ++s) {
      enc_.emplace_back(ps_, "enc." + std::to_string(s), cfg_.enc_widths[static_cast<size_t>(s)],
                        cfg_.enc_widths[static_cast<size_t>(s + 1)], 0, nn::Resample::kDown, rng);
    }
    enc_norm_ = nn::GroupNorm<T>(ps_, "enc.head.norm", cfg_.enc_widths.back());
    enc_head_ = nn::Conv2d<T>(ps_, "enc.head.conv", cfg_.enc_widths.back(), 2 * cfg_.c, 3, 1, 1,
                              rng);
    dec_stem_ = nn::Conv2d<T>(ps_, "dec.stem", cfg_.c, cfg_.dec_widths[0], 3, 1, 1, rng);
    for (int s = 0; s < S; ++s) {
      dec_.emplace_back(ps_, "dec." + std::to_string(s), cfg_.dec_widths[static_cast<size_t>(s)],
                        cfg_.dec_widths[static_cast<size_t>(s + 1)], 0, nn::Resample::kUp, rng);
    }
    dec_norm_ = nn::GroupNorm<T>(ps_, "dec.head.norm", cfg_.dec_widths.back());
    dec_head_ = nn::Conv2d<T>(ps_, "dec.head.conv", cfg_.dec_widths.back(), 1, 3, 1, 1, rng);
  }

  const VaeConfig& config() const { return cfg_; }
  int grid_h() const { return h_in_; }
  int grid_w() const { return w_in_; }
  int latent_h() const { return h_in_ / cfg_.f; }
  int latent_w() const { return w_in_ / cfg_.f; }
  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

  /// x [1, 1, H, W] -> posterior [1, 2c, h, w] (mean then logvar channels).
  Tensor<T> encode_forward(const Tensor<T>& x, nn::Cache<T>* cache) const {
    if (x.dim(2) != h_in_ || x.dim(3) != w_in_) {
      throw ShapeError("vae encode: expected " + std::to_string(h_in_) + "x" +
                       std::to_string(w_in_) + ", got " + std::to_string(x.dim(2)) + "x" +
                       std::to_string(x.dim(3)));
    }
    Tensor<T> h = stem_.forward(ps_, x, cache);
    Tensor<T> none;
    for (const auto& b : enc_) h = b.forward(ps_, h, none, cache);
    h = enc_norm_.forward(ps_, h, cache);
    h = enc_act_.forward(h, cache);
    return enc_head_.forward(ps_, h, cache);
  }

  Tensor<T> encode_backward(nn::Grads<T>& gr, nn::Cache<T>& cache, const Tensor<T>& dpost) const {
    Tensor<T> dh = enc_head_.backward(ps_, gr, cache, dpost);
    dh = enc_act_.backward(cache, dh);
    dh = enc_norm_.backward(ps_, gr, cache, dh);
    for (auto it = enc_.rbegin(); it != enc_.rend(); ++it) {
      dh = it->backward(ps_, gr, cache, dh, nullptr);
    }
    return stem_.backward(ps_, gr, cache, dh);
  }

  /// z [1, c, h, w] -> field [1, 1, H, W].
  Tensor<T> decode_forward(const Tensor<T>& z, nn::Cache<T>* cache) const {
    if (z.dim(1) != cfg_.c || z.dim(2) != latent_h() || z.dim(3) != latent_w()) {
      throw ShapeError("vae decode: latent shape mismatch, got " + shape_str(z));
    }
    Tensor<T> h = dec_stem_.forward(ps_, z, cache);
    Tensor<T> none;
    for (const auto& b : dec_) h = b.forward(ps_, h, none, cache);
    h = dec_norm_.forward(ps_, h, cache);
    h = dec_act_.forward(h, cache);
    return dec_head_.forward(ps_, h, cache);
  }

  Tensor<T> decode_backward(nn::Grads<T>& gr, nn::Cache<T>& cache, const Tensor<T>& dxt) const {
    Tensor<T> dh = dec_head_.backward(ps_, gr, cache, dxt);
    dh = dec_act_.backward(cache, dh);
    dh = dec_norm_.backward(ps_, gr, cache, dh);
    for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) {
      dh = it->backward(ps_, gr, cache, dh, nullptr);
    }
    return dec_stem_.backward(ps_, gr, cache, dh);
  }

 private:
  VaeConfig cfg_;
  int h_in_ = 0, w_in_ = 0;
  nn::ParamStore<T> ps_;
  nn::Conv2d<T> stem_, enc_head_, dec_stem_, dec_head_;
  std::vector<nn::ResBlock<T>> enc_, dec_;
  nn::GroupNorm<T> enc_norm_, dec_norm_;
  nn::Activation<T> enc_act_{nn::Act::kSiLU}, dec_act_{nn::Act::kSiLU};
};

/// Reparameterized sample z = mean + exp(0.5 logvar) * eps from a posterior
/// tensor [1, 2c, h, w]; eps empty -> deterministic mean.
template <class T>
void split_posterior(const Tensor<T>& post, Tensor<T>& mean, Tensor<T>& logvar) {
  nn::split_channels(post, post.dim(1) / 2, mean, logvar);
}

template <class T>
Tensor<T> reparameterize(const Tensor<T>& mean, const Tensor<T>& logvar, const Tensor<T>& eps) {
  Tensor<T> z(mean.shape);
  for (int64_t i = 0; i < mean.numel(); ++i) {
    T s = eps.numel() ? static_cast<T>(std::exp(0.5 * static_cast<double>(logvar[i]))) * eps[i]
                      : T(0);
    z[i] = mean[i] + s;
  }
  return z;
}

/// [OP] wrapper: runs the discriminator on both batches and returns
/// (disc_loss, gen_loss).
template <class T>
std::pair<double, double> loss_adv(const Discriminator<T>& disc,
                                   const std::vector<Tensor<T>>& x_real,
                                   const std::vector<Tensor<T>>& x_fake) {
  require(!x_real.empty() && !x_fake.empty(), "loss_adv: empty batch");
  double disc_acc = 0.0, gen_acc = 0.0;
  for (size_t i = 0; i < x_real.size(); ++i) {
    Tensor<T> lr = disc.forward(x_real[i], nullptr);
    Tensor<T> lf = disc.forward(x_fake[i % x_fake.size()], nullptr);
    auto [d, g] = adv_losses_from_logits(lr, lf);
    disc_acc += d;
    gen_acc += g;
  }
  return {disc_acc / static_cast<double>(x_real.size()),
          gen_acc / static_cast<double>(x_real.size())};
}

// ---------------------------------------------------------------------------
// Training and pipeline helpers (float instantiation, vae.cpp).

struct VaeEpochLog {
  int epoch = 0;
  double rec = 0.0, adv_disc = 0.0, adv_gen = 0.0, kl = 0.0, total = 0.0;
};

struct VaeTrainResult {
  Checkpoint checkpoint;
  std::vector<VaeEpochLog> log;
  Normalizer normalizer;
};

/// Alternating generator/discriminator training over independently shuffled
/// monthly fields. Deterministic given cfg.seed (any thread count).
VaeTrainResult train_vae(const std::vector<SimSequence>& train_members, const VaeConfig& cfg);

/// Frozen float VAE restored from a checkpoint, plus its normalizer.
struct VaeBundle {
  VaeConfig cfg;
  Normalizer norm;
  int grid_h = 0, grid_w = 0;
  std::shared_ptr<Vae<float>> model;

  int latent_h() const { return grid_h / cfg.f; }
  int latent_w() const { return grid_w / cfg.f; }
};

VaeBundle vae_from_checkpoint(const Checkpoint& ckpt);

/// Deterministic (posterior-mean) encoding of a whole member sequence.
LatentSeq encode_sequence(const VaeBundle& vae, const SimSequence& seq);

/// Optional reparameterized sampling for encode; rng may be null.
LatentField encode_field(const VaeBundle& vae, const GridField& field, Rng* rng);

/// Decode a latent sequence back to a denormalized field sequence.
SimSequence decode_sequence(const VaeBundle& vae, const LatentSeq& latents, const GridSpec& spec);

/// Held-out reconstruction RMSE in degC over whole sequences.
double reconstruction_rmse(const VaeBundle& vae, const std::vector<SimSequence>& seqs);

void write_vae_log_csv(const std::string& path, const std::vector<VaeEpochLog>& log);

}  // namespace ensldm
