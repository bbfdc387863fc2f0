#include "ensldm/vae.hpp"

#include <algorithm>
#include <cmath>

#include "ensldm/threads.hpp"

namespace ensldm {

void VaeConfig::finalize() {
  if (f < 1 || (f & (f - 1)) != 0) throw ConfigError("vae: f must be a power of two");
  if (c < 1) throw ConfigError("vae: c must be >= 1");
  if (!(lambda_rec > 0)) throw ConfigError("vae: lambda_rec must be positive");
  if (lambda_adv < 0 || lambda_kl < 0) throw ConfigError("vae: lambdas must be non-negative");
  int stages_needed = 0;
  for (int x = f; x > 1; x >>= 1) ++stages_needed;
  if (static_cast<int>(enc_widths.size()) != stages_needed + 1) {
    throw ConfigError("vae: enc_widths must have log2(f)+1 = " +
                      std::to_string(stages_needed + 1) + " entries");
  }
  if (dec_widths.empty()) dec_widths.assign(enc_widths.rbegin(), enc_widths.rend());
  if (dec_widths.size() != enc_widths.size()) {
    throw ConfigError("vae: dec_widths must match enc_widths length");
  }
  if (batch < 1 || epochs < 1) throw ConfigError("vae: batch and epochs must be >= 1");
  if (!(lr > 0)) throw ConfigError("vae: lr must be positive");
  if (disc_width < 2) throw ConfigError("vae: disc_width too small");
}

CgfData latent_to_cgf(const LatentSeq& seq) {
  CgfData d;
  d.header.n_time = seq.n_months();
  d.header.n_lat = seq.h;
  d.header.n_lon = seq.w;
  d.header.n_chan = seq.c;
  d.header.start_year = seq.start.year;
  d.header.start_month = seq.start.month;
  d.header.units = "none";
  d.header.member_id = seq.member_id;
  d.header.kind = "latent";
  d.payload.reserve(static_cast<size_t>(d.header.payload_count()));
  for (const auto& f : seq.frames) d.payload.insert(d.payload.end(), f.begin(), f.end());
  return d;
}

LatentSeq latent_from_cgf(const CgfData& data) {
  if (data.header.kind != "latent") throw FormatError("latent_from_cgf: kind is not \"latent\"");
  LatentSeq seq;
  seq.c = data.header.n_chan;
  seq.h = data.header.n_lat;
  seq.w = data.header.n_lon;
  seq.start = YearMonth{data.header.start_year, data.header.start_month};
  seq.member_id = data.header.member_id;
  size_t cells = static_cast<size_t>(seq.c) * seq.h * seq.w;
  seq.frames.resize(static_cast<size_t>(data.header.n_time));
  for (int t = 0; t < data.header.n_time; ++t) {
    const float* p = data.payload.data() + static_cast<size_t>(t) * cells;
    seq.frames[static_cast<size_t>(t)].assign(p, p + cells);
  }
  return seq;
}

namespace {

Tensor<float> frame_tensor(const std::vector<float>& frame, int h, int w, const Normalizer& norm) {
  Tensor<float> x({1, 1, h, w});
  const float scale = static_cast<float>(1.0 / norm.std);
  const float shift = static_cast<float>(-norm.mean / norm.std);
  for (size_t i = 0; i < frame.size(); ++i) x[static_cast<int64_t>(i)] = frame[i] * scale + shift;
  return x;
}

void scale_grads(nn::Grads<float>& g, float s) {
  for (auto& t : g.g) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] *= s;
  }
}

}  // namespace

VaeTrainResult train_vae(const std::vector<SimSequence>& train_members, const VaeConfig& cfg_in) {
  VaeConfig cfg = cfg_in;
  cfg.finalize();
  require(!train_members.empty(), "train_vae: no training members");
  const GridSpec& spec = train_members[0].spec;
  const int H = spec.n_lat, W = spec.n_lon;

  VaeTrainResult result;
  result.normalizer = fit_normalizer(train_members);

  // The VAE treats each timestep independently; flatten all member months
  // into one field list.
  std::vector<Tensor<float>> fields;
  for (const auto& m : train_members) {
    if (!(m.spec == spec)) throw ShapeError("train_vae: members on different grids");
    for (const auto& f : m.frames) fields.push_back(frame_tensor(f, H, W, result.normalizer));
  }
  const int n_fields = static_cast<int>(fields.size());

  Rng rng_model(cfg.seed, 0);
  Vae<float> vae(cfg, H, W, rng_model);
  Discriminator<float> disc(cfg.disc_width, rng_model);
  nn::Adam<float> opt_v(vae.params(), cfg.lr);
  nn::Adam<float> opt_d(disc.params(), cfg.lr);
  Rng rng_data(cfg.seed, 1);

  const int c = cfg.c, lh = vae.latent_h(), lw = vae.latent_w();
  const bool adversarial = cfg.lambda_adv > 0;

  std::vector<int> order(static_cast<size_t>(n_fields));
  for (int i = 0; i < n_fields; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates shuffle from the data stream.
    for (int i = n_fields - 1; i > 0; --i) {
      int j = rng_data.uniform_int(i + 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    int n_use = cfg.max_fields_per_epoch > 0 ? std::min(cfg.max_fields_per_epoch, n_fields)
                                             : n_fields;
    VaeEpochLog log;
    log.epoch = epoch;
    int n_batches = 0;

    for (int start = 0; start < n_use; start += cfg.batch) {
      const int bs = std::min(cfg.batch, n_use - start);
      // Reparameterization noise is drawn serially so the draw sequence does
      // not depend on the thread count.
      std::vector<Tensor<float>> eps(static_cast<size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        eps[static_cast<size_t>(i)] = Tensor<float>({1, c, lh, lw});
        for (int64_t j = 0; j < eps[static_cast<size_t>(i)].numel(); ++j) {
          eps[static_cast<size_t>(i)][j] = static_cast<float>(rng_data.gaussian());
        }
      }

      std::vector<nn::Grads<float>> grads(static_cast<size_t>(bs));
      std::vector<Tensor<float>> fakes(static_cast<size_t>(bs));
      std::vector<double> recs(static_cast<size_t>(bs)), kls(static_cast<size_t>(bs)),
          gens(static_cast<size_t>(bs), 0.0);

#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
      for (int i = 0; i < bs; ++i) {
        const Tensor<float>& x = fields[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        grads[static_cast<size_t>(i)] = nn::Grads<float>(vae.params());

        nn::Cache<float> ecache, dcache;
        Tensor<float> post = vae.encode_forward(x, &ecache);
        Tensor<float> mean, logvar;
        split_posterior(post, mean, logvar);
        Tensor<float> z = reparameterize(mean, logvar, eps[static_cast<size_t>(i)]);
        Tensor<float> xt = vae.decode_forward(z, &dcache);

        recs[static_cast<size_t>(i)] = loss_rec(x, xt);
        kls[static_cast<size_t>(i)] = loss_kl(mean, logvar);

        Tensor<float> dxt = loss_rec_grad(x, xt);
        for (int64_t j = 0; j < dxt.numel(); ++j) dxt[j] *= static_cast<float>(cfg.lambda_rec);

        if (adversarial) {
          nn::Cache<float> ccache;
          Tensor<float> logits = disc.forward(xt, &ccache);
          gens[static_cast<size_t>(i)] = adv_gen_loss_from_logits(logits);
          Tensor<float> dlf = adv_gen_grad_logits(logits);
          for (int64_t j = 0; j < dlf.numel(); ++j) dlf[j] *= static_cast<float>(cfg.lambda_adv);
          nn::Grads<float> disc_scratch(disc.params());  // generator step discards these
          Tensor<float> dxt_adv = disc.backward(disc_scratch, ccache, dlf);
          for (int64_t j = 0; j < dxt.numel(); ++j) dxt[j] += dxt_adv[j];
        }

        Tensor<float> dz = vae.decode_backward(grads[static_cast<size_t>(i)], dcache, dxt);
        Tensor<float> dmean_kl(mean.shape), dlv_kl(logvar.shape);
        loss_kl_grad(mean, logvar, dmean_kl, dlv_kl);
        Tensor<float> dmean(mean.shape), dlv(logvar.shape);
        for (int64_t j = 0; j < dmean.numel(); ++j) {
          float sigma_eps =
              eps[static_cast<size_t>(i)][j] *
              static_cast<float>(std::exp(0.5 * static_cast<double>(logvar[j])));
          dmean[j] = dz[j] + static_cast<float>(cfg.lambda_kl) * dmean_kl[j];
          dlv[j] = 0.5f * dz[j] * sigma_eps + static_cast<float>(cfg.lambda_kl) * dlv_kl[j];
        }
        Tensor<float> dpost = nn::concat_channels(dmean, dlv);
        vae.encode_backward(grads[static_cast<size_t>(i)], ecache, dpost);
        fakes[static_cast<size_t>(i)] = std::move(xt);
      }

      nn::Grads<float> total(vae.params());
      for (int i = 0; i < bs; ++i) total.add(grads[static_cast<size_t>(i)]);
      scale_grads(total, 1.0f / static_cast<float>(bs));

      double batch_rec = 0, batch_kl = 0, batch_gen = 0;
      for (int i = 0; i < bs; ++i) {
        batch_rec += recs[static_cast<size_t>(i)];
        batch_kl += kls[static_cast<size_t>(i)];
        batch_gen += gens[static_cast<size_t>(i)];
      }
      batch_rec /= bs;
      batch_kl /= bs;
      batch_gen /= bs;
      if (!std::isfinite(batch_rec) || !std::isfinite(batch_kl) || !std::isfinite(batch_gen)) {
        throw NumericError("train_vae: NaN loss at epoch " + std::to_string(epoch) +
                           " (lr=" + std::to_string(cfg.lr) + ", rec=" + std::to_string(batch_rec) +
                           ", kl=" + std::to_string(batch_kl) +
                           ", adv_gen=" + std::to_string(batch_gen) + ")");
      }
      opt_v.step(vae.params(), total);

      double batch_disc = 0;
      if (adversarial) {
        std::vector<nn::Grads<float>> dgrads(static_cast<size_t>(bs));
        std::vector<double> discs(static_cast<size_t>(bs));
#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
        for (int i = 0; i < bs; ++i) {
          const Tensor<float>& x =
              fields[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
          dgrads[static_cast<size_t>(i)] = nn::Grads<float>(disc.params());
          nn::Cache<float> cr, cf;
          Tensor<float> lr_logits = disc.forward(x, &cr);
          Tensor<float> lf_logits = disc.forward(fakes[static_cast<size_t>(i)], &cf);
          discs[static_cast<size_t>(i)] = adv_losses_from_logits(lr_logits, lf_logits).first;
          Tensor<float> dreal(lr_logits.shape), dfake(lf_logits.shape);
          adv_disc_grad_logits(lr_logits, lf_logits, dreal, dfake);
          disc.backward(dgrads[static_cast<size_t>(i)], cf, dfake);
          disc.backward(dgrads[static_cast<size_t>(i)], cr, dreal);
        }
        nn::Grads<float> dtotal(disc.params());
        for (int i = 0; i < bs; ++i) dtotal.add(dgrads[static_cast<size_t>(i)]);
        scale_grads(dtotal, 1.0f / static_cast<float>(bs));
        opt_d.step(disc.params(), dtotal);
        for (int i = 0; i < bs; ++i) batch_disc += discs[static_cast<size_t>(i)];
        batch_disc /= bs;
      }

      log.rec += batch_rec;
      log.kl += batch_kl;
      log.adv_gen += batch_gen;
      log.adv_disc += batch_disc;
      ++n_batches;
    }

    log.rec /= n_batches;
    log.kl /= n_batches;
    log.adv_gen /= n_batches;
    log.adv_disc /= n_batches;
    log.total = loss_total(log.rec, log.adv_gen, log.kl, cfg);
    result.log.push_back(log);
  }

  // Checkpoint: VAE and discriminator tensors plus the full config.
  Checkpoint ck;
  for (const auto& e : vae.params().entries) {
    ck.tensors.push_back(NamedTensor{e.name, e.w.shape, e.w.v});
  }
  for (const auto& e : disc.params().entries) {
    ck.tensors.push_back(NamedTensor{e.name, e.w.shape, e.w.v});
  }
  nlohmann::ordered_json j;
  j["kind"] = "vae";
  j["grid_h"] = H;
  j["grid_w"] = W;
  j["f"] = cfg.f;
  j["c"] = cfg.c;
  j["enc_widths"] = cfg.enc_widths;
  j["dec_widths"] = cfg.dec_widths;
  j["lambda_rec"] = cfg.lambda_rec;
  j["lambda_adv"] = cfg.lambda_adv;
  j["lambda_kl"] = cfg.lambda_kl;
  j["disc_width"] = cfg.disc_width;
  j["lr"] = cfg.lr;
  j["batch"] = cfg.batch;
  j["epochs"] = cfg.epochs;
  j["max_fields_per_epoch"] = cfg.max_fields_per_epoch;
  j["seed"] = cfg.seed;
  j["norm_mean"] = result.normalizer.mean;
  j["norm_std"] = result.normalizer.std;
  ck.config = j;
  result.checkpoint = std::move(ck);
  return result;
}

VaeBundle vae_from_checkpoint(const Checkpoint& ckpt) {
  const auto& j = ckpt.config;
  if (j.value("kind", "") != "vae") throw FormatError("vae_from_checkpoint: not a VAE checkpoint");
  VaeBundle b;
  b.cfg.f = j.at("f").get<int>();
  b.cfg.c = j.at("c").get<int>();
  b.cfg.enc_widths = j.at("enc_widths").get<std::vector<int>>();
  b.cfg.dec_widths = j.at("dec_widths").get<std::vector<int>>();
  b.cfg.lambda_rec = j.at("lambda_rec").get<double>();
  b.cfg.lambda_adv = j.at("lambda_adv").get<double>();
  b.cfg.lambda_kl = j.at("lambda_kl").get<double>();
  b.cfg.disc_width = j.at("disc_width").get<int>();
  b.cfg.seed = j.at("seed").get<uint64_t>();
  b.grid_h = j.at("grid_h").get<int>();
  b.grid_w = j.at("grid_w").get<int>();
  b.norm.mean = j.at("norm_mean").get<double>();
  b.norm.std = j.at("norm_std").get<double>();

  Rng rng(b.cfg.seed, 0);
  b.model = std::make_shared<Vae<float>>(b.cfg, b.grid_h, b.grid_w, rng);
  for (auto& e : b.model->params().entries) {
    bool found = false;
    for (const auto& t : ckpt.tensors) {
      if (t.name == e.name) {
        if (t.shape != e.w.shape) {
          throw FormatError("vae_from_checkpoint: shape mismatch for " + e.name);
        }
        e.w.v = t.data;
        found = true;
        break;
      }
    }
    if (!found) throw FormatError("vae_from_checkpoint: missing tensor " + e.name);
  }
  return b;
}

LatentField encode_field(const VaeBundle& vae, const GridField& field, Rng* rng) {
  Tensor<float> x = frame_tensor(field.values, vae.grid_h, vae.grid_w, vae.norm);
  Tensor<float> post = vae.model->encode_forward(x, nullptr);
  Tensor<float> mean, logvar;
  split_posterior(post, mean, logvar);
  LatentField out;
  out.c = vae.cfg.c;
  out.h = vae.latent_h();
  out.w = vae.latent_w();
  out.mean = mean.v;
  out.logvar = logvar.v;
  if (rng) {
    Tensor<float> eps(mean.shape);
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<float>(rng->gaussian());
    out.z = reparameterize(mean, logvar, eps).v;
  } else {
    out.z = mean.v;
  }
  return out;
}

LatentSeq encode_sequence(const VaeBundle& vae, const SimSequence& seq) {
  if (seq.spec.n_lat != vae.grid_h || seq.spec.n_lon != vae.grid_w) {
    throw ShapeError("encode_sequence: grid does not match VAE checkpoint");
  }
  LatentSeq out;
  out.c = vae.cfg.c;
  out.h = vae.latent_h();
  out.w = vae.latent_w();
  out.start = seq.start;
  out.member_id = seq.member_id;
  out.frames.resize(static_cast<size_t>(seq.n_months()));
#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
  for (int t = 0; t < seq.n_months(); ++t) {
    Tensor<float> x = frame_tensor(seq.frames[static_cast<size_t>(t)], vae.grid_h, vae.grid_w,
                                   vae.norm);
    Tensor<float> post = vae.model->encode_forward(x, nullptr);
    Tensor<float> mean, logvar;
    split_posterior(post, mean, logvar);
    out.frames[static_cast<size_t>(t)] = std::move(mean.v);
  }
  return out;
}

SimSequence decode_sequence(const VaeBundle& vae, const LatentSeq& latents, const GridSpec& spec) {
  if (spec.n_lat != vae.grid_h || spec.n_lon != vae.grid_w) {
    throw ShapeError("decode_sequence: grid does not match VAE checkpoint");
  }
  SimSequence out;
  out.spec = spec;
  out.start = latents.start;
  out.member_id = latents.member_id;
  out.frames.resize(static_cast<size_t>(latents.n_months()));
#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
  for (int t = 0; t < latents.n_months(); ++t) {
    Tensor<float> z({1, vae.cfg.c, vae.latent_h(), vae.latent_w()});
    z.v = latents.frames[static_cast<size_t>(t)];
    Tensor<float> xt = vae.model->decode_forward(z, nullptr);
    auto& frame = out.frames[static_cast<size_t>(t)];
    frame.resize(xt.v.size());
    for (size_t i = 0; i < xt.v.size(); ++i) {
      frame[i] = static_cast<float>(xt.v[i] * vae.norm.std + vae.norm.mean);
    }
  }
  return out;
}

double reconstruction_rmse(const VaeBundle& vae, const std::vector<SimSequence>& seqs) {
  double acc = 0.0;
  int64_t n = 0;
  for (const auto& seq : seqs) {
    LatentSeq lat = encode_sequence(vae, seq);
    SimSequence rec = decode_sequence(vae, lat, seq.spec);
    for (size_t t = 0; t < seq.frames.size(); ++t) {
      const auto& a = seq.frames[t];
      const auto& b = rec.frames[t];
      for (size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
        ++n;
      }
    }
  }
  require(n > 0, "reconstruction_rmse: no data");
  return std::sqrt(acc / static_cast<double>(n));
}

void write_vae_log_csv(const std::string& path, const std::vector<VaeEpochLog>& log) {
  std::vector<std::pair<std::string, std::vector<double>>> cols(6);
  cols[0].first = "epoch";
  cols[1].first = "loss_rec";
  cols[2].first = "loss_adv_disc";
  cols[3].first = "loss_adv_gen";
  cols[4].first = "loss_kl";
  cols[5].first = "loss_total";
  for (const auto& row : log) {
    cols[0].second.push_back(row.epoch);
    cols[1].second.push_back(row.rec);
    cols[2].second.push_back(row.adv_disc);
    cols[3].second.push_back(row.adv_gen);
    cols[4].second.push_back(row.kl);
    cols[5].second.push_back(row.total);
  }
  write_series_csv(path, cols);
}

}  // namespace ensldm
