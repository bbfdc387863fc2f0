#include "ensldm/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "ensldm/threads.hpp"

namespace ensldm {

void DdmConfig::validate() const {
  if (mode != "ar" && mode != "transformer") {
    throw ConfigError("ddm: mode must be \"ar\" or \"transformer\"");
  }
  if (steps < 2) throw ConfigError("ddm: need at least 2 diffusion steps");
  if (mode == "ar" && window < 1) throw ConfigError("ddm: window must be >= 1");
  if (mode == "transformer" && seq_len < 1) throw ConfigError("ddm: seq_len must be >= 1");
  if (batch < 1 || epochs < 1) throw ConfigError("ddm: batch and epochs must be >= 1");
  if (!(lr > 0)) throw ConfigError("ddm: lr must be positive");
}

namespace {

Tensor<float> latent_frame(const LatentSeq& seq, int t) {
  Tensor<float> x({1, seq.c, seq.h, seq.w});
  x.v = seq.frames[static_cast<size_t>(t)];
  return x;
}

double residual_std(const std::vector<LatentSeq>& targets, const LatentSeq& cond) {
  double sum = 0.0, sumsq = 0.0;
  int64_t n = 0;
  for (const auto& m : targets) {
    for (int t = 0; t < m.n_months(); ++t) {
      const auto& a = m.frames[static_cast<size_t>(t)];
      const auto& b = cond.frames[static_cast<size_t>(t)];
      for (size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        sum += d;
        sumsq += d * d;
        ++n;
      }
    }
  }
  require(n > 0, "train_ddm: empty dataset");
  double mean = sum / static_cast<double>(n);
  double var = sumsq / static_cast<double>(n) - mean * mean;
  return std::sqrt(std::max(var, 1e-12));
}

struct SampleIdx {
  int member = 0;
  int t = 0;     // ar: predicted frame index; transformer: window start
  int step = 0;  // diffusion step
};

}  // namespace

DdmTrainResult train_ddm(const std::vector<LatentSeq>& target_latents, const LatentSeq& cond,
                         const DdmConfig& cfg) {
  cfg.validate();
  require(!target_latents.empty(), "train_ddm: no target members");
  const int c = cond.c, h = cond.h, w = cond.w;
  const int L = cond.n_months();
  for (const auto& m : target_latents) {
    if (m.c != c || m.h != h || m.w != w || m.n_months() != L) {
      throw ShapeError("train_ddm: latent shapes or lengths differ from conditioning member");
    }
  }
  const bool ar = cfg.mode == "ar";
  if (ar && L <= cfg.window) throw RangeError("train_ddm: sequences shorter than the ar window");
  if (!ar && L < cfg.seq_len) throw RangeError("train_ddm: sequences shorter than seq_len");

  const double scale = residual_std(target_latents, cond);
  NoiseSchedule sched = NoiseSchedule::make(cfg.steps, cfg.schedule);

  UNetConfig net_cfg;
  net_cfg.mode = cfg.mode;
  net_cfg.in_chans = ar ? c * (cfg.window + 2) : 2 * c;
  net_cfg.out_chans = c;
  net_cfg.base_width = cfg.base_width;
  net_cfg.width_mult = cfg.width_mult;
  net_cfg.window = cfg.window;
  net_cfg.seq_len = cfg.seq_len;
  net_cfg.emb_sin = cfg.emb_sin;
  net_cfg.emb_width = cfg.emb_width;
  net_cfg.mlp_ratio = cfg.mlp_ratio;

  Rng rng_model(cfg.seed, 0);
  UNet<float> net(net_cfg, rng_model);
  nn::Adam<float> opt(net.params(), cfg.lr);
  Rng rng_data(cfg.seed, 1);

  const int n_members = static_cast<int>(target_latents.size());
  const int valid_t = ar ? L - cfg.window : L - cfg.seq_len + 1;
  int per_epoch = cfg.samples_per_epoch > 0
                      ? cfg.samples_per_epoch
                      : (ar ? n_members * valid_t : n_members * std::max(1, L / cfg.seq_len) * 2);

  const int frame_elems = c * h * w;
  const int noise_elems = ar ? frame_elems : cfg.seq_len * frame_elems;

  DdmTrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (int start = 0; start < per_epoch; start += cfg.batch) {
      const int bs = std::min(cfg.batch, per_epoch - start);
      // Sample indices, diffusion steps and noise serially from the data
      // stream so results do not depend on the thread count.
      std::vector<SampleIdx> idx(static_cast<size_t>(bs));
      std::vector<Tensor<float>> eps(static_cast<size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        SampleIdx s;
        s.member = rng_data.uniform_int(n_members);
        s.t = (ar ? cfg.window : 0) + rng_data.uniform_int(valid_t);
        s.step = rng_data.uniform_int(cfg.steps);
        idx[static_cast<size_t>(i)] = s;
        Tensor<float> e(ar ? std::vector<int>{1, c, h, w}
                           : std::vector<int>{cfg.seq_len, c, h, w});
        for (int64_t j = 0; j < e.numel(); ++j) e[j] = static_cast<float>(rng_data.gaussian());
        eps[static_cast<size_t>(i)] = std::move(e);
      }
      (void)noise_elems;

      std::vector<nn::Grads<float>> grads(static_cast<size_t>(bs));
      std::vector<double> losses(static_cast<size_t>(bs));

#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
      for (int i = 0; i < bs; ++i) {
        const SampleIdx s = idx[static_cast<size_t>(i)];
        const LatentSeq& m = target_latents[static_cast<size_t>(s.member)];
        grads[static_cast<size_t>(i)] = nn::Grads<float>(net.params());

        Tensor<float> input;
        Tensor<float> y;  // scaled residual target
        if (ar) {
          y = Tensor<float>({1, c, h, w});
          const auto& zf = m.frames[static_cast<size_t>(s.t)];
          const auto& cf = cond.frames[static_cast<size_t>(s.t)];
          for (int j = 0; j < frame_elems; ++j) {
            y[j] = static_cast<float>((static_cast<double>(zf[static_cast<size_t>(j)]) -
                                       cf[static_cast<size_t>(j)]) /
                                      scale);
          }
          Tensor<float> z_k = q_sample(y, s.step, eps[static_cast<size_t>(i)], sched);
          std::vector<Tensor<float>> parts;
          parts.push_back(std::move(z_k));
          for (int d = cfg.window; d >= 1; --d) parts.push_back(latent_frame(m, s.t - d));
          parts.push_back(latent_frame(cond, s.t));
          input = pack_time_channels(parts);
        } else {
          y = Tensor<float>({cfg.seq_len, c, h, w});
          for (int l = 0; l < cfg.seq_len; ++l) {
            const auto& zf = m.frames[static_cast<size_t>(s.t + l)];
            const auto& cf = cond.frames[static_cast<size_t>(s.t + l)];
            for (int j = 0; j < frame_elems; ++j) {
              y[static_cast<int64_t>(l) * frame_elems + j] =
                  static_cast<float>((static_cast<double>(zf[static_cast<size_t>(j)]) -
                                      cf[static_cast<size_t>(j)]) /
                                     scale);
            }
          }
          Tensor<float> z_k = q_sample(y, s.step, eps[static_cast<size_t>(i)], sched);
          input = Tensor<float>({cfg.seq_len, 2 * c, h, w});
          for (int l = 0; l < cfg.seq_len; ++l) {
            float* dst = input.data() + static_cast<int64_t>(l) * 2 * c * h * w;
            std::copy_n(z_k.data() + static_cast<int64_t>(l) * frame_elems, frame_elems, dst);
            const auto& cf = cond.frames[static_cast<size_t>(s.t + l)];
            std::copy_n(cf.data(), frame_elems, dst + frame_elems);
          }
        }

        nn::Cache<float> cache;
        Tensor<float> pred = net.forward(input, s.step, &cache);
        const Tensor<float>& e = eps[static_cast<size_t>(i)];
        double acc = 0.0;
        Tensor<float> dpred(pred.shape);
        const double gs = 2.0 / static_cast<double>(pred.numel());
        for (int64_t j = 0; j < pred.numel(); ++j) {
          double d = static_cast<double>(pred[j]) - e[j];
          acc += d * d;
          dpred[j] = static_cast<float>(gs * d);
        }
        losses[static_cast<size_t>(i)] = acc / static_cast<double>(pred.numel());
        net.backward(grads[static_cast<size_t>(i)], cache, dpred);
      }

      nn::Grads<float> total(net.params());
      for (int i = 0; i < bs; ++i) total.add(grads[static_cast<size_t>(i)]);
      for (auto& t : total.g) {
        for (int64_t j = 0; j < t.numel(); ++j) t[j] /= static_cast<float>(bs);
      }
      double batch_loss = 0.0;
      for (int i = 0; i < bs; ++i) batch_loss += losses[static_cast<size_t>(i)];
      batch_loss /= bs;
      if (!std::isfinite(batch_loss)) {
        throw NumericError("train_ddm: NaN loss at epoch " + std::to_string(epoch) +
                           " (lr=" + std::to_string(cfg.lr) + ")");
      }
      opt.step(net.params(), total);
      epoch_loss += batch_loss;
      ++n_batches;
    }
    result.log.push_back(DdmEpochLog{epoch, epoch_loss / n_batches});
  }

  Checkpoint ck;
  for (const auto& e : net.params().entries) {
    ck.tensors.push_back(NamedTensor{e.name, e.w.shape, e.w.v});
  }
  nlohmann::ordered_json j;
  j["kind"] = "ddm";
  j["mode"] = cfg.mode;
  j["steps"] = cfg.steps;
  j["schedule"] = cfg.schedule;
  j["base_width"] = cfg.base_width;
  j["width_mult"] = cfg.width_mult;
  j["window"] = cfg.window;
  j["seq_len"] = cfg.seq_len;
  j["lr"] = cfg.lr;
  j["batch"] = cfg.batch;
  j["epochs"] = cfg.epochs;
  j["samples_per_epoch"] = cfg.samples_per_epoch;
  j["seed"] = cfg.seed;
  j["emb_sin"] = cfg.emb_sin;
  j["emb_width"] = cfg.emb_width;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["latent_c"] = c;
  j["latent_h"] = h;
  j["latent_w"] = w;
  j["residual_scale"] = scale;
  j["cond_member_id"] = cond.member_id;
  ck.config = j;
  result.checkpoint = std::move(ck);
  return result;
}

DdmBundle ddm_from_checkpoint(const Checkpoint& ckpt) {
  const auto& j = ckpt.config;
  if (j.value("kind", "") != "ddm") throw FormatError("ddm_from_checkpoint: not a DDM checkpoint");
  DdmBundle b;
  b.mode = j.at("mode").get<std::string>();
  b.window = j.at("window").get<int>();
  b.seq_len = j.at("seq_len").get<int>();
  b.c = j.at("latent_c").get<int>();
  b.h = j.at("latent_h").get<int>();
  b.w = j.at("latent_w").get<int>();
  b.residual_scale = j.at("residual_scale").get<double>();
  b.cond_member_id = j.value("cond_member_id", "");
  b.sched = NoiseSchedule::make(j.at("steps").get<int>(), j.at("schedule").get<std::string>());

  b.net_cfg.mode = b.mode;
  b.net_cfg.in_chans = b.mode == "ar" ? b.c * (b.window + 2) : 2 * b.c;
  b.net_cfg.out_chans = b.c;
  b.net_cfg.base_width = j.at("base_width").get<int>();
  b.net_cfg.width_mult = j.at("width_mult").get<std::vector<int>>();
  b.net_cfg.window = b.window;
  b.net_cfg.seq_len = b.seq_len;
  b.net_cfg.emb_sin = j.at("emb_sin").get<int>();
  b.net_cfg.emb_width = j.at("emb_width").get<int>();
  b.net_cfg.mlp_ratio = j.at("mlp_ratio").get<int>();

  Rng rng(j.at("seed").get<uint64_t>(), 0);
  b.model = std::make_shared<UNet<float>>(b.net_cfg, rng);
  for (auto& e : b.model->params().entries) {
    bool found = false;
    for (const auto& t : ckpt.tensors) {
      if (t.name == e.name) {
        if (t.shape != e.w.shape) {
          throw FormatError("ddm_from_checkpoint: shape mismatch for " + e.name);
        }
        e.w.v = t.data;
        found = true;
        break;
      }
    }
    if (!found) throw FormatError("ddm_from_checkpoint: missing tensor " + e.name);
  }
  return b;
}

void write_ddm_log_csv(const std::string& path, const std::vector<DdmEpochLog>& log) {
  std::vector<std::pair<std::string, std::vector<double>>> cols(2);
  cols[0].first = "epoch";
  cols[1].first = "loss";
  for (const auto& row : log) {
    cols[0].second.push_back(row.epoch);
    cols[1].second.push_back(row.loss);
  }
  write_series_csv(path, cols);
}

}  // namespace ensldm
