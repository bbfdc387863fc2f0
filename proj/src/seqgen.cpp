#include "ensldm/seqgen.hpp"

#include <algorithm>
#include <filesystem>

#include "ensldm/threads.hpp"

namespace ensldm {

void GenRequest::validate() const {
  if (mode != "ar" && mode != "transformer") {
    throw ConfigError("generate: mode must be \"ar\" or \"transformer\"");
  }
  if (n_members < 0) throw ConfigError("generate: n_members must be >= 0");
  if (n_months < 1) throw ConfigError("generate: n_months must be >= 1");
  if (start_month < 0) throw ConfigError("generate: start_month must be >= 0");
  if (sampler.sampler != "ddim" && sampler.sampler != "ddpm") {
    throw ConfigError("generate: sampler must be \"ddim\" or \"ddpm\"");
  }
}

namespace {

Tensor<float> frame_of(const LatentSeq& seq, int t) {
  Tensor<float> x({1, seq.c, seq.h, seq.w});
  x.v = seq.frames[static_cast<size_t>(t)];
  return x;
}

LatentSeq empty_like(const LatentSeq& z_c, const GenRequest& req, int member) {
  LatentSeq out;
  out.c = z_c.c;
  out.h = z_c.h;
  out.w = z_c.w;
  int m0 = (z_c.start.month - 1) + req.start_month;
  out.start = YearMonth{z_c.start.year + m0 / 12, m0 % 12 + 1};
  char id[16];
  std::snprintf(id, sizeof(id), "g%03d", member);
  out.member_id = id;
  return out;
}

}  // namespace

std::vector<LatentSeq> rollout_autoregressive(const DdmBundle& ddm, const LatentSeq& z_c,
                                              const GenRequest& request, GenStats* stats) {
  request.validate();
  if (ddm.mode != "ar") throw ConfigError("rollout_autoregressive: checkpoint is not ar mode");
  if (z_c.c != ddm.c || z_c.h != ddm.h || z_c.w != ddm.w) {
    throw ConfigError("rollout_autoregressive: conditioning latents do not match checkpoint");
  }
  const int n = ddm.window;
  const int end = request.start_month + request.n_months;
  if (end > z_c.n_months()) {
    throw RangeError("rollout_autoregressive: conditioning range shorter than request");
  }
  if (request.start_month != 0 && request.start_month < n) {
    throw RangeError("rollout_autoregressive: start_month must be 0 or >= the window length");
  }
  const float scale = static_cast<float>(ddm.residual_scale);
  const int frame_elems = z_c.c * z_c.h * z_c.w;

  std::vector<LatentSeq> members(static_cast<size_t>(request.n_members));
  std::vector<GenStats> per_member(static_cast<size_t>(request.n_members));

#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
  for (int m = 0; m < request.n_members; ++m) {
    Rng rng(request.seed, static_cast<uint64_t>(m));
    LatentSeq out = empty_like(z_c, request, m);
    GenStats st;

    std::vector<Tensor<float>> window;
    int t0 = request.start_month;
    if (request.start_month == 0) {
      // Seed the rollout with the conditioning member's first n latents and
      // emit them as the first n output months.
      for (int t = 0; t < n && t < end; ++t) {
        out.frames.push_back(z_c.frames[static_cast<size_t>(t)]);
        window.push_back(frame_of(z_c, t));
      }
      t0 = n;
    } else {
      for (int t = request.start_month - n; t < request.start_month; ++t) {
        window.push_back(frame_of(z_c, t));
      }
    }

    for (int t = t0; t < end; ++t) {
      Tensor<float> cond_frame = frame_of(z_c, t);
      std::vector<Tensor<float>> ctx_parts;
      for (const auto& f : window) ctx_parts.push_back(f);
      ctx_parts.push_back(cond_frame);
      Tensor<float> ctx = pack_time_channels(ctx_parts);
      auto eps_model = [&](const Tensor<float>& z_t, int step) {
        ++st.model_forwards;
        Tensor<float> input = nn::concat_channels(z_t, ctx);
        return ddm.model->forward(input, step, nullptr);
      };
      Tensor<float> resid = sample<float>(eps_model, {1, z_c.c, z_c.h, z_c.w}, ddm.sched,
                                          request.sampler, rng);
      ++st.sampler_invocations;
      std::vector<float> frame(static_cast<size_t>(frame_elems));
      for (int j = 0; j < frame_elems; ++j) {
        frame[static_cast<size_t>(j)] = cond_frame[j] + scale * resid[j];
      }
      Tensor<float> zhat({1, z_c.c, z_c.h, z_c.w});
      zhat.v = frame;
      out.frames.push_back(std::move(frame));
      window.erase(window.begin());
      window.push_back(std::move(zhat));
    }
    members[static_cast<size_t>(m)] = std::move(out);
    per_member[static_cast<size_t>(m)] = st;
  }

  if (stats) {
    for (const auto& st : per_member) {
      stats->sampler_invocations += st.sampler_invocations;
      stats->model_forwards += st.model_forwards;
    }
  }
  return members;
}

std::vector<LatentSeq> generate_transformer(const DdmBundle& ddm, const LatentSeq& z_c,
                                            const GenRequest& request, GenStats* stats) {
  request.validate();
  if (ddm.mode != "transformer") {
    throw ConfigError("generate_transformer: checkpoint is not transformer mode");
  }
  if (z_c.c != ddm.c || z_c.h != ddm.h || z_c.w != ddm.w) {
    throw ConfigError("generate_transformer: conditioning latents do not match checkpoint");
  }
  const int Lw = ddm.seq_len;
  if (request.n_months % Lw != 0) {
    throw ConfigError("generate_transformer: n_months " + std::to_string(request.n_months) +
                      " is not a multiple of seq_len " + std::to_string(Lw));
  }
  const int end = request.start_month + request.n_months;
  if (end > z_c.n_months()) {
    throw RangeError("generate_transformer: conditioning range shorter than request");
  }
  const float scale = static_cast<float>(ddm.residual_scale);
  const int frame_elems = z_c.c * z_c.h * z_c.w;

  std::vector<LatentSeq> members(static_cast<size_t>(request.n_members));
  std::vector<GenStats> per_member(static_cast<size_t>(request.n_members));

#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
  for (int m = 0; m < request.n_members; ++m) {
    Rng rng(request.seed, static_cast<uint64_t>(m));
    LatentSeq out = empty_like(z_c, request, m);
    GenStats st;

    for (int ws = request.start_month; ws < end; ws += Lw) {
      // Conditioning segment for this window.
      Tensor<float> cond_seg({Lw, z_c.c, z_c.h, z_c.w});
      for (int l = 0; l < Lw; ++l) {
        std::copy_n(z_c.frames[static_cast<size_t>(ws + l)].data(), frame_elems,
                    cond_seg.data() + static_cast<int64_t>(l) * frame_elems);
      }
      auto eps_model = [&](const Tensor<float>& z_t, int step) {
        ++st.model_forwards;
        Tensor<float> input({Lw, 2 * z_c.c, z_c.h, z_c.w});
        for (int l = 0; l < Lw; ++l) {
          float* dst = input.data() + static_cast<int64_t>(l) * 2 * frame_elems;
          std::copy_n(z_t.data() + static_cast<int64_t>(l) * frame_elems, frame_elems, dst);
          std::copy_n(cond_seg.data() + static_cast<int64_t>(l) * frame_elems, frame_elems,
                      dst + frame_elems);
        }
        return ddm.model->forward(input, step, nullptr);
      };
      Tensor<float> resid = sample<float>(eps_model, {Lw, z_c.c, z_c.h, z_c.w}, ddm.sched,
                                          request.sampler, rng);
      ++st.sampler_invocations;
      for (int l = 0; l < Lw; ++l) {
        std::vector<float> frame(static_cast<size_t>(frame_elems));
        for (int j = 0; j < frame_elems; ++j) {
          frame[static_cast<size_t>(j)] =
              cond_seg[static_cast<int64_t>(l) * frame_elems + j] +
              scale * resid[static_cast<int64_t>(l) * frame_elems + j];
        }
        out.frames.push_back(std::move(frame));
      }
    }
    members[static_cast<size_t>(m)] = std::move(out);
    per_member[static_cast<size_t>(m)] = st;
  }

  if (stats) {
    for (const auto& st : per_member) {
      stats->sampler_invocations += st.sampler_invocations;
      stats->model_forwards += st.model_forwards;
    }
  }
  return members;
}

GenerateResult generate_ensemble(const GenRequest& request, const DdmBundle& ddm,
                                 const VaeBundle& vae, const LatentSeq& z_c, const GridSpec& spec,
                                 const std::string& out_dir) {
  request.validate();
  if (ddm.c != vae.cfg.c || ddm.h != vae.latent_h() || ddm.w != vae.latent_w()) {
    throw ConfigError("generate_ensemble: DDM and VAE latent shapes are incompatible");
  }
  std::filesystem::create_directories(out_dir);

  GenerateResult result;
  std::vector<LatentSeq> latents;
  if (request.n_members > 0) {
    latents = request.mode == "ar"
                  ? rollout_autoregressive(ddm, z_c, request, &result.stats)
                  : generate_transformer(ddm, z_c, request, &result.stats);
  }

  nlohmann::ordered_json members_json = nlohmann::ordered_json::array();
  for (int m = 0; m < request.n_members; ++m) {
    SimSequence seq = decode_sequence(vae, latents[static_cast<size_t>(m)], spec);
    char name[32];
    std::snprintf(name, sizeof(name), "member_g%03d.cgf", m);
    std::string path = out_dir + "/" + name;
    write_cgf(path, to_cgf(seq));
    result.files.push_back(path);
    nlohmann::ordered_json e;
    e["id"] = seq.member_id;
    e["seed"] = request.seed;
    e["stream"] = m;
    e["file"] = name;
    e["sha256"] = sha256_file(path);
    members_json.push_back(e);
  }

  nlohmann::ordered_json manifest;
  manifest["members"] = members_json;
  manifest["config"] = {{"mode", request.mode},
                        {"n_members", request.n_members},
                        {"start_month", request.start_month},
                        {"n_months", request.n_months},
                        {"sampler", request.sampler.sampler},
                        {"ddim_steps", request.sampler.ddim_steps},
                        {"seed", request.seed},
                        {"cond_member_id", z_c.member_id}};
  manifest["stats"] = {{"sampler_invocations", result.stats.sampler_invocations},
                       {"model_forwards", result.stats.model_forwards}};
  std::string s = manifest.dump(2);
  s += "\n";
  write_file_bytes(out_dir + "/manifest.json", s.data(), s.size());
  result.manifest = std::move(manifest);
  return result;
}

}  // namespace ensldm
