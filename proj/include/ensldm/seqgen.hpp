#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "ensldm/pipeline.hpp"

namespace ensldm {

/// Request for new ensemble members conditioned on one member's latents.
struct GenRequest {
  std::string mode = "ar";  // must match the checkpoint
  int n_members = 1;
  int start_month = 0;  // index into the conditioning latent sequence
  int n_months = 0;
  SamplerConfig sampler;
  uint64_t seed = 0;

  void validate() const;
};

/// Sampler-invocation instrumentation: invocations counts full reverse
/// trajectories, model_forwards counts denoiser evaluations.
struct GenStats {
  int64_t sampler_invocations = 0;
  int64_t model_forwards = 0;
};

/// Iterative generation: each month samples a residual given the window of
/// previously generated latents and the conditioning latent of that month,
/// then slides the window. When start_month is 0 the first n output months
/// are the conditioning member's latents (the initial window); otherwise the
/// window is the n conditioning latents before start_month and every output
/// month is sampled. Members use independent RNG streams (seed, member), so
/// parallel generation is bitwise identical to serial.
std::vector<LatentSeq> rollout_autoregressive(const DdmBundle& ddm, const LatentSeq& z_c,
                                              const GenRequest& request, GenStats* stats);

/// Single-shot generation: whole seq_len windows are sampled jointly; longer
/// ranges are tiled in consecutive non-overlapping windows, each conditioned
/// on its own segment of z_c. n_months must be a multiple of seq_len.
std::vector<LatentSeq> generate_transformer(const DdmBundle& ddm, const LatentSeq& z_c,
                                            const GenRequest& request, GenStats* stats);

struct GenerateResult {
  std::vector<std::string> files;
  nlohmann::ordered_json manifest;
  GenStats stats;
};

/// Full orchestration: generate latents, decode through the VAE, write one
/// CGF1 file per member plus manifest.json into out_dir.
GenerateResult generate_ensemble(const GenRequest& request, const DdmBundle& ddm,
                                 const VaeBundle& vae, const LatentSeq& z_c, const GridSpec& spec,
                                 const std::string& out_dir);

}  // namespace ensldm
