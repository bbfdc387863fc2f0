#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ensldm/dataio.hpp"
#include "ensldm/diffusion.hpp"
#include "ensldm/nets.hpp"
#include "ensldm/vae.hpp"

namespace ensldm {

/// Denoiser training configuration. The network learns to predict the noise
/// added to residuals (z - z_c) in latent space; residuals are divided by a
/// data-derived scale stored in the checkpoint so the diffusion process sees
/// roughly unit variance.
struct DdmConfig {
  std::string mode = "ar";  // "ar" | "transformer"
  int steps = 200;          // diffusion steps T
  std::string schedule = "linear";
  int base_width = 32;
  std::vector<int> width_mult = {1, 2, 4};
  int window = 3;    // ar context length n
  int seq_len = 24;  // transformer sequence length
  double lr = 1e-3;
  int batch = 16;
  int epochs = 10;
  int samples_per_epoch = 0;  // 0 = derived from the dataset size
  uint64_t seed = 2;
  int emb_sin = 32;
  int emb_width = 128;
  int mlp_ratio = 2;

  void validate() const;
};

struct DdmEpochLog {
  int epoch = 0;
  double loss = 0.0;
};

struct DdmTrainResult {
  Checkpoint checkpoint;
  std::vector<DdmEpochLog> log;
};

/// Trains the denoiser on latent member sequences against a fixed
/// conditioning member. target_latents must not contain the conditioning
/// member. Deterministic given cfg.seed for any thread count.
DdmTrainResult train_ddm(const std::vector<LatentSeq>& target_latents, const LatentSeq& cond,
                         const DdmConfig& cfg);

/// Frozen denoiser restored from a CKP1 checkpoint.
struct DdmBundle {
  UNetConfig net_cfg;
  NoiseSchedule sched;
  double residual_scale = 1.0;
  std::string mode;
  int window = 0;
  int seq_len = 0;
  int c = 0, h = 0, w = 0;
  std::string cond_member_id;
  std::shared_ptr<UNet<float>> model;
};

DdmBundle ddm_from_checkpoint(const Checkpoint& ckpt);

void write_ddm_log_csv(const std::string& path, const std::vector<DdmEpochLog>& log);

}  // namespace ensldm
