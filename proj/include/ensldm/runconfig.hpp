#pragma once

#include <string>
#include <vector>

#include "ensldm/eval.hpp"
#include "ensldm/pipeline.hpp"
#include "ensldm/synthdata.hpp"
#include "ensldm/vae.hpp"

namespace ensldm {

/// Flat key = value run configuration with [synth]/[vae]/[ddm]/[sampler]/
/// [eval] sections. Parsing is strict: unknown sections or keys are
/// rejected by name, values are range-checked by the consuming module.
struct RunConfig {
  SynthConfig synth;
  VaeConfig vae;
  int vae_holdout_members = 1;  // trailing members kept out of VAE training
  DdmConfig ddm;
  std::vector<std::string> ddm_exclude;  // member ids excluded from DDM targets
  SamplerConfig sampler;
  uint64_t sampler_seed = 3;
  EnsoParams eval_enso;

  /// Parses and overlays a config file onto the defaults.
  static RunConfig load(const std::string& path);

  /// Spec defaults only.
  static RunConfig defaults();

  /// The default config rendered as a config file (for --dump-config).
  static std::string dump_defaults();
};

}  // namespace ensldm
