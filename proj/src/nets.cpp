#include "ensldm/nets.hpp"

namespace ensldm {

CascadePlan cascade_plan(int seq_len, int depth) {
  if (depth < 1) throw ConfigError("cascade_plan: depth must be >= 1");
  if (seq_len < 1) throw ConfigError("cascade_plan: seq_len must be >= 1");
  int align = 1 << (depth - 1);
  if (seq_len % align != 0) {
    throw ConfigError("cascade_plan: seq_len " + std::to_string(seq_len) +
                      " is not a multiple of 2^(depth-1) = " + std::to_string(align));
  }
  CascadePlan plan;
  for (int l = 0; l < depth; ++l) {
    int p = l == depth - 1 ? seq_len : std::min(seq_len, 4 * (1 << l));
    if (seq_len % p != 0) {
      throw ConfigError("cascade_plan: patch " + std::to_string(p) + " at level " +
                        std::to_string(l) + " does not divide seq_len " + std::to_string(seq_len));
    }
    if (!plan.patch.empty() && p < plan.patch.back()) {
      throw ConfigError("cascade_plan: patch sizes must be non-decreasing with depth");
    }
    plan.patch.push_back(p);
    plan.heads.push_back(std::min(8, 1 << (l + 1)));
  }
  return plan;
}

void UNetConfig::finalize() {
  if (mode != "ar" && mode != "transformer") {
    throw ConfigError("unet: mode must be \"ar\" or \"transformer\", got " + mode);
  }
  if (in_chans <= 0 || out_chans <= 0) throw ConfigError("unet: channel counts must be positive");
  if (width_mult.empty()) throw ConfigError("unet: width_mult must not be empty");
  if (base_width < 2) throw ConfigError("unet: base_width too small");
  if (emb_sin < 2 || emb_sin % 2 != 0) throw ConfigError("unet: emb_sin must be even and >= 2");
  if (emb_width < 1) throw ConfigError("unet: emb_width must be positive");
  if (mlp_ratio < 1) throw ConfigError("unet: mlp_ratio must be >= 1");
  const int D = depth();
  if (mode == "ar" && window < 1) throw ConfigError("unet: ar window must be >= 1");
  if (spatial_attn.empty()) {
    for (int l = 0; l < D; ++l) spatial_attn.push_back(l >= D - 2 ? 1 : 0);
  }
  if (static_cast<int>(spatial_attn.size()) != D) {
    throw ConfigError("unet: spatial_attn must have one flag per level");
  }
  if (temporal_attn.empty()) temporal_attn.assign(static_cast<size_t>(D), 1);
  if (static_cast<int>(temporal_attn.size()) != D) {
    throw ConfigError("unet: temporal_attn must have one flag per level");
  }
  if (mode == "transformer") {
    if (seq_len < 1) throw ConfigError("unet: seq_len must be >= 1");
    CascadePlan plan = cascade_plan(seq_len, D);
    if (temporal_patch.empty()) temporal_patch = plan.patch;
    if (heads.empty()) heads = plan.heads;
    if (static_cast<int>(temporal_patch.size()) != D) {
      throw ConfigError("unet: temporal_patch must have one entry per level");
    }
    for (int l = 0; l < D; ++l) {
      int p = temporal_patch[static_cast<size_t>(l)];
      if (p < 1) throw ConfigError("unet: temporal patches must be >= 1");
      if (seq_len % p != 0) {
        throw ConfigError("unet: temporal patch " + std::to_string(p) +
                          " does not divide seq_len " + std::to_string(seq_len));
      }
      if (l > 0 && p < temporal_patch[static_cast<size_t>(l - 1)]) {
        throw ConfigError("unet: temporal patches must be non-decreasing with depth");
      }
    }
  } else if (heads.empty()) {
    for (int l = 0; l < D; ++l) heads.push_back(std::min(8, 1 << (l + 1)));
  }
  if (static_cast<int>(heads.size()) != D) {
    throw ConfigError("unet: heads must have one entry per level");
  }
  for (int l = 0; l < D; ++l) {
    if (width(l) % heads[static_cast<size_t>(l)] != 0) {
      throw ConfigError("unet: width " + std::to_string(width(l)) + " at level " +
                        std::to_string(l) + " not divisible by heads " +
                        std::to_string(heads[static_cast<size_t>(l)]));
    }
  }
}

}  // namespace ensldm
