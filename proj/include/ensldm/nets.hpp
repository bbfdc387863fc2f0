#pragma once

#include <string>
#include <vector>

#include "ensldm/nn/layers.hpp"

namespace ensldm {

/// Per-level temporal patch sizes and head counts for the cascaded
/// transformer: patches grow with depth and the bottleneck patch spans the
/// whole sequence; head counts are non-decreasing with depth.
struct CascadePlan {
  std::vector<int> patch;
  std::vector<int> heads;
};

/// seq_len must be a multiple of 2^(depth-1); every level patch must divide
/// seq_len. Defaults: patch_l = min(seq_len, 4 * 2^l) with the bottleneck
/// forced to seq_len, heads_l = min(8, 2^(l+1)).
CascadePlan cascade_plan(int seq_len, int depth);

struct UNetConfig {
  std::string mode = "ar";  // "ar" | "transformer"
  int in_chans = 0;         // channels after packing + conditioning
  int out_chans = 4;        // latent channels of the target
  int base_width = 32;
  std::vector<int> width_mult = {1, 2, 4};
  std::vector<int> spatial_attn;    // 0/1 per level; default: deepest two levels
  std::vector<int> temporal_attn;   // transformer mode, 0/1 per level; default all
  int emb_sin = 32;                 // sinusoidal feature width
  int emb_width = 128;              // step embedding width after the MLP
  int window = 3;                   // ar mode: packed time window n
  int seq_len = 24;                 // transformer mode
  std::vector<int> temporal_patch;  // default from cascade_plan
  std::vector<int> heads;           // default from cascade_plan
  int mlp_ratio = 2;

  int depth() const { return static_cast<int>(width_mult.size()); }
  int width(int level) const { return base_width * width_mult[static_cast<size_t>(level)]; }

  /// Fills defaulted fields and checks invariants.
  void finalize();
};

/// Packs an n-step latent window along the channel axis in time order.
/// frames: n tensors [1, c, h, w] -> [1, n*c, h, w].
template <class T>
Tensor<T> pack_time_channels(const std::vector<Tensor<T>>& frames) {
  require(!frames.empty(), "pack_time_channels: empty window");
  Tensor<T> out = frames[0];
  for (size_t i = 1; i < frames.size(); ++i) out = nn::concat_channels(out, frames[i]);
  return out;
}

/// Inverse of pack_time_channels for a window of length n.
template <class T>
std::vector<Tensor<T>> unpack_time_channels(const Tensor<T>& packed, int n) {
  if (packed.dim(1) % n != 0) throw ShapeError("unpack_time_channels: channels not divisible");
  const int c = packed.dim(1) / n;
  std::vector<Tensor<T>> frames;
  Tensor<T> rest = packed;
  for (int i = 0; i < n - 1; ++i) {
    Tensor<T> head, tail;
    nn::split_channels(rest, c, head, tail);
    frames.push_back(std::move(head));
    rest = std::move(tail);
  }
  frames.push_back(std::move(rest));
  return frames;
}

/// Denoiser U-Net. AR mode consumes [1, in_chans, h, w] (noisy residual,
/// packed window and conditioning concatenated along channels); transformer
/// mode consumes [seq_len, in_chans, h, w] with an explicit time axis and
/// applies spatial/temporal attention blocks at every level.
template <class T>
class UNet {
 public:
  explicit UNet(UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.finalize();
    const int D = cfg_.depth();
    emb_ = nn::StepEmbedding<T>(ps_, "emb", cfg_.emb_sin, cfg_.emb_width, rng);
    stem_ = nn::Conv2d<T>(ps_, "stem", cfg_.in_chans, cfg_.width(0), 3, 1, 1, rng);
    for (int l = 0; l < D; ++l) {
      std::string base = "enc." + std::to_string(l);
      int in_ch = l == 0 ? cfg_.width(0) : cfg_.width(l - 1);
      enc_.emplace_back(ps_, base + ".block", in_ch, cfg_.width(l), cfg_.emb_width,
                        l == 0 ? nn::Resample::kNone : nn::Resample::kDown, rng);
      add_attn(base, l, enc_sattn_, enc_tblock_, rng);
    }
    mid1_ = nn::ResBlock<T>(ps_, "mid.block1", cfg_.width(D - 1), cfg_.width(D - 1),
                            cfg_.emb_width, nn::Resample::kNone, rng);
    add_attn("mid", D - 1, mid_sattn_, mid_tblock_, rng);
    mid2_ = nn::ResBlock<T>(ps_, "mid.block2", cfg_.width(D - 1), cfg_.width(D - 1),
                            cfg_.emb_width, nn::Resample::kNone, rng);
    for (int l = D - 1; l >= 0; --l) {
      std::string base = "dec." + std::to_string(l);
      int out_ch = l == 0 ? cfg_.width(0) : cfg_.width(l - 1);
      // Index dec_ from deepest to shallowest; block l consumes the concat of
      // the running tensor with skip l.
      dec_.emplace_back(ps_, base + ".block", 2 * cfg_.width(l), out_ch, cfg_.emb_width,
                        l == 0 ? nn::Resample::kNone : nn::Resample::kUp, rng);
      add_attn(base, l, dec_sattn_, dec_tblock_, rng);
    }
    head_norm_ = nn::GroupNorm<T>(ps_, "head.norm", cfg_.width(0));
    head_conv_ = nn::Conv2d<T>(ps_, "head.conv", cfg_.width(0), cfg_.out_chans, 3, 1, 1, rng,
                               /*zero_init=*/true);
  }

  const UNetConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return ps_; }
  const nn::ParamStore<T>& params() const { return ps_; }

  Tensor<T> forward(const Tensor<T>& x, int t_step, nn::Cache<T>* cache) const {
    if (x.dim(1) != cfg_.in_chans) {
      throw ShapeError("unet: input channels " + std::to_string(x.dim(1)) + " != configured " +
                       std::to_string(cfg_.in_chans) + " (stem)");
    }
    const int D = cfg_.depth();
    Tensor<T> emb = emb_.forward(ps_, t_step, cache);
    Tensor<T> h = stem_.forward(ps_, x, cache);
    std::vector<Tensor<T>> skips;
    for (int l = 0; l < D; ++l) {
      h = enc_[static_cast<size_t>(l)].forward(ps_, h, emb, cache);
      h = attn_forward(l, enc_sattn_, enc_tblock_, h, cache);
      skips.push_back(h);
    }
    h = mid1_.forward(ps_, h, emb, cache);
    h = attn_forward(D - 1, mid_sattn_, mid_tblock_, h, cache);
    h = mid2_.forward(ps_, h, emb, cache);
    for (int l = D - 1; l >= 0; --l) {
      size_t di = static_cast<size_t>(D - 1 - l);
      h = attn_forward(l, dec_sattn_, dec_tblock_, h, cache, /*dec=*/true);
      h = nn::concat_channels(h, skips[static_cast<size_t>(l)]);
      int th = l > 0 ? skips[static_cast<size_t>(l - 1)].dim(2) : 0;
      int tw = l > 0 ? skips[static_cast<size_t>(l - 1)].dim(3) : 0;
      h = dec_[di].forward(ps_, h, emb, cache, th, tw);
    }
    h = head_norm_.forward(ps_, h, cache);
    h = head_act_.forward(h, cache);
    return head_conv_.forward(ps_, h, cache);
  }

  /// Returns the input gradient; parameter gradients accumulate into gr.
  Tensor<T> backward(nn::Grads<T>& gr, nn::Cache<T>& cache, const Tensor<T>& dy) const {
    const int D = cfg_.depth();
    Tensor<T> demb({1, cfg_.emb_width});
    Tensor<T> dh = head_conv_.backward(ps_, gr, cache, dy);
    dh = head_act_.backward(cache, dh);
    dh = head_norm_.backward(ps_, gr, cache, dh);
    std::vector<Tensor<T>> dskips(static_cast<size_t>(D));
    for (int l = 0; l <= D - 1; ++l) {
      size_t di = static_cast<size_t>(D - 1 - l);
      dh = dec_[di].backward(ps_, gr, cache, dh, &demb);
      Tensor<T> dmain, dskip;
      nn::split_channels(dh, dh.dim(1) / 2, dmain, dskip);
      dskips[static_cast<size_t>(l)] = std::move(dskip);
      dh = attn_backward(l, dec_sattn_, dec_tblock_, dmain, gr, cache, /*dec=*/true);
    }
    dh = mid2_.backward(ps_, gr, cache, dh, &demb);
    dh = attn_backward(D - 1, mid_sattn_, mid_tblock_, dh, gr, cache);
    dh = mid1_.backward(ps_, gr, cache, dh, &demb);
    for (int l = D - 1; l >= 0; --l) {
      for (int64_t i = 0; i < dh.numel(); ++i) dh[i] += dskips[static_cast<size_t>(l)][i];
      dh = attn_backward(l, enc_sattn_, enc_tblock_, dh, gr, cache);
      dh = enc_[static_cast<size_t>(l)].backward(ps_, gr, cache, dh, &demb);
    }
    Tensor<T> dx = stem_.backward(ps_, gr, cache, dh);
    emb_.backward(ps_, gr, cache, demb);
    return dx;
  }

 private:
  struct AttnSlot {
    bool spatial = false;
    bool transformer = false;
    size_t index = 0;
  };

  void add_attn(const std::string& base, int level, std::vector<nn::SpatialAttention<T>>& sattn,
                std::vector<nn::TransformerBlock<T>>& tblock, Rng& rng) {
    AttnSlot slot;
    if (cfg_.mode == "transformer") {
      slot.transformer = true;
      slot.index = tblock.size();
      bool with_temporal = cfg_.temporal_attn[static_cast<size_t>(level)] != 0;
      tblock.emplace_back(ps_, base + ".tblock", cfg_.width(level),
                          cfg_.heads[static_cast<size_t>(level)],
                          with_temporal ? cfg_.temporal_patch[static_cast<size_t>(level)] : 0,
                          cfg_.mlp_ratio, rng);
    } else if (cfg_.spatial_attn[static_cast<size_t>(level)] != 0) {
      slot.spatial = true;
      slot.index = sattn.size();
      sattn.emplace_back(ps_, base + ".attn", cfg_.width(level),
                         cfg_.heads[static_cast<size_t>(level)], rng);
    }
    slots(&sattn).push_back(slot);
  }

  // Slots are recorded per container in construction order; enc/dec/mid each
  // call add_attn exactly depth/depth/1 times.
  std::vector<AttnSlot>& slots(void* container) {
    if (container == &enc_sattn_ || container == &enc_tblock_) return enc_slots_;
    if (container == &mid_sattn_ || container == &mid_tblock_) return mid_slots_;
    return dec_slots_;
  }

  Tensor<T> attn_forward(int level, const std::vector<nn::SpatialAttention<T>>& sattn,
                         const std::vector<nn::TransformerBlock<T>>& tblock, const Tensor<T>& h,
                         nn::Cache<T>* cache, bool dec = false) const {
    const AttnSlot& slot = slot_at(level, sattn, dec);
    if (slot.transformer) return tblock[slot.index].forward(ps_, h, cache);
    if (slot.spatial) return sattn[slot.index].forward(ps_, h, cache);
    return h;
  }

  Tensor<T> attn_backward(int level, const std::vector<nn::SpatialAttention<T>>& sattn,
                          const std::vector<nn::TransformerBlock<T>>& tblock, const Tensor<T>& dh,
                          nn::Grads<T>& gr, nn::Cache<T>& cache, bool dec = false) const {
    const AttnSlot& slot = slot_at(level, sattn, dec);
    if (slot.transformer) return tblock[slot.index].backward(ps_, gr, cache, dh);
    if (slot.spatial) return sattn[slot.index].backward(ps_, gr, cache, dh);
    return dh;
  }

  const AttnSlot& slot_at(int level, const std::vector<nn::SpatialAttention<T>>& sattn,
                          bool dec) const {
    if (&sattn == &mid_sattn_) return mid_slots_[0];
    const std::vector<AttnSlot>& v = dec ? dec_slots_ : enc_slots_;
    // dec slots were constructed deepest-first.
    size_t i = (&v == &dec_slots_) ? static_cast<size_t>(cfg_.depth() - 1 - level)
                                   : static_cast<size_t>(level);
    return v[i];
  }

  UNetConfig cfg_;
  nn::ParamStore<T> ps_;
  nn::StepEmbedding<T> emb_;
  nn::Conv2d<T> stem_;
  std::vector<nn::ResBlock<T>> enc_, dec_;
  nn::ResBlock<T> mid1_, mid2_;
  std::vector<nn::SpatialAttention<T>> enc_sattn_, dec_sattn_, mid_sattn_;
  std::vector<nn::TransformerBlock<T>> enc_tblock_, dec_tblock_, mid_tblock_;
  std::vector<AttnSlot> enc_slots_, mid_slots_, dec_slots_;
  nn::GroupNorm<T> head_norm_;
  nn::Activation<T> head_act_{nn::Act::kSiLU};
  nn::Conv2d<T> head_conv_;
};

}  // namespace ensldm
