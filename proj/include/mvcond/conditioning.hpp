#pragma once

// Toy epsilon-prediction denoiser and the modules that inject a target-view
// latent into it: concat-conv injection per U-Net level, view-aware attention
// across per-view renders, and shifted-window cross-attention.
//
// Parameters live under two prefixes: "base." for the unconditioned denoiser
// and "cond." for everything that conditioning adds.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mvcond/camera.hpp"
#include "mvcond/layers.hpp"
#include "mvcond/module.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

struct WindowConfig {
  int window = 4;
  int shift = 0;

  void validate(int resolution) const;
};

// Bilinear resize of a channels-first latent [B, C, h, w]; identity when sizes match.
Tensor resample_latent(const Tensor& latent, int target_resolution);

// o' = Conv([o, f]) + o. The final 1x1 conv starts at zero.
struct InjectionBlock {
  Conv mix;   // 3x3 over concatenated channels
  Conv zero;  // 1x1, zero-initialized

  static InjectionBlock make(ParameterStore& store, const std::string& name, int64_t channels, int64_t cond_channels,
                             std::mt19937_64& rng);
  // o[B, C, h, w], f[B, Cf, h', w'] (resampled to h x w).
  Tensor operator()(const Tensor& o, const Tensor& f) const;
};

// Cross-attention from a query latent to a key/value latent inside (optionally
// cyclically shifted) square windows, plus a skip from the query.
struct WindowCrossAttention {
  Linear q, k, v, out;
  WindowConfig cfg;

  static WindowCrossAttention make(ParameterStore& store, const std::string& name, int64_t channels,
                                   int64_t kv_channels, const WindowConfig& cfg, std::mt19937_64& rng,
                                   Init out_init = Init::kZero);
  // q_latent [B, h, w, C], kv_latent [B, h, w, Ckv] -> [B, h, w, C]
  Tensor operator()(const Tensor& q_latent, const Tensor& kv_latent) const;
};

Tensor shifted_window_cross_attn(const Tensor& q_latent, const Tensor& kv_latent, const WindowCrossAttention& block);

// Attention across the view axis at every pixel. Each view's token is its
// latent plus a projection of its camera embedding; the query is the mean of
// those tokens and the values come from the raw latents.
struct ViewAwareAttention {
  Linear embed, q, k, v, out;

  static ViewAwareAttention make(ParameterStore& store, const std::string& name, int64_t channels, std::mt19937_64& rng,
                                 Init out_init = Init::kZero);
  // latents: n tensors [h, w, C]; returns [h, w, C].
  Tensor operator()(const std::vector<Tensor>& latents, const std::vector<CameraEmbedding>& embeddings) const;
};

Tensor view_aware_attention(const std::vector<Tensor>& latents, const std::vector<CameraEmbedding>& embeddings,
                            const ViewAwareAttention& block);

struct DenoiserConfig {
  int latent_res = 16;
  int latent_channels = 3;  // diffusion latent (RGB oracle latent)
  int channels = 32;
  int cond_channels = 15;   // F - 1 rendered-latent channels
  int timesteps = 100;
  int window = 4;
  int shift = 2;

  void validate() const;
};

struct DenoiserInput {
  Tensor x_t;                    // [B, Cl, h, w]
  std::vector<int> t;            // B timesteps
  Tensor reference;              // [B, Cl, h, w] latent of the primary input view
  std::vector<CameraEmbedding> camera;  // B relative poses primary input -> target
};

class ToyDenoiser {
 public:
  ToyDenoiser(ParameterStore& store, const DenoiserConfig& cfg, std::mt19937_64& base_rng, std::mt19937_64& cond_rng);

  const DenoiserConfig& config() const { return cfg_; }

  // Epsilon prediction [B, Cl, h, w]. With `injected` ([B, Cf, h, w]) the
  // conditioning path is active; without it the base model runs alone.
  Tensor denoise(const DenoiserInput& in, const std::optional<Tensor>& injected = std::nullopt) const;

  // Frozen base parameters stop accumulating gradients.
  void set_base_frozen(bool frozen);
  bool base_frozen() const { return frozen_; }

  std::vector<Parameter> base_parameters() const { return store_->parameters_with_prefix("base."); }
  std::vector<Parameter> conditioning_parameters() const { return store_->parameters_with_prefix("cond."); }

 private:
  struct ResBlock {
    LayerNorm n1, n2;
    Conv c1, c2;
    Linear temb;
  };
  static ResBlock make_res(ParameterStore& store, const std::string& name, int64_t ch, std::mt19937_64& rng);
  Tensor res(const ResBlock& b, const Tensor& x, const Tensor& temb) const;
  Tensor camera_attention(const AttentionBlock& b, const Tensor& x, const Tensor& cam) const;

  ParameterStore* store_;
  DenoiserConfig cfg_;
  bool frozen_ = false;

  Conv in_conv_;
  Linear time1_, time2_, cam_proj_;
  ResBlock down0_, down1_, mid_, up1_, up0_;
  AttentionBlock cam_attn0_, cam_attn_mid_;
  Conv down_conv0_, down_conv1_, up_conv1_, up_conv0_;
  LayerNorm out_norm_;
  Conv out_conv_;

  std::vector<InjectionBlock> inject_;  // levels 0, 1, 2
  Linear window_kv_;                    // rendered latent -> channels for window attention
  std::vector<WindowCrossAttention> window_attn_;
};

// Sinusoidal embedding [B, dim] of integer timesteps.
Tensor timestep_embedding(const std::vector<int>& t, int dim);

}  // namespace mvcond
