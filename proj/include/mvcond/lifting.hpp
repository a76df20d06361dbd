#pragma once

// Target-aware lifting: a conv encoder maps a posed image to a latent grid and
// a token transformer, conditioned on the relative pose to the target, turns
// that grid into a tri-plane expressed in the input view's frame.

#include <random>
#include <string>
#include <vector>

#include "mvcond/camera.hpp"
#include "mvcond/fusion.hpp"
#include "mvcond/image.hpp"
#include "mvcond/layers.hpp"
#include "mvcond/module.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

struct LiftingConfig {
  int image_res = 64;
  int latent_res = 16;   // image_res / 4
  int latent_dim = 32;   // d
  int token_dim = 32;    // D
  int features = 16;     // F, channel 0 is the density logit
  int blocks = 2;        // (self-attention + MLP, cross-attention) pairs
  bool view_conditioning = true;

  void validate() const;
};

// [B, 3, H, W] tensor from images of equal size.
Tensor images_to_tensor(const std::vector<Image>& images);

class LiftingNet {
 public:
  LiftingNet(ParameterStore& store, const LiftingConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "lift");

  const LiftingConfig& config() const { return cfg_; }

  // [B, 3, H, W] -> latent [B, h, w, d]
  Tensor encode(const Tensor& images) const;
  // Latent [B, h, w, d] plus one embedding per batch item -> one tri-plane per item.
  std::vector<TriPlane> lift(const Tensor& latents, const std::vector<CameraEmbedding>& embeddings) const;
  // encode then lift, one tri-plane per view in input order.
  std::vector<TriPlane> lift_all(const std::vector<Image>& images, const std::vector<RelativePose>& poses) const;

 private:
  LiftingConfig cfg_;
  Conv conv1_, conv2_, conv3_;
  Linear token_in_;
  Tensor position_;  // [h*w, D]
  Linear cond_;
  std::vector<AttentionBlock> self_attn_;
  std::vector<MlpBlock> mlp_;
  std::vector<AttentionBlock> cross_attn_;
  LayerNorm out_norm_;
  Linear head_;  // D -> 3F, split across the planes
};

}  // namespace mvcond
