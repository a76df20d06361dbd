#include "mvcond/lifting.hpp"

#include "mvcond/errors.hpp"
#include "mvcond/ops.hpp"

namespace mvcond {

void LiftingConfig::validate() const {
  if (image_res < 4 || image_res % 4 != 0) throw ConfigError("image resolution must be a positive multiple of 4");
  if (latent_res * 4 != image_res) throw ConfigError("latent resolution must be image resolution / 4");
  if (latent_dim < 1 || token_dim < 1) throw ConfigError("latent and token widths must be positive");
  if (features < 2) throw ConfigError("tri-plane features must be >= 2");
  if (blocks < 1) throw ConfigError("lifting needs at least one block");
}

Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("images_to_tensor: no images");
  const int W = images[0].width, H = images[0].height;
  std::vector<double> v(images.size() * 3 * static_cast<size_t>(W * H));
  size_t o = 0;
  for (const auto& img : images) {
    if (img.width != W || img.height != H) throw DimensionError("images_to_tensor: images differ in size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) v[o++] = img.at(x, y, c);
  }
  return Tensor::from({static_cast<int64_t>(images.size()), 3, H, W}, std::move(v));
}

LiftingNet::LiftingNet(ParameterStore& store, const LiftingConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg.latent_dim, D = cfg.token_dim, h = cfg.latent_res;
  conv1_ = Conv::make(store, prefix + ".enc.conv1", 3, 16, 3, 2, rng);
  conv2_ = Conv::make(store, prefix + ".enc.conv2", 16, 32, 3, 2, rng);
  conv3_ = Conv::make(store, prefix + ".enc.conv3", 32, d, 3, 1, rng);
  token_in_ = Linear::make(store, prefix + ".proj.token_in", d, D, rng);
  position_ = store.add(prefix + ".proj.position", init_uniform({h * h, D}, 0.1, rng));
  cond_ = Linear::make(store, prefix + ".proj.cond", 4, D, rng);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = prefix + ".proj.block" + std::to_string(b);
    self_attn_.push_back(AttentionBlock::make(store, n + ".self", D, D, rng));
    mlp_.push_back(MlpBlock::make(store, n + ".mlp", D, 2 * D, rng));
    cross_attn_.push_back(AttentionBlock::make(store, n + ".cross", D, D, rng));
  }
  out_norm_ = LayerNorm::make(store, prefix + ".proj.out_norm", D);
  head_ = Linear::make(store, prefix + ".proj.head", D, 3 * cfg.features, rng, Init::kFanIn, 0.5);
}

Tensor LiftingNet::encode(const Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.image_res || images.size(3) != cfg_.image_res) {
    throw DimensionError("encode: expected [B, 3, " + std::to_string(cfg_.image_res) + ", " +
                         std::to_string(cfg_.image_res) + "], got " + shape_str(images.shape()));
  }
  Tensor x = silu(conv1_(images));
  x = silu(conv2_(x));
  x = conv3_(x);
  return permute(x, {0, 2, 3, 1});
}

std::vector<TriPlane> LiftingNet::lift(const Tensor& latents, const std::vector<CameraEmbedding>& embeddings) const {
  const int64_t h = cfg_.latent_res, D = cfg_.token_dim, F = cfg_.features;
  if (latents.dim() != 4 || latents.size(1) != h || latents.size(2) != h || latents.size(3) != cfg_.latent_dim) {
    throw DimensionError("lift: latent has shape " + shape_str(latents.shape()));
  }
  const int64_t B = latents.size(0);
  if (static_cast<int64_t>(embeddings.size()) != B) throw ContractError("lift: one embedding per latent is required");

  std::vector<double> cond(static_cast<size_t>(B * 4), 0.0);
  if (cfg_.view_conditioning) {
    for (int64_t b = 0; b < B; ++b)
      for (int i = 0; i < 4; ++i) cond[static_cast<size_t>(b * 4 + i)] = embeddings[static_cast<size_t>(b)].v[static_cast<size_t>(i)];
  }
  const Tensor cond_token = cond_(Tensor::from({B, 1, 4}, std::move(cond)));

  Tensor x = token_in_(reshape(latents, {B, h * h, cfg_.latent_dim}));
  std::vector<Tensor> pos(static_cast<size_t>(B), reshape(position_, {1, h * h, D}));
  x = add(x, B == 1 ? pos[0] : concat(pos, 0));
  for (size_t i = 0; i < self_attn_.size(); ++i) {
    x = self_attn_[i](x, x);
    x = mlp_[i](x);
    x = cross_attn_[i](x, cond_token);
  }
  // [B, h*h, 3F] -> [B, 3, h, h, F]
  const Tensor planes = permute(reshape(head_(out_norm_(x, -1)), {B, h, h, 3, F}), {0, 3, 1, 2, 4});
  std::vector<TriPlane> out;
  for (int64_t b = 0; b < B; ++b) out.push_back({reshape(slice(planes, 0, b, 1), {3, h, h, F})});
  return out;
}

std::vector<TriPlane> LiftingNet::lift_all(const std::vector<Image>& images, const std::vector<RelativePose>& poses) const {
  if (images.empty()) throw ContractError("lift_all: at least one view is required");
  if (images.size() != poses.size()) throw ContractError("lift_all: images and poses must align");
  std::vector<CameraEmbedding> emb;
  for (const auto& p : poses) emb.push_back(embed_relative(p));
  return lift(encode(images_to_tensor(images)), emb);
}

}  // namespace mvcond
