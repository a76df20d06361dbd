#include "mvcond/conditioning.hpp"

#include <cmath>

#include "mvcond/errors.hpp"
#include "mvcond/ops.hpp"

namespace mvcond {

void WindowConfig::validate(int resolution) const {
  if (window < 1) throw ConfigError("window must be >= 1");
  if (resolution % window != 0) {
    throw ConfigError("latent resolution " + std::to_string(resolution) + " is not divisible by window " +
                      std::to_string(window));
  }
  if (shift < 0 || shift >= window) throw ConfigError("shift must lie in [0, window)");
}

Tensor resample_latent(const Tensor& latent, int target_resolution) {
  if (target_resolution < 1) throw BoundsError("resample_latent: target resolution must be >= 1");
  if (latent.dim() != 4) throw DimensionError("resample_latent: expects [B, C, h, w]");
  return resample_bilinear(latent, target_resolution, target_resolution);
}

InjectionBlock InjectionBlock::make(ParameterStore& store, const std::string& name, int64_t channels,
                                    int64_t cond_channels, std::mt19937_64& rng) {
  InjectionBlock b;
  b.mix = Conv::make(store, name + ".mix", channels + cond_channels, channels, 3, 1, rng);
  b.zero = Conv::make(store, name + ".zero", channels, channels, 1, 1, rng, Init::kZero);
  return b;
}

Tensor InjectionBlock::operator()(const Tensor& o, const Tensor& f) const {
  if (o.dim() != 4 || f.dim() != 4 || o.size(0) != f.size(0) || o.size(2) != o.size(3)) {
    throw DimensionError("inject: o " + shape_str(o.shape()) + " vs f " + shape_str(f.shape()));
  }
  const Tensor fr = resample_latent(f, static_cast<int>(o.size(2)));
  return add(o, zero(silu(mix(concat({o, fr}, 1)))));
}

namespace {

// [B, h, w, C] -> [B * (h/w)^2, w*w, C]
Tensor partition(const Tensor& x, int64_t win) {
  const int64_t B = x.size(0), h = x.size(1), C = x.size(3), n = h / win;
  return reshape(permute(reshape(x, {B, n, win, n, win, C}), {0, 1, 3, 2, 4, 5}), {B * n * n, win * win, C});
}

Tensor merge(const Tensor& x, int64_t B, int64_t h, int64_t win) {
  const int64_t C = x.size(2), n = h / win;
  return reshape(permute(reshape(x, {B, n, n, win, win, C}), {0, 1, 3, 2, 4, 5}), {B, h, h, C});
}

}  // namespace

WindowCrossAttention WindowCrossAttention::make(ParameterStore& store, const std::string& name, int64_t channels,
                                                int64_t kv_channels, const WindowConfig& cfg, std::mt19937_64& rng,
                                                Init out_init) {
  WindowCrossAttention b;
  b.q = Linear::make(store, name + ".q", channels, channels, rng);
  b.k = Linear::make(store, name + ".k", kv_channels, channels, rng);
  b.v = Linear::make(store, name + ".v", kv_channels, channels, rng);
  b.out = Linear::make(store, name + ".out", channels, channels, rng, out_init);
  b.cfg = cfg;
  return b;
}

Tensor WindowCrossAttention::operator()(const Tensor& q_latent, const Tensor& kv_latent) const {
  if (q_latent.dim() != 4 || kv_latent.dim() != 4 || q_latent.size(0) != kv_latent.size(0) ||
      q_latent.size(1) != kv_latent.size(1) || q_latent.size(2) != kv_latent.size(2) || q_latent.size(1) != q_latent.size(2)) {
    throw DimensionError("shifted_window_cross_attn: q " + shape_str(q_latent.shape()) + " vs kv " +
                         shape_str(kv_latent.shape()));
  }
  const int64_t B = q_latent.size(0), h = q_latent.size(1);
  cfg.validate(static_cast<int>(h));
  Tensor qs = q_latent, kvs = kv_latent;
  if (cfg.shift > 0) {
    qs = roll(qs, {-cfg.shift, -cfg.shift}, {1, 2});
    kvs = roll(kvs, {-cfg.shift, -cfg.shift}, {1, 2});
  }
  const Tensor qw = partition(qs, cfg.window), kvw = partition(kvs, cfg.window);
  Tensor o = merge(out(attention(q(qw), k(kvw), v(kvw))), B, h, cfg.window);
  if (cfg.shift > 0) o = roll(o, {cfg.shift, cfg.shift}, {1, 2});
  return add(q_latent, o);
}

Tensor shifted_window_cross_attn(const Tensor& q_latent, const Tensor& kv_latent, const WindowCrossAttention& block) {
  return block(q_latent, kv_latent);
}

ViewAwareAttention ViewAwareAttention::make(ParameterStore& store, const std::string& name, int64_t channels,
                                            std::mt19937_64& rng, Init out_init) {
  ViewAwareAttention b;
  b.embed = Linear::make(store, name + ".embed", 4, channels, rng);
  b.q = Linear::make(store, name + ".q", channels, channels, rng);
  b.k = Linear::make(store, name + ".k", channels, channels, rng);
  b.v = Linear::make(store, name + ".v", channels, channels, rng);
  b.out = Linear::make(store, name + ".out", channels, channels, rng, out_init);
  return b;
}

Tensor ViewAwareAttention::operator()(const std::vector<Tensor>& latents,
                                      const std::vector<CameraEmbedding>& embeddings) const {
  if (latents.empty()) throw ContractError("view_aware_attention: at least one view is required");
  if (latents.size() != embeddings.size()) throw ContractError("view_aware_attention: latents and embeddings must align");
  const Shape& s = latents[0].shape();
  if (s.size() != 3) throw DimensionError("view_aware_attention: latents must be [h, w, C]");
  const int64_t n = static_cast<int64_t>(latents.size()), hw = s[0] * s[1], C = s[2];
  std::vector<Tensor> tokens;
  std::vector<double> emb;
  for (size_t i = 0; i < latents.size(); ++i) {
    if (latents[i].shape() != s) throw DimensionError("view_aware_attention: latent shapes differ");
    tokens.push_back(reshape(latents[i], {hw, 1, C}));
    emb.insert(emb.end(), embeddings[i].v.begin(), embeddings[i].v.end());
  }
  const Tensor x = n == 1 ? tokens[0] : concat(tokens, 1);  // [hw, n, C]
  const Tensor e = reshape(embed(Tensor::from({n, 4}, std::move(emb))), {1, n, C});
  const Tensor aug = add(x, hw == 1 ? e : concat(std::vector<Tensor>(static_cast<size_t>(hw), e), 0));
  const Tensor mean_w = Tensor::full({n, 1}, 1.0 / static_cast<double>(n));
  const Tensor query = permute(linear(permute(aug, {0, 2, 1}), mean_w, Tensor()), {0, 2, 1});  // [hw, 1, C]
  const Tensor o = out(attention(q(query), k(aug), v(x)));
  return reshape(o, s);
}

Tensor view_aware_attention(const std::vector<Tensor>& latents, const std::vector<CameraEmbedding>& embeddings,
                            const ViewAwareAttention& block) {
  return block(latents, embeddings);
}

void DenoiserConfig::validate() const {
  if (latent_res < 4 || latent_res % 4 != 0) throw ConfigError("denoiser latent resolution must be a multiple of 4");
  if (latent_channels < 1 || channels < 1 || cond_channels < 1) throw ConfigError("denoiser widths must be positive");
  if (timesteps < 2) throw ConfigError("at least two diffusion steps are required");
  WindowConfig{window, shift}.validate(latent_res);
}

Tensor timestep_embedding(const std::vector<int>& t, int dim) {
  std::vector<double> v(t.size() * static_cast<size_t>(dim));
  const int half = dim / 2;
  for (size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(1000.0) * i / std::max(1, half));
      v[b * static_cast<size_t>(dim) + static_cast<size_t>(i)] = std::sin(t[b] * freq);
      v[b * static_cast<size_t>(dim) + static_cast<size_t>(half + i)] = std::cos(t[b] * freq);
    }
  return Tensor::from({static_cast<int64_t>(t.size()), dim}, std::move(v));
}

ToyDenoiser::ResBlock ToyDenoiser::make_res(ParameterStore& store, const std::string& name, int64_t ch,
                                            std::mt19937_64& rng) {
  ResBlock b;
  b.n1 = LayerNorm::make(store, name + ".norm1", ch);
  b.c1 = Conv::make(store, name + ".conv1", ch, ch, 3, 1, rng);
  b.temb = Linear::make(store, name + ".temb", ch, ch, rng);
  b.n2 = LayerNorm::make(store, name + ".norm2", ch);
  b.c2 = Conv::make(store, name + ".conv2", ch, ch, 3, 1, rng);
  return b;
}

Tensor ToyDenoiser::res(const ResBlock& b, const Tensor& x, const Tensor& temb) const {
  Tensor h = b.c1(silu(b.n1(x, 1)));
  h = add_sample_channel_bias(h, b.temb(temb));
  h = b.c2(silu(b.n2(h, 1)));
  return add(x, h);
}

Tensor ToyDenoiser::camera_attention(const AttentionBlock& b, const Tensor& x, const Tensor& cam) const {
  const int64_t B = x.size(0), C = x.size(1), h = x.size(2), w = x.size(3);
  const Tensor tokens = reshape(permute(x, {0, 2, 3, 1}), {B, h * w, C});
  return permute(reshape(b(tokens, cam), {B, h, w, C}), {0, 3, 1, 2});
}

ToyDenoiser::ToyDenoiser(ParameterStore& store, const DenoiserConfig& cfg, std::mt19937_64& base_rng,
                         std::mt19937_64& cond_rng)
    : store_(&store), cfg_(cfg) {
  cfg_.validate();
  const int64_t C = cfg.channels, Cl = cfg.latent_channels;
  std::mt19937_64& r = base_rng;
  in_conv_ = Conv::make(store, "base.in", 2 * Cl, C, 3, 1, r);
  time1_ = Linear::make(store, "base.time1", C, C, r);
  time2_ = Linear::make(store, "base.time2", C, C, r);
  cam_proj_ = Linear::make(store, "base.cam", 4, C, r);
  down0_ = make_res(store, "base.down0", C, r);
  cam_attn0_ = AttentionBlock::make(store, "base.cam_attn0", C, C, r);
  down_conv0_ = Conv::make(store, "base.downsample0", C, C, 3, 2, r);
  down1_ = make_res(store, "base.down1", C, r);
  down_conv1_ = Conv::make(store, "base.downsample1", C, C, 3, 2, r);
  mid_ = make_res(store, "base.mid", C, r);
  cam_attn_mid_ = AttentionBlock::make(store, "base.cam_attn_mid", C, C, r);
  up_conv1_ = Conv::make(store, "base.upmerge1", 2 * C, C, 3, 1, r);
  up1_ = make_res(store, "base.up1", C, r);
  up_conv0_ = Conv::make(store, "base.upmerge0", 2 * C, C, 3, 1, r);
  up0_ = make_res(store, "base.up0", C, r);
  out_norm_ = LayerNorm::make(store, "base.out_norm", C);
  out_conv_ = Conv::make(store, "base.out", C, Cl, 3, 1, r);

  const int64_t Cf = cfg.cond_channels;
  for (int level = 0; level < 3; ++level) {
    inject_.push_back(InjectionBlock::make(store, "cond.inject" + std::to_string(level), C, Cf, cond_rng));
  }
  window_kv_ = Linear::make(store, "cond.window_kv", Cf, C, cond_rng);
  window_attn_.push_back(WindowCrossAttention::make(store, "cond.window0", C, C, {cfg.window, 0}, cond_rng));
  window_attn_.push_back(WindowCrossAttention::make(store, "cond.window1", C, C, {cfg.window, cfg.shift}, cond_rng));
}

void ToyDenoiser::set_base_frozen(bool frozen) {
  frozen_ = frozen;
  for (const auto& p : base_parameters()) store_->get(p.name).set_requires_grad(!frozen);
}

Tensor ToyDenoiser::denoise(const DenoiserInput& in, const std::optional<Tensor>& injected) const {
  const int64_t Cl = cfg_.latent_channels, h = cfg_.latent_res;
  if (in.x_t.dim() != 4 || in.x_t.size(1) != Cl || in.x_t.size(2) != h || in.x_t.size(3) != h) {
    throw DimensionError("denoise: x_t has shape " + shape_str(in.x_t.shape()));
  }
  const int64_t B = in.x_t.size(0);
  if (in.reference.shape() != in.x_t.shape()) throw DimensionError("denoise: reference latent must match x_t");
  if (static_cast<int64_t>(in.t.size()) != B || static_cast<int64_t>(in.camera.size()) != B) {
    throw ContractError("denoise: one timestep and one camera embedding per batch item");
  }
  for (int t : in.t) {
    if (t < 0 || t >= cfg_.timesteps) throw ContractError("denoise: timestep " + std::to_string(t) + " out of range");
  }
  if (injected) {
    const Tensor& f = *injected;
    if (f.dim() != 4 || f.size(0) != B || f.size(1) != cfg_.cond_channels) {
      throw DimensionError("denoise: injected latent has shape " + shape_str(f.shape()));
    }
  }

  std::vector<double> cam(static_cast<size_t>(B * 4));
  for (int64_t b = 0; b < B; ++b)
    for (int i = 0; i < 4; ++i) cam[static_cast<size_t>(b * 4 + i)] = in.camera[static_cast<size_t>(b)].v[static_cast<size_t>(i)];
  const Tensor cam_token = cam_proj_(Tensor::from({B, 1, 4}, std::move(cam)));
  const Tensor temb = time2_(silu(time1_(timestep_embedding(in.t, cfg_.channels))));

  Tensor h0 = in_conv_(concat({in.x_t, in.reference}, 1));
  h0 = res(down0_, h0, temb);
  h0 = camera_attention(cam_attn0_, h0, cam_token);
  if (injected) {
    const Tensor f = resample_latent(*injected, static_cast<int>(h));
    const Tensor kv = window_kv_(permute(f, {0, 2, 3, 1}));
    Tensor q = permute(h0, {0, 2, 3, 1});
    for (const auto& wa : window_attn_) q = wa(q, kv);
    h0 = inject_[0](permute(q, {0, 3, 1, 2}), f);
  }

  Tensor h1 = res(down1_, down_conv0_(h0), temb);
  if (injected) h1 = inject_[1](h1, *injected);

  Tensor h2 = res(mid_, down_conv1_(h1), temb);
  h2 = camera_attention(cam_attn_mid_, h2, cam_token);
  if (injected) h2 = inject_[2](h2, *injected);

  Tensor u1 = up_conv1_(concat({upsample_nearest(h2, 2), h1}, 1));
  u1 = res(up1_, u1, temb);
  Tensor u0 = up_conv0_(concat({upsample_nearest(u1, 2), h0}, 1));
  u0 = res(up0_, u0, temb);
  return out_conv_(silu(out_norm_(u0, 1)));
}

}  // namespace mvcond
