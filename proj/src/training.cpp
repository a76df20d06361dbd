#include "mvcond/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

#include "mvcond/errors.hpp"
#include "mvcond/metrics.hpp"
#include "mvcond/ops.hpp"

namespace mvcond {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("noise schedule needs at least one step");
  NoiseSchedule s;
  s.T = T;
  double abar = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    abar *= 1.0 - beta;
    s.alpha_bars.push_back(abar);
  }
  s.validate();
  return s;
}

NoiseSchedule NoiseSchedule::scaled_linear(int T) {
  if (T < 1) throw ConfigError("noise schedule needs at least one step");
  const double k = 1000.0 / T;
  return linear(T, std::min(1e-4 * k, 0.5), std::min(0.02 * k, 0.999));
}

void NoiseSchedule::validate() const {
  if (T < 1 || static_cast<int>(betas.size()) != T || alphas.size() != betas.size() ||
      alpha_bars.size() != betas.size()) {
    throw ConfigError("noise schedule arrays must have T entries");
  }
  for (int t = 0; t < T; ++t) {
    if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw ConfigError("noise schedule betas must lie in (0, 1)");
    if (t > 0 && !(alpha_bars[t] < alpha_bars[t - 1])) throw ConfigError("alpha_bar must decrease");
  }
}

Tensor ddpm_forward(const Tensor& x0, const std::vector<int>& t, const NoiseSchedule& schedule, const Tensor& noise) {
  if (x0.shape() != noise.shape()) throw DimensionError("ddpm_forward: x0 and noise shapes differ");
  if (x0.dim() < 1 || static_cast<int64_t>(t.size()) != x0.size(0)) {
    throw DimensionError("ddpm_forward: one timestep per leading-axis item");
  }
  const int64_t per = x0.numel() / x0.size(0);
  std::vector<double> a(static_cast<size_t>(x0.numel())), b(a.size());
  for (size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 0 || t[i] >= schedule.T) {
      throw BoundsError("ddpm_forward: timestep " + std::to_string(t[i]) + " outside [0, " + std::to_string(schedule.T) + ")");
    }
    const double ab = schedule.alpha_bars[static_cast<size_t>(t[i])];
    std::fill_n(a.begin() + static_cast<int64_t>(i) * per, per, std::sqrt(ab));
    std::fill_n(b.begin() + static_cast<int64_t>(i) * per, per, std::sqrt(1.0 - ab));
  }
  return add(mul(x0, Tensor::from(x0.shape(), std::move(a))), mul(noise, Tensor::from(x0.shape(), std::move(b))));
}

Tensor ddpm_forward(const Tensor& x0, int t, const NoiseSchedule& schedule, const Tensor& noise) {
  const Tensor x = reshape(x0, [&] {
    Shape s{1};
    s.insert(s.end(), x0.shape().begin(), x0.shape().end());
    return s;
  }());
  return reshape(ddpm_forward(x, std::vector<int>{t}, schedule, reshape(noise, x.shape())), x0.shape());
}

std::mt19937_64 derived_rng(uint64_t seed, uint64_t step, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(step),
                    static_cast<uint32_t>(step >> 32), static_cast<uint32_t>(stream)};
  return std::mt19937_64(seq);
}

namespace {

int uniform_index(std::mt19937_64& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

void check_views(const MultiViewSample& sample) {
  const int n = static_cast<int>(sample.views.size());
  if (n < 4) throw ContractError("triplet sampling needs at least 4 views, scene " + sample.scene_id + " has " + std::to_string(n));
  if (n % 2 != 0) throw ConfigError("triplet sampling needs an even view count (opposing view undefined for " + std::to_string(n) + ")");
}

Tensor gaussian(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TripletSample sample_triplet(const MultiViewSample& sample, std::mt19937_64& rng) {
  check_views(sample);
  const int n = static_cast<int>(sample.views.size());
  const double spacing = 2.0 * kPi / n;
  const double phi0 = sample.views[0].pose.phi;
  for (int j = 0; j < n; ++j) {
    const double expect = wrap_two_pi(phi0 + j * spacing);
    const double d = std::abs(wrap_two_pi(sample.views[static_cast<size_t>(j)].pose.phi - expect + kPi) - kPi);
    if (d > 1e-6) throw ContractError("triplet sampling needs evenly spaced azimuths in scene " + sample.scene_id);
  }
  TripletSample ts;
  const int k = uniform_index(rng, n);
  ts.inputs = {k, (k + n / 2) % n};
  std::bernoulli_distribution third(0.5);
  if (third(rng)) {
    std::vector<int> others;
    for (int j = 0; j < n; ++j)
      if (j != ts.inputs[0] && j != ts.inputs[1]) others.push_back(j);
    ts.inputs.push_back(others[static_cast<size_t>(uniform_index(rng, static_cast<int>(others.size())))]);
  }
  std::vector<int> rest;
  for (int j = 0; j < n; ++j)
    if (std::find(ts.inputs.begin(), ts.inputs.end(), j) == ts.inputs.end()) rest.push_back(j);
  ts.target = rest[static_cast<size_t>(uniform_index(rng, static_cast<int>(rest.size())))];
  return ts;
}

Tensor lift_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("lift_loss: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()) + " differ");
  }
  if (pred.dim() < 1 || pred.size(0) < 1) throw DimensionError("lift_loss: needs a leading view axis with M >= 1");
  return scale(sum_squared_error(pred, target), 1.0 / static_cast<double>(pred.size(0)));
}

void ModelConfig::validate() const {
  if (image_res != triplane_res * 4) throw ConfigError("triplane_res must equal image resolution / 4");
  if (latent_res < 4 || latent_res % 4 != 0) throw ConfigError("latent_res must be a positive multiple of 4");
  if (feature_dim < 4) throw ConfigError("feature_dim must be >= 4 (density plus RGB)");
  if (samples_per_ray < 2) throw ConfigError("samples_per_ray must be >= 2");
  if (timesteps < 2) throw ConfigError("timesteps must be >= 2");
  lifting().validate();
  denoiser().validate();
}

LiftingConfig ModelConfig::lifting() const {
  LiftingConfig c;
  c.image_res = image_res;
  c.latent_res = triplane_res;
  c.latent_dim = latent_dim;
  c.token_dim = token_dim;
  c.features = feature_dim;
  c.blocks = blocks;
  c.view_conditioning = view_conditioning;
  return c;
}

DenoiserConfig ModelConfig::denoiser() const {
  DenoiserConfig c;
  c.latent_res = latent_res;
  c.latent_channels = 3;
  c.channels = channels;
  c.cond_channels = feature_dim - 1;
  c.timesteps = timesteps;
  c.window = window;
  c.shift = shift;
  return c;
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto lift_rng = derived_rng(seed, 0, 1);
  auto base_rng = derived_rng(seed, 0, 2);
  auto cond_rng = derived_rng(seed, 0, 3);
  lift_ = std::make_unique<LiftingNet>(store_, cfg_.lifting(), lift_rng, "lift");
  denoiser_ = std::make_unique<ToyDenoiser>(store_, cfg_.denoiser(), base_rng, cond_rng);
  view_attn_ = ViewAwareAttention::make(store_, "cond.view_attn", cfg_.feature_dim - 1, cond_rng);
  schedule_ = NoiseSchedule::scaled_linear(cfg_.timesteps);
}

std::vector<std::string> Model::copy_from(const Model& other, const std::string& prefix) {
  std::vector<std::string> copied;
  for (const auto& p : other.store().parameters_with_prefix(prefix)) {
    if (!store_.contains(p.name)) continue;
    Tensor& dst = store_.get(p.name);
    if (dst.shape() != p.tensor.shape()) throw DimensionError("copy_from: shape mismatch for " + p.name);
    auto src = p.tensor.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    copied.push_back(p.name);
  }
  return copied;
}

double ray_near(double radius) { return std::max(1e-3, radius - std::sqrt(3.0) - 0.05); }
double ray_far(double radius) { return radius + std::sqrt(3.0) + 0.05; }

Tensor diffusion_latent(const Image& img, int latent_res) {
  const Tensor rgb = target_latent_oracle(img, latent_res, 3);
  std::vector<double> v(static_cast<size_t>(3 * latent_res * latent_res));
  auto d = rgb.data();
  const size_t hw = static_cast<size_t>(latent_res) * latent_res;
  for (size_t p = 0; p < hw; ++p)
    for (size_t c = 0; c < 3; ++c) v[c * hw + p] = 2.0 * d[p * 3 + c] - 1.0;
  return Tensor::from({3, latent_res, latent_res}, std::move(v));
}

Image decode_diffusion_latent(const Tensor& latent, int resolution) {
  if (latent.dim() != 3 || latent.size(0) != 3) throw DimensionError("decode_diffusion_latent: expected [3, h, w]");
  const int64_t h = latent.size(1), w = latent.size(2);
  std::vector<double> v(static_cast<size_t>(h * w * 3));
  auto d = latent.data();
  for (int64_t p = 0; p < h * w; ++p)
    for (int64_t c = 0; c < 3; ++c)
      v[static_cast<size_t>(p * 3 + c)] = std::clamp((d[static_cast<size_t>(c * h * w + p)] + 1.0) / 2.0, 0.0, 1.0);
  return decode_latent(Tensor::from({h, w, 3}, std::move(v)), resolution);
}

Tensor lift_target(const Image& img, int latent_res, int feature_dim) {
  return target_latent_oracle(img, latent_res, feature_dim - 1);
}

namespace {

std::vector<Conditioning> condition_impl(const Model& model, const std::vector<std::vector<PosedImage>>& inputs,
                                         const std::vector<SphericalPose>& targets, bool inject,
                                         const std::optional<Tensor>& override_render) {
  if (inputs.size() != targets.size()) throw ContractError("condition: one target per input set");
  const ModelConfig& cfg = model.config();
  const int64_t h = cfg.latent_res, C = cfg.feature_dim - 1;
  std::vector<TriPlane> planes;
  if (!override_render) {
    std::vector<Image> images;
    std::vector<RelativePose> rel;
    for (size_t b = 0; b < inputs.size(); ++b) {
      if (inputs[b].empty()) throw ContractError("condition: at least one input view is required");
      for (const auto& v : inputs[b]) {
        images.push_back(v.image);
        rel.push_back(relative_pose(validated(v.pose), validated(targets[b])));
      }
    }
    planes = model.lifting().lift_all(images, rel);
  } else if (override_render->shape() != Shape{h, h, C}) {
    throw DimensionError("condition: override latent must be " + shape_str({h, h, C}));
  }

  std::vector<Conditioning> out;
  size_t next = 0;
  for (size_t b = 0; b < inputs.size(); ++b) {
    const SphericalPose target = validated(targets[b]);
    const RayBundle rays = generate_rays(spherical_to_pose(target, cfg.image_res), ray_near(target.radius),
                                         ray_far(target.radius), cfg.latent_res, cfg.samples_per_ray);
    std::vector<SphericalPose> poses;
    for (const auto& v : inputs[b]) poses.push_back(v.pose);
    const std::vector<TriPlane> mine =
        override_render ? std::vector<TriPlane>{} : std::vector<TriPlane>(planes.begin() + next, planes.begin() + next + poses.size());
    next += poses.size();

    Conditioning c;
    if (override_render) {
      c.rendered = *override_render;
      c.opacity = Tensor::full({h, h}, 1.0);
    } else {
      RenderedLatent r = render_target_latent(mine, poses, target, rays);
      c.rendered = r.grid;
      c.opacity = r.opacity;
    }
    if (inject) {
      std::vector<Tensor> per_view;
      std::vector<CameraEmbedding> emb;
      for (size_t i = 0; i < poses.size(); ++i) {
        per_view.push_back(override_render ? *override_render
                                           : render_target_latent({mine[i]}, {poses[i]}, target, rays).grid);
        emb.push_back(embed_relative(relative_pose(validated(poses[i]), target)));
      }
      const Tensor mixed = add(c.rendered, model.view_attention()(per_view, emb));
      c.injected = permute(reshape(mixed, {1, h, h, C}), {0, 3, 1, 2});
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

Conditioning condition(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target,
                       const std::optional<Tensor>& override_render) {
  return condition_impl(model, {inputs}, {target}, true, override_render).front();
}

std::vector<Conditioning> condition_batch(const Model& model, const std::vector<std::vector<PosedImage>>& inputs,
                                          const std::vector<SphericalPose>& targets) {
  return condition_impl(model, inputs, targets, true, std::nullopt);
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("train.stage must be 1 or 2");
  if (steps <= 0) throw ConfigError("train.steps must be > 0");
  if (batch < 1) throw ConfigError("train.batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(lambda_lift >= 0.0)) throw ConfigError("train.lambda_lift must be >= 0");
  if (base_steps < 0) throw ConfigError("train.base_steps must be >= 0");
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be > 0");
}

std::vector<PreparedSample> prepare_samples(const std::vector<MultiViewSample>& data, const ModelConfig& cfg) {
  if (data.empty()) throw ContractError("training needs a nonempty dataset");
  std::vector<PreparedSample> out;
  for (const auto& s : data) {
    check_views(s);
    PreparedSample p;
    p.sample = &s;
    for (const auto& v : s.views) {
      if (v.image.width != cfg.image_res || v.image.height != cfg.image_res) {
        throw DimensionError("scene " + s.scene_id + " has images of " + std::to_string(v.image.width) +
                             " px, model expects " + std::to_string(cfg.image_res));
      }
      p.lift_targets.push_back(lift_target(v.image, cfg.latent_res, cfg.feature_dim));
      p.diffusion_latents.push_back(diffusion_latent(v.image, cfg.latent_res));
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

struct Draw {
  const PreparedSample* sample;
  TripletSample triplet;
};

std::vector<Draw> draw_batch(const std::vector<PreparedSample>& data, int batch, std::mt19937_64& rng) {
  std::vector<Draw> draws;
  for (int b = 0; b < batch; ++b) {
    const PreparedSample& s = data[static_cast<size_t>(uniform_index(rng, static_cast<int>(data.size())))];
    draws.push_back({&s, sample_triplet(*s.sample, rng)});
  }
  return draws;
}

std::vector<PosedImage> posed_inputs(const MultiViewSample& s, const std::vector<int>& idx) {
  std::vector<PosedImage> v;
  for (int i : idx) v.push_back({s.views[static_cast<size_t>(i)].image, s.views[static_cast<size_t>(i)].pose});
  return v;
}

SphericalPose view_pose(const MultiViewSample& s, int i) { return s.views[static_cast<size_t>(i)].pose; }

Tensor batch_of(const std::vector<Tensor>& items) {
  std::vector<Tensor> parts;
  for (const auto& t : items) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    parts.push_back(reshape(t, s));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor mean_lift_loss(const std::vector<Conditioning>& conds, const std::vector<Draw>& draws) {
  std::vector<Tensor> pred, target;
  for (size_t b = 0; b < draws.size(); ++b) {
    pred.push_back(conds[b].rendered);
    target.push_back(draws[b].sample->lift_targets[static_cast<size_t>(draws[b].triplet.target)]);
  }
  // M = 1 supervised view per triplet; the batch mean equals lift_loss over the stacked views.
  return lift_loss(batch_of(pred), batch_of(target));
}

struct DiffusionBatch {
  DenoiserInput in;
  Tensor noise;
};

DiffusionBatch diffusion_batch(const Model& model, const std::vector<Draw>& draws, std::mt19937_64& rng) {
  const NoiseSchedule& sched = model.schedule();
  std::vector<Tensor> x0, ref;
  DiffusionBatch d;
  for (const auto& dr : draws) {
    const int primary = dr.triplet.inputs[0];
    x0.push_back(dr.sample->diffusion_latents[static_cast<size_t>(dr.triplet.target)]);
    ref.push_back(dr.sample->diffusion_latents[static_cast<size_t>(primary)]);
    d.in.t.push_back(uniform_index(rng, sched.T));
    d.in.camera.push_back(embed_relative(
        relative_pose(view_pose(*dr.sample->sample, primary), view_pose(*dr.sample->sample, dr.triplet.target))));
  }
  const Tensor x = batch_of(x0);
  d.noise = gaussian(x.shape(), rng);
  d.in.x_t = ddpm_forward(x, d.in.t, sched, d.noise);
  d.in.reference = batch_of(ref);
  return d;
}

std::vector<Conditioning> conditions_for(const Model& model, const std::vector<Draw>& draws, bool inject) {
  std::vector<std::vector<PosedImage>> inputs;
  std::vector<SphericalPose> targets;
  for (const auto& d : draws) {
    inputs.push_back(posed_inputs(*d.sample->sample, d.triplet.inputs));
    targets.push_back(view_pose(*d.sample->sample, d.triplet.target));
  }
  return condition_impl(model, inputs, targets, inject, std::nullopt);
}

Tensor injected_batch(const std::vector<Conditioning>& conds) {
  std::vector<Tensor> parts;
  for (const auto& c : conds) parts.push_back(c.injected);
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace

StepLosses stage1_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, uint64_t seed,
                         int64_t step) {
  auto rng = derived_rng(seed, static_cast<uint64_t>(step));
  const auto draws = draw_batch(data, batch, rng);
  StepLosses L;
  L.total = mean_lift_loss(conditions_for(model, draws, false), draws);
  L.lift = L.total.item();
  return L;
}

StepLosses stage2_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, double lambda_lift,
                         uint64_t seed, int64_t step, bool mask_diffusion) {
  auto rng = derived_rng(seed, static_cast<uint64_t>(step));
  const auto draws = draw_batch(data, batch, rng);
  const auto conds = conditions_for(model, draws, true);
  const DiffusionBatch d = diffusion_batch(model, draws, rng);
  const Tensor diff = mean_squared_error(model.denoiser().denoise(d.in, injected_batch(conds)), d.noise);
  const Tensor lift = mean_lift_loss(conds, draws);
  StepLosses L;
  L.lift = lift.item();
  L.diffusion = diff.item();
  if (mask_diffusion) {
    L.total = scale(lift, lambda_lift);
  } else {
    L.total = lambda_lift == 0.0 ? diff : add(diff, scale(lift, lambda_lift));
  }
  return L;
}

StepLosses base_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, uint64_t seed,
                       int64_t step) {
  auto rng = derived_rng(seed, static_cast<uint64_t>(step));
  const auto draws = draw_batch(data, batch, rng);
  const DiffusionBatch d = diffusion_batch(model, draws, rng);
  StepLosses L;
  L.total = mean_squared_error(model.denoiser().denoise(d.in), d.noise);
  L.diffusion = L.total.item();
  return L;
}

std::vector<Parameter> trainable_parameters(Model& model, const TrainConfig& cfg) {
  std::vector<Parameter> out;
  auto take = [&](const std::string& prefix) {
    for (auto& p : model.store().parameters_with_prefix(prefix)) out.push_back(p);
  };
  if (cfg.stage == 1) {
    take("lift.");
    return out;
  }
  take("cond.");
  if (cfg.continue_lifting) take("lift.");
  if (!cfg.effective_freeze()) take("base.");
  return out;
}

namespace {

void run_loop(Model& model, const std::vector<Parameter>& params, int steps, double lr, OptimizerState& opt,
              const std::function<StepLosses(int64_t)>& losses, const LogFn& log) {
  opt.lr = lr;
  while (opt.step < steps) {
    const int64_t step = opt.step;
    model.store().zero_grad();
    StepLosses L = losses(step);
    const double v = L.total.item();
    if (!std::isfinite(v)) throw TrainingError("loss is not finite at step " + std::to_string(step));
    L.total.backward();
    try {
      adam_step(params, opt);
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
    if (log) log({step, v, L.lift, L.diffusion});
  }
  model.store().zero_grad();
}

}  // namespace

void train_stage1(Model& model, const TrainConfig& cfg, const std::vector<MultiViewSample>& data, OptimizerState& opt,
                  const LogFn& log) {
  cfg.validate();
  const auto prepared = prepare_samples(data, model.config());
  TrainConfig c = cfg;
  c.stage = 1;
  const auto params = trainable_parameters(model, c);
  run_loop(model, params, cfg.steps, cfg.lr, opt,
           [&](int64_t step) { return stage1_losses(model, prepared, cfg.batch, cfg.seed, step); }, log);
}

void train_stage2(Model& model, const TrainConfig& cfg, const std::vector<MultiViewSample>& data, OptimizerState& opt,
                  const LogFn& log) {
  cfg.validate();
  const auto prepared = prepare_samples(data, model.config());
  TrainConfig c = cfg;
  c.stage = 2;
  const bool frozen = c.effective_freeze();
  model.denoiser().set_base_frozen(frozen);
  const auto params = trainable_parameters(model, c);
  const double lambda = c.effective_lambda();
  run_loop(model, params, cfg.steps, cfg.lr, opt,
           [&](int64_t step) { return stage2_losses(model, prepared, cfg.batch, lambda, cfg.seed, step); }, log);
  model.denoiser().set_base_frozen(false);
}

void train_base(Model& model, int steps, int batch, double lr, uint64_t seed, const std::vector<MultiViewSample>& data,
                OptimizerState& opt, const LogFn& log) {
  if (steps <= 0 || batch < 1) throw ConfigError("base pretraining needs steps > 0 and batch >= 1");
  const auto prepared = prepare_samples(data, model.config());
  model.denoiser().set_base_frozen(false);
  const auto params = model.store().parameters_with_prefix("base.");
  run_loop(model, params, steps, lr, opt,
           [&](int64_t step) { return base_losses(model, prepared, batch, seed, step); }, log);
}

double eval_lift_loss(const Model& model, const std::vector<MultiViewSample>& data, int per_scene, uint64_t seed) {
  NoGradGuard ng;
  const auto prepared = prepare_samples(data, model.config());
  double total = 0.0;
  for (size_t s = 0; s < prepared.size(); ++s) {
    auto rng = derived_rng(seed, s, 7);
    std::vector<Draw> draws;
    for (int i = 0; i < per_scene; ++i) draws.push_back({&prepared[s], sample_triplet(*prepared[s].sample, rng)});
    total += mean_lift_loss(conditions_for(model, draws, false), draws).item() * per_scene;
  }
  return total / static_cast<double>(prepared.size() * per_scene);
}

namespace {

struct HeldOutDenoising {
  double eps_mse = 0.0;
  double x0_mse = 0.0;
};

HeldOutDenoising held_out_denoising(const Model& model, const std::vector<MultiViewSample>& data, int per_scene,
                                    uint64_t seed, Injection injection) {
  NoGradGuard ng;
  const auto prepared = prepare_samples(data, model.config());
  const NoiseSchedule& sched = model.schedule();
  HeldOutDenoising out;
  for (size_t s = 0; s < prepared.size(); ++s) {
    auto rng = derived_rng(seed, s, 8);
    std::vector<Draw> draws;
    for (int i = 0; i < per_scene; ++i) draws.push_back({&prepared[s], sample_triplet(*prepared[s].sample, rng)});
    const DiffusionBatch d = diffusion_batch(model, draws, rng);
    Tensor eps;
    if (injection == Injection::kNone) {
      eps = model.denoiser().denoise(d.in);
    } else if (injection == Injection::kLifted) {
      eps = model.denoiser().denoise(d.in, injected_batch(conditions_for(model, draws, true)));
    } else {
      std::vector<Conditioning> conds;
      for (const auto& dr : draws) {
        conds.push_back(condition(model, posed_inputs(*dr.sample->sample, dr.triplet.inputs),
                                  view_pose(*dr.sample->sample, dr.triplet.target),
                                  dr.sample->lift_targets[static_cast<size_t>(dr.triplet.target)]));
      }
      eps = model.denoiser().denoise(d.in, injected_batch(conds));
    }
    out.eps_mse += mean_squared_error(eps, d.noise).item() * per_scene;
    const size_t per_item = static_cast<size_t>(eps.numel()) / draws.size();
    double x0_err = 0.0;
    for (size_t b = 0; b < draws.size(); ++b) {
      const double ab = sched.alpha_bars[static_cast<size_t>(d.in.t[b])];
      const Tensor& x0 = draws[b].sample->diffusion_latents[static_cast<size_t>(draws[b].triplet.target)];
      for (size_t i = 0; i < per_item; ++i) {
        const size_t k = b * per_item + i;
        const double x0_hat =
            std::clamp((d.in.x_t.data()[k] - std::sqrt(1.0 - ab) * eps.data()[k]) / std::sqrt(ab), -1.0, 1.0);
        const double e = x0_hat - x0.data()[i];
        x0_err += e * e;
      }
    }
    out.x0_mse += x0_err / static_cast<double>(per_item);
  }
  const double n = static_cast<double>(prepared.size() * per_scene);
  out.eps_mse /= n;
  out.x0_mse /= n;
  return out;
}

}  // namespace

double eval_diffusion_loss(const Model& model, const std::vector<MultiViewSample>& data, int per_scene, uint64_t seed,
                           bool conditioned) {
  return held_out_denoising(model, data, per_scene, seed, conditioned ? Injection::kLifted : Injection::kNone).eps_mse;
}

double eval_reconstruction_error(const Model& model, const std::vector<MultiViewSample>& data, int per_scene,
                                 uint64_t seed, Injection injection) {
  return held_out_denoising(model, data, per_scene, seed, injection).x0_mse;
}

Tensor synthesize_latent(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target_in,
                         const SynthOptions& opts, const std::optional<Tensor>& override_render) {
  NoGradGuard ng;
  if (inputs.empty()) throw ContractError("synthesize: at least one input view is required");
  const SphericalPose target = validated(target_in);
  const ModelConfig& cfg = model.config();
  const NoiseSchedule& sched = model.schedule();
  const int64_t h = cfg.latent_res;

  std::optional<Tensor> injected;
  if (opts.conditioned) injected = condition(model, inputs, target, override_render).injected;
  DenoiserInput in;
  in.reference = reshape(diffusion_latent(inputs[0].image, cfg.latent_res), {1, 3, h, h});
  in.camera = {embed_relative(relative_pose(validated(inputs[0].pose), target))};
  auto rng = derived_rng(opts.seed, 0, 11);
  Tensor x = gaussian({1, 3, h, h}, rng);

  auto predict_x0 = [&](const Tensor& xt, const Tensor& eps, int t) {
    const double ab = sched.alpha_bars[static_cast<size_t>(t)];
    std::vector<double> v(static_cast<size_t>(xt.numel()));
    for (size_t i = 0; i < v.size(); ++i) {
      v[i] = std::clamp((xt.data()[i] - std::sqrt(1.0 - ab) * eps.data()[i]) / std::sqrt(ab), -1.0, 1.0);
    }
    return v;
  };

  if (opts.sampler == Sampler::kDdim) {
    const int n = std::clamp(opts.steps, 1, sched.T);
    std::vector<int> ts;
    for (int i = n - 1; i >= 0; --i) {
      const int t = n == 1 ? sched.T - 1 : static_cast<int>(std::lround(static_cast<double>(sched.T - 1) * i / (n - 1)));
      if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    for (size_t k = 0; k < ts.size(); ++k) {
      const int t = ts[k];
      in.x_t = x;
      in.t = {t};
      const Tensor eps = model.denoiser().denoise(in, injected);
      const auto x0 = predict_x0(x, eps, t);
      const double ab_prev = k + 1 < ts.size() ? sched.alpha_bars[static_cast<size_t>(ts[k + 1])] : 1.0;
      const double ab = sched.alpha_bars[static_cast<size_t>(t)];
      std::vector<double> v(x0.size());
      for (size_t i = 0; i < v.size(); ++i) {
        const double e = (x.data()[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
        v[i] = std::sqrt(ab_prev) * x0[i] + std::sqrt(1.0 - ab_prev) * e;
      }
      x = Tensor::from(x.shape(), std::move(v));
    }
  } else {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int t = sched.T - 1; t >= 0; --t) {
      in.x_t = x;
      in.t = {t};
      const Tensor eps = model.denoiser().denoise(in, injected);
      const auto x0 = predict_x0(x, eps, t);
      const double ab = sched.alpha_bars[static_cast<size_t>(t)];
      const double ab_prev = t > 0 ? sched.alpha_bars[static_cast<size_t>(t - 1)] : 1.0;
      const double beta = sched.betas[static_cast<size_t>(t)];
      const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
      const double ct = std::sqrt(sched.alphas[static_cast<size_t>(t)]) * (1.0 - ab_prev) / (1.0 - ab);
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      std::vector<double> v(x0.size());
      for (size_t i = 0; i < v.size(); ++i) {
        v[i] = c0 * x0[i] + ct * x.data()[i] + (t > 0 ? sigma * dist(rng) : 0.0);
      }
      x = Tensor::from(x.shape(), std::move(v));
    }
  }
  return reshape(x, {3, h, h});
}

Image synthesize(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target,
                 const SynthOptions& opts) {
  return decode_diffusion_latent(synthesize_latent(model, inputs, target, opts), model.config().image_res);
}

ViewCountPlan view_count_plan(int n_views, int max_inputs, uint64_t seed) {
  if (n_views < 4 || n_views % 2 != 0) throw ConfigError("view-count protocol needs an even view count >= 4");
  if (max_inputs < 2 || max_inputs >= n_views) {
    throw ConfigError("view counts must lie in [2, " + std::to_string(n_views - 1) + "] for " + std::to_string(n_views) + " views");
  }
  auto rng = derived_rng(seed, 0, 9);
  const int k = uniform_index(rng, n_views);
  ViewCountPlan plan;
  plan.order = {k, (k + n_views / 2) % n_views};
  std::vector<int> rest;
  for (int j = 0; j < n_views; ++j)
    if (j != plan.order[0] && j != plan.order[1]) rest.push_back(j);
  std::shuffle(rest.begin(), rest.end(), rng);
  for (int j : rest) {
    if (static_cast<int>(plan.order.size()) < max_inputs) {
      plan.order.push_back(j);
    } else {
      plan.targets.push_back(j);
    }
  }
  std::sort(plan.targets.begin(), plan.targets.end());
  return plan;
}

EvalReport evaluate(const Model& model, const std::vector<MultiViewSample>& data, const EvalOptions& opts) {
  if (data.empty()) throw ContractError("evaluate: empty eval set");
  if (opts.view_counts.empty()) throw ConfigError("evaluate: no view counts");
  NoGradGuard ng;
  const ModelConfig& cfg = model.config();
  const int max_count = *std::max_element(opts.view_counts.begin(), opts.view_counts.end());

  struct Acc {
    int n = 0;
    double latent = 0, psnr = 0, ssim = 0;
  };
  std::vector<Acc> overall(opts.view_counts.size());
  std::vector<std::map<long, Acc>> by_elev(opts.view_counts.size());
  EvalReport report;
  report.scene_latent_psnr.assign(opts.view_counts.size(), std::vector<double>(data.size(), 0.0));

  for (size_t s = 0; s < data.size(); ++s) {
    const MultiViewSample& sample = data[s];
    const ViewCountPlan plan = view_count_plan(static_cast<int>(sample.views.size()), max_count, opts.seed + s);
    for (size_t c = 0; c < opts.view_counts.size(); ++c) {
      const std::vector<int> idx(plan.order.begin(), plan.order.begin() + opts.view_counts[c]);
      const auto inputs = posed_inputs(sample, idx);
      double scene_sum = 0.0;
      for (int t : plan.targets) {
        const PosedView& tv = sample.views[static_cast<size_t>(t)];
        const Conditioning cond = condition(model, inputs, tv.pose);
        const Tensor oracle = target_latent_oracle(tv.image, cfg.latent_res, 3);
        const Tensor rgb = slice(cond.rendered, 2, 0, 3);
        std::vector<double> pred(rgb.data().begin(), rgb.data().end());
        for (double& v : pred) v = std::clamp(v, 0.0, 1.0);
        Acc one;
        one.n = 1;
        one.latent = psnr(pred, oracle.data());
        if (opts.synthesize) {
          SynthOptions so = opts.synth;
          so.seed = opts.synth.seed * 1000003ULL + s * 101 + static_cast<uint64_t>(t);
          const Image img = synthesize(model, inputs, tv.pose, so);
          one.psnr = psnr(img, tv.image);
          one.ssim = ssim(img, tv.image);
        }
        scene_sum += one.latent;
        const long elev = std::lround(rad_to_deg(tv.pose.theta));
        for (Acc* a : {&overall[c], &by_elev[c][elev]}) {
          a->n += 1;
          a->latent += one.latent;
          a->psnr += one.psnr;
          a->ssim += one.ssim;
        }
      }
      report.scene_latent_psnr[c][s] = scene_sum / static_cast<double>(plan.targets.size());
    }
  }
  auto row = [](int count, std::optional<double> elev, const Acc& a) {
    EvalRow r;
    r.view_count = count;
    r.elevation_deg = elev;
    r.targets = a.n;
    r.latent_psnr = a.latent / a.n;
    r.psnr = a.psnr / a.n;
    r.ssim = a.ssim / a.n;
    return r;
  };
  for (size_t c = 0; c < opts.view_counts.size(); ++c) {
    report.rows.push_back(row(opts.view_counts[c], std::nullopt, overall[c]));
    for (const auto& [elev, a] : by_elev[c]) report.rows.push_back(row(opts.view_counts[c], static_cast<double>(elev), a));
  }
  return report;
}

}  // namespace mvcond
