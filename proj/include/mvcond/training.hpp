#pragma once

// Model assembly, the discrete diffusion schedule, triplet sampling, the two
// training stages and inference.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mvcond/camera.hpp"
#include "mvcond/conditioning.hpp"
#include "mvcond/fusion.hpp"
#include "mvcond/image.hpp"
#include "mvcond/lifting.hpp"
#include "mvcond/module.hpp"
#include "mvcond/optim.hpp"
#include "mvcond/scenes.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule linear(int T, double beta_start, double beta_end);
  // Linear betas whose endpoints 1e-4 and 0.02 (defined for 1000 steps) are
  // scaled by 1000 / T, so a short chain still ends near pure noise.
  static NoiseSchedule scaled_linear(int T);
  void validate() const;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, one timestep per leading-axis item.
Tensor ddpm_forward(const Tensor& x0, const std::vector<int>& t, const NoiseSchedule& schedule, const Tensor& noise);
Tensor ddpm_forward(const Tensor& x0, int t, const NoiseSchedule& schedule, const Tensor& noise);

// Seeded engine for a (seed, step, stream) triple.
std::mt19937_64 derived_rng(uint64_t seed, uint64_t step, uint64_t stream = 0);

struct TripletSample {
  std::vector<int> inputs;  // primary, opposing, optional random third
  int target = 0;
};

TripletSample sample_triplet(const MultiViewSample& sample, std::mt19937_64& rng);

// (1/M) sum_i ||pred_i - target_i||^2 over the leading axis of size M.
Tensor lift_loss(const Tensor& pred, const Tensor& target);

struct ModelConfig {
  int image_res = 64;
  int latent_res = 16;     // diffusion latent and rendered latent
  int triplane_res = 16;   // image_res / 4
  int feature_dim = 16;    // F
  int latent_dim = 32;
  int token_dim = 32;
  int blocks = 2;
  int channels = 32;
  int window = 4;
  int shift = 2;
  int timesteps = 100;
  int samples_per_ray = 32;
  bool view_conditioning = true;

  void validate() const;
  LiftingConfig lifting() const;
  DenoiserConfig denoiser() const;
};

// Every learned module in one parameter store, initialized from one seed.
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const LiftingNet& lifting() const { return *lift_; }
  ToyDenoiser& denoiser() { return *denoiser_; }
  const ToyDenoiser& denoiser() const { return *denoiser_; }
  const ViewAwareAttention& view_attention() const { return view_attn_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  // Copies values for every stored name that matches; returns the names copied.
  std::vector<std::string> copy_from(const Model& other, const std::string& prefix = "");

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  std::unique_ptr<LiftingNet> lift_;
  std::unique_ptr<ToyDenoiser> denoiser_;
  ViewAwareAttention view_attn_;
  NoiseSchedule schedule_;
};

struct PosedImage {
  Image image;
  SphericalPose pose;
};

// Near/far bounds that cover the object cube from a camera at `radius`.
double ray_near(double radius);
double ray_far(double radius);

struct Conditioning {
  Tensor rendered;   // fused render [h, w, F-1]
  Tensor opacity;    // [h, w]
  Tensor injected;   // [1, F-1, h, w]: fused render plus view-aware attention over per-view renders
};

// Lifts every input view toward `target`, fuses into the target view, and
// builds the latent handed to the denoiser. `override_render` replaces the
// fused render (and every per-view render) with a given [h, w, F-1] latent.
Conditioning condition(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target,
                       const std::optional<Tensor>& override_render = std::nullopt);
std::vector<Conditioning> condition_batch(const Model& model, const std::vector<std::vector<PosedImage>>& inputs,
                                          const std::vector<SphericalPose>& targets);

// Diffusion latent: RGB oracle latent mapped to [-1, 1], channels first [3, h, w].
Tensor diffusion_latent(const Image& img, int latent_res);
Image decode_diffusion_latent(const Tensor& latent, int resolution);
// Stage-1 target: oracle latent zero-padded to F - 1 channels, [h, w, F-1].
Tensor lift_target(const Image& img, int latent_res, int feature_dim);

struct Ablations {
  bool no_recon_loss = false;
  bool no_view_conditioning = false;
  bool trainable_unet = false;
};

struct TrainConfig {
  int stage = 1;
  int steps = 2000;
  int batch = 1;
  double lr = 1e-4;
  double lambda_lift = 1.0;
  bool freeze_base = true;
  bool continue_lifting = true;  // stage 2 keeps optimizing the lifting module
  Ablations ablations;
  uint64_t seed = 0;
  int base_steps = 0;   // stage 2 pretrains the base denoiser first when > 0
  double base_lr = 1e-4;

  void validate() const;
  double effective_lambda() const { return ablations.no_recon_loss ? 0.0 : lambda_lift; }
  bool effective_freeze() const { return freeze_base && !ablations.trainable_unet; }
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lift_loss = 0.0;
  double diffusion_loss = 0.0;
};

using LogFn = std::function<void(const TrainLogEntry&)>;

// Views with their training targets precomputed.
struct PreparedSample {
  const MultiViewSample* sample = nullptr;
  std::vector<Tensor> lift_targets;       // [h, w, F-1]
  std::vector<Tensor> diffusion_latents;  // [3, h, w]
};

std::vector<PreparedSample> prepare_samples(const std::vector<MultiViewSample>& data, const ModelConfig& cfg);

struct StepLosses {
  Tensor total;
  double lift = 0.0;
  double diffusion = 0.0;
};

// Losses for one minibatch, drawn from derived_rng(seed, step).
StepLosses stage1_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, uint64_t seed,
                         int64_t step);
StepLosses stage2_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, double lambda_lift,
                         uint64_t seed, int64_t step, bool mask_diffusion = false);
StepLosses base_losses(const Model& model, const std::vector<PreparedSample>& data, int batch, uint64_t seed,
                       int64_t step);

// Runs optimizer steps opt.step .. steps-1 (so a restored optimizer resumes).
// Throws TrainingError naming the step when the loss is not finite.
void train_stage1(Model& model, const TrainConfig& cfg, const std::vector<MultiViewSample>& data,
                  OptimizerState& opt, const LogFn& log = {});
void train_stage2(Model& model, const TrainConfig& cfg, const std::vector<MultiViewSample>& data,
                  OptimizerState& opt, const LogFn& log = {});
// Unconditioned epsilon-prediction training of the base denoiser only.
void train_base(Model& model, int steps, int batch, double lr, uint64_t seed, const std::vector<MultiViewSample>& data,
                OptimizerState& opt, const LogFn& log = {});

// Parameter names trained by a stage under a config.
std::vector<Parameter> trainable_parameters(Model& model, const TrainConfig& cfg);

// Held-out losses on triplets and noise drawn from `seed`, identical across models.
double eval_lift_loss(const Model& model, const std::vector<MultiViewSample>& data, int per_scene, uint64_t seed);
double eval_diffusion_loss(const Model& model, const std::vector<MultiViewSample>& data, int per_scene, uint64_t seed,
                           bool conditioned = true);

// What the denoiser sees as conditioning: nothing, the lifted and fused latent,
// or the oracle latent of the target view.
enum class Injection { kNone, kLifted, kOracle };

// Mean squared error of the one-step target estimate x0 = (x_t - sqrt(1 - abar) eps) / sqrt(abar),
// clipped to [-1, 1], against the target diffusion latent; same draws as eval_diffusion_loss.
double eval_reconstruction_error(const Model& model, const std::vector<MultiViewSample>& data, int per_scene,
                                 uint64_t seed, Injection injection);

enum class Sampler { kDdpm, kDdim };

struct SynthOptions {
  Sampler sampler = Sampler::kDdim;
  int steps = 20;  // DDIM steps; DDPM always walks the full chain
  uint64_t seed = 0;
  bool conditioned = true;
};

// Reverse diffusion from pure noise to a diffusion latent [3, h, w].
Tensor synthesize_latent(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target,
                         const SynthOptions& opts, const std::optional<Tensor>& override_render = std::nullopt);
Image synthesize(const Model& model, const std::vector<PosedImage>& inputs, const SphericalPose& target,
                 const SynthOptions& opts);

// Nested input sets for the view-count protocol: the first two views are
// opposing, the rest follow a seeded shuffle; targets are the views never used
// as inputs at the largest count.
struct ViewCountPlan {
  std::vector<int> order;    // input order
  std::vector<int> targets;
};
ViewCountPlan view_count_plan(int n_views, int max_inputs, uint64_t seed);

struct EvalRow {
  int view_count = 0;
  std::optional<double> elevation_deg;  // empty for the all-elevation row
  int targets = 0;
  double latent_psnr = 0.0;  // fused render vs oracle latent
  double psnr = 0.0;         // synthesized image vs ground truth
  double ssim = 0.0;
};

struct EvalOptions {
  std::vector<int> view_counts{2, 4, 6};
  SynthOptions synth;
  bool synthesize = true;
  uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  // scene_latent_psnr[c][s]: mean fused-render PSNR of scene s at view_counts[c].
  std::vector<std::vector<double>> scene_latent_psnr;
};

EvalReport evaluate(const Model& model, const std::vector<MultiViewSample>& data, const EvalOptions& opts);

}  // namespace mvcond
