#pragma once

// Paired ablation runs on shared data, seeds and held-out draws.
//
// Variants:
//   full_stage1           stage 1
//   no_view_conditioning  stage 1 with the relative-pose embedding removed
//   full                  pretrained base, full_stage1 lifting, stage 2 (lambda from the config)
//   no_recon_loss         stage 2 with lambda = 0 and no stage 1
//   frozen_base_subset    full stage 2 on a small scene subset, base frozen
//   trainable_base_subset same, base denoiser trained as well

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvcond/training.hpp"

namespace mvcond {

struct AblationSettings {
  ModelConfig model;
  TrainConfig train;  // batch, lr, lambda_lift, base_lr, seed
  int base_steps = 2000;
  int stage1_steps = 3000;
  int stage2_steps = 800;
  int subset_scenes = 4;
  int lift_eval_per_scene = 4;
  int diffusion_eval_per_scene = 2;
  uint64_t eval_seed = 99;

  void validate() const;
};

struct VariantResult {
  std::string name;
  int train_scenes = 0;
  double lift_loss = std::numeric_limits<double>::quiet_NaN();       // held-out stage-1 loss
  double diffusion_loss = std::numeric_limits<double>::quiet_NaN();  // held-out conditioned denoising loss
  double objective = std::numeric_limits<double>::quiet_NaN();       // diffusion_loss + lambda * lift_loss
  double seconds = 0.0;
};

struct AblationReport {
  std::vector<VariantResult> variants;
  double unconditioned_diffusion_loss = 0.0;  // pretrained base alone
  double oracle_reconstruction = 0.0;         // full model, oracle target latent injected
  double lifted_reconstruction = 0.0;         // full model, lifted latent injected
  std::shared_ptr<Model> full_model;

  const VariantResult& at(const std::string& name) const;
};

using ProgressFn = std::function<void(const std::string&)>;

AblationReport run_ablations(const AblationSettings& settings, const std::vector<MultiViewSample>& train,
                             const std::vector<MultiViewSample>& heldout, const ProgressFn& progress = {});

nlohmann::json ablation_to_json(const AblationReport& report);

}  // namespace mvcond
