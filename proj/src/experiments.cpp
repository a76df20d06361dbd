#include "mvcond/experiments.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "mvcond/errors.hpp"

namespace mvcond {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

}  // namespace

void AblationSettings::validate() const {
  model.validate();
  train.validate();
  if (base_steps < 0 || stage1_steps < 0 || stage2_steps < 0) throw ConfigError("ablation step counts must be >= 0");
  if (subset_scenes < 1) throw ConfigError("ablation subset_scenes must be >= 1");
  if (lift_eval_per_scene < 1 || diffusion_eval_per_scene < 1) throw ConfigError("ablation eval draws must be >= 1");
}

const VariantResult& AblationReport::at(const std::string& name) const {
  for (const auto& v : variants) {
    if (v.name == name) return v;
  }
  throw ContractError("no ablation variant named " + name);
}

AblationReport run_ablations(const AblationSettings& s, const std::vector<MultiViewSample>& train,
                             const std::vector<MultiViewSample>& heldout, const ProgressFn& progress) {
  s.validate();
  if (train.empty() || heldout.empty()) throw ContractError("run_ablations: empty training or held-out data");
  const auto say = [&](const std::string& line) {
    if (progress) progress(line);
  };
  const uint64_t seed = s.train.seed;
  const double lambda = s.train.lambda_lift;
  const std::vector<MultiViewSample> subset(train.begin(),
                                            train.begin() + std::min<size_t>(train.size(), static_cast<size_t>(s.subset_scenes)));
  AblationReport report;

  auto held_lift = [&](const Model& m) { return eval_lift_loss(m, heldout, s.lift_eval_per_scene, s.eval_seed); };
  auto held_diff = [&](const Model& m) {
    return eval_diffusion_loss(m, heldout, s.diffusion_eval_per_scene, s.eval_seed);
  };

  auto t0 = Clock::now();
  Model base(s.model, seed);
  {
    OptimizerState opt;
    train_base(base, s.base_steps, s.train.batch, s.train.base_lr, seed ^ 0x5bd1e995ULL, train, opt);
  }
  report.unconditioned_diffusion_loss =
      eval_diffusion_loss(base, heldout, s.diffusion_eval_per_scene, s.eval_seed, false);
  say(fmt("base denoiser: %.0f steps, held-out unconditioned loss %.5f (%.0f s)", s.base_steps,
          report.unconditioned_diffusion_loss, since(t0)));

  TrainConfig tc = s.train;
  tc.stage = 1;
  tc.steps = s.stage1_steps;

  auto stage1 = [&](const ModelConfig& mc, const std::string& name) {
    auto t = Clock::now();
    auto m = std::make_shared<Model>(mc, seed);
    OptimizerState opt;
    train_stage1(*m, tc, train, opt);
    VariantResult v{name, static_cast<int>(train.size())};
    v.lift_loss = held_lift(*m);
    v.seconds = since(t);
    say(name + fmt(" stage 1: held-out lift loss %.4f (%.0f s)", v.lift_loss, v.seconds));
    return std::make_pair(m, v);
  };

  auto [full, full_s1] = stage1(s.model, "full_stage1");
  ModelConfig no_vc = s.model;
  no_vc.view_conditioning = false;
  VariantResult no_view = stage1(no_vc, "no_view_conditioning").second;

  auto stage2 = [&](const std::string& name, const std::shared_ptr<Model>& lifted, Ablations ab,
                    const std::vector<MultiViewSample>& data) {
    auto t = Clock::now();
    auto m = std::make_shared<Model>(s.model, seed);
    m->copy_from(base, "base.");
    if (lifted) m->copy_from(*lifted, "lift.");
    TrainConfig c = s.train;
    c.stage = 2;
    c.steps = s.stage2_steps;
    c.ablations = ab;
    OptimizerState opt;
    train_stage2(*m, c, data, opt);
    VariantResult v{name, static_cast<int>(data.size())};
    v.lift_loss = held_lift(*m);
    v.diffusion_loss = held_diff(*m);
    v.objective = v.diffusion_loss + lambda * v.lift_loss;
    v.seconds = since(t);
    say(name + fmt(" stage 2: held-out diffusion %.5f, lift %.4f", v.diffusion_loss, v.lift_loss) +
        fmt(" (%.0f s)", v.seconds));
    return std::make_pair(m, v);
  };

  report.variants.push_back(full_s1);
  report.variants.push_back(no_view);
  auto [full_model, full_v] = stage2("full", full, {}, train);
  report.variants.push_back(full_v);
  Ablations nr;
  nr.no_recon_loss = true;
  report.variants.push_back(stage2("no_recon_loss", nullptr, nr, train).second);
  report.variants.push_back(stage2("frozen_base_subset", full, {}, subset).second);
  Ablations tu;
  tu.trainable_unet = true;
  report.variants.push_back(stage2("trainable_base_subset", full, tu, subset).second);

  report.oracle_reconstruction =
      eval_reconstruction_error(*full_model, heldout, s.diffusion_eval_per_scene, s.eval_seed, Injection::kOracle);
  report.lifted_reconstruction =
      eval_reconstruction_error(*full_model, heldout, s.diffusion_eval_per_scene, s.eval_seed, Injection::kLifted);
  say(fmt("reconstruction error: oracle latent %.5f, lifted latent %.5f", report.oracle_reconstruction,
          report.lifted_reconstruction));
  report.full_model = full_model;
  return report;
}

nlohmann::json ablation_to_json(const AblationReport& r) {
  using nlohmann::json;
  auto num = [](double x) { return std::isnan(x) ? json(nullptr) : json(x); };
  json variants = json::array();
  for (const auto& v : r.variants) {
    variants.push_back({{"name", v.name},
                        {"train_scenes", v.train_scenes},
                        {"lift_loss", num(v.lift_loss)},
                        {"diffusion_loss", num(v.diffusion_loss)},
                        {"objective", num(v.objective)},
                        {"seconds", v.seconds}});
  }
  return {{"variants", variants},
          {"unconditioned_diffusion_loss", r.unconditioned_diffusion_loss},
          {"oracle_reconstruction", r.oracle_reconstruction},
          {"lifted_reconstruction", r.lifted_reconstruction}};
}

}  // namespace mvcond
