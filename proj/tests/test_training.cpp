#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "mvcond/errors.hpp"
#include "mvcond/experiments.hpp"
#include "mvcond/ops.hpp"
#include "mvcond/training.hpp"

using namespace mvcond;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_res = 16;
  c.triplane_res = 4;
  c.latent_res = 8;
  c.feature_dim = 4;
  c.latent_dim = 8;
  c.token_dim = 8;
  c.blocks = 1;
  c.channels = 8;
  c.window = 2;
  c.shift = 1;
  c.timesteps = 10;
  c.samples_per_ray = 8;
  return c;
}

std::vector<MultiViewSample> tiny_data(int scenes, int views = 8, uint64_t seed = 3) {
  DatasetOptions d;
  d.num_scenes = scenes;
  d.n_views = views;
  d.resolution = 16;
  d.seed = seed;
  return generate_samples(d);
}

MultiViewSample fake_sample(int n) {
  MultiViewSample s;
  s.scene_id = "fake";
  for (int j = 0; j < n; ++j) {
    PosedView v;
    v.pose = SphericalPose::from_degrees(0.0, 360.0 * j / n, 2.7);
    s.views.push_back(v);
  }
  return s;
}

bool same_values(const Model& a, const Model& b, const std::string& prefix) {
  const auto pa = a.store().parameters_with_prefix(prefix);
  const auto pb = b.store().parameters_with_prefix(prefix);
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    auto x = pa[i].tensor.data();
    auto y = pb[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("noise schedule invariants") {
  for (int T : {10, 100, 1000}) {
    const NoiseSchedule s = NoiseSchedule::scaled_linear(T);
    REQUIRE(s.T == T);
    CHECK(s.alpha_bars[0] > 0.95);
    for (int t = 0; t < T; ++t) {
      CHECK(s.betas[t] > 0.0);
      CHECK(s.betas[t] < 1.0);
      CHECK(s.alphas[t] == doctest::Approx(1.0 - s.betas[t]));
      if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
    CHECK(s.alpha_bars.back() < 1e-3);
  }
  const NoiseSchedule k = NoiseSchedule::linear(1000, 1e-4, 0.02);
  CHECK(k.betas.front() == doctest::Approx(1e-4));
  CHECK(k.betas.back() == doctest::Approx(0.02));
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.5), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.1, 1.5), ConfigError);
}

TEST_CASE("ddpm_forward endpoints and variance") {
  NoiseSchedule s;
  s.T = 2;
  s.betas = {1e-9, 0.5};
  s.alphas = {1.0, 0.5};
  s.alpha_bars = {1.0, 0.0};
  const Tensor x0 = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor eps = Tensor::from({2, 3}, {-1, 0.5, 2, 0, 7, -3});
  const Tensor a = ddpm_forward(x0, std::vector<int>{0, 0}, s, eps);
  const Tensor b = ddpm_forward(x0, std::vector<int>{1, 1}, s, eps);
  for (int i = 0; i < 6; ++i) {
    CHECK(a.data()[i] == x0.data()[i]);
    CHECK(b.data()[i] == eps.data()[i]);
  }
  CHECK_THROWS_AS(ddpm_forward(x0, std::vector<int>{0, 2}, s, eps), BoundsError);
  CHECK_THROWS_AS(ddpm_forward(x0, -1, s, eps), BoundsError);

  const NoiseSchedule sched = NoiseSchedule::scaled_linear(100);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.5);
  const int t = 37, n = 20000;
  const Tensor x = Tensor::full({1}, 0.8);
  double s1 = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double v = ddpm_forward(x, t, sched, Tensor::full({1}, nd(rng))).item();
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  const double expect = (1.0 - sched.alpha_bars[t]) * 1.5 * 1.5;
  CHECK(std::abs(var - expect) / expect < 0.05);
  CHECK(mean == doctest::Approx(std::sqrt(sched.alpha_bars[t]) * 0.8).epsilon(0.02));
}

TEST_CASE("sample_triplet structure and statistics") {
  const MultiViewSample s = fake_sample(16);
  std::mt19937_64 rng(11);
  int third = 0, saw_k3 = 0;
  std::vector<int> primary_counts(16, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const TripletSample t = sample_triplet(s, rng);
    REQUIRE(t.inputs.size() >= 2);
    REQUIRE(t.inputs.size() <= 3);
    CHECK(t.inputs[1] == (t.inputs[0] + 8) % 16);
    if (t.inputs[0] == 3) {
      ++saw_k3;
      CHECK(t.inputs[1] == 11);
    }
    primary_counts[static_cast<size_t>(t.inputs[0])]++;
    const std::set<int> in(t.inputs.begin(), t.inputs.end());
    CHECK(in.size() == t.inputs.size());
    CHECK(in.count(t.target) == 0);
    if (t.inputs.size() == 3) ++third;
  }
  CHECK(saw_k3 > 0);
  CHECK(std::abs(third / static_cast<double>(draws) - 0.5) < 0.02);
  for (int c : primary_counts) CHECK(std::abs(c - draws / 16.0) < 0.25 * draws / 16.0);

  std::mt19937_64 r1(4), r2(4);
  for (int i = 0; i < 50; ++i) {
    const TripletSample a = sample_triplet(s, r1), b = sample_triplet(s, r2);
    CHECK(a.inputs == b.inputs);
    CHECK(a.target == b.target);
  }

  std::mt19937_64 r(0);
  CHECK_THROWS_AS(sample_triplet(fake_sample(7), r), ConfigError);
  CHECK_THROWS_AS(sample_triplet(fake_sample(2), r), ContractError);
  MultiViewSample uneven = fake_sample(8);
  uneven.views[3].pose.phi += 0.1;
  CHECK_THROWS_AS(sample_triplet(uneven, r), ContractError);
}

TEST_CASE("lift_loss arithmetic") {
  const Tensor z = Tensor::zeros({1, 2, 2});
  CHECK(lift_loss(z, z).item() == 0.0);
  CHECK(lift_loss(Tensor::full({1, 2, 2}, 0.5), z).item() == doctest::Approx(1.0).epsilon(1e-15));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> a(24), b(24), b2(24);
  for (size_t i = 0; i < 24; ++i) {
    a[i] = u(rng);
    b[i] = u(rng);
    b2[i] = a[i] + 2.0 * (b[i] - a[i]);
  }
  const Tensor ta = Tensor::from({3, 2, 4}, a);
  const double l1 = lift_loss(ta, Tensor::from({3, 2, 4}, b)).item();
  const double l2 = lift_loss(ta, Tensor::from({3, 2, 4}, b2)).item();
  CHECK(l2 == doctest::Approx(4.0 * l1).epsilon(1e-12));
  double manual = 0;
  for (size_t i = 0; i < 24; ++i) manual += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(l1 == doctest::Approx(manual / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(lift_loss(ta, Tensor::zeros({3, 4, 2})), DimensionError);
}

TEST_CASE("model config validation") {
  ModelConfig c = tiny_model();
  CHECK_NOTHROW(c.validate());
  c.triplane_res = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_model();
  c.feature_dim = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_model();
  c.window = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.steps = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.lambda_lift = -1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = {};
  t.ablations.no_recon_loss = true;
  CHECK(t.effective_lambda() == 0.0);
  t.ablations.trainable_unet = true;
  CHECK_FALSE(t.effective_freeze());
}

TEST_CASE("diffusion latent round trip and lift targets") {
  const auto data = tiny_data(1);
  const Image& img = data[0].views[0].image;
  const Tensor z = diffusion_latent(img, 8);
  CHECK(z.shape() == Shape{3, 8, 8});
  for (double v : z.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  const Image back = decode_diffusion_latent(z, 16);
  const Tensor again = diffusion_latent(back, 8);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(again.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-12));
  const Tensor t = lift_target(img, 8, 6);
  CHECK(t.shape() == Shape{8, 8, 5});
  CHECK(t.at({2, 3, 4}) == 0.0);
}

TEST_CASE("loss decomposition and zero-init equivalence") {
  const auto data = tiny_data(2);
  const Model m(tiny_model(), 1);
  const auto prepared = prepare_samples(data, m.config());
  for (int64_t step : {0, 3, 9}) {
    const StepLosses none = stage2_losses(m, prepared, 2, 0.0, 5, step);
    CHECK(none.total.item() == none.diffusion);
    const StepLosses masked = stage2_losses(m, prepared, 2, 0.7, 5, step, true);
    CHECK(masked.total.item() == 0.7 * masked.lift);
    const StepLosses both = stage2_losses(m, prepared, 2, 0.7, 5, step);
    CHECK(both.total.item() == doctest::Approx(both.diffusion + 0.7 * both.lift).epsilon(1e-14));
    const StepLosses base = base_losses(m, prepared, 2, 5, step);
    CHECK(base.diffusion == both.diffusion);
  }
}

TEST_CASE("conditioning shapes and override") {
  const auto data = tiny_data(1);
  const Model m(tiny_model(), 2);
  std::vector<PosedImage> inputs;
  for (int i : {0, 4, 2}) inputs.push_back({data[0].views[i].image, data[0].views[i].pose});
  const Conditioning c = condition(m, inputs, data[0].views[1].pose);
  CHECK(c.rendered.shape() == Shape{8, 8, 3});
  CHECK(c.opacity.shape() == Shape{8, 8});
  CHECK(c.injected.shape() == Shape{1, 3, 8, 8});
  // View-aware attention starts with a zero output projection.
  for (int64_t y = 0; y < 8; ++y)
    for (int64_t x = 0; x < 8; ++x)
      for (int64_t ch = 0; ch < 3; ++ch) CHECK(c.injected.at({0, ch, y, x}) == c.rendered.at({y, x, ch}));
  const Tensor probe = Tensor::full({8, 8, 3}, 0.25);
  const Conditioning o = condition(m, inputs, data[0].views[1].pose, probe);
  CHECK(o.rendered.at({1, 1, 1}) == 0.25);
  CHECK_THROWS_AS(condition(m, inputs, data[0].views[1].pose, Tensor::zeros({8, 8, 2})), DimensionError);
  CHECK_THROWS_AS(condition(m, {}, data[0].views[1].pose), ContractError);
  CHECK_THROWS_AS(condition(m, inputs, SphericalPose{kPi / 2, 0.0, 2.7}), PoleError);
}

TEST_CASE("stage 1 is deterministic, resumable and reduces the loss") {
  const auto data = tiny_data(2);
  TrainConfig tc;
  tc.steps = 12;
  tc.lr = 3e-3;
  tc.seed = 9;
  Model a(tiny_model(), 4), b(tiny_model(), 4), c(tiny_model(), 4);
  const double before = eval_lift_loss(a, data, 2, 1);
  OptimizerState oa, ob, oc;
  std::vector<TrainLogEntry> la, lb;
  train_stage1(a, tc, data, oa, [&](const TrainLogEntry& e) { la.push_back(e); });
  train_stage1(b, tc, data, ob, [&](const TrainLogEntry& e) { lb.push_back(e); });
  CHECK(same_values(a, b, ""));
  REQUIRE(la.size() == 12);
  for (size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i].step == static_cast<int64_t>(i));
    CHECK(la[i].loss == lb[i].loss);
    CHECK(la[i].lift_loss == la[i].loss);
  }
  CHECK(eval_lift_loss(a, data, 2, 1) < before);

  TrainConfig half = tc;
  half.steps = 5;
  train_stage1(c, half, data, oc);
  CHECK(oc.step == 5);
  train_stage1(c, tc, data, oc);
  CHECK(same_values(a, c, ""));
  // Denoiser parameters are untouched by stage 1.
  const Model fresh(tiny_model(), 4);
  CHECK(same_values(a, fresh, "base."));
  CHECK(same_values(a, fresh, "cond."));
  CHECK_FALSE(same_values(a, fresh, "lift."));
}

TEST_CASE("stage 2 keeps a frozen base bit-identical") {
  const auto data = tiny_data(2);
  TrainConfig tc;
  tc.stage = 2;
  tc.steps = 4;
  tc.batch = 2;
  tc.lr = 1e-3;
  Model m(tiny_model(), 6);
  const Model fresh(tiny_model(), 6);
  OptimizerState opt;
  std::vector<TrainLogEntry> log;
  train_stage2(m, tc, data, opt, [&](const TrainLogEntry& e) { log.push_back(e); });
  CHECK(same_values(m, fresh, "base."));
  CHECK_FALSE(same_values(m, fresh, "cond."));
  CHECK_FALSE(same_values(m, fresh, "lift."));
  CHECK_FALSE(m.denoiser().base_frozen());
  for (const auto& e : log) CHECK(e.loss == doctest::Approx(e.diffusion_loss + e.lift_loss).epsilon(1e-12));

  TrainConfig injection_only = tc;
  injection_only.continue_lifting = false;
  Model only(tiny_model(), 6);
  OptimizerState o2;
  train_stage2(only, injection_only, data, o2);
  CHECK(same_values(only, fresh, "lift."));
  CHECK(same_values(only, fresh, "base."));

  TrainConfig unfrozen = tc;
  unfrozen.ablations.trainable_unet = true;
  Model u(tiny_model(), 6);
  OptimizerState o3;
  train_stage2(u, unfrozen, data, o3);
  CHECK_FALSE(same_values(u, fresh, "base."));
}

TEST_CASE("non-finite loss names the step") {
  CheckedModeGuard off(false);
  const auto data = tiny_data(1);
  Model m(tiny_model(), 7);
  for (double& v : m.store().get("lift.proj.head.bias").mutable_data()) v = std::nan("");
  TrainConfig tc;
  tc.steps = 3;
  OptimizerState opt;
  try {
    train_stage1(m, tc, data, opt);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("base pretraining only moves base parameters") {
  const auto data = tiny_data(2);
  Model m(tiny_model(), 8);
  const Model fresh(tiny_model(), 8);
  const double before = eval_diffusion_loss(m, data, 2, 3, false);
  OptimizerState opt;
  train_base(m, 30, 2, 3e-3, 1, data, opt);
  CHECK_FALSE(same_values(m, fresh, "base."));
  CHECK(same_values(m, fresh, "cond."));
  CHECK(same_values(m, fresh, "lift."));
  CHECK(eval_diffusion_loss(m, data, 2, 3, false) < before);
}

TEST_CASE("synthesis is deterministic with the configured shape") {
  const auto data = tiny_data(1);
  const Model m(tiny_model(), 10);
  std::vector<PosedImage> inputs;
  for (int i : {0, 4}) inputs.push_back({data[0].views[i].image, data[0].views[i].pose});
  for (Sampler s : {Sampler::kDdim, Sampler::kDdpm}) {
    SynthOptions o;
    o.sampler = s;
    o.steps = 5;
    o.seed = 3;
    const Image a = synthesize(m, inputs, data[0].views[2].pose, o);
    const Image b = synthesize(m, inputs, data[0].views[2].pose, o);
    CHECK(a.width == 16);
    CHECK(a.height == 16);
    CHECK(a.pixels == b.pixels);
    o.seed = 4;
    CHECK(synthesize(m, inputs, data[0].views[2].pose, o).pixels != a.pixels);
  }
  std::vector<PosedImage> six;
  for (int i = 0; i < 6; ++i) six.push_back({data[0].views[i].image, data[0].views[i].pose});
  CHECK_NOTHROW(synthesize(m, six, data[0].views[7].pose, SynthOptions{}));
  CHECK_THROWS_AS(synthesize(m, {}, data[0].views[7].pose, SynthOptions{}), ContractError);
}

TEST_CASE("view-count plan is nested with disjoint targets") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const ViewCountPlan p = view_count_plan(16, 6, seed);
    REQUIRE(p.order.size() == 6);
    CHECK(p.order[1] == (p.order[0] + 8) % 16);
    CHECK(p.targets.size() == 10);
    std::set<int> all(p.order.begin(), p.order.end());
    for (int t : p.targets) CHECK(all.insert(t).second);
    CHECK(all.size() == 16);
  }
  CHECK(view_count_plan(8, 6, 1).order == view_count_plan(8, 6, 1).order);
  CHECK_THROWS_AS(view_count_plan(8, 8, 1), ConfigError);
  CHECK_THROWS_AS(view_count_plan(7, 4, 1), ConfigError);
}

TEST_CASE("evaluate reports per count and per elevation") {
  const auto data = tiny_data(3);
  const Model m(tiny_model(), 12);
  EvalOptions o;
  o.view_counts = {2, 4};
  o.synthesize = false;
  const EvalReport r = evaluate(m, data, o);
  int overall = 0;
  std::set<double> elevations;
  for (const auto& row : r.rows) {
    if (!row.elevation_deg) {
      ++overall;
      CHECK(row.targets == 3 * 4);
    } else {
      elevations.insert(*row.elevation_deg);
    }
    CHECK(std::isfinite(row.latent_psnr));
  }
  CHECK(overall == 2);
  CHECK(elevations == std::set<double>{0.0, 15.0, 30.0});
  CHECK(r.scene_latent_psnr.size() == 2);
  CHECK(r.scene_latent_psnr[0].size() == 3);
  const EvalReport again = evaluate(m, data, o);
  CHECK(again.scene_latent_psnr == r.scene_latent_psnr);
  CHECK_THROWS_AS(evaluate(m, {}, o), ContractError);
}

TEST_CASE("reconstruction error: oracle and lifted injections share draws") {
  const auto data = tiny_data(3);
  Model m(tiny_model(), 4);
  // Zero-initialized conditioning ignores what is injected.
  const double none = eval_reconstruction_error(m, data, 2, 5, Injection::kNone);
  CHECK(eval_reconstruction_error(m, data, 2, 5, Injection::kLifted) == none);
  CHECK(eval_reconstruction_error(m, data, 2, 5, Injection::kOracle) == none);
  CHECK(none > 0.0);
  CHECK(std::isfinite(none));
}

TEST_CASE("run_ablations: variants, pairing and validation") {
  const auto train = tiny_data(4), held = tiny_data(2, 8, 91);
  AblationSettings s;
  s.model = tiny_model();
  s.base_steps = 2;
  s.stage1_steps = 2;
  s.stage2_steps = 2;
  s.subset_scenes = 2;
  s.lift_eval_per_scene = 1;
  s.diffusion_eval_per_scene = 1;
  std::vector<std::string> lines;
  const AblationReport r = run_ablations(s, train, held, [&](const std::string& l) { lines.push_back(l); });
  std::vector<std::string> names;
  for (const auto& v : r.variants) names.push_back(v.name);
  CHECK(names == std::vector<std::string>{"full_stage1", "no_view_conditioning", "full", "no_recon_loss",
                                          "frozen_base_subset", "trainable_base_subset"});
  CHECK(std::isnan(r.at("full_stage1").diffusion_loss));
  CHECK(r.at("frozen_base_subset").train_scenes == 2);
  const auto& full = r.at("full");
  CHECK(full.objective == doctest::Approx(full.diffusion_loss + full.lift_loss));
  CHECK(r.full_model != nullptr);
  CHECK(lines.size() == 8);
  const auto j = ablation_to_json(r);
  CHECK(j["variants"].size() == 6);
  CHECK(j["variants"][0]["diffusion_loss"].is_null());
  CHECK_THROWS_AS(r.at("missing"), ContractError);

  s.stage1_steps = -1;
  CHECK_THROWS_AS(run_ablations(s, train, held), ConfigError);
  s.stage1_steps = 1;
  CHECK_THROWS_AS(run_ablations(s, train, {}), ContractError);
}
