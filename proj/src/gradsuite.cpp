#include "mvcond/gradsuite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "mvcond/conditioning.hpp"
#include "mvcond/fusion.hpp"
#include "mvcond/gradcheck.hpp"
#include "mvcond/ops.hpp"
#include "mvcond/training.hpp"

namespace mvcond {

bool GradSuiteResult::passed() const {
  for (const auto& c : cases)
    if (!c.passed) return false;
  return !cases.empty();
}

namespace {

using Rng = std::mt19937_64;

Tensor rand_t(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<size_t>(numel_of(s)));
  for (double& x : v) x = d(rng);
  return Tensor::from(std::move(s), std::move(v), true);
}

// Values bounded away from zero, for ops with a kink there.
Tensor rand_away(Shape s, Rng& rng) {
  Tensor t = rand_t(std::move(s), rng, 0.1, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (double& x : t.mutable_data())
    if (flip(rng)) x = -x;
  return t;
}

int64_t dim_in(Rng& rng, int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }

// Random linear functional of an op's output so every output element matters.
Tensor probe_loss(const Tensor& y, const Tensor& probe) { return sum(mul(y, probe)); }

// x^2 whose backward is off by one percent.
Tensor buggy_square(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (double& e : v) e *= e;
  return make_result(x.shape(), std::move(v), {x}, [x](Node& self) {
    auto& g = x.node()->grad_buffer();
    for (size_t i = 0; i < g.size(); ++i) g[i] += 2.02 * x.data()[i] * self.grad[i];
  });
}

struct OpCase {
  const char* name;
  std::function<std::pair<std::vector<Tensor>, std::function<Tensor(const std::vector<Tensor>&)>>(Rng&)> make;
};

std::vector<OpCase> op_cases() {
  using In = std::vector<Tensor>;
  using Fn = std::function<Tensor(const In&)>;
  std::vector<OpCase> ops;
  auto unary = [](const char* name, std::function<Tensor(const Tensor&)> f, bool away) {
    return OpCase{name, [f, away](Rng& rng) {
                    const Shape s{dim_in(rng, 1, 3), dim_in(rng, 2, 4)};
                    In in{away ? rand_away(s, rng) : rand_t(s, rng)};
                    auto probe = rand_t(f(in[0]).shape(), rng).detach();
                    return std::make_pair(in, Fn([f, probe](const In& v) { return probe_loss(f(v[0]), probe); }));
                  }};
  };
  auto binary = [](const char* name, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    return OpCase{name, [f](Rng& rng) {
                    const Shape s{dim_in(rng, 1, 3), dim_in(rng, 2, 4)};
                    In in{rand_t(s, rng), rand_t(s, rng)};
                    auto probe = rand_t(f(in[0], in[1]).shape(), rng).detach();
                    return std::make_pair(in, Fn([f, probe](const In& v) { return probe_loss(f(v[0], v[1]), probe); }));
                  }};
  };
  ops.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }));
  ops.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }));
  ops.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }));
  ops.push_back(binary("sum_squared_error", [](const Tensor& a, const Tensor& b) { return sum_squared_error(a, b); }));
  ops.push_back(binary("mean_squared_error", [](const Tensor& a, const Tensor& b) { return mean_squared_error(a, b); }));
  ops.push_back(unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, false));
  ops.push_back(unary("silu", [](const Tensor& x) { return silu(x); }, false));
  ops.push_back(unary("relu", [](const Tensor& x) { return relu(x); }, true));
  ops.push_back(unary("square", [](const Tensor& x) { return square(x); }, false));
  ops.push_back(unary("sum", [](const Tensor& x) { return sum(x); }, false));
  ops.push_back(unary("mean", [](const Tensor& x) { return mean(x); }, false));
  ops.push_back(unary("softmax", [](const Tensor& x) { return softmax(x, -1); }, false));
  ops.push_back(unary("permute", [](const Tensor& x) { return permute(x, {1, 0}); }, false));
  ops.push_back(unary("reshape", [](const Tensor& x) { return reshape(x, {x.numel()}); }, false));
  ops.push_back(unary("slice", [](const Tensor& x) { return slice(x, 1, 1, x.size(1) - 1); }, false));
  ops.push_back(unary("roll", [](const Tensor& x) { return roll(x, {1, -1}, {0, 1}); }, false));
  ops.push_back({"concat", [](Rng& rng) {
                   const int64_t r = dim_in(rng, 1, 3);
                   In in{rand_t({r, dim_in(rng, 1, 3)}, rng), rand_t({r, dim_in(rng, 1, 3)}, rng)};
                   auto probe = rand_t({r, in[0].size(1) + in[1].size(1)}, rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(concat({v[0], v[1]}, 1), probe); }));
                 }});
  ops.push_back({"add_bias", [](Rng& rng) {
                   const int64_t d = dim_in(rng, 1, 4);
                   In in{rand_t({dim_in(rng, 1, 3), d}, rng), rand_t({d}, rng)};
                   auto probe = rand_t(in[0].shape(), rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(add_bias(v[0], v[1]), probe); }));
                 }});
  ops.push_back({"add_channel_bias", [](Rng& rng) {
                   const int64_t c = dim_in(rng, 1, 3);
                   In in{rand_t({2, c, 2, dim_in(rng, 1, 3)}, rng), rand_t({c}, rng)};
                   auto probe = rand_t(in[0].shape(), rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(add_channel_bias(v[0], v[1]), probe); }));
                 }});
  ops.push_back({"add_sample_channel_bias", [](Rng& rng) {
                   const int64_t b = dim_in(rng, 1, 2), c = dim_in(rng, 1, 3);
                   In in{rand_t({b, c, 2, 3}, rng), rand_t({b, c}, rng)};
                   auto probe = rand_t(in[0].shape(), rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(add_sample_channel_bias(v[0], v[1]), probe); }));
                 }});
  ops.push_back({"linear", [](Rng& rng) {
                   const int64_t din = dim_in(rng, 1, 4), dout = dim_in(rng, 1, 4);
                   In in{rand_t({dim_in(rng, 1, 3), din}, rng), rand_t({din, dout}, rng), rand_t({dout}, rng)};
                   auto probe = rand_t({in[0].size(0), dout}, rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(linear(v[0], v[1], v[2]), probe); }));
                 }});
  ops.push_back({"conv2d", [](Rng& rng) {
                   const int stride = static_cast<int>(dim_in(rng, 1, 2));
                   const int k = dim_in(rng, 0, 1) ? 3 : 1;
                   const int64_t c = dim_in(rng, 1, 2), co = dim_in(rng, 1, 3);
                   In in{rand_t({dim_in(rng, 1, 2), c, dim_in(rng, 3, 5), dim_in(rng, 3, 5)}, rng), rand_t({co, c, k, k}, rng),
                         rand_t({co}, rng)};
                   const Tensor y = conv2d(in[0], in[1], in[2], stride, k / 2);
                   auto probe = rand_t(y.shape(), rng).detach();
                   return std::make_pair(in, Fn([probe, stride, k](const In& v) {
                                           return probe_loss(conv2d(v[0], v[1], v[2], stride, k / 2), probe);
                                         }));
                 }});
  ops.push_back({"attention", [](Rng& rng) {
                   const int64_t b = dim_in(rng, 1, 2), nq = dim_in(rng, 1, 4), nk = dim_in(rng, 1, 4), d = dim_in(rng, 1, 3),
                                 dv = dim_in(rng, 1, 3);
                   In in{rand_t({b, nq, d}, rng), rand_t({b, nk, d}, rng), rand_t({b, nk, dv}, rng)};
                   auto probe = rand_t({b, nq, dv}, rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(attention(v[0], v[1], v[2]), probe); }));
                 }});
  ops.push_back({"layer_norm", [](Rng& rng) {
                   const int64_t n = dim_in(rng, 2, 5);
                   In in{rand_t({dim_in(rng, 1, 3), n}, rng), rand_t({n}, rng), rand_t({n}, rng)};
                   auto probe = rand_t(in[0].shape(), rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(layer_norm(v[0], v[1], v[2], -1), probe); }));
                 }});
  ops.push_back({"resample_bilinear", [](Rng& rng) {
                   In in{rand_t({1, dim_in(rng, 1, 2), dim_in(rng, 2, 4), dim_in(rng, 2, 4)}, rng)};
                   const int64_t oh = dim_in(rng, 2, 6), ow = dim_in(rng, 2, 6);
                   auto probe = rand_t({1, in[0].size(1), oh, ow}, rng).detach();
                   return std::make_pair(in, Fn([probe, oh, ow](const In& v) { return probe_loss(resample_bilinear(v[0], oh, ow), probe); }));
                 }});
  ops.push_back({"upsample_nearest", [](Rng& rng) {
                   In in{rand_t({1, dim_in(rng, 1, 2), dim_in(rng, 1, 3), dim_in(rng, 1, 3)}, rng)};
                   auto probe = rand_t({1, in[0].size(1), in[0].size(2) * 2, in[0].size(3) * 2}, rng).detach();
                   return std::make_pair(in, Fn([probe](const In& v) { return probe_loss(upsample_nearest(v[0], 2), probe); }));
                 }});
  return ops;
}

ModelConfig chain_config() {
  ModelConfig c;
  c.image_res = 16;
  c.triplane_res = 4;
  c.latent_res = 8;
  c.feature_dim = 4;
  c.latent_dim = 6;
  c.token_dim = 8;
  c.blocks = 1;
  c.channels = 8;
  c.window = 2;
  c.shift = 1;
  c.timesteps = 10;
  c.samples_per_ray = 8;
  return c;
}

Image random_image(int res, Rng& rng) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Image img(res, res);
  for (double& v : img.pixels) v = d(rng);
  return img;
}

}  // namespace

GradSuiteResult run_grad_suite(const GradSuiteOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckedModeGuard checked(true);
  GradSuiteResult result;
  Rng rng(opts.seed);
  auto record = [&](const std::string& name, double err) {
    result.cases.push_back({name, err, err < opts.tolerance});
    result.max_error = std::max(result.max_error, err);
  };

  const auto ops = op_cases();
  for (int trial = 0; trial < opts.trials_per_op; ++trial) {
    for (const auto& op : ops) {
      auto [inputs, fn] = op.make(rng);
      GradCheckOptions g;
      g.seed = rng();
      record(std::string(op.name) + "#" + std::to_string(trial), grad_check(fn, inputs, g));
    }
  }

  for (int trial = 0; trial < std::max(1, opts.trials_per_op / 2); ++trial) {
    const std::string tag = "#" + std::to_string(trial);
    {
      const int S = 4, F = 3;
      std::vector<Tensor> planes{rand_t({3, S, S, F}, rng), rand_t({3, S, S, F}, rng)};
      const std::vector<SphericalPose> poses{SphericalPose::from_degrees(10.0, 20.0, 2.7),
                                             SphericalPose::from_degrees(0.0, 140.0, 2.7)};
      const SphericalPose target = SphericalPose::from_degrees(15.0, 80.0, 2.7);
      const RayBundle rays = generate_rays(spherical_to_pose(target), 0.9, 4.5, 3, 16);
      auto probe = rand_t({3, 3, F - 1}, rng).detach();
      auto fn = [&](const std::vector<Tensor>& p) {
        const RenderedLatent r = render_target_latent({TriPlane{p[0]}, TriPlane{p[1]}}, poses, target, rays);
        return add(probe_loss(r.grid, probe), sum(r.opacity));
      };
      GradCheckOptions g;
      g.max_coords_per_input = 24;
      g.seed = rng();
      record("render_target_latent" + tag, grad_check(fn, planes, g));
    }
    {
      ParameterStore store;
      Rng init(rng());
      const WindowCrossAttention wa =
          WindowCrossAttention::make(store, "w", 3, 2, WindowConfig{2, 1}, init, Init::kFanIn);
      std::vector<Tensor> in{rand_t({1, 4, 4, 3}, rng), rand_t({1, 4, 4, 2}, rng)};
      for (const auto& p : store.parameters()) in.push_back(p.tensor);
      auto probe = rand_t({1, 4, 4, 3}, rng).detach();
      GradCheckOptions g;
      g.max_coords_per_input = 12;
      g.seed = rng();
      record("shifted_window_cross_attn" + tag,
             grad_check([&](const std::vector<Tensor>& v) { return probe_loss(wa(v[0], v[1]), probe); }, in, g));
    }
    {
      ParameterStore store;
      Rng init(rng());
      const ViewAwareAttention va = ViewAwareAttention::make(store, "v", 3, init, Init::kFanIn);
      std::vector<Tensor> in{rand_t({2, 2, 3}, rng), rand_t({2, 2, 3}, rng), rand_t({2, 2, 3}, rng)};
      for (const auto& p : store.parameters()) in.push_back(p.tensor);
      const std::vector<CameraEmbedding> emb{embed_relative({0.1, 0.5, 0.0}), embed_relative({0.0, 2.0, 0.1}),
                                             embed_relative({-0.2, 4.0, 0.0})};
      auto probe = rand_t({2, 2, 3}, rng).detach();
      GradCheckOptions g;
      g.max_coords_per_input = 12;
      g.seed = rng();
      record("view_aware_attention" + tag, grad_check([&](const std::vector<Tensor>& v) {
               return probe_loss(va({v[0], v[1], v[2]}, emb), probe);
             }, in, g));
    }
    {
      // Full chain with every parameter randomized so zero-initialized paths carry gradient.
      Model model(chain_config(), rng());
      for (auto& p : model.store().parameters()) {
        std::uniform_real_distribution<double> d(-0.3, 0.3);
        for (double& v : model.store().get(p.name).mutable_data()) v = d(rng);
      }
      model.denoiser().set_base_frozen(false);
      const SphericalPose target = SphericalPose::from_degrees(15.0, 100.0, 2.7);
      const std::vector<PosedImage> inputs{{random_image(16, rng), SphericalPose::from_degrees(0.0, 10.0, 2.7)},
                                           {random_image(16, rng), SphericalPose::from_degrees(0.0, 190.0, 2.7)}};
      const Tensor noise = rand_t({1, 3, 8, 8}, rng).detach();
      DenoiserInput in;
      in.x_t = rand_t({1, 3, 8, 8}, rng).detach();
      in.reference = rand_t({1, 3, 8, 8}, rng).detach();
      in.t = {4};
      in.camera = {embed_relative(relative_pose(inputs[0].pose, target))};
      std::vector<Tensor> params;
      for (const auto& p : model.store().parameters()) params.push_back(p.tensor);
      auto fn = [&](const std::vector<Tensor>&) {
        const Conditioning c = condition(model, inputs, target);
        return mean_squared_error(model.denoiser().denoise(in, c.injected), noise);
      };
      GradCheckOptions g;
      g.max_coords_per_input = 2;
      g.seed = rng();
      record("encode_lift_render_inject_denoise" + tag, grad_check(fn, params, g));
    }
  }

  if (opts.inject_bug) {
    std::vector<Tensor> in{rand_t({2, 3}, rng)};
    record("deliberate_bug", grad_check([](const std::vector<Tensor>& v) { return sum(buggy_square(v[0])); }, in));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace mvcond
