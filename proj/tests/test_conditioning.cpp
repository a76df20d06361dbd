#include <cmath>
#include <random>

#include "doctest.h"
#include "mvcond/conditioning.hpp"
#include "mvcond/errors.hpp"
#include "mvcond/gradcheck.hpp"
#include "mvcond/ops.hpp"
#include "oracles.hpp"

using namespace mvcond;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double bound = 1.0) {
  std::uniform_real_distribution<double> d(-bound, bound);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

void set_identity(Linear& l) {
  auto w = l.weight.mutable_data();
  const int64_t n = l.weight.size(0), m = l.weight.size(1);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) w[static_cast<size_t>(i * m + j)] = i == j ? 1.0 : 0.0;
  for (double& b : l.bias.mutable_data()) b = 0.0;
}

void fill(Tensor& t, double value) {
  for (double& v : t.mutable_data()) v = value;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[static_cast<size_t>(i)] != b.data()[static_cast<size_t>(i)]) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)]));
  return m;
}

DenoiserConfig tiny_denoiser() {
  DenoiserConfig c;
  c.latent_res = 4;
  c.latent_channels = 2;
  c.channels = 4;
  c.cond_channels = 3;
  c.timesteps = 10;
  c.window = 2;
  c.shift = 1;
  return c;
}

DenoiserInput random_input(const DenoiserConfig& c, int64_t B, std::mt19937_64& rng) {
  DenoiserInput in;
  in.x_t = random_tensor({B, c.latent_channels, c.latent_res, c.latent_res}, rng);
  in.reference = random_tensor({B, c.latent_channels, c.latent_res, c.latent_res}, rng);
  std::uniform_int_distribution<int> t(0, c.timesteps - 1);
  std::uniform_real_distribution<double> a(0.0, 2.0 * kPi);
  for (int64_t b = 0; b < B; ++b) {
    in.t.push_back(t(rng));
    in.camera.push_back(embed_relative({0.1 * static_cast<double>(b), a(rng), 0.0}));
  }
  return in;
}

}  // namespace

TEST_CASE("inject: zero-initialized block is the identity") {
  ParameterStore store;
  std::mt19937_64 rng(51);
  auto blk = InjectionBlock::make(store, "cond.i", 4, 3, rng);
  Tensor o = random_tensor({2, 4, 8, 8}, rng);
  CHECK(bit_equal(blk(o, random_tensor({2, 3, 16, 16}, rng)), o));
  CHECK_THROWS_AS(blk(o, random_tensor({1, 3, 8, 8}, rng)), DimensionError);
}

TEST_CASE("inject: trained block with a zero latent is finite and gradients flow to f") {
  ParameterStore store;
  std::mt19937_64 rng(52);
  auto blk = InjectionBlock::make(store, "cond.i", 3, 2, rng);
  for (double& v : blk.zero.kernel.mutable_data()) v = 0.3;
  Tensor o = random_tensor({1, 3, 4, 4}, rng);
  Tensor y = blk(o, Tensor::zeros({1, 2, 4, 4}));
  for (double v : y.data()) CHECK(std::isfinite(v));
  CHECK(max_abs_diff(y, o) > 0.0);
  const double err = grad_check([&](const std::vector<Tensor>& in) { return sum(square(blk(in[0], in[1]))); },
                                {o, random_tensor({1, 2, 2, 2}, rng)});
  CHECK(err < 1e-4);
}

TEST_CASE("view_aware_attention: single view with identity projections returns the latent") {
  ParameterStore store;
  std::mt19937_64 rng(53);
  auto blk = ViewAwareAttention::make(store, "cond.vaa", 5, rng);
  set_identity(blk.v);
  set_identity(blk.out);
  Tensor z = random_tensor({4, 4, 5}, rng);
  Tensor y = blk({z}, {embed_relative({0.1, 1.0, 0.0})});
  CHECK(y.shape() == Shape{4, 4, 5});
  CHECK(max_abs_diff(y, z) < 1e-12);
  CHECK_THROWS_AS(blk({}, {}), ContractError);
}

TEST_CASE("view_aware_attention: joint permutation invariance and shape") {
  ParameterStore store;
  std::mt19937_64 rng(54);
  auto blk = ViewAwareAttention::make(store, "cond.vaa", 3, rng, Init::kFanIn);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> z{random_tensor({3, 3, 3}, rng), random_tensor({3, 3, 3}, rng), random_tensor({3, 3, 3}, rng)};
    std::vector<CameraEmbedding> e{embed_relative({0, 0.3, 0}), embed_relative({0.2, 2.0, 0}), embed_relative({0, 4.0, 0.1})};
    Tensor a = blk(z, e);
    Tensor b = blk({z[1], z[2], z[0]}, {e[1], e[2], e[0]});
    CHECK(a.shape() == Shape{3, 3, 3});
    CHECK(max_abs_diff(a, b) < 1e-12);
  }
}

TEST_CASE("view_aware_attention: gradients") {
  ParameterStore store;
  std::mt19937_64 rng(55);
  auto blk = ViewAwareAttention::make(store, "cond.vaa", 3, rng, Init::kFanIn);
  std::vector<Tensor> inputs{random_tensor({2, 2, 3}, rng), random_tensor({2, 2, 3}, rng)};
  for (const auto& p : store.parameters()) inputs.push_back(p.tensor);
  const std::vector<CameraEmbedding> e{embed_relative({0, 0.3, 0}), embed_relative({0.2, 2.0, 0})};
  const double err = grad_check([&](const std::vector<Tensor>& in) { return sum(square(blk({in[0], in[1]}, e))); }, inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("shifted_window_cross_attn: full window equals dense cross-attention") {
  std::mt19937_64 rng(56);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterStore store;
    const int h = 2 + trial % 3;
    auto blk = WindowCrossAttention::make(store, "cond.w", 3, 2, {h, 0}, rng, Init::kFanIn);
    Tensor q = random_tensor({2, h, h, 3}, rng), kv = random_tensor({2, h, h, 2}, rng);
    CHECK(max_abs_diff(shifted_window_cross_attn(q, kv, blk), oracle::dense_cross_attention(q, kv, blk)) < 1e-6);
  }
}

TEST_CASE("shifted_window_cross_attn: unit window and skip-only cases") {
  ParameterStore store;
  std::mt19937_64 rng(57);
  auto blk = WindowCrossAttention::make(store, "cond.w", 3, 3, {1, 0}, rng, Init::kFanIn);
  set_identity(blk.v);
  set_identity(blk.out);
  Tensor q = random_tensor({1, 4, 4, 3}, rng), kv = random_tensor({1, 4, 4, 3}, rng);
  CHECK(max_abs_diff(blk(q, kv), add(q, kv)) < 1e-12);

  ParameterStore store2;
  auto shifted = WindowCrossAttention::make(store2, "cond.w", 3, 3, {2, 1}, rng, Init::kFanIn);
  fill(shifted.v.weight, 0.0);
  CHECK(max_abs_diff(shifted(q, kv), q) < 1e-15);

  ParameterStore store3;
  auto bad = WindowCrossAttention::make(store3, "cond.w", 3, 3, {3, 0}, rng);
  CHECK_THROWS_AS(bad(q, kv), ConfigError);
}

TEST_CASE("shifted_window_cross_attn: a shift only moves the windows") {
  // Shifting both inputs by the window shift and using unshifted windows is the
  // same computation, rolled.
  ParameterStore store;
  std::mt19937_64 rng(58);
  auto plain = WindowCrossAttention::make(store, "cond.a", 3, 3, {2, 0}, rng, Init::kFanIn);
  WindowCrossAttention shifted = plain;
  shifted.cfg.shift = 1;
  Tensor q = random_tensor({1, 4, 4, 3}, rng), kv = random_tensor({1, 4, 4, 3}, rng);
  Tensor a = shifted(q, kv);
  Tensor b = roll(plain(roll(q, {-1, -1}, {1, 2}), roll(kv, {-1, -1}, {1, 2})), {1, 1}, {1, 2});
  CHECK(max_abs_diff(a, b) < 1e-12);
  const double err = grad_check([&](const std::vector<Tensor>& in) { return sum(square(shifted(in[0], in[1]))); }, {q, kv});
  CHECK(err < 1e-4);
}

TEST_CASE("resample_latent") {
  std::mt19937_64 rng(59);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  CHECK(bit_equal(resample_latent(x, 4), x));
  Tensor c = Tensor::full({1, 1, 3, 3}, 0.7);
  for (int r : {1, 5, 8}) {
    const Tensor y = resample_latent(c, r);
    for (double v : y.data()) CHECK(std::abs(v - 0.7) < 1e-12);
  }
  std::vector<double> smooth(16 * 16);
  for (int y = 0; y < 16; ++y)
    for (int x2 = 0; x2 < 16; ++x2) smooth[static_cast<size_t>(y * 16 + x2)] = std::sin(0.05 * x2) * std::cos(0.04 * y);
  Tensor s = Tensor::from({1, 1, 16, 16}, smooth);
  CHECK(max_abs_diff(resample_latent(resample_latent(s, 32), 16), s) < 1e-2);
  CHECK_THROWS_AS(resample_latent(s, 0), BoundsError);
}

TEST_CASE("denoise: zero-initialized conditioning is bit-identical to the base model") {
  ParameterStore store;
  std::mt19937_64 base_rng(60), cond_rng(61), rng(62);
  DenoiserConfig cfg;  // desk configuration
  ToyDenoiser net(store, cfg, base_rng, cond_rng);
  for (int trial = 0; trial < 5; ++trial) {
    auto in = random_input(cfg, 2, rng);
    Tensor f = random_tensor({2, cfg.cond_channels, cfg.latent_res, cfg.latent_res}, rng, 3.0);
    CHECK(bit_equal(net.denoise(in), net.denoise(in, f)));
  }
}

TEST_CASE("denoise: deterministic, range-checked, and conditioned once trained") {
  ParameterStore store;
  std::mt19937_64 base_rng(63), cond_rng(64), rng(65);
  const DenoiserConfig cfg = tiny_denoiser();
  ToyDenoiser net(store, cfg, base_rng, cond_rng);
  auto in = random_input(cfg, 2, rng);
  CHECK(bit_equal(net.denoise(in), net.denoise(in)));
  auto bad = in;
  bad.t[0] = cfg.timesteps;
  CHECK_THROWS_AS(net.denoise(bad), ContractError);
  for (double& v : store.get("cond.inject1.zero.kernel").mutable_data()) v = 0.2;
  Tensor f = random_tensor({2, cfg.cond_channels, 4, 4}, rng);
  CHECK(max_abs_diff(net.denoise(in), net.denoise(in, f)) > 1e-8);
}

TEST_CASE("denoise: frozen base gets no gradient, injection does") {
  ParameterStore store;
  std::mt19937_64 base_rng(66), cond_rng(67), rng(68);
  const DenoiserConfig cfg = tiny_denoiser();
  ToyDenoiser net(store, cfg, base_rng, cond_rng);
  net.set_base_frozen(true);
  auto in = random_input(cfg, 2, rng);
  Tensor f = random_tensor({2, cfg.cond_channels, 4, 4}, rng);
  store.zero_grad();
  sum(square(net.denoise(in, f))).backward();
  for (const auto& p : net.base_parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) CHECK(g == 0.0);
  }
  double total = 0.0;
  for (const auto& p : net.conditioning_parameters())
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) total += std::abs(g);
  CHECK(total > 0.0);
  net.set_base_frozen(false);
  CHECK_FALSE(net.base_frozen());
}

TEST_CASE("denoise: gradients through the whole conditioned network") {
  ParameterStore store;
  std::mt19937_64 base_rng(69), cond_rng(70), rng(71);
  const DenoiserConfig cfg = tiny_denoiser();
  ToyDenoiser net(store, cfg, base_rng, cond_rng);
  // Give the zero-initialized outputs some weight so every path carries gradient.
  for (const auto& p : net.conditioning_parameters())
    if (p.name.find(".zero.") != std::string::npos || p.name.find(".out.") != std::string::npos) {
      std::uniform_real_distribution<double> d(-0.5, 0.5);
      for (double& v : store.get(p.name).mutable_data()) v = d(rng);
    }
  auto in = random_input(cfg, 2, rng);
  Tensor f = random_tensor({2, cfg.cond_channels, 4, 4}, rng);
  std::vector<Tensor> inputs{in.x_t, f};
  for (const auto& p : store.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opts;
  opts.max_coords_per_input = 3;
  const double err = grad_check(
      [&](const std::vector<Tensor>& t) {
        DenoiserInput x = in;
        x.x_t = t[0];
        return mean_squared_error(net.denoise(x, t[1]), in.reference);
      },
      inputs, opts);
  CHECK(err < 1e-4);
}
