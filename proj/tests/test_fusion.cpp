#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mvcond/errors.hpp"
#include "mvcond/fusion.hpp"
#include "mvcond/gradcheck.hpp"
#include "mvcond/ops.hpp"
#include "oracles.hpp"

using namespace mvcond;

namespace {

TriPlane random_triplane(int S, int F, std::mt19937_64& rng, double density_bias = -1.0, double amp = 0.3) {
  std::uniform_real_distribution<double> d(-amp, amp);
  std::vector<double> v(static_cast<size_t>(3 * S * S * F));
  for (size_t i = 0; i < v.size(); ++i) v[i] = d(rng) + ((i % static_cast<size_t>(F)) == 0 ? density_bias / 3.0 : 0.0);
  return {Tensor::from({3, S, S, F}, std::move(v))};
}

TriPlane constant_triplane(int S, int F, double density, double feature) {
  std::vector<double> v(static_cast<size_t>(3 * S * S * F));
  for (size_t i = 0; i < v.size(); ++i) v[i] = (i % static_cast<size_t>(F)) == 0 ? density : feature;
  return {Tensor::from({3, S, S, F}, std::move(v))};
}

}  // namespace

TEST_CASE("view_weights: analytic table") {
  auto w0 = view_weights({0.0});
  CHECK(std::abs(w0.normalized[0] - 1.0) < 1e-12);
  CHECK(std::abs(view_weights({kPi}).raw[0]) < 1e-12);
  CHECK(std::abs(view_weights({kPi / 2}).raw[0] - 0.5) < 1e-12);
  auto w2 = view_weights({0.0, kPi});
  CHECK(std::abs(w2.normalized[0] - 1.0) < 1e-12);
  CHECK(std::abs(w2.normalized[1]) < 1e-12);
  auto w3 = view_weights({deg_to_rad(60), deg_to_rad(120)});
  CHECK(std::abs(w3.normalized[0] - 0.75) < 1e-12);
  CHECK(std::abs(w3.normalized[1] - 0.25) < 1e-12);
  CHECK_THROWS_AS(view_weights({}), ContractError);
  CHECK_THROWS_AS(view_weights({-0.1}), ContractError);
}

TEST_CASE("view_weights: all views opposite the target stay finite and uniform") {
  auto w = view_weights({kPi, kPi, kPi});
  for (double v : w.normalized) CHECK(std::abs(v - 1.0 / 3.0) < 1e-6);
}

TEST_CASE("view_weights: random gaps sum to one and permute with their inputs") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> g(0.0, kPi);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> gaps(static_cast<size_t>(1 + trial % 6));
    for (auto& x : gaps) x = g(rng);
    auto w = view_weights(gaps);
    CHECK(std::abs(std::accumulate(w.normalized.begin(), w.normalized.end(), 0.0) - 1.0) < 1e-12);
    for (double v : w.normalized) CHECK((v >= 0.0 && v <= 1.0));
    std::vector<double> rev(gaps.rbegin(), gaps.rend());
    auto wr = view_weights(rev);
    for (size_t i = 0; i < gaps.size(); ++i) CHECK(std::abs(wr.normalized[i] - w.normalized[gaps.size() - 1 - i]) < 1e-15);
  }
}

TEST_CASE("sample_triplane: constants, grid nodes and the bilinear oracle") {
  auto c = sample_triplane(constant_triplane(5, 4, 0.2, 0.7), {0.3, -0.4, 0.9});
  CHECK(c.density_logit == doctest::Approx(0.6));
  for (double v : c.feature) CHECK(v == doctest::Approx(2.1));

  std::mt19937_64 rng(32);
  TriPlane tp = random_triplane(5, 3, rng, 0.0, 1.0);
  // (x, y, z) = (-0.5, 0, 1) lands on nodes col 1 / row 2 of xy, col 1 / row 4 of xz, col 2 / row 4 of yz.
  auto node = sample_triplane(tp, {-0.5, 0.0, 1.0});
  const double expect = tp.planes.at({0, 2, 1, 0}) + tp.planes.at({1, 4, 1, 0}) + tp.planes.at({2, 4, 2, 0});
  CHECK(std::abs(node.density_logit - expect) < 1e-12);

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector3d p(u(rng), u(rng), u(rng));
    auto s = sample_triplane(tp, p);
    CHECK(std::abs(s.density_logit - oracle::triplane_channel(tp, p, 0)) < 1e-6);
    for (int ch = 1; ch < 3; ++ch) CHECK(std::abs(s.feature[static_cast<size_t>(ch - 1)] - oracle::triplane_channel(tp, p, ch)) < 1e-6);
  }
  auto outside = sample_triplane(tp, {1.2, 0.0, 0.0});
  CHECK(outside.density_logit == 0.0);
  for (double v : outside.feature) CHECK(v == 0.0);
}

TEST_CASE("fuse_point examples") {
  PointFeature a{1.5, {2.0}}, b{-1.0, {4.0}};
  auto one = fuse_point({a}, view_weights({0.3}));
  CHECK(one.density_logit == doctest::Approx(1.5));
  CHECK(one.feature[0] == doctest::Approx(2.0));
  auto same = fuse_point({a, a, a}, view_weights({0.1, 1.0, 2.0}));
  CHECK(same.feature[0] == doctest::Approx(2.0));
  auto mix = fuse_point({a, b}, view_weights({deg_to_rad(60), deg_to_rad(120)}));
  CHECK(mix.feature[0] == doctest::Approx(2.5));
  CHECK_THROWS_AS(fuse_point({a}, view_weights({0.0, 0.0})), ContractError);
}

TEST_CASE("render_target_latent: empty space renders to zero") {
  auto target = SphericalPose::from_degrees(0, 0, 2.7);
  RayBundle rays = generate_rays(spherical_to_pose(target), 1.2, 4.2, 4);
  auto out = render_target_latent({constant_triplane(3, 4, -40.0, 0.5)}, {target}, target, rays);
  for (double v : out.grid.data()) CHECK(std::abs(v) < 1e-12);
  for (double v : out.opacity.data()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("render_target_latent: constant medium matches the closed form") {
  const double logit = 0.4, feature = 0.25;
  const double sigma = softplus(3 * logit), f = 3 * feature;
  for (double az : {0.0, 40.0}) {
    auto target = SphericalPose::from_degrees(15, az, 2.7);
    CameraPose cam = spherical_to_pose(target);
    RayBundle rays = generate_rays(cam, 0.9, 4.5, 8, 64);
    auto out = render_target_latent({constant_triplane(4, 3, logit, feature)}, {target}, target, rays);
    for (size_t r = 0; r < rays.size(); ++r) {
      const Eigen::Vector3d o = cam.rotation * rays.origins[r], d = cam.rotation * rays.directions[r];
      const double L = oracle::cube_chord(o, d, rays.near, rays.far);
      const double expect = (1.0 - std::exp(-sigma * L)) * f;
      const int y = static_cast<int>(r) / 8, x = static_cast<int>(r) % 8;
      CHECK(std::abs(out.grid.at({y, x, 0}) - expect) < 1e-2);
      CHECK(std::abs(out.grid.at({y, x, 1}) - expect) < 1e-2);
    }
  }
}

TEST_CASE("render_target_latent: matches the dense reference compositor") {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> az(0.0, 360.0);
  for (int scene = 0; scene < 4; ++scene) {
    const int n = 1 + scene % 3;
    std::vector<TriPlane> tps;
    std::vector<SphericalPose> poses;
    std::vector<CameraPose> cams;
    for (int i = 0; i < n; ++i) {
      tps.push_back(random_triplane(6, 4, rng));
      poses.push_back(SphericalPose::from_degrees(15.0 * (i % 3), az(rng), 2.7));
      cams.push_back(spherical_to_pose(poses.back()));
    }
    auto target = SphericalPose::from_degrees(15, az(rng), 2.7);
    RayBundle rays = generate_rays(spherical_to_pose(target), 1.45, 3.95, 6, 64);
    auto out = render_target_latent(tps, poses, target, rays);
    auto ref = oracle::reference_render(tps, cams, weights_for(poses, target).normalized, rays, 640);
    double worst = 0.0;
    for (size_t r = 0; r < rays.size(); ++r) {
      const int64_t y = static_cast<int64_t>(r) / 6, x = static_cast<int64_t>(r) % 6;
      for (int64_t c = 0; c < 3; ++c) worst = std::max(worst, std::abs(out.grid.at({y, x, c}) - ref[r][static_cast<size_t>(c)]));
      worst = std::max(worst, std::abs(out.opacity.at({y, x}) - ref[r][3]));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("render_target_latent: invariant to joint permutation of the views") {
  std::mt19937_64 rng(34);
  std::vector<TriPlane> tps{random_triplane(4, 3, rng), random_triplane(4, 3, rng), random_triplane(4, 3, rng)};
  std::vector<SphericalPose> poses{SphericalPose::from_degrees(0, 10, 2.7), SphericalPose::from_degrees(15, 190, 2.7),
                                   SphericalPose::from_degrees(30, 77, 2.7)};
  auto target = SphericalPose::from_degrees(15, 120, 2.7);
  RayBundle rays = generate_rays(spherical_to_pose(target), 1.45, 3.95, 4, 16);
  auto a = render_target_latent(tps, poses, target, rays);
  auto b = render_target_latent({tps[2], tps[0], tps[1]}, {poses[2], poses[0], poses[1]}, target, rays);
  for (int64_t i = 0; i < a.grid.numel(); ++i)
    CHECK(std::abs(a.grid.data()[static_cast<size_t>(i)] - b.grid.data()[static_cast<size_t>(i)]) < 1e-12);
}

TEST_CASE("render_target_latent: opacity stays in [0, 1]") {
  std::mt19937_64 rng(35);
  auto target = SphericalPose::from_degrees(0, 45, 2.7);
  RayBundle rays = generate_rays(spherical_to_pose(target), 1.45, 3.95, 5, 16);
  auto out = render_target_latent({random_triplane(4, 3, rng, 3.0, 2.0)}, {target}, target, rays);
  for (double v : out.opacity.data()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("render_target_latent: gradients w.r.t. the planes") {
  std::mt19937_64 rng(36);
  std::vector<SphericalPose> poses{SphericalPose::from_degrees(0, 0, 2.7), SphericalPose::from_degrees(15, 160, 2.7)};
  auto target = SphericalPose::from_degrees(15, 70, 2.7);
  RayBundle rays = generate_rays(spherical_to_pose(target), 1.45, 3.95, 3, 8);
  Tensor probe = Tensor::from({3, 3, 2}, std::vector<double>{0.3, -0.1, 0.7, 0.2, 0.5, -0.4, 0.9, 0.1, -0.2,
                                                             0.4, 0.6, -0.8, 0.3, 0.2, 0.1, -0.5, 0.7, 0.3});
  auto f = [&](const std::vector<Tensor>& in) {
    auto out = render_target_latent({TriPlane{in[0]}, TriPlane{in[1]}}, poses, target, rays);
    return add(sum(mul(out.grid, probe)), sum(out.opacity));
  };
  const double err = grad_check(f, {random_triplane(3, 3, rng, 0.5, 0.5).planes, random_triplane(3, 3, rng, 0.5, 0.5).planes});
  CHECK(err < 1e-4);
}

TEST_CASE("render_target_latent: misaligned inputs are contract errors") {
  auto target = SphericalPose::from_degrees(0, 0, 2.7);
  RayBundle rays = generate_rays(spherical_to_pose(target), 1.45, 3.95, 2, 4);
  CHECK_THROWS_AS(render_target_latent({}, std::vector<SphericalPose>{}, target, rays), ContractError);
  CHECK_THROWS_AS(render_target_latent({TriPlane::zeros(2, 3)}, {target, target}, target, rays), ContractError);
}
