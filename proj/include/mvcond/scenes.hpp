#pragma once

// Procedural primitive scenes, an analytic-SDF reference renderer, and the
// on-disk multi-view dataset layout:
//
//   <root>/scenes/<scene_id>/view_<k>.png
//   <root>/scenes/<scene_id>/poses.json   {views: [{theta_deg, phi_deg, radius, file}], resolution, seed}

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mvcond/camera.hpp"
#include "mvcond/image.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

enum class PrimitiveKind { kSphere, kBox, kCapsule };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  // sphere: {radius, -, -}; box: half extents; capsule: {radius, half_length, -}
  Eigen::Vector3d size = Eigen::Vector3d::Zero();
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();  // capsule only
  Eigen::Vector3d rgb = Eigen::Vector3d::Constant(0.5);

  // Distance from the origin to the farthest point of the primitive.
  double bounding_radius() const;
  double sdf(const Eigen::Vector3d& p) const;
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<Primitive> primitives;

  bool operator==(const SceneSpec& o) const;
};

inline constexpr double kSceneBound = 1.0;
inline constexpr double kDefaultCameraRadius = 2.7;
inline constexpr int kMarchSteps = 128;

SceneSpec build_scene(uint64_t seed);
// Reflection y -> -y; rendering the mirror from azimuth -phi gives the
// horizontal flip of the original rendered from phi.
SceneSpec mirror_y(const SceneSpec& scene);

// Sphere-traced render with a camera-fixed headlight on a white background.
Image render_view(const SceneSpec& scene, const CameraPose& pose, int resolution);
// Per-pixel hit mask (1 where a primitive was hit).
std::vector<uint8_t> render_silhouette(const SceneSpec& scene, const CameraPose& pose, int resolution);

struct PosedView {
  Image image;
  SphericalPose pose;
  std::string file;
};

struct MultiViewSample {
  std::string scene_id;
  uint64_t seed = 0;
  int resolution = 0;
  std::vector<PosedView> views;
};

struct DatasetOptions {
  int num_scenes = 8;
  int n_views = 8;
  std::vector<double> elevations_deg{0.0, 15.0, 30.0};
  int resolution = 64;
  uint64_t seed = 0;
  double radius = kDefaultCameraRadius;
  int threads = 1;
};

// Throws ContractError on an unusable option set.
void validate_options(const DatasetOptions& opts);

// Renders scenes to `out_dir`. Scene k uses elevation elevations_deg[k % size]
// and azimuths j * 360 / n_views.
void make_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir);
// Generates the same samples in memory (images quantized exactly as the PNGs).
std::vector<MultiViewSample> generate_samples(const DatasetOptions& opts);
uint64_t scene_seed(uint64_t dataset_seed, int index);

void write_sample(const MultiViewSample& sample, const std::filesystem::path& root);
MultiViewSample load_sample(const std::filesystem::path& scene_dir);
std::vector<MultiViewSample> load_dataset(const std::filesystem::path& root);

// Fixed latent target: area-average downsample to latent_res, RGB in channels
// 0..2, zero padding up to `channels`. Output layout [latent_res, latent_res, channels].
Tensor target_latent_oracle(const Image& img, int latent_res, int channels);
// Inverse used at inference: nearest upsample of channels 0..2 of a [h, w, C] latent.
Image decode_latent(const Tensor& latent, int resolution);

}  // namespace mvcond
