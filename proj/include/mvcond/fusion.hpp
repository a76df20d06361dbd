#pragma once

// Multi-view tri-plane fusion by composited volume rendering.
//
// Each input view owns a tri-plane expressed in its own object-centred camera
// frame (camera rotation, origin at the look-at point). Target-ray samples are
// carried into every input frame, sampled, blended with cosine azimuth weights,
// and alpha-composited into a target-view latent.

#include <vector>

#include <Eigen/Core>

#include "mvcond/camera.hpp"
#include "mvcond/tensor.hpp"

namespace mvcond {

// Three S x S x F planes stored as one tensor [3, S, S, F] in order xy, xz, yz.
// Plane xy is indexed (row = y, col = x), xz (row = z, col = x), yz (row = z, col = y).
// Channel 0 of every plane is the density logit.
struct TriPlane {
  Tensor planes;

  int resolution() const { return static_cast<int>(planes.size(1)); }
  int features() const { return static_cast<int>(planes.size(3)); }
  Tensor plane(int index) const;  // [S, S, F] copy (no grad)
  static TriPlane zeros(int resolution, int features);
};

void validate_triplane(const TriPlane& tp);

struct FusionWeights {
  std::vector<double> raw;
  std::vector<double> normalized;
};

inline constexpr double kWeightEps = 1e-8;

// raw_i = (cos gap_i + 1) / 2. Normalization is exact unless the raw weights
// nearly vanish (all views opposite the target), in which case each raw
// weight is lifted by kWeightEps before dividing.
FusionWeights view_weights(const std::vector<double>& gaps);

struct PointFeature {
  double density_logit = 0.0;
  std::vector<double> feature;  // F - 1 values
};

// Bilinear sample of each plane, summed across planes. Outside [-1,1]^3 the
// result is the zero feature.
PointFeature sample_triplane(const TriPlane& tp, const Eigen::Vector3d& p);
bool inside_cube(const Eigen::Vector3d& p);

PointFeature fuse_point(const std::vector<PointFeature>& features, const FusionWeights& w);

struct RenderedLatent {
  Tensor grid;     // [H', W', F-1]
  Tensor opacity;  // [H', W']
};

double softplus(double x);
double sigmoid(double x);

// Object-centred frame of a camera: world rotated into the camera orientation.
// Equals transform_point(relative_transform(target, input), p_target) minus the
// input camera's translation.
struct ViewFrame {
  RigidTransform target_to_input;  // relative_transform(target, input)
  Eigen::Vector3d input_offset;    // input camera translation (world origin in input frame)
};

// Differentiable w.r.t. every tri-plane tensor. Each stratified interval is
// clipped to the part of the ray inside every input view's cube and sampled at
// its midpoint; outside that span density is zero.
RenderedLatent render_target_latent(const std::vector<TriPlane>& triplanes, const std::vector<SphericalPose>& input_poses,
                                    const SphericalPose& target_pose, const RayBundle& rays);
RenderedLatent render_target_latent(const std::vector<TriPlane>& triplanes, const std::vector<CameraPose>& input_poses,
                                    const CameraPose& target_pose, const FusionWeights& weights, const RayBundle& rays);

// Azimuth-gap weights for a set of input poses against a target.
FusionWeights weights_for(const std::vector<SphericalPose>& inputs, const SphericalPose& target);

}  // namespace mvcond
