#include "mvcond/camera.hpp"

#include <cmath>
#include <string>

#include <Eigen/Geometry>

#include "mvcond/errors.hpp"

namespace mvcond {

double deg_to_rad(double deg) { return deg * kPi / 180.0; }
double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

double wrap_two_pi(double angle) {
  double w = std::fmod(angle, 2.0 * kPi);
  if (w < 0.0) w += 2.0 * kPi;
  if (w >= 2.0 * kPi) w = 0.0;
  return w;
}

SphericalPose SphericalPose::from_degrees(double theta_deg, double phi_deg, double radius) {
  return validated({deg_to_rad(theta_deg), deg_to_rad(phi_deg), radius});
}

SphericalPose validated(SphericalPose sp) {
  if (!(std::abs(sp.theta) < kPi / 2.0)) {
    throw PoleError("elevation " + std::to_string(rad_to_deg(sp.theta)) + " deg is at or beyond a pole");
  }
  if (!(sp.radius > 0.0)) throw BoundsError("camera radius must be positive");
  sp.phi = wrap_two_pi(sp.phi);
  return sp;
}

Intrinsics Intrinsics::from_fov(int resolution, double fov_y_deg) {
  Intrinsics k;
  k.width = resolution;
  k.height = resolution;
  k.cx = resolution / 2.0;
  k.cy = resolution / 2.0;
  k.focal = (resolution / 2.0) / std::tan(deg_to_rad(fov_y_deg) / 2.0);
  return k;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

RigidTransform RigidTransform::compose(const RigidTransform& first) const {
  return {rotation * first.rotation, rotation * first.translation + translation};
}

double RayBundle::depth(int j) const { return near + (j + 0.5) * step(); }

CameraPose spherical_to_pose(const SphericalPose& input, int resolution, double fov_y_deg) {
  const SphericalPose sp = validated(input);
  const Eigen::Vector3d center(sp.radius * std::cos(sp.theta) * std::cos(sp.phi),
                               sp.radius * std::cos(sp.theta) * std::sin(sp.phi), sp.radius * std::sin(sp.theta));
  const Eigen::Vector3d forward = (-center).normalized();
  const Eigen::Vector3d up(0.0, 0.0, 1.0);
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right);

  CameraPose pose;
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = down.transpose();
  pose.rotation.row(2) = forward.transpose();
  pose.translation = -(pose.rotation * center);
  pose.intrinsics = Intrinsics::from_fov(resolution, fov_y_deg);
  return pose;
}

RelativePose relative_pose(const SphericalPose& a, const SphericalPose& b) {
  return {b.theta - a.theta, wrap_two_pi(b.phi - a.phi), b.radius - a.radius};
}

CameraEmbedding embed_relative(const RelativePose& rp) {
  return {{rp.d_theta, std::sin(rp.d_phi), std::cos(rp.d_phi), rp.d_radius}};
}

RigidTransform relative_transform(const CameraPose& target, const CameraPose& input) {
  return input.world_to_camera().compose(target.world_to_camera().inverse());
}

Eigen::Vector3d transform_point(const RigidTransform& T, const Eigen::Vector3d& p) {
  return T.rotation * p + T.translation;
}

double azimuth_gap(const SphericalPose& target, const SphericalPose& input) {
  const double d = wrap_two_pi(input.phi - target.phi);
  return d > kPi ? 2.0 * kPi - d : d;
}

Eigen::Vector3d pixel_direction_camera(const Intrinsics& k, double u, double v) {
  return {(u + 0.5 - k.cx) / k.focal, (v + 0.5 - k.cy) / k.focal, 1.0};
}

RayBundle generate_rays(const CameraPose& pose, double near, double far, int latent_resolution, int samples_per_ray) {
  if (latent_resolution < 1) throw BoundsError("latent resolution must be >= 1");
  if (!(near > 0.0) || !(near < far)) throw BoundsError("ray bounds require 0 < near < far");
  if (samples_per_ray < 2) throw BoundsError("samples_per_ray must be >= 2");
  // Same field of view at the latent resolution.
  const double fov_y = 2.0 * std::atan((pose.intrinsics.height / 2.0) / pose.intrinsics.focal);
  const Intrinsics k = Intrinsics::from_fov(latent_resolution, rad_to_deg(fov_y));

  RayBundle rays;
  rays.near = near;
  rays.far = far;
  rays.samples_per_ray = samples_per_ray;
  rays.width = latent_resolution;
  rays.height = latent_resolution;
  const Eigen::Vector3d origin = pose.center();
  const Eigen::Matrix3d cam_to_world = pose.rotation.transpose();
  rays.origins.reserve(static_cast<size_t>(latent_resolution) * latent_resolution);
  rays.directions.reserve(rays.origins.capacity());
  for (int v = 0; v < latent_resolution; ++v)
    for (int u = 0; u < latent_resolution; ++u) {
      rays.origins.push_back(origin);
      rays.directions.push_back((cam_to_world * pixel_direction_camera(k, u, v)).normalized());
    }
  return rays;
}

}  // namespace mvcond
