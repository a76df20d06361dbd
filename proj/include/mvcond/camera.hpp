#pragma once

// Spherical look-at cameras around an object centred at the world origin.
// World up is +z. Camera frames follow the usual vision convention: x right,
// y down, z along the optical axis.

#include <array>
#include <vector>

#include <Eigen/Core>

namespace mvcond {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDefaultFovYDeg = 40.0;

double deg_to_rad(double deg);
double rad_to_deg(double rad);
// Wraps into [0, 2*pi).
double wrap_two_pi(double angle);

struct SphericalPose {
  double theta = 0.0;   // elevation, 0 at the equator, positive above
  double phi = 0.0;     // azimuth in [0, 2*pi)
  double radius = 1.5;

  static SphericalPose from_degrees(double theta_deg, double phi_deg, double radius);
};

// Throws PoleError / BoundsError; wraps phi.
SphericalPose validated(SphericalPose sp);

struct RelativePose {
  double d_theta = 0.0;
  double d_phi = 0.0;  // [0, 2*pi)
  double d_radius = 0.0;
};

struct CameraEmbedding {
  std::array<double, 4> v{0.0, 0.0, 1.0, 0.0};  // [d_theta, sin d_phi, cos d_phi, d_radius]
};

struct Intrinsics {
  double focal = 1.0;  // pixels
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  static Intrinsics from_fov(int resolution, double fov_y_deg = kDefaultFovYDeg);
};

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  RigidTransform inverse() const;
  // (*this) after `first`
  RigidTransform compose(const RigidTransform& first) const;
};

struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world -> camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Intrinsics intrinsics;

  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  RigidTransform world_to_camera() const { return {rotation, translation}; }
};

struct RayBundle {
  std::vector<Eigen::Vector3d> origins;
  std::vector<Eigen::Vector3d> directions;  // unit norm, world frame
  double near = 0.0;
  double far = 1.0;
  int samples_per_ray = 32;
  int width = 0;
  int height = 0;

  size_t size() const { return directions.size(); }
  // Midpoint depth of sample j (deterministic stratification).
  double depth(int j) const;
  double step() const { return (far - near) / samples_per_ray; }
};

CameraPose spherical_to_pose(const SphericalPose& sp, int resolution = 64, double fov_y_deg = kDefaultFovYDeg);
RelativePose relative_pose(const SphericalPose& a, const SphericalPose& b);
CameraEmbedding embed_relative(const RelativePose& rp);
// Maps target-camera coordinates to input-camera coordinates.
RigidTransform relative_transform(const CameraPose& target, const CameraPose& input);
Eigen::Vector3d transform_point(const RigidTransform& T, const Eigen::Vector3d& p);
// Smallest absolute azimuth difference, in [0, pi].
double azimuth_gap(const SphericalPose& target, const SphericalPose& input);

// One ray per pixel of a latent_resolution^2 grid under the pose's field of view.
RayBundle generate_rays(const CameraPose& pose, double near, double far, int latent_resolution,
                        int samples_per_ray = 32);

// Camera-frame direction of the centre of pixel (u, v) in a res x res grid, unnormalized (z = 1).
Eigen::Vector3d pixel_direction_camera(const Intrinsics& k, double u, double v);

}  // namespace mvcond
