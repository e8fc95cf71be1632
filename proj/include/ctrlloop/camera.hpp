#pragma once

#include <Eigen/Core>

namespace ctrlloop {

/// Camera on a sphere around the origin looking at the origin with +Y up.
/// Azimuth is measured in the XZ plane from +X towards +Z.
struct CameraPose {
  double azimuth = 0.0;    ///< radians, wrapped into [-pi, pi)
  double elevation = 0.0;  ///< radians, [-pi/2, pi/2]
  double radius = 1.0;     ///< world units, > 0

  /// Validates and wraps. Throws ValidationError on out-of-range elevation or radius.
  static CameraPose make(double azimuth, double elevation, double radius);

  Eigen::Vector3d position() const;
  /// Camera-to-world rotation; columns are (right, up, back). The camera looks along -back.
  Eigen::Matrix3d rotation() const;
  /// World-to-camera translation, t = -R^T * position.
  Eigen::Vector3d translation() const;

  bool operator==(const CameraPose&) const = default;
};

/// 4-component relative pose condition: (d_elevation, sin d_azimuth, cos d_azimuth, d_radius).
struct RelativePose {
  double d_elevation = 0.0;
  double d_azimuth_sin = 0.0;
  double d_azimuth_cos = 1.0;
  double d_radius = 0.0;

  bool operator==(const RelativePose&) const = default;
};

double wrap_angle(double radians);

RelativePose relative_pose(const CameraPose& ref, const CameraPose& tg);
/// Applies a relative pose to `ref`. recompose(ref, relative_pose(ref, tg)) == tg.
CameraPose recompose(const CameraPose& ref, const RelativePose& rel);

constexpr double deg2rad(double d) { return d * 0.017453292519943295; }
constexpr double rad2deg(double r) { return r * 57.29577951308232; }

}  // namespace ctrlloop
