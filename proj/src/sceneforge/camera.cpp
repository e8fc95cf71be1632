#include "ctrlloop/camera.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <numbers>
#include <string>

#include "ctrlloop/error.hpp"

namespace ctrlloop {

double wrap_angle(double r) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(r + std::numbers::pi, two_pi);
  if (w < 0.0) w += two_pi;
  w -= std::numbers::pi;
  // fmod can land exactly on +pi after the shift for inputs just below -pi.
  if (w >= std::numbers::pi) w -= two_pi;
  return w;
}

CameraPose CameraPose::make(double azimuth, double elevation, double radius) {
  if (!std::isfinite(azimuth) || !std::isfinite(elevation) || !std::isfinite(radius))
    throw ValidationError("camera pose: non-finite component");
  if (std::abs(elevation) > std::numbers::pi / 2 + 1e-12)
    throw ValidationError("camera pose: elevation " + std::to_string(elevation) + " outside [-pi/2, pi/2]");
  if (!(radius > 0.0)) throw ValidationError("camera pose: radius must be > 0");
  return CameraPose{wrap_angle(azimuth), elevation, radius};
}

Eigen::Vector3d CameraPose::position() const {
  const double ce = std::cos(elevation);
  return radius * Eigen::Vector3d(ce * std::cos(azimuth), std::sin(elevation), ce * std::sin(azimuth));
}

Eigen::Matrix3d CameraPose::rotation() const {
  const double ce = std::cos(elevation), se = std::sin(elevation);
  const double ca = std::cos(azimuth), sa = std::sin(azimuth);
  const Eigen::Vector3d back(ce * ca, se, ce * sa);
  // forward x world_up, normalized; closed form stays defined at the poles.
  const Eigen::Vector3d right(sa, 0.0, -ca);
  const Eigen::Vector3d up = back.cross(right);
  Eigen::Matrix3d r;
  r.col(0) = right;
  r.col(1) = up;
  r.col(2) = back;
  return r;
}

Eigen::Vector3d CameraPose::translation() const { return -rotation().transpose() * position(); }

RelativePose relative_pose(const CameraPose& ref, const CameraPose& tg) {
  const double d_az = wrap_angle(tg.azimuth - ref.azimuth);
  return RelativePose{tg.elevation - ref.elevation, std::sin(d_az), std::cos(d_az), tg.radius - ref.radius};
}

CameraPose recompose(const CameraPose& ref, const RelativePose& rel) {
  const double d_az = std::atan2(rel.d_azimuth_sin, rel.d_azimuth_cos);
  return CameraPose{wrap_angle(ref.azimuth + d_az), ref.elevation + rel.d_elevation, ref.radius + rel.d_radius};
}

}  // namespace ctrlloop
