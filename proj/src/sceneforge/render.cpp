#include <Eigen/Geometry>
#include <cmath>
#include <limits>
#include <string>

#include "ctrlloop/error.hpp"
#include "ctrlloop/scene.hpp"

namespace ctrlloop {

namespace {

constexpr double kAmbient = 0.3;
constexpr double kDiffuse = 0.7;

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Eigen::Vector3d normal;
  const Primitive* prim = nullptr;
};

void intersect_sphere(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& hit) {
  const Eigen::Vector3d oc = o - p.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - p.size.x() * p.size.x();
  const double disc = b * b - c;
  if (disc < 0.0) return;
  const double t = -b - std::sqrt(disc);
  if (t > 1e-9 && t < hit.t) {
    hit.t = t;
    hit.normal = (o + t * d - p.center).normalized();
    hit.prim = &p;
  }
}

void intersect_box(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& hit) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 1.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - p.size[a], hi = p.center[a] + p.size[a];
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return;
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
      sign = s;
    }
    t_far = std::min(t_far, t1);
    if (t_near > t_far) return;
  }
  if (axis < 0 || t_near <= 1e-9 || t_near >= hit.t) return;
  hit.t = t_near;
  hit.normal = Eigen::Vector3d::Zero();
  hit.normal[axis] = sign;
  hit.prim = &p;
}

bool supported_resolution(int r) { return r == 16 || r == 32 || r == 64; }

}  // namespace

RenderOutput render(const SceneSpec& scene, const CameraPose& pose, int resolution, bool allow_any_resolution) {
  if (!allow_any_resolution && !supported_resolution(resolution))
    throw ValidationError("render: resolution " + std::to_string(resolution) + " not in {16, 32, 64}");
  if (resolution < 1) throw ValidationError("render: resolution must be positive");
  if (!(pose.radius > 0.0)) throw ValidationError("render: radius must be > 0");

  const Eigen::Vector3d origin = pose.position();
  for (const auto& p : scene.primitives)
    if (p.contains(origin)) throw ValidationError("render: camera placed inside a primitive (degenerate pose)");

  const Eigen::Matrix3d rot = pose.rotation();
  const Eigen::Vector3d light = Eigen::Vector3d(0.4, 0.8, 0.45).normalized();
  const double half = std::tan(0.5 * kFovYDegrees * 0.017453292519943295);

  RenderOutput out{Image(resolution, resolution, 3, 1.0f), Mask(resolution, resolution)};
  for (int y = 0; y < resolution; ++y) {
    const double v = (1.0 - 2.0 * (y + 0.5) / resolution) * half;
    for (int x = 0; x < resolution; ++x) {
      const double u = (2.0 * (x + 0.5) / resolution - 1.0) * half;
      const Eigen::Vector3d dir = (rot * Eigen::Vector3d(u, v, -1.0)).normalized();
      Hit hit;
      for (const auto& p : scene.primitives) {
        if (p.kind == PrimitiveKind::Sphere)
          intersect_sphere(p, origin, dir, hit);
        else
          intersect_box(p, origin, dir, hit);
      }
      if (!hit.prim) continue;
      const double shade = kAmbient + kDiffuse * std::max(0.0, hit.normal.dot(light));
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = static_cast<float>(hit.prim->color[c] * shade);
      out.alpha.at(y, x) = 1;
    }
  }
  return out;
}

}  // namespace ctrlloop
