#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "ctrlloop/camera.hpp"
#include "ctrlloop/image.hpp"

namespace ctrlloop {

enum class PrimitiveKind { Sphere, Box };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  /// Sphere: (r, r, r). Box: axis-aligned half extents.
  Eigen::Vector3d size = Eigen::Vector3d::Constant(0.1);
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);

  double bounding_radius() const;
  bool contains(const Eigen::Vector3d& p) const;
  bool operator==(const Primitive&) const = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  bool operator==(const SceneSpec&) const = default;
};

/// Scene content stays inside this radius so every view in the sampling
/// range frames the whole object.
inline constexpr double kSceneExtent = 0.75;

SceneSpec make_scene(std::uint64_t seed);

struct RenderOutput {
  Image image;
  Mask alpha;
};

inline constexpr double kFovYDegrees = 45.0;

/// Ray casts the scene with one fixed directional light over a white background.
/// Resolution must be 16, 32 or 64 unless `allow_any_resolution` is set (toy tests use 4 and 8).
RenderOutput render(const SceneSpec& scene, const CameraPose& pose, int resolution,
                    bool allow_any_resolution = false);

}  // namespace ctrlloop
