#include "ctrlloop/scene.hpp"

#include <algorithm>
#include <cmath>

#include "ctrlloop/rng.hpp"

namespace ctrlloop {

double Primitive::bounding_radius() const {
  return center.norm() + (kind == PrimitiveKind::Sphere ? size.x() : size.norm());
}

bool Primitive::contains(const Eigen::Vector3d& p) const {
  const Eigen::Vector3d d = p - center;
  if (kind == PrimitiveKind::Sphere) return d.squaredNorm() <= size.x() * size.x();
  return (d.array().abs() <= size.array()).all();
}

namespace {

Eigen::Vector3d random_direction(SplitMix& rng) {
  Eigen::Vector3d v;
  do {
    v = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
  } while (v.squaredNorm() < 1e-12);
  return v.normalized();
}

Eigen::Vector3d random_color(SplitMix& rng) {
  Eigen::Vector3d c(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
  // Keep one channel well below white so the shaded surface never merges with the background.
  const auto dark = static_cast<int>(rng.uniform_int(0, 2));
  c[dark] = std::min(c[dark], rng.uniform(0.05, 0.6));
  return c;
}

}  // namespace

SceneSpec make_scene(std::uint64_t seed) {
  SplitMix rng(derive_seed({seed, 0x5ce7e}));
  SceneSpec scene;
  scene.seed = seed;
  const auto count = rng.uniform_int(2, 5);
  for (std::int64_t i = 0; i < count; ++i) {
    Primitive p;
    p.kind = rng.uniform() < 0.5 ? PrimitiveKind::Sphere : PrimitiveKind::Box;
    // Larger first primitive anchors the object near the origin.
    const double max_extent = i == 0 ? 0.45 : 0.3;
    if (p.kind == PrimitiveKind::Sphere) {
      const double r = rng.uniform(0.15, max_extent);
      p.size = Eigen::Vector3d::Constant(r);
    } else {
      p.size = Eigen::Vector3d(rng.uniform(0.08, max_extent * 0.7), rng.uniform(0.08, max_extent * 0.7),
                               rng.uniform(0.08, max_extent * 0.7));
    }
    const double own = p.kind == PrimitiveKind::Sphere ? p.size.x() : p.size.norm();
    const double room = std::max(0.0, kSceneExtent - own);
    const double offset = i == 0 ? rng.uniform(0.0, 0.3 * room) : rng.uniform(0.3 * room, room);
    p.center = offset * random_direction(rng);
    p.color = random_color(rng);
    scene.primitives.push_back(p);
  }
  return scene;
}

}  // namespace ctrlloop
