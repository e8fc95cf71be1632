#include <doctest.h>

#include <Eigen/LU>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "ctrlloop/camera.hpp"
#include "ctrlloop/dataset.hpp"
#include "ctrlloop/error.hpp"
#include "ctrlloop/metrics.hpp"
#include "ctrlloop/scene.hpp"
#include "test_util.hpp"

using namespace ctrlloop;
namespace fs = std::filesystem;

namespace {

SceneSpec single_sphere(double r) {
  SceneSpec s;
  Primitive p;
  p.kind = PrimitiveKind::Sphere;
  p.size = Eigen::Vector3d::Constant(r);
  p.color = Eigen::Vector3d(0.2, 0.4, 0.6);
  s.primitives.push_back(p);
  return s;
}

}  // namespace

TEST_SUITE("camera") {
  TEST_CASE("rotation is orthonormal and looks at the origin") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> az(-10.0, 10.0), el(-1.5, 1.5), r(0.5, 5.0);
    for (int i = 0; i < 200; ++i) {
      const auto p = CameraPose::make(az(gen), el(gen), r(gen));
      const Eigen::Matrix3d R = p.rotation();
      CHECK((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() < 1e-12);
      CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-12));
      // The camera looks along -back, which must point at the origin.
      const Eigen::Vector3d forward = -R.col(2);
      CHECK((forward + p.position().normalized()).norm() < 1e-12);
      // Translation is the world-to-camera offset.
      CHECK((p.translation() + R.transpose() * p.position()).norm() < 1e-12);
      CHECK(p.azimuth >= -std::numbers::pi);
      CHECK(p.azimuth < std::numbers::pi);
    }
  }

  TEST_CASE("pose is recoverable from its rotation and translation") {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> az(-3.0, 3.0), el(-1.4, 1.4), r(0.5, 5.0);
    for (int i = 0; i < 200; ++i) {
      const auto p = CameraPose::make(az(gen), el(gen), r(gen));
      const Eigen::Vector3d pos = -p.rotation() * p.translation();
      const double radius = pos.norm();
      const double elevation = std::asin(pos.y() / radius);
      const double azimuth = std::atan2(pos.z(), pos.x());
      CHECK(radius == doctest::Approx(p.radius).epsilon(1e-12));
      CHECK(elevation == doctest::Approx(p.elevation).epsilon(1e-9));
      CHECK(std::abs(wrap_angle(azimuth - p.azimuth)) < 1e-9);
    }
  }

  TEST_CASE("invalid poses are rejected") {
    CHECK_THROWS_AS(CameraPose::make(0.0, 2.0, 1.0), ValidationError);
    CHECK_THROWS_AS(CameraPose::make(0.0, 0.0, 0.0), ValidationError);
    CHECK_THROWS_AS(CameraPose::make(0.0, 0.0, -1.0), ValidationError);
    CHECK_THROWS_AS(CameraPose::make(NAN, 0.0, 1.0), ValidationError);
  }

  TEST_CASE("relative pose of identical poses is the identity") {
    const auto p = CameraPose::make(0.3, 0.2, 2.0);
    const auto rel = relative_pose(p, p);
    CHECK((rel == RelativePose{0.0, 0.0, 1.0, 0.0}));
  }

  TEST_CASE("relative azimuth wraps across 360 degrees") {
    const auto ref = CameraPose::make(deg2rad(350.0), 0.1, 2.2);
    const auto tg = CameraPose::make(deg2rad(10.0), 0.1, 2.2);
    const auto rel = relative_pose(ref, tg);
    CHECK(rel.d_azimuth_sin == doctest::Approx(std::sin(deg2rad(20.0))).epsilon(1e-12));
    CHECK(rel.d_azimuth_cos == doctest::Approx(std::cos(deg2rad(20.0))).epsilon(1e-12));
    CHECK(rel.d_elevation == doctest::Approx(0.0));
  }

  TEST_CASE("recompose inverts relative_pose over random pairs") {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi), el(-1.5, 1.5), r(0.5, 4.0);
    for (int i = 0; i < 1000; ++i) {
      const auto a = CameraPose::make(az(gen), el(gen), r(gen));
      const auto b = CameraPose::make(az(gen), el(gen), r(gen));
      const auto rel = relative_pose(a, b);
      CHECK(std::abs(rel.d_azimuth_sin * rel.d_azimuth_sin + rel.d_azimuth_cos * rel.d_azimuth_cos - 1.0) < 1e-6);
      const auto c = recompose(a, rel);
      CHECK(std::abs(wrap_angle(c.azimuth - b.azimuth)) < 1e-9);
      CHECK(std::abs(c.elevation - b.elevation) < 1e-9);
      CHECK(std::abs(c.radius - b.radius) < 1e-9);
    }
  }
}

TEST_SUITE("scene") {
  TEST_CASE("make_scene is deterministic") { CHECK(make_scene(7) == make_scene(7)); }

  TEST_CASE("primitive counts and extents") {
    std::set<std::size_t> counts;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto s = make_scene(seed);
      REQUIRE(s.primitives.size() >= 2);
      REQUIRE(s.primitives.size() <= 5);
      counts.insert(s.primitives.size());
      for (const auto& p : s.primitives) {
        CHECK(p.bounding_radius() <= 1.0);
        CHECK((p.color.array() >= 0.0).all());
        CHECK((p.color.array() <= 1.0).all());
      }
    }
    CHECK(counts.size() >= 2);
  }
}

TEST_SUITE("render") {
  TEST_CASE("centered sphere projects to a centered disk") {
    const double r = 0.5, dist = 2.2;
    const int res = 64;
    const auto scene = single_sphere(r);
    // Disk radius from the pinhole model: tan(asin(r / d)) / tan(fov / 2) half-widths.
    const double half = std::tan(deg2rad(kFovYDegrees) / 2);
    const double disk_px = std::tan(std::asin(r / dist)) / half * res / 2;
    for (double az : {0.0, 1.0, 2.5, -2.0}) {
      const auto out = render(scene, CameraPose::make(az, 0.3, dist), res);
      double sx = 0, sy = 0;
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
          if (!out.alpha.at(y, x)) continue;
          sx += x + 0.5;
          sy += y + 0.5;
          const double d = std::hypot(x + 0.5 - res / 2.0, y + 0.5 - res / 2.0);
          CHECK(d <= disk_px + 0.75);
        }
      const double n = static_cast<double>(out.alpha.count());
      CHECK(n == doctest::Approx(std::numbers::pi * disk_px * disk_px).epsilon(0.05));
      CHECK(sx / n == doctest::Approx(res / 2.0).epsilon(1e-3));
      CHECK(sy / n == doctest::Approx(res / 2.0).epsilon(1e-3));
    }
  }

  TEST_CASE("white background, range and determinism") {
    const auto scene = make_scene(3);
    const auto pose = CameraPose::make(0.7, 0.4, 2.2);
    const auto a = render(scene, pose, 32);
    const auto b = render(scene, pose, 32);
    CHECK(a.image == b.image);
    CHECK(a.alpha == b.alpha);
    CHECK(a.alpha.count() > 0);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c) {
          const float v = a.image.at(y, x, c);
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          if (!a.alpha.at(y, x)) CHECK(v == 1.0f);
        }
  }

  TEST_CASE("azimuth and azimuth + 2 pi render identically") {
    const auto scene = make_scene(4);
    const double az = 0.9;
    const auto a = render(scene, CameraPose::make(az, 0.2, 2.2), 32);
    const auto b = render(scene, CameraPose::make(az + 2 * std::numbers::pi, 0.2, 2.2), 32);
    CHECK(a.image == b.image);
  }

  TEST_CASE("unsupported resolution and camera inside an object") {
    const auto scene = single_sphere(0.5);
    CHECK_THROWS_AS(render(scene, CameraPose::make(0, 0, 2.2), 17), ValidationError);
    CHECK_THROWS_AS(render(scene, CameraPose::make(0, 0, 0.3), 32), ValidationError);
    CHECK_NOTHROW(render(scene, CameraPose::make(0, 0, 2.2), 8, true));
  }

  TEST_CASE("extracted masks match the renderer alpha") {
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> az(-3.0, 3.0), el(-0.17, 1.04);
    for (int i = 0; i < 20; ++i) {
      const auto scene = make_scene(100 + i);
      const auto out = render(scene, CameraPose::make(az(gen), el(gen), 2.2), 32);
      CHECK(metrics::iou(metrics::extract_mask(out.image), out.alpha) >= 0.99);
    }
  }
}

TEST_SUITE("dataset") {
  TEST_CASE("smallest dataset: one object, two views") {
    testutil::TempDir dir;
    const auto m = build_dataset(1, 2, 16, 0, dir.path());
    REQUIRE(m.objects.size() == 1);
    CHECK(m.objects[0].views.size() == 2);
    int pngs = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir.path()))
      if (e.path().extension() == ".png") ++pngs;
    CHECK(pngs == 2);  // alpha is stored in each PNG's A channel
    CHECK(fs::exists(dir / "manifest.json"));
  }

  TEST_CASE("8 x 12 dataset has 96 views and reloads") {
    testutil::TempDir dir;
    const auto m = build_dataset(8, 12, 16, 1, dir.path());
    CHECK(m.view_count() == 96);
    const auto loaded = load_manifest(dir.path());
    CHECK(loaded.view_count() == 96);
    CHECK(loaded.seed == 1);
    CHECK(loaded.version == kRendererVersion);
    for (std::size_t o = 0; o < m.objects.size(); ++o) {
      CHECK(loaded.objects[o].object_seed == m.objects[o].object_seed);
      for (std::size_t v = 0; v < m.objects[o].views.size(); ++v) {
        const auto& a = m.objects[o].views[v].pose;
        const auto& b = loaded.objects[o].views[v].pose;
        CHECK(a.azimuth == b.azimuth);
        CHECK(a.elevation == b.elevation);
        CHECK(a.radius == b.radius);
      }
    }
  }

  TEST_CASE("rebuilding with the same seed is byte-identical") {
    testutil::TempDir a, b;
    build_dataset(2, 3, 32, 42, a.path());
    build_dataset(2, 3, 32, 42, b.path());
    CHECK(testutil::read_file(a / "manifest.json") == testutil::read_file(b / "manifest.json"));
    for (int o = 0; o < 2; ++o)
      for (int v = 0; v < 3; ++v) {
        const auto rel = "obj_00" + std::to_string(o) + "/view_00" + std::to_string(v) + ".png";
        CHECK(testutil::read_file(a / rel) == testutil::read_file(b / rel));
      }
  }

  TEST_CASE("stored views match a fresh render after 8-bit quantization") {
    testutil::TempDir dir;
    const auto m = build_dataset(2, 3, 32, 5, dir.path());
    for (int o = 0; o < 2; ++o) {
      const auto scene = make_scene(m.objects[o].object_seed);
      for (int v = 0; v < 3; ++v) {
        const auto stored = load_view(m, o, v);
        const auto fresh = render(scene, m.objects[o].views[v].pose, 32);
        CHECK(stored.rgb == quantize_8bit(fresh.image));
        CHECK(stored.alpha == fresh.alpha);
      }
    }
  }

  TEST_CASE("triplets carry the relative pose of their views") {
    testutil::TempDir dir;
    const auto m = build_dataset(1, 4, 16, 2, dir.path());
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        if (a == b) continue;
        const auto t = load_triplet(m, 0, a, b);
        CHECK(t.rel_pose == relative_pose(t.ref_pose, t.tg_pose));
        CHECK(t.target_alpha.width == t.target.width);
        CHECK(t.target_alpha.height == t.target.height);
      }
  }

  TEST_CASE("invalid arguments and unwritable output") {
    testutil::TempDir dir;
    CHECK_THROWS_AS(build_dataset(0, 2, 16, 0, dir.path()), ValidationError);
    CHECK_THROWS_AS(build_dataset(1, 1, 16, 0, dir.path()), ValidationError);
    CHECK_THROWS_AS(build_dataset(1, 2, 17, 0, dir.path()), ValidationError);
    std::ofstream(dir / "file") << "x";
    CHECK_THROWS_AS(build_dataset(1, 2, 16, 0, dir / "file" / "sub"), IoError);
    CHECK_THROWS_AS(load_manifest(dir / "missing"), IoError);
  }

  TEST_CASE("missing image files are detected on load") {
    testutil::TempDir dir;
    build_dataset(1, 2, 16, 0, dir.path());
    fs::remove(dir / "obj_000/view_001.png");
    CHECK_THROWS_AS(load_manifest(dir.path()), IoError);
  }
}
