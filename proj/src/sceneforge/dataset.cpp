#include "ctrlloop/dataset.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "ctrlloop/error.hpp"
#include "ctrlloop/rng.hpp"
#include "ctrlloop/strutil.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctrlloop {

std::size_t DatasetManifest::view_count() const {
  std::size_t n = 0;
  for (const auto& o : objects) n += o.views.size();
  return n;
}

std::uint64_t object_seed_for(std::uint64_t dataset_seed, int object_index) {
  // Keep object seeds small so they survive a JSON double round trip in other tooling.
  return derive_seed({dataset_seed, static_cast<std::uint64_t>(object_index), 0x0b1ec7}) >> 12;
}

std::vector<CameraPose> sample_views(std::uint64_t object_seed, int n_views, const ViewSampling& s) {
  SplitMix rng(derive_seed({object_seed, 0x71e75}));
  std::vector<CameraPose> poses;
  poses.reserve(n_views);
  for (int v = 0; v < n_views; ++v) {
    const double az = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double el = deg2rad(rng.uniform(s.elevation_min_deg, s.elevation_max_deg));
    const double r = s.radius + rng.uniform(-s.radius_jitter, s.radius_jitter);
    poses.push_back(CameraPose::make(az, el, r));
  }
  return poses;
}

DatasetManifest build_dataset(int n_objects, int n_views, int resolution, std::uint64_t seed,
                              const fs::path& out_dir) {
  if (n_objects < 1) throw ValidationError("build_dataset: n_objects must be >= 1");
  if (n_views < 2) throw ValidationError("build_dataset: n_views must be >= 2");
  if (resolution != 16 && resolution != 32 && resolution != 64)
    throw ValidationError("build_dataset: resolution must be one of 16, 32, 64");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory: " + out_dir.string());

  DatasetManifest m;
  m.seed = seed;
  m.resolution = resolution;
  m.root = out_dir;
  for (int i = 0; i < n_objects; ++i) {
    ObjectRecord obj;
    obj.object_seed = object_seed_for(seed, i);
    const SceneSpec scene = make_scene(obj.object_seed);
    const auto rel_dir = strprintf("obj_%03d", i);
    fs::create_directories(out_dir / rel_dir, ec);
    if (ec) throw IoError("cannot create directory: " + (out_dir / rel_dir).string());
    const auto poses = sample_views(obj.object_seed, n_views);
    for (int v = 0; v < n_views; ++v) {
      const auto rel_path = strprintf("%s/view_%03d.png", rel_dir.c_str(), v);
      const RenderOutput r = render(scene, poses[v], resolution);
      write_png_rgba(out_dir / rel_path, r.image, r.alpha);
      obj.views.push_back({poses[v], rel_path});
    }
    m.objects.push_back(std::move(obj));
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json j;
  j["seed"] = m.seed;
  j["version"] = m.version;
  j["resolution"] = m.resolution;
  j["objects"] = json::array();
  for (const auto& o : m.objects) {
    json jo;
    jo["object_seed"] = o.object_seed;
    jo["views"] = json::array();
    for (const auto& v : o.views)
      jo["views"].push_back({{"azimuth", v.pose.azimuth},
                             {"elevation", v.pose.elevation},
                             {"radius", v.pose.radius},
                             {"image_path", v.image_path}});
    j["objects"].push_back(std::move(jo));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write manifest: " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing manifest: " + path.string());
}

DatasetManifest load_manifest(const fs::path& dir_or_file) {
  const fs::path file = fs::is_directory(dir_or_file) ? dir_or_file / "manifest.json" : dir_or_file;
  std::ifstream f(file);
  if (!f) throw IoError("missing manifest: " + file.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest " + file.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.version = j.at("version").get<std::string>();
    m.resolution = j.at("resolution").get<int>();
    for (const auto& jo : j.at("objects")) {
      ObjectRecord o;
      o.object_seed = jo.at("object_seed").get<std::uint64_t>();
      for (const auto& jv : jo.at("views")) {
        ViewRecord v;
        v.pose = CameraPose::make(jv.at("azimuth").get<double>(), jv.at("elevation").get<double>(),
                                  jv.at("radius").get<double>());
        v.image_path = jv.at("image_path").get<std::string>();
        if (!fs::exists(m.root / v.image_path)) throw IoError("manifest references missing file: " + v.image_path);
        o.views.push_back(std::move(v));
      }
      m.objects.push_back(std::move(o));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + file.string() + ": " + e.what());
  }
  if (m.objects.empty()) throw ValidationError("manifest lists no objects");
  return m;
}

RgbaImage load_view(const DatasetManifest& m, int object_index, int view_index) {
  return read_png_rgba(m.root / m.objects.at(object_index).views.at(view_index).image_path);
}

ViewTriplet load_triplet(const DatasetManifest& m, int object_index, int ref_view, int tg_view) {
  const auto& obj = m.objects.at(object_index);
  auto ref = load_view(m, object_index, ref_view);
  auto tg = load_view(m, object_index, tg_view);
  ViewTriplet t;
  t.reference = std::move(ref.rgb);
  t.target = std::move(tg.rgb);
  t.target_alpha = std::move(tg.alpha);
  t.ref_pose = obj.views.at(ref_view).pose;
  t.tg_pose = obj.views.at(tg_view).pose;
  t.rel_pose = relative_pose(t.ref_pose, t.tg_pose);
  return t;
}

}  // namespace ctrlloop
