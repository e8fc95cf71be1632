#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctrlloop/camera.hpp"
#include "ctrlloop/image.hpp"
#include "ctrlloop/scene.hpp"

namespace ctrlloop {

inline constexpr const char* kRendererVersion = "sceneforge-raycast-1";

struct ViewRecord {
  CameraPose pose;
  std::string image_path;  ///< relative to the manifest directory
};

struct ObjectRecord {
  std::uint64_t object_seed = 0;
  std::vector<ViewRecord> views;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::string version = kRendererVersion;
  int resolution = 32;
  std::vector<ObjectRecord> objects;
  std::filesystem::path root;  ///< directory holding manifest.json; not serialized

  std::size_t view_count() const;
};

/// Reference view, relative pose and target view with its alpha.
struct ViewTriplet {
  Image reference;
  RelativePose rel_pose;
  Image target;
  Mask target_alpha;
  CameraPose ref_pose;
  CameraPose tg_pose;
};

struct ViewSampling {
  double elevation_min_deg = -10.0;
  double elevation_max_deg = 60.0;
  double radius = 2.2;
  double radius_jitter = 0.2;
};

std::uint64_t object_seed_for(std::uint64_t dataset_seed, int object_index);
std::vector<CameraPose> sample_views(std::uint64_t object_seed, int n_views, const ViewSampling& s = {});

/// Renders n_objects x n_views RGBA PNGs plus manifest.json into out_dir.
DatasetManifest build_dataset(int n_objects, int n_views, int resolution, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
/// Reads `dir/manifest.json` (or the given file) and checks every referenced image exists.
DatasetManifest load_manifest(const std::filesystem::path& dir_or_file);

/// Loads one view as an RGBA image.
RgbaImage load_view(const DatasetManifest& m, int object_index, int view_index);
ViewTriplet load_triplet(const DatasetManifest& m, int object_index, int ref_view, int tg_view);

}  // namespace ctrlloop
