#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "ctrlloop/train.hpp"

namespace ctrlloop {

struct DatasetConfig {
  int n_objects = 8;
  int n_views = 12;
  int resolution = 32;
  std::uint64_t seed = 0;
  bool operator==(const DatasetConfig&) const = default;
};

/// Render-and-compare search grid. An unset radius means the nominal dataset radius (2.2).
struct PoseGridSpec {
  double azimuth_step_deg = 5.0;
  double elevation_min_deg = -10.0;
  double elevation_max_deg = 60.0;
  double elevation_step_deg = 5.0;
  std::optional<double> radius;
  bool operator==(const PoseGridSpec&) const = default;
};

struct EvalConfig {
  int denoise_steps = 50;
  std::vector<std::uint64_t> seeds{0};
  int batch = 32;
  PoseGridSpec pose_grid;
  std::vector<double> aa_thresholds_deg{5.0, 10.0, 15.0, 20.0};
  std::vector<double> iou_thresholds{0.5, 0.7};
  double mask_tau = 0.05;
  bool operator==(const EvalConfig&) const = default;
};

/// Axes of the ablation grid; an empty axis is disabled.
struct AblationConfig {
  std::vector<int> cl_denoise_steps;
  std::vector<std::string> loss_modes;
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;  ///< generation seeds used at evaluation
  bool operator==(const AblationConfig&) const = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  train::ModelConfig model;
  train::TrainConfig train;
  EvalConfig eval;
  AblationConfig ablate;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& c);
nlohmann::json to_json(const train::ModelConfig& c);
nlohmann::json to_json(const train::TrainConfig& c);
/// Missing keys take defaults; unknown keys and ill-typed values raise ValidationError naming the field.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
train::ModelConfig model_from_json(const nlohmann::json& j);
train::TrainConfig train_from_json(const nlohmann::json& j);

ExperimentConfig load_experiment(const std::filesystem::path& path);
void save_experiment(const ExperimentConfig& c, const std::filesystem::path& path);

/// Applies `section.key=value` (dotted path). The value is parsed as JSON when
/// possible, otherwise taken as a string. Key names and value types are checked
/// here; range and cross-field checks wait for validate(), so several
/// overrides can change dependent fields together.
ExperimentConfig apply_override(const ExperimentConfig& c, const std::string& assignment);

}  // namespace ctrlloop
