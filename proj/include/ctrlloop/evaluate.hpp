#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "ctrlloop/checkpoint.hpp"
#include "ctrlloop/config.hpp"
#include "ctrlloop/dataset.hpp"
#include "ctrlloop/image.hpp"

namespace ctrlloop::metrics {

inline constexpr const char* kFeatureSpace = "frozen-toy-encoder class features (not Inception)";
inline constexpr const char* kAngleConvention = "geodesic angle between camera rotations";
inline constexpr double kNominalRadius = 2.2;

struct SampleRecord {
  int object_id = 0;
  int view_id = 0;
  int ref_view_id = 0;
  double psnr = 0.0;
  double angle_diff_deg = 0.0;
  double iou = 0.0;
  std::uint64_t seed = 0;
};

struct MetricsReport {
  std::string label;
  std::string split;
  int round = 0;
  std::int64_t global_step = 0;
  double psnr = 0.0;
  double kid = 0.0;
  double mean_angle_diff_deg = 0.0;
  std::vector<std::pair<double, double>> aa;   ///< (threshold deg, fraction)
  std::vector<std::pair<double, double>> iou;  ///< (threshold, fraction)
  std::map<std::uint64_t, double> psnr_by_seed;
  std::vector<SampleRecord> records;           ///< sorted by (seed, object, view)

  double aa_at_threshold(double deg) const;
  double iou_at_threshold(double t) const;
};

/// Evaluation target: target view index and the reference view that conditions it.
struct EvalPair {
  int object_id;
  int ref_view;
  int tg_view;
};
/// Every view is a target once, conditioned on the next view of the same object.
std::vector<EvalPair> eval_pairs(const DatasetManifest& m);

/// Scores already-generated images, one per (seed, pair) in seed-major order.
MetricsReport score(const DatasetManifest& m, const std::vector<EvalPair>& pairs,
                    const std::vector<std::uint64_t>& seeds, const std::vector<Image>& generated,
                    const EvalConfig& cfg, const nets::FrozenEncoder& encoder);

std::uint64_t generation_seed(std::uint64_t eval_seed, const EvalPair& p);

/// Generates every evaluation pair for every seed with the checkpointed model.
std::vector<Image> generate(const CheckpointRecord& rec, const DatasetManifest& m, const std::vector<EvalPair>& pairs,
                            const EvalConfig& cfg);

/// Full protocol: generation, PSNR, KID, AA through the pose oracle, IoU through mask extraction.
MetricsReport evaluate(const CheckpointRecord& rec, const DatasetManifest& m, const EvalConfig& cfg);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
/// Writes samples.jsonl, aggregate.json and report.md into dir.
void write_report(const MetricsReport& r, const std::filesystem::path& dir);
std::string markdown_row(const std::string& name, const MetricsReport& r);
std::string markdown_header();

}  // namespace ctrlloop::metrics
