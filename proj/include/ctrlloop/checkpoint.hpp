#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "ctrlloop/config.hpp"
#include "ctrlloop/train.hpp"

namespace ctrlloop {

/// One stored float32 array.
struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> values;
};

/// On disk: 8-byte magic "CTRLCKP1", uint64 little-endian header length, the
/// UTF-8 JSON header, then the little-endian float32 arrays. Array offsets in
/// the header are byte offsets from the start of the array section.
struct CheckpointRecord {
  std::string label;  ///< "warmstart" or "round<N>"
  int round = 0;
  std::int64_t global_step = 0;
  ExperimentConfig config;
  std::vector<double> betas;
  nlohmann::json rng;        ///< base seed and next step; every draw is derived from these
  nlohmann::json optimizer;  ///< per-optimizer step counters
  nlohmann::json data;       ///< identity of the training dataset
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const CheckpointRecord& rec, const std::filesystem::path& path);
CheckpointRecord load_checkpoint(const std::filesystem::path& path);

nlohmann::json dataset_identity(const DatasetManifest& m);

/// Snapshot of trainer parameters, optimizer moments and progress.
CheckpointRecord capture(train::Trainer& trainer, const ExperimentConfig& cfg, const std::string& label,
                         const nlohmann::json& data_identity);
/// Restores a snapshot into a trainer built from the same model config.
void restore(train::Trainer& trainer, const CheckpointRecord& rec);
/// Loads only the denoiser parameters into `model`.
void load_parameters(nets::ConditionalDenoiser& model, const CheckpointRecord& rec);

std::string checkpoint_name(int round);
/// Checkpoints in `dir` sorted by round.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);

}  // namespace ctrlloop
