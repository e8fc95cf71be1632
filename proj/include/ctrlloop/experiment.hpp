#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctrlloop/checkpoint.hpp"
#include "ctrlloop/config.hpp"
#include "ctrlloop/dataset.hpp"
#include "ctrlloop/evaluate.hpp"

namespace ctrlloop {

using LogFn = std::function<void(const std::string&)>;

/// Single-worker mode: one intra-op thread and deterministic kernels only.
void set_deterministic(bool on);

DatasetManifest run_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                             const LogFn& log = {});

struct TrainOptions {
  /// Stop once this round's checkpoint is written (used to simulate interruption).
  std::optional<int> stop_after_round;
  /// Start from this checkpoint's parameters instead of running the warm start.
  std::optional<std::filesystem::path> init_from;
};

/// Warm start (ckpt_round000), then one checkpoint per round. Resumes from the
/// latest checkpoint already present in out_dir. Returns the checkpoint paths.
std::vector<std::filesystem::path> run_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                             const std::filesystem::path& out_dir, const TrainOptions& opts = {},
                                             const LogFn& log = {});

/// Evaluates one checkpoint into out_dir. When `expected_model` is given the
/// checkpoint's model config must match it.
metrics::MetricsReport run_eval_checkpoint(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& data_dir, const EvalConfig& eval,
                                           const std::filesystem::path& out_dir,
                                           const std::optional<train::ModelConfig>& expected_model = {},
                                           const LogFn& log = {});

/// Evaluates every checkpoint of a run into run_dir/eval/<checkpoint stem>.
std::vector<metrics::MetricsReport> run_eval_dir(const std::filesystem::path& run_dir,
                                                 const std::filesystem::path& data_dir, const EvalConfig& eval,
                                                 const std::optional<train::ModelConfig>& expected_model = {},
                                                 const LogFn& log = {});

struct AblationCell {
  std::string name;
  int cl_denoise_steps = 0;
  train::LossMode loss_mode = train::LossMode::PatchFeature;
  train::Strategy strategy = train::Strategy::Alternating;
  bool failed = false;
  std::string error;
  std::optional<metrics::MetricsReport> report;
};

/// Cross product of the enabled axes; disabled axes keep the base value.
std::vector<AblationCell> ablation_cells(const ExperimentConfig& base);

/// Trains and evaluates every cell from one shared warm start. Writes
/// ablation.json and ablation.md into out_dir.
std::vector<AblationCell> run_ablate(const ExperimentConfig& base, const std::filesystem::path& data_dir,
                                     const std::filesystem::path& out_dir, const LogFn& log = {});

std::string ablation_markdown(const ExperimentConfig& base, const std::vector<AblationCell>& cells);

/// Collects eval/*/aggregate.json of each run, writes report.md and
/// per-metric SVG plots into out_dir. Returns the Markdown.
std::string run_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                       const LogFn& log = {});

}  // namespace ctrlloop
