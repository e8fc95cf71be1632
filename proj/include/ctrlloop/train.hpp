#pragma once

#include <torch/nn.h>
#include <torch/optim/adam.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctrlloop/dataset.hpp"
#include "ctrlloop/diffusion.hpp"
#include "ctrlloop/nets.hpp"

namespace ctrlloop::train {

enum class LossMode { PatchFeature, ClassFeature, Pixel };
enum class Strategy { Alternating, Simultaneous, SmOnly };
enum class Phase { SM, CL, SIM };

std::string to_string(LossMode m);
std::string to_string(Strategy s);
std::string to_string(Phase p);
LossMode parse_loss_mode(const std::string& s);
Strategy parse_strategy(const std::string& s);

/// Noise schedule plus the two network configs.
struct ModelConfig {
  nets::ArchConfig arch;
  nets::EncoderConfig encoder;
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  /// Clip x0 predictions to [-1, 1] while sampling (training and evaluation).
  bool clip_x0 = true;

  bool operator==(const ModelConfig&) const = default;
};

inline diffusion::SamplerOptions sampler_options(const ModelConfig& m) {
  return {diffusion::StepVariant::Standard, m.clip_x0};
}

struct TrainConfig {
  int rounds = 2;
  int m_cl = 500;
  int n_sm = 1500;
  int cl_denoise_steps = 10;  ///< K
  double lr_cl = 1e-5;
  double lr_sm = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  int batch_sm = 32;
  int batch_cl = 8;
  int grad_accum_sm = 1;
  int grad_accum_cl = 1;
  LossMode loss_mode = LossMode::PatchFeature;
  Strategy strategy = Strategy::Alternating;
  double lambda_simul = 1.0;
  int warmstart_steps = 2000;
  /// SM learning rate during the warm start; 0 means lr_sm.
  double lr_warmstart = 0.0;
  std::uint64_t seed = 0;

  /// Throws ValidationError when a field is out of range.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// All views of a dataset as model-range tensors, with frozen-encoder
/// features precomputed for every view.
class TrainingData {
 public:
  /// images: [N, C, H, W] in model range [-1, 1]; object_of_view[i] groups views.
  TrainingData(torch::Tensor images, std::vector<CameraPose> poses, std::vector<int> object_of_view,
               const nets::FrozenEncoder& encoder);
  static TrainingData from_manifest(const DatasetManifest& m, const nets::FrozenEncoder& encoder,
                                    torch::ScalarType dtype = torch::kFloat);

  std::int64_t view_count() const { return images_.size(0); }
  const torch::Tensor& images() const { return images_; }
  const torch::Tensor& class_features() const { return z_class_; }
  const torch::Tensor& patch_features() const { return z_patch_; }
  const std::vector<CameraPose>& poses() const { return poses_; }
  const std::vector<std::vector<int>>& objects() const { return objects_; }

  /// (reference view, target view) with distinct views of one object, drawn from `seed`.
  std::pair<int, int> draw_pair(std::uint64_t seed) const;

 private:
  torch::Tensor images_, z_class_, z_patch_;
  std::vector<CameraPose> poses_;
  std::vector<std::vector<int>> objects_;
};

/// A batch of view triplets in tensor form plus one seed per item. Every
/// random draw for an item (timestep, noise, initial sampler state) derives
/// from its seed, so micro-batching never changes what an item sees.
struct Batch {
  torch::Tensor target;      ///< [B, C, H, W]
  torch::Tensor ref_class;   ///< [B, d_c]
  torch::Tensor pose;        ///< [B, 4]
  torch::Tensor tg_class;    ///< [B, d_c]
  torch::Tensor tg_patch;    ///< [B, P, d_p]
  std::vector<std::uint64_t> seeds;

  std::int64_t size() const { return static_cast<std::int64_t>(seeds.size()); }
  Batch slice(std::int64_t begin, std::int64_t end) const;
};

Batch make_batch(const TrainingData& data, std::span<const std::pair<int, int>> pairs,
                 std::span<const std::uint64_t> seeds);
/// Draws `size` items for one optimizer step; item i uses derive_seed(base, phase, step, i).
Batch draw_batch(const TrainingData& data, std::uint64_t base_seed, Phase phase, std::int64_t step, int size);

/// Callable surface of the trainable model, so tests can substitute doubles.
struct DenoiserView {
  std::function<torch::Tensor(const torch::Tensor& z_class, const torch::Tensor& pose)> embed;
  std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& cond, const torch::Tensor& t)> denoise;
};
DenoiserView view_of(nets::ConditionalDenoiser& model);

int item_timestep(std::uint64_t item_seed, int total_steps);
torch::Tensor item_noise(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape, torch::ScalarType dtype);
torch::Tensor item_initial_state(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape,
                                 torch::ScalarType dtype);

/// Score matching: mean squared error between predicted and injected noise.
torch::Tensor sm_loss(const DenoiserView& model, const Batch& batch, const diffusion::NoiseSchedule& sched);

/// Generates the target through the full K-step sampler (graph kept for every
/// step) and compares against the ground truth in the chosen space.
torch::Tensor cl_loss(const DenoiserView& model, const nets::FrozenEncoder& encoder, const Batch& batch,
                      const diffusion::NoiseSchedule& sched, const diffusion::TimestepPlan& plan, LossMode mode,
                      diffusion::SamplerOptions opts = {});

/// sm_loss + lambda * cl_loss on the same batch.
torch::Tensor simultaneous_loss(const DenoiserView& model, const nets::FrozenEncoder& encoder, const Batch& batch,
                                const diffusion::NoiseSchedule& sched, const diffusion::TimestepPlan& plan,
                                LossMode mode, double lambda, diffusion::SamplerOptions opts = {});

/// Runs `loss_of` over micro-batches, accumulating gradients weighted by
/// micro-batch share, then takes one optimizer step. Returns the batch loss.
double accumulate_and_step(torch::optim::Optimizer& opt, const Batch& batch, int grad_accum,
                           const std::function<torch::Tensor(const Batch&)>& loss_of);

struct LogEntry {
  std::int64_t step = 0;
  Phase phase = Phase::SM;
  int round = 0;
  double loss = 0.0;
  double wall_time = 0.0;
};

struct TrainLog {
  std::vector<LogEntry> entries;
  void append_jsonl(const std::filesystem::path& path, std::size_t from = 0) const;
};

/// Mutable training state: the single writer of the denoiser parameters.
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg, std::shared_ptr<const TrainingData> data,
          torch::ScalarType dtype = torch::kFloat);

  double sm_step();
  double cl_step();
  double simultaneous_step();

  void run_warmstart();
  /// One round: m_cl CL steps then n_sm SM steps (or the simultaneous equivalent).
  void run_round();

  nets::ConditionalDenoiser& model() { return model_; }
  const nets::FrozenEncoder& encoder() const { return encoder_; }
  const diffusion::NoiseSchedule& schedule() const { return sched_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& config() const { return cfg_; }
  TrainConfig& mutable_config() { return cfg_; }
  torch::optim::Adam& sm_optimizer() { return *opt_sm_; }
  torch::optim::Adam& cl_optimizer() { return *opt_cl_; }
  const TrainLog& log() const { return log_; }
  std::int64_t global_step() const { return global_step_; }
  int round() const { return round_; }
  void set_progress(std::int64_t global_step, int round) {
    global_step_ = global_step;
    round_ = round;
  }

 private:
  void record(Phase phase, double loss);
  void set_sm_lr(double lr);

  ModelConfig model_cfg_;
  TrainConfig cfg_;
  std::shared_ptr<const TrainingData> data_;
  torch::ScalarType dtype_;
  nets::FrozenEncoder encoder_;
  diffusion::NoiseSchedule sched_;
  nets::ConditionalDenoiser model_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_sm_, opt_cl_;
  TrainLog log_;
  std::int64_t global_step_ = 0;
  int round_ = 0;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace ctrlloop::train
