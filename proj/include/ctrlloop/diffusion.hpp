#pragma once

#include <torch/types.h>

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace ctrlloop::diffusion {

/// Discrete variance schedule, indexed by timestep t in [1, T].
struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }
  double beta_at(int t) const { return beta.at(t - 1); }
  double alpha_at(int t) const { return alpha.at(t - 1); }
  /// alpha_bar_0 is defined as 1 so the terminal step returns the x0 prediction.
  double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
};

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end);
/// Rebuilds a schedule from stored betas, validating them.
NoiseSchedule schedule_from_betas(std::vector<double> beta);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
torch::Tensor forward_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched);
/// Per-item timesteps; dim 0 of x0 indexes items.
torch::Tensor forward_noise(const torch::Tensor& x0, std::span<const int> t, const torch::Tensor& eps,
                            const NoiseSchedule& sched);

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& sched);

enum class StepVariant {
  Standard,       ///< deterministic DDIM, eta = 0
  PaperFootnote,  ///< (1/sqrt(abar_t)) (x_t - (1 - alpha_t) / sqrt(1 - abar_t) eps); ignores t_prev
};

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched, StepVariant variant = StepVariant::Standard);

/// Descending timesteps [T, T - s, ...], s = ceil(T / n). The last entry denoises to 0.
struct TimestepPlan {
  std::vector<int> steps;
};

TimestepPlan strided_plan(int total_steps, int n);

/// Clamped variant of the standard step: the x0 prediction is clipped to
/// [lo, hi] and the noise estimate re-derived from it before stepping.
torch::Tensor ddim_step_clipped(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                                const NoiseSchedule& sched, double lo, double hi);

struct SamplerOptions {
  StepVariant variant = StepVariant::Standard;
  /// Clip x0 predictions to the model range [-1, 1] (standard variant only).
  bool clip_x0 = false;
};

/// (x_t, condition, t) -> predicted noise.
using DenoiseFn = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& condition, int t)>;

/// Standard normal draw from a generator seeded with `seed`.
torch::Tensor gaussian(std::uint64_t seed, at::IntArrayRef shape, torch::ScalarType dtype = torch::kFloat);
/// Stacks one seeded draw of `item_shape` per seed along a new leading dimension.
torch::Tensor gaussian_batch(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape,
                             torch::ScalarType dtype = torch::kFloat);

/// Runs the reverse process from a given x_T along `plan`. Autograd flows through
/// every step. Throws NumericalError on non-finite intermediates.
torch::Tensor sample_from(const DenoiseFn& denoise, const torch::Tensor& condition, const TimestepPlan& plan,
                          const NoiseSchedule& sched, torch::Tensor x_init, SamplerOptions opts = {});

/// Same, starting from a standard normal draw seeded with `seed`.
torch::Tensor sample(const DenoiseFn& denoise, const torch::Tensor& condition, const TimestepPlan& plan,
                     const NoiseSchedule& sched, std::uint64_t seed, at::IntArrayRef shape,
                     torch::ScalarType dtype = torch::kFloat, SamplerOptions opts = {});

}  // namespace ctrlloop::diffusion
