#include "ctrlloop/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cmath>
#include <string>

#include "ctrlloop/error.hpp"
#include "ctrlloop/strutil.hpp"

namespace ctrlloop::diffusion {

NoiseSchedule schedule_from_betas(std::vector<double> beta) {
  if (beta.empty()) throw ValidationError("noise schedule: at least one step required");
  NoiseSchedule s;
  s.beta = std::move(beta);
  double prod = 1.0;
  for (double b : s.beta) {
    if (!(b > 0.0 && b < 1.0)) throw ValidationError(strprintf("noise schedule: beta %g outside (0, 1)", b));
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValidationError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ValidationError("linear_schedule: require 0 < beta_start <= beta_end < 1");
  std::vector<double> beta(steps);
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    beta[i] = beta_start + frac * (beta_end - beta_start);
  }
  return schedule_from_betas(std::move(beta));
}

namespace {

void check_t(int t, const NoiseSchedule& sched, const char* where) {
  if (t < 1 || t > sched.steps())
    throw ValidationError(strprintf("%s: timestep %d outside [1, %d]", where, t, sched.steps()));
}

}  // namespace

torch::Tensor forward_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& sched) {
  if (x0.sizes() != eps.sizes()) throw ValidationError("forward_noise: x0 and eps shapes differ");
  check_t(t, sched, "forward_noise");
  const double ab = sched.alpha_bar_at(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_noise(const torch::Tensor& x0, std::span<const int> t, const torch::Tensor& eps,
                            const NoiseSchedule& sched) {
  if (x0.sizes() != eps.sizes()) throw ValidationError("forward_noise: x0 and eps shapes differ");
  if (x0.dim() < 1 || x0.size(0) != static_cast<std::int64_t>(t.size()))
    throw ValidationError("forward_noise: one timestep per item required");
  std::vector<double> a(t.size()), b(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    check_t(t[i], sched, "forward_noise");
    a[i] = std::sqrt(sched.alpha_bar_at(t[i]));
    b[i] = std::sqrt(1.0 - sched.alpha_bar_at(t[i]));
  }
  std::vector<std::int64_t> shape(x0.dim(), 1);
  shape[0] = static_cast<std::int64_t>(t.size());
  const auto opts = torch::TensorOptions().dtype(torch::kDouble);
  const auto ca = torch::tensor(a, opts).to(x0.scalar_type()).view(shape);
  const auto cb = torch::tensor(b, opts).to(x0.scalar_type()).view(shape);
  return ca * x0 + cb * eps;
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  check_t(t, sched, "predict_x0");
  const double ab = sched.alpha_bar_at(t);
  return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& sched, StepVariant variant) {
  if (t_prev >= t) throw ValidationError(strprintf("ddim_step: t_prev (%d) must be < t (%d)", t_prev, t));
  if (t_prev < 0) throw ValidationError("ddim_step: t_prev must be >= 0");
  check_t(t, sched, "ddim_step");
  if (variant == StepVariant::PaperFootnote) {
    const double ab = sched.alpha_bar_at(t);
    const double coef = (1.0 - sched.alpha_at(t)) / std::sqrt(1.0 - ab);
    return (x_t - coef * eps_hat) / std::sqrt(ab);
  }
  const double ab_prev = sched.alpha_bar_at(t_prev);
  return std::sqrt(ab_prev) * predict_x0(x_t, eps_hat, t, sched) + std::sqrt(1.0 - ab_prev) * eps_hat;
}

torch::Tensor ddim_step_clipped(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                                const NoiseSchedule& sched, double lo, double hi) {
  if (t_prev >= t || t_prev < 0) throw ValidationError(strprintf("ddim_step: invalid step %d -> %d", t, t_prev));
  const auto x0 = predict_x0(x_t, eps_hat, t, sched).clamp(lo, hi);
  const double ab = sched.alpha_bar_at(t), ab_prev = sched.alpha_bar_at(t_prev);
  const auto eps = (x_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
  return std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
}

TimestepPlan strided_plan(int total_steps, int n) {
  if (total_steps < 1) throw ValidationError("strided_plan: T must be >= 1");
  if (n < 1 || n > total_steps)
    throw ValidationError(strprintf("strided_plan: n = %d outside [1, %d]", n, total_steps));
  const int stride = (total_steps + n - 1) / n;
  TimestepPlan plan;
  for (int t = total_steps; t >= 1; t -= stride) plan.steps.push_back(t);
  return plan;
}

torch::Tensor gaussian(std::uint64_t seed, at::IntArrayRef shape, torch::ScalarType dtype) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

torch::Tensor gaussian_batch(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape,
                             torch::ScalarType dtype) {
  std::vector<torch::Tensor> items;
  items.reserve(seeds.size());
  for (auto s : seeds) items.push_back(gaussian(s, item_shape, dtype));
  return torch::stack(items);
}

torch::Tensor sample_from(const DenoiseFn& denoise, const torch::Tensor& condition, const TimestepPlan& plan,
                          const NoiseSchedule& sched, torch::Tensor x_init, SamplerOptions opts) {
  if (plan.steps.empty()) throw ValidationError("sample: empty timestep plan");
  auto x = std::move(x_init);
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const int t = plan.steps[i];
    const int t_prev = i + 1 < plan.steps.size() ? plan.steps[i + 1] : 0;
    const auto eps_hat = denoise(x, condition, t);
    x = opts.clip_x0 && opts.variant == StepVariant::Standard
            ? ddim_step_clipped(x, eps_hat, t, t_prev, sched, -1.0, 1.0)
            : ddim_step(x, eps_hat, t, t_prev, sched, opts.variant);
    if (!torch::isfinite(x).all().item<bool>())
      throw NumericalError(strprintf("sample: non-finite values after denoising step t=%d", t));
  }
  return x;
}

torch::Tensor sample(const DenoiseFn& denoise, const torch::Tensor& condition, const TimestepPlan& plan,
                     const NoiseSchedule& sched, std::uint64_t seed, at::IntArrayRef shape, torch::ScalarType dtype,
                     SamplerOptions opts) {
  return sample_from(denoise, condition, plan, sched, gaussian(seed, shape, dtype), opts);
}

}  // namespace ctrlloop::diffusion
