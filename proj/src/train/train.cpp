#include "ctrlloop/train.hpp"

#include <torch/torch.h>

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "ctrlloop/error.hpp"
#include "ctrlloop/rng.hpp"
#include "ctrlloop/strutil.hpp"

namespace ctrlloop::train {

namespace {

constexpr std::uint64_t kTimestepTag = 0x7157;
constexpr std::uint64_t kNoiseTag = 0x4e015e;
constexpr std::uint64_t kInitTag = 0x1417;

}  // namespace

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::PatchFeature: return "patch_feature";
    case LossMode::ClassFeature: return "class_feature";
    case LossMode::Pixel: return "pixel";
  }
  return "?";
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Alternating: return "alternating";
    case Strategy::Simultaneous: return "simultaneous";
    case Strategy::SmOnly: return "sm_only";
  }
  return "?";
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::SM: return "SM";
    case Phase::CL: return "CL";
    case Phase::SIM: return "SIM";
  }
  return "?";
}

LossMode parse_loss_mode(const std::string& s) {
  if (s == "patch_feature") return LossMode::PatchFeature;
  if (s == "class_feature") return LossMode::ClassFeature;
  if (s == "pixel") return LossMode::Pixel;
  throw ValidationError("unknown loss_mode '" + s + "' (expected patch_feature, class_feature or pixel)");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "alternating") return Strategy::Alternating;
  if (s == "simultaneous") return Strategy::Simultaneous;
  if (s == "sm_only") return Strategy::SmOnly;
  throw ValidationError("unknown strategy '" + s + "' (expected alternating, simultaneous or sm_only)");
}

void TrainConfig::validate() const {
  if (rounds < 0) throw ValidationError("train.rounds must be >= 0");
  if (m_cl < 0 || n_sm < 0) throw ValidationError("train.m_cl and train.n_sm must be >= 0");
  if (cl_denoise_steps < 1) throw ValidationError("train.cl_denoise_steps must be >= 1");
  if (!(lr_cl > 0.0) || !(lr_sm > 0.0)) throw ValidationError("train learning rates must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ValidationError("train Adam betas must lie in [0, 1)");
  if (batch_sm < 1 || batch_cl < 1) throw ValidationError("train batch sizes must be >= 1");
  if (grad_accum_sm < 1 || grad_accum_cl < 1) throw ValidationError("train.grad_accum_* must be >= 1");
  if (batch_sm % grad_accum_sm != 0) throw ValidationError("train.batch_sm must be divisible by grad_accum_sm");
  if (batch_cl % grad_accum_cl != 0) throw ValidationError("train.batch_cl must be divisible by grad_accum_cl");
  if (!(lambda_simul >= 0.0)) throw ValidationError("train.lambda_simul must be >= 0");
  if (warmstart_steps < 0) throw ValidationError("train.warmstart_steps must be >= 0");
  if (!(lr_warmstart >= 0.0)) throw ValidationError("train.lr_warmstart must be >= 0");
}

TrainingData::TrainingData(torch::Tensor images, std::vector<CameraPose> poses, std::vector<int> object_of_view,
                           const nets::FrozenEncoder& encoder)
    : images_(std::move(images)), poses_(std::move(poses)) {
  if (images_.dim() != 4 || images_.size(0) != static_cast<std::int64_t>(poses_.size()) ||
      object_of_view.size() != poses_.size())
    throw ValidationError("training data: images, poses and object ids disagree in count");
  for (std::size_t i = 0; i < object_of_view.size(); ++i) {
    const int o = object_of_view[i];
    if (o < 0) throw ValidationError("training data: negative object id");
    if (static_cast<std::size_t>(o) >= objects_.size()) objects_.resize(o + 1);
    objects_[o].push_back(static_cast<int>(i));
  }
  for (const auto& views : objects_)
    if (views.size() < 2) throw ValidationError("training data: every object needs at least two views");
  torch::NoGradGuard no_grad;
  const auto f = encoder.encode(images_);
  z_class_ = f.z_class;
  z_patch_ = f.z_patch;
}

TrainingData TrainingData::from_manifest(const DatasetManifest& m, const nets::FrozenEncoder& encoder,
                                         torch::ScalarType dtype) {
  std::vector<torch::Tensor> imgs;
  std::vector<CameraPose> poses;
  std::vector<int> owner;
  for (std::size_t o = 0; o < m.objects.size(); ++o)
    for (std::size_t v = 0; v < m.objects[o].views.size(); ++v) {
      const auto view = load_view(m, static_cast<int>(o), static_cast<int>(v));
      auto t = torch::from_blob(const_cast<float*>(view.rgb.data.data()),
                                {view.rgb.height, view.rgb.width, view.rgb.channels}, torch::kFloat)
                   .permute({2, 0, 1})
                   .clone();
      imgs.push_back(t * 2.0 - 1.0);
      poses.push_back(m.objects[o].views[v].pose);
      owner.push_back(static_cast<int>(o));
    }
  return TrainingData(torch::stack(imgs).to(dtype), std::move(poses), std::move(owner), encoder);
}

std::pair<int, int> TrainingData::draw_pair(std::uint64_t seed) const {
  SplitMix rng(derive_seed({seed, 0x9a17}));
  const auto& views = objects_[rng.uniform_int(0, static_cast<std::int64_t>(objects_.size()) - 1)];
  const auto n = static_cast<std::int64_t>(views.size());
  const auto ref = rng.uniform_int(0, n - 1);
  auto tg = rng.uniform_int(0, n - 2);
  if (tg >= ref) ++tg;
  return {views[ref], views[tg]};
}

Batch Batch::slice(std::int64_t begin, std::int64_t end) const {
  Batch b;
  b.target = target.slice(0, begin, end);
  b.ref_class = ref_class.slice(0, begin, end);
  b.pose = pose.slice(0, begin, end);
  b.tg_class = tg_class.slice(0, begin, end);
  b.tg_patch = tg_patch.slice(0, begin, end);
  b.seeds.assign(seeds.begin() + begin, seeds.begin() + end);
  return b;
}

Batch make_batch(const TrainingData& data, std::span<const std::pair<int, int>> pairs,
                 std::span<const std::uint64_t> seeds) {
  if (pairs.empty() || pairs.size() != seeds.size()) throw ValidationError("batch: need one seed per pair, non-empty");
  std::vector<std::int64_t> ref_idx, tg_idx;
  std::vector<torch::Tensor> poses;
  for (const auto& [r, t] : pairs) {
    ref_idx.push_back(r);
    tg_idx.push_back(t);
    poses.push_back(nets::pose_vector(relative_pose(data.poses()[r], data.poses()[t])));
  }
  const auto ri = torch::tensor(ref_idx, torch::kLong), ti = torch::tensor(tg_idx, torch::kLong);
  Batch b;
  b.target = data.images().index_select(0, ti);
  b.ref_class = data.class_features().index_select(0, ri);
  b.tg_class = data.class_features().index_select(0, ti);
  b.tg_patch = data.patch_features().index_select(0, ti);
  b.pose = torch::stack(poses).to(data.images().scalar_type());
  b.seeds.assign(seeds.begin(), seeds.end());
  return b;
}

Batch draw_batch(const TrainingData& data, std::uint64_t base_seed, Phase phase, std::int64_t step, int size) {
  std::vector<std::pair<int, int>> pairs;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < size; ++i) {
    const auto s = derive_seed({base_seed, static_cast<std::uint64_t>(phase) + 1, static_cast<std::uint64_t>(step),
                                static_cast<std::uint64_t>(i)});
    seeds.push_back(s);
    pairs.push_back(data.draw_pair(s));
  }
  return make_batch(data, pairs, seeds);
}

DenoiserView view_of(nets::ConditionalDenoiser& model) {
  return DenoiserView{
      [model](const torch::Tensor& z, const torch::Tensor& pose) mutable { return model->embed(z, pose); },
      [model](const torch::Tensor& x, const torch::Tensor& c, const torch::Tensor& t) mutable {
        return model->forward(x, c, t);
      }};
}

int item_timestep(std::uint64_t item_seed, int total_steps) {
  SplitMix rng(derive_seed({item_seed, kTimestepTag}));
  return static_cast<int>(rng.uniform_int(1, total_steps));
}

torch::Tensor item_noise(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape, torch::ScalarType dtype) {
  std::vector<std::uint64_t> derived;
  for (auto s : seeds) derived.push_back(derive_seed({s, kNoiseTag}));
  return diffusion::gaussian_batch(derived, item_shape, dtype);
}

torch::Tensor item_initial_state(std::span<const std::uint64_t> seeds, at::IntArrayRef item_shape,
                                 torch::ScalarType dtype) {
  std::vector<std::uint64_t> derived;
  for (auto s : seeds) derived.push_back(derive_seed({s, kInitTag}));
  return diffusion::gaussian_batch(derived, item_shape, dtype);
}

torch::Tensor sm_loss(const DenoiserView& model, const Batch& batch, const diffusion::NoiseSchedule& sched) {
  std::vector<int> ts;
  for (auto s : batch.seeds) ts.push_back(item_timestep(s, sched.steps()));
  const auto eps = item_noise(batch.seeds, batch.target.sizes().slice(1), batch.target.scalar_type());
  const auto x_t = diffusion::forward_noise(batch.target, ts, eps, sched);
  const auto cond = model.embed(batch.ref_class, batch.pose);
  const auto t = torch::tensor(std::vector<double>(ts.begin(), ts.end()), torch::kDouble).to(x_t.scalar_type());
  return torch::mse_loss(model.denoise(x_t, cond, t), eps);
}

torch::Tensor cl_loss(const DenoiserView& model, const nets::FrozenEncoder& encoder, const Batch& batch,
                      const diffusion::NoiseSchedule& sched, const diffusion::TimestepPlan& plan, LossMode mode,
                      diffusion::SamplerOptions opts) {
  const auto cond = model.embed(batch.ref_class, batch.pose);
  const auto x_init = item_initial_state(batch.seeds, batch.target.sizes().slice(1), batch.target.scalar_type());
  const diffusion::DenoiseFn fn = [&model](const torch::Tensor& x, const torch::Tensor& c, int t) {
    return model.denoise(x, c, torch::full({x.size(0)}, static_cast<double>(t), x.options()));
  };
  const auto generated = diffusion::sample_from(fn, cond, plan, sched, x_init, opts);
  switch (mode) {
    case LossMode::Pixel: return torch::mse_loss(generated, batch.target);
    case LossMode::ClassFeature: return torch::mse_loss(encoder.encode(generated).z_class, batch.tg_class);
    case LossMode::PatchFeature: return torch::mse_loss(encoder.encode(generated).z_patch, batch.tg_patch);
  }
  throw ValidationError("cl_loss: unknown loss mode");
}

torch::Tensor simultaneous_loss(const DenoiserView& model, const nets::FrozenEncoder& encoder, const Batch& batch,
                                const diffusion::NoiseSchedule& sched, const diffusion::TimestepPlan& plan,
                                LossMode mode, double lambda, diffusion::SamplerOptions opts) {
  return sm_loss(model, batch, sched) + lambda * cl_loss(model, encoder, batch, sched, plan, mode, opts);
}

double accumulate_and_step(torch::optim::Optimizer& opt, const Batch& batch, int grad_accum,
                           const std::function<torch::Tensor(const Batch&)>& loss_of) {
  const auto n = batch.size();
  if (grad_accum < 1 || n % grad_accum != 0)
    throw ValidationError(strprintf("gradient accumulation: batch %lld not divisible into %d micro-batches",
                                    static_cast<long long>(n), grad_accum));
  const auto micro = n / grad_accum;
  opt.zero_grad();
  double total = 0.0;
  for (std::int64_t b = 0; b < n; b += micro) {
    const double weight = static_cast<double>(micro) / static_cast<double>(n);
    auto loss = loss_of(batch.slice(b, b + micro));
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw NumericalError(strprintf("non-finite loss (%g) in micro-batch at item %lld",
                                                              value, static_cast<long long>(b)));
    (loss * weight).backward();
    total += weight * value;
  }
  opt.step();
  return total;
}

void TrainLog::append_jsonl(const std::filesystem::path& path, std::size_t from) const {
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append train log: " + path.string());
  for (std::size_t i = from; i < entries.size(); ++i) {
    const auto& e = entries[i];
    nlohmann::json j{{"step", e.step}, {"phase", to_string(e.phase)}, {"round", e.round},
                     {"loss", e.loss}, {"wall_time", e.wall_time}};
    f << j.dump() << '\n';
  }
}

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& cfg, std::shared_ptr<const TrainingData> data,
                 torch::ScalarType dtype)
    : model_cfg_(model_cfg),
      cfg_(cfg),
      data_(std::move(data)),
      dtype_(dtype),
      encoder_(model_cfg.encoder),
      sched_(diffusion::linear_schedule(model_cfg.timesteps, model_cfg.beta_start, model_cfg.beta_end)),
      start_(std::chrono::steady_clock::now()) {
  cfg_.validate();
  if (!data_) throw ValidationError("trainer: no training data");
  if (model_cfg.arch.class_dim != model_cfg.encoder.class_dim)
    throw ValidationError("model.arch.class_dim must equal model.encoder.class_dim");
  if (model_cfg.arch.image_channels != model_cfg.encoder.in_channels)
    throw ValidationError("model.arch.image_channels must equal model.encoder.in_channels");
  model_ = nets::make_denoiser(model_cfg.arch, dtype);
  opt_sm_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(cfg_.lr_sm).betas({cfg_.adam_beta1, cfg_.adam_beta2}));
  opt_cl_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(cfg_.lr_cl).betas({cfg_.adam_beta1, cfg_.adam_beta2}));
}

void Trainer::set_sm_lr(double lr) {
  for (auto& g : opt_sm_->param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

void Trainer::record(Phase phase, double loss) {
  ++global_step_;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  log_.entries.push_back({global_step_, phase, round_, loss, wall});
}

double Trainer::sm_step() {
  const auto batch = draw_batch(*data_, cfg_.seed, Phase::SM, global_step_, cfg_.batch_sm);
  const auto view = view_of(model_);
  set_sm_lr(global_step_ < cfg_.warmstart_steps && cfg_.lr_warmstart > 0.0 ? cfg_.lr_warmstart : cfg_.lr_sm);
  const double loss = accumulate_and_step(*opt_sm_, batch, cfg_.grad_accum_sm,
                                          [&](const Batch& b) { return sm_loss(view, b, sched_); });
  record(Phase::SM, loss);
  return loss;
}

double Trainer::cl_step() {
  const auto batch = draw_batch(*data_, cfg_.seed, Phase::CL, global_step_, cfg_.batch_cl);
  const auto plan = diffusion::strided_plan(sched_.steps(), cfg_.cl_denoise_steps);
  const auto view = view_of(model_);
  const double loss = accumulate_and_step(*opt_cl_, batch, cfg_.grad_accum_cl, [&](const Batch& b) {
    return cl_loss(view, encoder_, b, sched_, plan, cfg_.loss_mode, sampler_options(model_cfg_));
  });
  record(Phase::CL, loss);
  return loss;
}

double Trainer::simultaneous_step() {
  set_sm_lr(cfg_.lr_sm);
  const auto batch = draw_batch(*data_, cfg_.seed, Phase::SIM, global_step_, cfg_.batch_cl);
  const auto plan = diffusion::strided_plan(sched_.steps(), cfg_.cl_denoise_steps);
  const auto view = view_of(model_);
  const double loss = accumulate_and_step(*opt_sm_, batch, cfg_.grad_accum_cl, [&](const Batch& b) {
    return simultaneous_loss(view, encoder_, b, sched_, plan, cfg_.loss_mode, cfg_.lambda_simul, sampler_options(model_cfg_));
  });
  record(Phase::SIM, loss);
  return loss;
}

void Trainer::run_warmstart() {
  while (global_step_ < cfg_.warmstart_steps) sm_step();
}

void Trainer::run_round() {
  ++round_;
  if (cfg_.strategy == Strategy::Simultaneous) {
    for (int i = 0; i < cfg_.m_cl + cfg_.n_sm; ++i) simultaneous_step();
    return;
  }
  if (cfg_.strategy != Strategy::Alternating)
    throw ValidationError("run_round requires the alternating or simultaneous strategy");
  for (int i = 0; i < cfg_.m_cl; ++i) cl_step();
  for (int i = 0; i < cfg_.n_sm; ++i) sm_step();
}

}  // namespace ctrlloop::train
