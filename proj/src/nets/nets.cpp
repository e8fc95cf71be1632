#include "ctrlloop/nets.hpp"

#include <Eigen/Dense>
#include <torch/torch.h>

#include <cmath>

#include "ctrlloop/error.hpp"
#include "ctrlloop/rng.hpp"
#include "ctrlloop/strutil.hpp"

namespace F = torch::nn::functional;

namespace ctrlloop::nets {

namespace {

torch::Tensor seeded_normal(SplitMix& rng, std::vector<std::int64_t> shape, double stddev) {
  auto t = torch::empty(shape, torch::kDouble);
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = stddev * rng.normal();
  return t;
}

int group_count(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace

FrozenEncoder::FrozenEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
  if (cfg.in_channels < 1 || cfg.hidden < 1 || cfg.patch_dim < 1 || cfg.class_dim < 1 || cfg.patch_size < 1)
    throw ValidationError("encoder config: all sizes must be positive");
  if (cfg.class_dim > cfg.patch_dim) throw ValidationError("encoder config: class_dim must be <= patch_dim");
  SplitMix rng(derive_seed({cfg.seed, 0xe9c0de}));
  const double fan1 = cfg.in_channels * 9.0, fan2 = cfg.hidden * 9.0;
  master_.w1 = seeded_normal(rng, {cfg.hidden, cfg.in_channels, 3, 3}, 1.5 / std::sqrt(fan1));
  master_.b1 = seeded_normal(rng, {cfg.hidden}, 0.1);
  master_.w2 = seeded_normal(rng, {cfg.patch_dim, cfg.hidden, 3, 3}, 1.5 / std::sqrt(fan2));
  master_.b2 = seeded_normal(rng, {cfg.patch_dim}, 0.1);

  // Orthonormal columns from the QR factor of a seeded Gaussian matrix.
  Eigen::MatrixXd g(cfg.patch_dim, cfg.patch_dim);
  for (int i = 0; i < g.rows(); ++i)
    for (int j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  master_.proj = torch::empty({cfg.patch_dim, cfg.class_dim}, torch::kDouble);
  auto acc = master_.proj.accessor<double, 2>();
  for (int i = 0; i < cfg.patch_dim; ++i)
    for (int j = 0; j < cfg.class_dim; ++j) acc[i][j] = q(i, j);

  float_cache_ = {master_.w1.to(torch::kFloat), master_.b1.to(torch::kFloat), master_.w2.to(torch::kFloat),
                  master_.b2.to(torch::kFloat), master_.proj.to(torch::kFloat)};
}

const FrozenEncoder::Weights& FrozenEncoder::weights_for(torch::ScalarType dtype) const {
  if (dtype == torch::kDouble) return master_;
  if (dtype == torch::kFloat) return float_cache_;
  throw ValidationError("encoder: only float32 and float64 inputs are supported");
}

std::vector<torch::Tensor> FrozenEncoder::parameters() const {
  return {master_.w1, master_.b1, master_.w2, master_.b2, master_.proj};
}

EncoderFeatures FrozenEncoder::encode(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != cfg_.in_channels)
    throw ValidationError(strprintf("encode: expected [B, %d, H, W] input", cfg_.in_channels));
  if (images.size(2) % cfg_.patch_size != 0 || images.size(3) % cfg_.patch_size != 0)
    throw ValidationError(strprintf("encode: spatial size must be a multiple of the patch size %d", cfg_.patch_size));
  const auto& w = weights_for(images.scalar_type());
  auto h = torch::tanh(F::conv2d(images, w.w1, F::Conv2dFuncOptions().bias(w.b1).padding(1)));
  h = torch::tanh(F::conv2d(h, w.w2, F::Conv2dFuncOptions().bias(w.b2).padding(1)));
  h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(cfg_.patch_size).stride(cfg_.patch_size));
  EncoderFeatures out;
  out.z_patch = h.flatten(2).transpose(1, 2);                  // [B, P, d_p]
  out.z_class = torch::matmul(out.z_patch.mean(1), w.proj);   // [B, d_c]
  return out;
}

torch::Tensor pose_vector(const RelativePose& p) {
  return torch::tensor({p.d_elevation, p.d_azimuth_sin, p.d_azimuth_cos, p.d_radius}, torch::kDouble);
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const auto opts = torch::TensorOptions().dtype(t.scalar_type());
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  const auto args = t.unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, opts)}, 1);
  return emb;
}

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int emb_dim) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(group_count(in_ch), in_ch));
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
  norm2 = register_module("norm2", torch::nn::GroupNorm(group_count(out_ch), out_ch));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
  modulation = register_module("modulation", torch::nn::Linear(emb_dim, 2 * out_ch));
  if (in_ch != out_ch)
    skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(F::silu(norm1(x)));
  const auto mod = modulation(F::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  const auto scale_shift = mod.chunk(2, 1);
  h = norm2(h) * (1 + scale_shift[0]) + scale_shift[1];
  h = conv2(F::silu(h));
  return (skip ? skip(x) : x) + h;
}

ConditionalDenoiserImpl::ConditionalDenoiserImpl(const ArchConfig& cfg) : cfg_(cfg) {
  if (cfg.channel_mults.empty() || cfg.base_width < 1 || cfg.res_blocks < 1 || cfg.image_channels < 1)
    throw ValidationError("arch config: widths, multipliers and block counts must be positive");
  if (cfg.time_dim < 2 || cfg.cond_dim < 1 || cfg.class_dim < 1)
    throw ValidationError("arch config: embedding sizes must be positive");
  const int emb_dim = cfg.time_dim + cfg.cond_dim;

  embedder = register_module("embedder", torch::nn::Linear(cfg.class_dim + kPoseDim, cfg.cond_dim));
  time_fc1 = register_module("time_fc1", torch::nn::Linear(cfg.time_dim, cfg.time_dim));
  time_fc2 = register_module("time_fc2", torch::nn::Linear(cfg.time_dim, cfg.time_dim));

  int ch = cfg.base_width * cfg.channel_mults.front();
  conv_in = register_module(
      "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.image_channels, ch, 3).padding(1)));
  std::vector<int> skip_ch{ch};
  const int levels = static_cast<int>(cfg.channel_mults.size());
  for (int l = 0; l < levels; ++l) {
    const int out = cfg.base_width * cfg.channel_mults[l];
    for (int r = 0; r < cfg.res_blocks; ++r) {
      down_blocks->push_back(ResBlock(ch, out, emb_dim));
      ch = out;
      skip_ch.push_back(ch);
    }
    if (l + 1 < levels) {
      down_samples->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
      skip_ch.push_back(ch);
    }
  }
  mid = register_module("mid", ResBlock(ch, ch, emb_dim));
  for (int l = levels - 1; l >= 0; --l) {
    const int out = cfg.base_width * cfg.channel_mults[l];
    for (int r = 0; r < cfg.res_blocks + 1; ++r) {
      up_blocks->push_back(ResBlock(ch + skip_ch.back(), out, emb_dim));
      skip_ch.pop_back();
      ch = out;
    }
    if (l > 0) up_samples->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
  }
  register_module("down_blocks", down_blocks);
  register_module("down_samples", down_samples);
  register_module("up_blocks", up_blocks);
  register_module("up_samples", up_samples);
  norm_out = register_module("norm_out", torch::nn::GroupNorm(group_count(ch), ch));
  conv_out = register_module(
      "conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, cfg.image_channels, 3).padding(1)));
}

torch::Tensor ConditionalDenoiserImpl::embed(const torch::Tensor& z_class, const torch::Tensor& pose) {
  return embedder(torch::cat({z_class, pose}, 1));
}

torch::Tensor ConditionalDenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& condition,
                                               const torch::Tensor& t) {
  const int levels = static_cast<int>(cfg_.channel_mults.size());
  const std::int64_t factor = std::int64_t{1} << (levels - 1);
  if (x_t.dim() != 4 || x_t.size(1) != cfg_.image_channels || x_t.size(2) % factor || x_t.size(3) % factor)
    throw ValidationError(strprintf("denoise: expected [B, %d, H, W] with H, W divisible by %lld",
                                    cfg_.image_channels, static_cast<long long>(factor)));
  if (condition.dim() != 2 || condition.size(0) != x_t.size(0) || condition.size(1) != cfg_.cond_dim)
    throw ValidationError("denoise: condition must be [B, cond_dim]");

  auto temb = sinusoidal_embedding(t.to(x_t.scalar_type()), cfg_.time_dim);
  temb = time_fc2(F::silu(time_fc1(temb)));
  const auto emb = torch::cat({temb, condition}, 1);

  auto h = conv_in(x_t);
  std::vector<torch::Tensor> skips{h};
  std::size_t bi = 0;
  for (int l = 0; l < levels; ++l) {
    for (int r = 0; r < cfg_.res_blocks; ++r) {
      h = down_blocks[bi++]->as<ResBlock>()->forward(h, emb);
      skips.push_back(h);
    }
    if (l + 1 < levels) {
      h = down_samples[l]->as<torch::nn::Conv2d>()->forward(h);
      skips.push_back(h);
    }
  }
  h = mid(h, emb);
  bi = 0;
  std::size_t ui = 0;
  for (int l = levels - 1; l >= 0; --l) {
    for (int r = 0; r < cfg_.res_blocks + 1; ++r) {
      h = up_blocks[bi++]->as<ResBlock>()->forward(torch::cat({h, skips.back()}, 1), emb);
      skips.pop_back();
    }
    if (l > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = up_samples[ui++]->as<torch::nn::Conv2d>()->forward(h);
    }
  }
  auto out = conv_out(F::silu(norm_out(h)));
  if (!torch::isfinite(out).all().item<bool>()) throw NumericalError("denoise: non-finite activations");
  return out;
}

torch::Tensor ConditionalDenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& condition, int t) {
  return forward(x_t, condition, torch::full({x_t.size(0)}, static_cast<double>(t), x_t.options()));
}

std::int64_t ConditionalDenoiserImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

ConditionalDenoiser make_denoiser(const ArchConfig& cfg, torch::ScalarType dtype) {
  torch::manual_seed(cfg.init_seed);
  ConditionalDenoiser model(cfg);
  model->to(dtype);
  return model;
}

}  // namespace ctrlloop::nets
