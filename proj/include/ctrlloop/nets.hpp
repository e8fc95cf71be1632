#pragma once

#include <torch/nn.h>

#include <cstdint>
#include <vector>

#include "ctrlloop/camera.hpp"

namespace ctrlloop::nets {

/// Frozen random convolutional feature extractor: two 3x3 conv layers with
/// tanh, then average pooling over non-overlapping patches.
struct EncoderConfig {
  std::uint64_t seed = 20240521;
  int in_channels = 3;
  int hidden = 16;
  int patch_dim = 32;
  int class_dim = 32;
  int patch_size = 4;

  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderFeatures {
  torch::Tensor z_class;  ///< [B, class_dim]
  torch::Tensor z_patch;  ///< [B, P, patch_dim], P = (H / patch) * (W / patch)
};

class FrozenEncoder {
 public:
  explicit FrozenEncoder(const EncoderConfig& cfg);

  /// images: [B, C, H, W] in model range. Differentiable w.r.t. the images only.
  EncoderFeatures encode(const torch::Tensor& images) const;

  const EncoderConfig& config() const { return cfg_; }
  int patch_count(int height, int width) const { return (height / cfg_.patch_size) * (width / cfg_.patch_size); }
  /// Weights in a fixed order: conv1 w/b, conv2 w/b, class projection. Always double.
  std::vector<torch::Tensor> parameters() const;

 private:
  struct Weights {
    torch::Tensor w1, b1, w2, b2, proj;
  };
  const Weights& weights_for(torch::ScalarType dtype) const;

  EncoderConfig cfg_;
  Weights master_;
  mutable Weights float_cache_;
};

struct ArchConfig {
  int image_channels = 3;
  int base_width = 32;
  std::vector<int> channel_mults{1, 2, 4};
  int res_blocks = 2;
  int time_dim = 128;
  int cond_dim = 128;  ///< d_e
  int class_dim = 32;  ///< must match the encoder's class_dim
  std::uint64_t init_seed = 7;

  bool operator==(const ArchConfig&) const = default;
};

inline constexpr int kPoseDim = 4;

torch::Tensor pose_vector(const RelativePose& p);

/// Residual block with GroupNorm, SiLU and scale/shift modulation from the
/// joint (timestep, condition) embedding.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int emb_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear modulation{nullptr};
};
TORCH_MODULE(ResBlock);

/// Condition embedder (linear map of [z_class, pose]) plus the U-Net noise predictor.
/// Its parameters are the only trainable state in the system.
class ConditionalDenoiserImpl : public torch::nn::Module {
 public:
  explicit ConditionalDenoiserImpl(const ArchConfig& cfg);

  /// e = W [z_class, pose] + b. z_class: [B, class_dim], pose: [B, 4].
  torch::Tensor embed(const torch::Tensor& z_class, const torch::Tensor& pose);
  /// x_t: [B, C, H, W]; condition: [B, cond_dim]; t: [B] timesteps (any dtype).
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& condition, const torch::Tensor& t);
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& condition, int t);

  const ArchConfig& config() const { return cfg_; }
  std::int64_t parameter_count() const;

 private:
  ArchConfig cfg_;
  torch::nn::Linear embedder{nullptr};
  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down_blocks, down_samples, up_blocks, up_samples;
  ResBlock mid{nullptr};
};
TORCH_MODULE(ConditionalDenoiser);

/// Seeds the global torch generator from cfg.init_seed, so construction is a pure function of the config.
ConditionalDenoiser make_denoiser(const ArchConfig& cfg, torch::ScalarType dtype = torch::kFloat);

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim);

}  // namespace ctrlloop::nets
