#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

namespace testutil {

inline double relative_error(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / scale;
}

/// Central difference of f along direction v at x (x is perturbed in place and restored).
inline double directional_fd(const std::function<double()>& f, torch::Tensor x, const torch::Tensor& v,
                             double h = 1e-6) {
  torch::NoGradGuard g;
  x.add_(v, h);
  const double up = f();
  x.add_(v, -2 * h);
  const double down = f();
  x.add_(v, h);
  return (up - down) / (2 * h);
}

/// Central difference with respect to one entry of a parameter tensor.
inline double entry_fd(const std::function<double()>& f, torch::Tensor p, std::int64_t flat_index, double h = 1e-6) {
  torch::NoGradGuard g;
  auto flat = p.view({-1});
  const double orig = flat[flat_index].item<double>();
  flat[flat_index].fill_(orig + h);
  const double up = f();
  flat[flat_index].fill_(orig - h);
  const double down = f();
  flat[flat_index].fill_(orig);
  return (up - down) / (2 * h);
}

}  // namespace testutil
