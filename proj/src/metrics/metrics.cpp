#include "ctrlloop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctrlloop/error.hpp"

namespace ctrlloop::metrics {

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ValidationError("psnr: image shapes differ");
  if (a.data.empty()) throw ValidationError("psnr: empty images");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

Mask extract_mask(const Image& image, const std::array<float, 3>& bg, double tau) {
  if (image.channels != 3) throw ValidationError("extract_mask: expected an RGB image");
  Mask m(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      double dev = 0.0;
      for (int c = 0; c < 3; ++c) dev = std::max(dev, std::abs(static_cast<double>(image.at(y, x, c)) - bg[c]));
      m.at(y, x) = dev > tau ? 1 : 0;
    }
  return m;
}

double iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw ValidationError("iou: mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] & b.bits[i];
    uni += a.bits[i] | b.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<CameraPose> grid_poses(const PoseGridSpec& grid, double radius) {
  std::vector<CameraPose> poses;
  const int n_el = static_cast<int>(std::floor((grid.elevation_max_deg - grid.elevation_min_deg) / grid.elevation_step_deg + 1e-9)) + 1;
  const int n_az = static_cast<int>(std::ceil(360.0 / grid.azimuth_step_deg - 1e-9));
  for (int e = 0; e < n_el; ++e)
    for (int a = 0; a < n_az; ++a)
      poses.push_back(CameraPose::make(deg2rad(a * grid.azimuth_step_deg),
                                       deg2rad(grid.elevation_min_deg + e * grid.elevation_step_deg), radius));
  return poses;
}

PoseOracle::PoseOracle(const SceneSpec& scene, const PoseGridSpec& grid, double radius, int resolution)
    : poses_(grid_poses(grid, radius)), step_deg_(std::max(grid.azimuth_step_deg, grid.elevation_step_deg)) {
  if (poses_.empty()) throw ValidationError("estimate_pose: empty pose grid");
  renders_.reserve(poses_.size());
  for (const auto& p : poses_) renders_.push_back(render(scene, p, resolution, true).image);
}

PoseEstimate PoseOracle::estimate(const Image& generated) const {
  if (!generated.same_shape(renders_.front())) throw ValidationError("estimate_pose: image shape differs from grid renders");
  PoseEstimate best;
  best.residual = std::numeric_limits<double>::infinity();
  best.grid_step_deg = step_deg_;
  for (std::size_t i = 0; i < poses_.size(); ++i) {
    double r = 0.0;
    const auto& ref = renders_[i].data;
    for (std::size_t k = 0; k < ref.size(); ++k) {
      const double d = static_cast<double>(generated.data[k]) - ref[k];
      r += d * d;
      if (r >= best.residual) break;
    }
    if (r < best.residual) {
      best.residual = r;
      best.pose = poses_[i];
    }
  }
  return best;
}

PoseEstimate estimate_pose(const Image& generated, const SceneSpec& scene, const PoseGridSpec& grid) {
  return PoseOracle(scene, grid, grid.radius.value_or(2.2), generated.width).estimate(generated);
}

double angle_diff(const CameraPose& a, const CameraPose& b) {
  const Eigen::Matrix3d rel = a.rotation().transpose() * b.rotation();
  // Same angle as acos((tr - 1) / 2), but atan2 keeps precision near 0 and 180 degrees.
  const double c = (rel.trace() - 1.0) / 2.0;
  const double s = 0.5 * Eigen::Vector3d(rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0), rel(1, 0) - rel(0, 1)).norm();
  return rad2deg(std::atan2(s, c));
}

double aa_at(std::span<const double> diffs, double threshold) {
  if (diffs.empty()) throw ValidationError("aa_at: empty list of angle differences");
  if (!(threshold > 0.0)) throw ValidationError("aa_at: threshold must be > 0");
  const auto n = std::count_if(diffs.begin(), diffs.end(), [&](double d) { return d <= threshold; });
  return static_cast<double>(n) / static_cast<double>(diffs.size());
}

double fraction_at_least(std::span<const double> values, double threshold) {
  if (values.empty()) throw ValidationError("fraction_at_least: empty list");
  const auto n = std::count_if(values.begin(), values.end(), [&](double v) { return v >= threshold; });
  return static_cast<double>(n) / static_cast<double>(values.size());
}

double kid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw ValidationError("kid: need at least 2 samples per set");
  if (a.cols() != b.cols()) throw ValidationError("kid: feature dimensions differ");
  const double d = static_cast<double>(a.cols());
  const auto kernel = [d](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) -> Eigen::MatrixXd {
    return ((x * y.transpose()).array() / d + 1.0).cube().matrix();
  };
  const Eigen::MatrixXd kxx = kernel(a, a), kyy = kernel(b, b), kxy = kernel(a, b);
  const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());
  const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1.0));
  const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1.0));
  return sxx + syy - 2.0 * kxy.mean();
}

}  // namespace ctrlloop::metrics
