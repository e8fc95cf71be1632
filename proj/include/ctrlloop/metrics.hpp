#pragma once

#include <Eigen/Core>
#include <array>
#include <span>
#include <vector>

#include "ctrlloop/camera.hpp"
#include "ctrlloop/config.hpp"
#include "ctrlloop/image.hpp"
#include "ctrlloop/scene.hpp"

namespace ctrlloop::metrics {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0, 1]; identical images give kPsnrCap.
double psnr(const Image& a, const Image& b);

/// 1 where any channel differs from the background by more than tau.
Mask extract_mask(const Image& image, const std::array<float, 3>& bg = {1.0f, 1.0f, 1.0f}, double tau = 0.05);

/// |A and B| / |A or B|; two empty masks give 1.
double iou(const Mask& a, const Mask& b);

struct PoseEstimate {
  CameraPose pose;
  double residual = 0.0;  ///< sum of squared RGB differences
  double grid_step_deg = 0.0;
};

std::vector<CameraPose> grid_poses(const PoseGridSpec& grid, double radius);

/// Render-and-compare pose search over a fixed grid, with the grid renders
/// cached for repeated queries against the same scene.
class PoseOracle {
 public:
  PoseOracle(const SceneSpec& scene, const PoseGridSpec& grid, double radius, int resolution);
  PoseEstimate estimate(const Image& generated) const;
  std::size_t grid_size() const { return poses_.size(); }

 private:
  std::vector<CameraPose> poses_;
  std::vector<Image> renders_;
  double step_deg_;
};

/// One-shot search; radius defaults to grid.radius or 2.2.
PoseEstimate estimate_pose(const Image& generated, const SceneSpec& scene, const PoseGridSpec& grid);

/// Geodesic angle between the two camera rotations, in degrees.
double angle_diff(const CameraPose& a, const CameraPose& b);

/// Fraction of diffs <= threshold.
double aa_at(std::span<const double> diffs_deg, double threshold_deg);

/// Fraction of values >= threshold.
double fraction_at_least(std::span<const double> values, double threshold);

/// Unbiased squared MMD with the cubic polynomial kernel (x.y / d + 1)^3. Rows are samples.
double kid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace ctrlloop::metrics
