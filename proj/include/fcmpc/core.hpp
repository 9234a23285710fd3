#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Features = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when an iterate or intermediate quantity becomes non-finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// N points with xyz positions and a C-channel feature (color) vector each.
///
/// The diffusion state is the flattened concatenation of both blocks:
/// [x0 y0 z0 x1 y1 z1 ... | f0_0 .. f0_{C-1} f1_0 ...], so noise and
/// gradients act on positions and colors jointly.
class ColoredPointCloud {
 public:
  ColoredPointCloud() = default;

  ColoredPointCloud(Positions positions, Features features)
      : positions_(std::move(positions)), features_(std::move(features)) {
    if (positions_.rows() < 1) {
      throw std::invalid_argument("point cloud must contain at least one point");
    }
    if (features_.rows() != positions_.rows()) {
      throw std::invalid_argument("positions and features differ in point count (" +
                                  std::to_string(positions_.rows()) + " vs " +
                                  std::to_string(features_.rows()) + ")");
    }
    if (!positions_.allFinite() || !features_.allFinite()) {
      throw std::invalid_argument("point cloud contains non-finite values");
    }
  }

  std::size_t size() const { return static_cast<std::size_t>(positions_.rows()); }
  std::size_t channels() const { return static_cast<std::size_t>(features_.cols()); }
  std::size_t state_size() const { return size() * (3 + channels()); }

  const Positions& positions() const { return positions_; }
  const Features& features() const { return features_; }

  Vector to_state() const {
    Vector x(static_cast<Eigen::Index>(state_size()));
    const auto n3 = positions_.size();
    x.head(n3) = Eigen::Map<const Vector>(positions_.data(), n3);
    x.tail(features_.size()) = Eigen::Map<const Vector>(features_.data(), features_.size());
    return x;
  }

  static ColoredPointCloud from_state(const Vector& x, std::size_t channels) {
    const auto per_point = static_cast<Eigen::Index>(3 + channels);
    if (x.size() == 0 || x.size() % per_point != 0) {
      throw std::invalid_argument("state size " + std::to_string(x.size()) +
                                  " is not a multiple of 3 + channels");
    }
    const Eigen::Index n = x.size() / per_point;
    Positions p = Eigen::Map<const Positions>(x.data(), n, 3);
    Features f = Eigen::Map<const Features>(x.data() + 3 * n, n, static_cast<Eigen::Index>(channels));
    return ColoredPointCloud(std::move(p), std::move(f));
  }

 private:
  Positions positions_;
  Features features_;
};

/// Index helpers into the flattened state.
struct StateLayout {
  std::size_t points = 0;
  std::size_t channels = 3;

  Eigen::Index position(std::size_t i, int axis) const {
    return static_cast<Eigen::Index>(3 * i + static_cast<std::size_t>(axis));
  }
  Eigen::Index feature(std::size_t i, std::size_t c) const {
    return static_cast<Eigen::Index>(3 * points + channels * i + c);
  }
  std::size_t size() const { return points * (3 + channels); }
};

/// Result of projecting a world point through a Camera.
struct Projection {
  Eigen::Vector3d camera_point;  // R p + t
  double u = 0.0;                // pixel x (pixel centers at col + 0.5)
  double v = 0.0;                // pixel y
  double depth = 0.0;            // camera-frame z
};

/// Pinhole camera: world -> camera via (R, t), then perspective divide and
/// intrinsics. Pixel (col, row) has its center at (col + 0.5, row + 0.5).
struct Camera {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector2d focal{1.0, 1.0};
  Eigen::Vector2d principal_point{0.0, 0.0};
  int width = 1;
  int height = 1;

  void validate() const {
    if (!rotation.allFinite() || !translation.allFinite()) {
      throw std::invalid_argument("camera pose contains non-finite values");
    }
    const double err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (err > 1e-9) {
      throw std::invalid_argument("camera rotation is not orthonormal (max |R^T R - I| = " +
                                  std::to_string(err) + ")");
    }
    if (!(focal.x() > 0.0) || !(focal.y() > 0.0)) {
      throw std::invalid_argument("camera focal lengths must be positive");
    }
    if (width < 1 || height < 1) {
      throw std::invalid_argument("camera resolution must be at least 1x1");
    }
  }

  /// Pixels per NDC unit: NDC spans [-1, 1] along the shorter image side.
  double ndc_scale() const { return 0.5 * static_cast<double>(std::min(width, height)); }

  Projection project(const Eigen::Vector3d& p) const {
    Projection out;
    out.camera_point = rotation * p + translation;
    out.depth = out.camera_point.z();
    out.u = focal.x() * out.camera_point.x() / out.depth + principal_point.x();
    out.v = focal.y() * out.camera_point.y() / out.depth + principal_point.y();
    return out;
  }

  /// Inverse of project() for a given pixel location and view depth.
  Eigen::Vector3d unproject(double u, double v, double depth) const {
    const Eigen::Vector3d pc((u - principal_point.x()) * depth / focal.x(),
                             (v - principal_point.y()) * depth / focal.y(), depth);
    return rotation.transpose() * (pc - translation);
  }

  /// Camera at `eye` looking at `target`; image rows grow along -up.
  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& up, double focal_px, int width, int height) {
    const Eigen::Vector3d forward = (target - eye).normalized();
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    Camera cam;
    cam.rotation.row(0) = right.transpose();
    cam.rotation.row(1) = down.transpose();
    cam.rotation.row(2) = forward.transpose();
    cam.translation = -cam.rotation * eye;
    cam.focal = {focal_px, focal_px};
    cam.principal_point = {0.5 * width, 0.5 * height};
    cam.width = width;
    cam.height = height;
    cam.validate();
    return cam;
  }
};

/// Multi-channel raster, row-major, channel-interleaved.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Single-channel view-depth raster; background pixels hold a sentinel.
struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  DepthMap() = default;
  DepthMap(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

/// Variance schedule beta_t and cumulative products alpha_bar_t for t = 1..T.
/// alpha_bar(0) is defined as 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) {
      throw std::invalid_argument("noise schedule needs at least one step");
    }
    alpha_bars_.reserve(betas_.size());
    double prod = 1.0;
    for (double b : betas_) {
      if (!std::isfinite(b) || !(b > 0.0) || !(b < 1.0)) {
        throw std::invalid_argument("beta values must lie in (0, 1)");
      }
      prod *= (1.0 - b);
      alpha_bars_.push_back(prod);
    }
  }

  int steps() const { return static_cast<int>(betas_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  double beta(int t) const {
    check_step(t);
    return betas_[static_cast<std::size_t>(t - 1)];
  }

  /// alpha_bar for t in [0, T]; t = 0 is the clean-data boundary (1).
  double alpha_bar(int t) const {
    if (t == 0) {
      return 1.0;
    }
    check_step(t);
    return alpha_bars_[static_cast<std::size_t>(t - 1)];
  }

  void check_step(int t) const {
    if (t < 1 || t > steps()) {
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                              std::to_string(steps()) + "]");
    }
  }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_min = 1e-4, double beta_max = 0.02) {
  if (steps < 1) {
    throw std::invalid_argument("schedule length must be >= 1");
  }
  if (!std::isfinite(beta_min) || !std::isfinite(beta_max) || !(beta_min > 0.0) ||
      !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw std::invalid_argument("require 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double s = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_min + s * (beta_max - beta_min);
  }
  return NoiseSchedule(std::move(betas));
}

/// Closed-form forward diffusion: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
inline Vector q_sample(const Vector& x0, int t, const Vector& noise, const NoiseSchedule& schedule) {
  if (noise.size() != x0.size()) {
    throw std::invalid_argument("noise shape does not match state");
  }
  const double ab = schedule.alpha_bar(t);
  if (t == 0) {
    return x0;
  }
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

inline ColoredPointCloud q_sample(const ColoredPointCloud& x0, int t, const Vector& noise,
                                  const NoiseSchedule& schedule) {
  return ColoredPointCloud::from_state(q_sample(x0.to_state(), t, noise, schedule), x0.channels());
}

}  // namespace fcmpc
