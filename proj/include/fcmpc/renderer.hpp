#pragma once

#include "fcmpc/core.hpp"
#include "fcmpc/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace fcmpc {

struct RasterConfig {
  double radius = 0.05;  // footprint radius in NDC units
  int points_per_pixel = 8;
  std::vector<double> background_color{1.0, 1.0, 1.0};
  double background_depth = 0.0;

  void validate(std::size_t channels) const {
    if (!(radius > 0.0) || !std::isfinite(radius)) {
      throw std::invalid_argument("raster radius must be positive");
    }
    if (points_per_pixel < 1) {
      throw std::invalid_argument("points_per_pixel must be >= 1");
    }
    if (background_color.size() != channels) {
      throw std::invalid_argument("background color has " + std::to_string(background_color.size()) +
                                  " channels, cloud has " + std::to_string(channels));
    }
    if (!(background_depth >= 0.0)) {
      throw std::invalid_argument("background depth must be >= 0");
    }
  }

  bool operator==(const RasterConfig&) const = default;
};

struct Fragment {
  int point = -1;
  double dist2 = 0.0;  // squared NDC distance to the pixel center
  double depth = 0.0;  // camera-frame z
};

/// Per-pixel lists of up to K fragments sorted by ascending depth.
class FragmentBuffer {
 public:
  FragmentBuffer() = default;
  FragmentBuffer(int width, int height, int k)
      : width_(width), height_(height), k_(k),
        fragments_(static_cast<std::size_t>(width) * height * k),
        counts_(static_cast<std::size_t>(width) * height, 0) {}

  int width() const { return width_; }
  int height() const { return height_; }
  int capacity() const { return k_; }

  std::span<const Fragment> pixel(int x, int y) const {
    const std::size_t p = static_cast<std::size_t>(y) * width_ + x;
    return {fragments_.data() + p * k_, static_cast<std::size_t>(counts_[p])};
  }

  // Appends in call order; caller guarantees depth ordering.
  void push(int x, int y, const Fragment& f) {
    const std::size_t p = static_cast<std::size_t>(y) * width_ + x;
    if (counts_[p] < k_) {
      fragments_[p * k_ + static_cast<std::size_t>(counts_[p]++)] = f;
    }
  }

 private:
  int width_ = 0;
  int height_ = 0;
  int k_ = 0;
  std::vector<Fragment> fragments_;
  std::vector<int> counts_;
};

namespace detail {

struct Candidate {
  int pixel;
  Fragment fragment;
};

// Every (pixel, point) pair with squared NDC distance below `reach2`, sorted
// by pixel, then depth, then point index. Points with depth <= 0 are skipped.
inline std::vector<Candidate> collect_candidates(const ColoredPointCloud& cloud, const Camera& camera,
                                                 double reach) {
  const double s = camera.ndc_scale();
  const double reach2 = reach * reach;
  const double reach_px = reach * s;
  std::vector<Candidate> out;
  const auto& pos = cloud.positions();
  for (Eigen::Index i = 0; i < pos.rows(); ++i) {
    const Projection pr = camera.project(pos.row(i).transpose());
    if (!(pr.depth > 0.0) || !std::isfinite(pr.u) || !std::isfinite(pr.v)) {
      continue;
    }
    const int x0 = std::max(0, static_cast<int>(std::floor(pr.u - reach_px - 0.5)));
    const int x1 = std::min(camera.width - 1, static_cast<int>(std::ceil(pr.u + reach_px - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(pr.v - reach_px - 0.5)));
    const int y1 = std::min(camera.height - 1, static_cast<int>(std::ceil(pr.v + reach_px - 0.5)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = (pr.u - (x + 0.5)) / s;
        const double dy = (pr.v - (y + 0.5)) / s;
        const double d2 = dx * dx + dy * dy;
        if (d2 < reach2) {
          out.push_back({y * camera.width + x, Fragment{static_cast<int>(i), d2, pr.depth}});
        }
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.pixel != b.pixel) return a.pixel < b.pixel;
    if (a.fragment.depth != b.fragment.depth) return a.fragment.depth < b.fragment.depth;
    return a.fragment.point < b.fragment.point;
  });
  return out;
}

}  // namespace detail

/// Collects, for every pixel, the K covering points nearest in depth.
/// A point covers a pixel iff its NDC distance to the pixel center is < r
/// and its view depth is > 0.
inline FragmentBuffer rasterize(const ColoredPointCloud& cloud, const Camera& camera, const RasterConfig& cfg) {
  camera.validate();
  cfg.validate(cloud.channels());
  FragmentBuffer buf(camera.width, camera.height, cfg.points_per_pixel);
  for (const auto& c : detail::collect_candidates(cloud, camera, cfg.radius)) {
    buf.push(c.pixel % camera.width, c.pixel / camera.width, c.fragment);
  }
  return buf;
}

inline double fragment_alpha(const Fragment& f, double radius) { return 1.0 - f.dist2 / (radius * radius); }

/// Front-to-back alpha compositing with the residual transmittance applied
/// to the background color.
inline Image composite_color(const FragmentBuffer& frags, const ColoredPointCloud& cloud, const RasterConfig& cfg) {
  const int channels = static_cast<int>(cloud.channels());
  Image img(frags.width(), frags.height(), channels);
  const auto& feat = cloud.features();
  for (int y = 0; y < frags.height(); ++y) {
    for (int x = 0; x < frags.width(); ++x) {
      double transmittance = 1.0;
      for (const Fragment& f : frags.pixel(x, y)) {
        const double w = fragment_alpha(f, cfg.radius) * transmittance;
        for (int c = 0; c < channels; ++c) {
          img.at(x, y, c) += w * feat(f.point, c);
        }
        transmittance *= 1.0 - fragment_alpha(f, cfg.radius);
      }
      for (int c = 0; c < channels; ++c) {
        img.at(x, y, c) += transmittance * cfg.background_color[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

/// Inverse-square weighted depth: sum(1/d) / sum(1/d^2) over the fragments.
/// Evaluated as d0 * sum(q) / sum(q^2) with q = d0 / d and d0 the nearest
/// depth, which is exact when all fragments share one depth.
inline double weighted_depth(std::span<const Fragment> px) {
  const double d0 = px.front().depth;
  double num = 0.0;
  double den = 0.0;
  for (const Fragment& f : px) {
    const double q = d0 / f.depth;
    num += q;
    den += q * q;
  }
  return d0 * (num / den);
}

inline DepthMap composite_depth(const FragmentBuffer& frags, const RasterConfig& cfg) {
  DepthMap out(frags.width(), frags.height(), cfg.background_depth);
  for (int y = 0; y < frags.height(); ++y) {
    for (int x = 0; x < frags.width(); ++x) {
      const auto px = frags.pixel(x, y);
      if (!px.empty()) {
        out.at(x, y) = weighted_depth(px);
      }
    }
  }
  return out;
}

inline Image render_color(const ColoredPointCloud& cloud, const Camera& camera, const RasterConfig& cfg) {
  return composite_color(rasterize(cloud, camera, cfg), cloud, cfg);
}

inline DepthMap render_depth(const ColoredPointCloud& cloud, const Camera& camera, const RasterConfig& cfg) {
  return composite_depth(rasterize(cloud, camera, cfg), cfg);
}

/// True when every point footprint stays at least `radius_margin * r` away
/// from every pixel center boundary and all fragments sharing a pixel differ
/// in depth by more than `depth_gap`. On such scenes the fragment selection
/// is locally constant, so finite differences agree with the analytic
/// gradient.
inline bool is_boundary_safe(const ColoredPointCloud& cloud, const Camera& camera, const RasterConfig& cfg,
                             double radius_margin = 0.05, double depth_gap = 1e-3) {
  const double r = cfg.radius;
  const auto cands = detail::collect_candidates(cloud, camera, r * (1.0 + radius_margin));
  const double lo = r * (1.0 - radius_margin);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (std::sqrt(cands[i].fragment.dist2) > lo) {
      return false;
    }
    if (i > 0 && cands[i - 1].pixel == cands[i].pixel &&
        cands[i].fragment.depth - cands[i - 1].fragment.depth <= depth_gap) {
      return false;
    }
  }
  // Points just behind the image plane would flip visibility.
  for (Eigen::Index i = 0; i < cloud.positions().rows(); ++i) {
    const double d = camera.project(cloud.positions().row(i).transpose()).depth;
    if (std::abs(d) <= depth_gap) {
      return false;
    }
  }
  return true;
}

enum class OperatorKind { color, depth };

inline const char* to_string(OperatorKind k) { return k == OperatorKind::color ? "color" : "depth"; }

/// One view's measurement y with its forward operator; defines
/// loss(X) = ||y - R(X)||_2 over all pixels and channels.
struct Measurement {
  OperatorKind kind = OperatorKind::color;
  Camera camera;
  RasterConfig raster;
  std::variant<Image, DepthMap> reference;

  void validate(std::size_t channels) const {
    camera.validate();
    raster.validate(channels);
    if (kind == OperatorKind::color) {
      const auto* img = std::get_if<Image>(&reference);
      if (img == nullptr) {
        throw std::invalid_argument("color measurement needs an image reference");
      }
      if (img->width != camera.width || img->height != camera.height) {
        throw std::invalid_argument("reference image resolution differs from camera resolution");
      }
      if (img->channels != static_cast<int>(channels)) {
        throw std::invalid_argument("reference image channel count differs from cloud features");
      }
    } else {
      const auto* dm = std::get_if<DepthMap>(&reference);
      if (dm == nullptr) {
        throw std::invalid_argument("depth measurement needs a depth map reference");
      }
      if (dm->width != camera.width || dm->height != camera.height) {
        throw std::invalid_argument("reference depth resolution differs from camera resolution");
      }
    }
  }

  const std::vector<double>& reference_values() const {
    return kind == OperatorKind::color ? std::get<Image>(reference).pixels : std::get<DepthMap>(reference).pixels;
  }
};

/// Renders `cloud` with the measurement's own operator and uses it as y.
inline Measurement make_measurement(OperatorKind kind, const ColoredPointCloud& cloud, const Camera& camera,
                                    const RasterConfig& raster) {
  Measurement m{kind, camera, raster, Image{}};
  if (kind == OperatorKind::color) {
    m.reference = render_color(cloud, camera, raster);
  } else {
    m.reference = render_depth(cloud, camera, raster);
  }
  return m;
}

inline std::vector<double> render_values(const ColoredPointCloud& cloud, const Measurement& m) {
  return m.kind == OperatorKind::color ? render_color(cloud, m.camera, m.raster).pixels
                                       : render_depth(cloud, m.camera, m.raster).pixels;
}

inline double loss(const ColoredPointCloud& cloud, const Measurement& m) {
  m.validate(cloud.channels());
  const auto rendered = render_values(cloud, m);
  const auto& ref = m.reference_values();
  double sum = 0.0;
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double r = ref[i] - rendered[i];
    sum += r * r;
  }
  return std::sqrt(sum);
}

/// Residual norms below this are treated as exact fits (gradient = 0).
inline constexpr double kGradientGuard = 1e-12;

/// Analytic gradient of ||y - R(X)||_2 with respect to the flattened state.
/// Fragment selection and depth order are held fixed; gradients flow
/// through alpha (positions via the projection), the features, and, for the
/// depth operator, the view depth.
inline Evaluation loss_gradient(const ColoredPointCloud& cloud, const Measurement& m,
                                double gradient_guard = kGradientGuard) {
  m.validate(cloud.channels());
  const FragmentBuffer frags = rasterize(cloud, m.camera, m.raster);
  const auto& ref = m.reference_values();
  const StateLayout layout{cloud.size(), cloud.channels()};
  const int channels = static_cast<int>(cloud.channels());
  const auto& feat = cloud.features();
  const RasterConfig& cfg = m.raster;

  std::vector<double> rendered;
  if (m.kind == OperatorKind::color) {
    rendered = composite_color(frags, cloud, cfg).pixels;
  } else {
    rendered = composite_depth(frags, cfg).pixels;
  }

  double sum = 0.0;
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double r = rendered[i] - ref[i];
    sum += r * r;
  }
  Evaluation out;
  out.value = std::sqrt(sum);
  out.gradient = Vector::Zero(static_cast<Eigen::Index>(layout.size()));
  if (out.value < gradient_guard) {
    out.converged = true;
    return out;
  }
  const double inv_norm = 1.0 / out.value;

  // Per-point accumulators: d loss / d(u, v) in pixels and d loss / d depth.
  const std::size_t n = cloud.size();
  std::vector<double> d_u(n, 0.0), d_v(n, 0.0), d_depth(n, 0.0);
  const double s = m.camera.ndc_scale();
  const double r2 = cfg.radius * cfg.radius;
  std::vector<Projection> proj(n);
  for (std::size_t i = 0; i < n; ++i) {
    proj[i] = m.camera.project(cloud.positions().row(static_cast<Eigen::Index>(i)).transpose());
  }

  std::vector<double> behind(static_cast<std::size_t>(channels));
  std::vector<double> prefix_t(static_cast<std::size_t>(cfg.points_per_pixel));
  for (int y = 0; y < frags.height(); ++y) {
    for (int x = 0; x < frags.width(); ++x) {
      const auto px = frags.pixel(x, y);
      if (px.empty()) {
        continue;
      }
      const std::size_t pix = static_cast<std::size_t>(y) * frags.width() + x;
      if (m.kind == OperatorKind::color) {
        const double* e = &rendered[pix * channels];
        const double* yref = &ref[pix * channels];
        double t = 1.0;
        for (std::size_t k = 0; k < px.size(); ++k) {
          prefix_t[k] = t;
          t *= 1.0 - fragment_alpha(px[k], cfg.radius);
        }
        for (int c = 0; c < channels; ++c) {
          behind[static_cast<std::size_t>(c)] = cfg.background_color[static_cast<std::size_t>(c)];
        }
        // Back to front: behind[] holds the color composited from k+1 on.
        for (std::size_t kk = px.size(); kk-- > 0;) {
          const Fragment& f = px[kk];
          const double a = fragment_alpha(f, cfg.radius);
          const auto pt = static_cast<std::size_t>(f.point);
          double d_alpha = 0.0;
          for (int c = 0; c < channels; ++c) {
            const double resid = (e[c] - yref[c]) * inv_norm;
            const double fc = feat(f.point, c);
            d_alpha += resid * prefix_t[kk] * (fc - behind[static_cast<std::size_t>(c)]);
            out.gradient(layout.feature(pt, static_cast<std::size_t>(c))) += resid * prefix_t[kk] * a;
            behind[static_cast<std::size_t>(c)] = a * fc + (1.0 - a) * behind[static_cast<std::size_t>(c)];
          }
          // alpha = 1 - rho^2 / r^2, rho^2 = ((u - cx)^2 + (v - cy)^2) / s^2
          const double d_rho2 = -d_alpha / r2;
          d_u[pt] += d_rho2 * 2.0 * (proj[pt].u - (x + 0.5)) / (s * s);
          d_v[pt] += d_rho2 * 2.0 * (proj[pt].v - (y + 0.5)) / (s * s);
        }
      } else {
        const double resid = (rendered[pix] - ref[pix]) * inv_norm;
        double num = 0.0;
        double den = 0.0;
        for (const Fragment& f : px) {
          num += 1.0 / f.depth;
          den += 1.0 / (f.depth * f.depth);
        }
        for (const Fragment& f : px) {
          const double d = f.depth;
          const double dD = (2.0 * num / (d * d * d) - den / (d * d)) / (den * den);
          d_depth[static_cast<std::size_t>(f.point)] += resid * dD;
        }
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (d_u[i] == 0.0 && d_v[i] == 0.0 && d_depth[i] == 0.0) {
      continue;
    }
    const Eigen::Vector3d& pc = proj[i].camera_point;
    const double z = pc.z();
    const double fx = m.camera.focal.x();
    const double fy = m.camera.focal.y();
    const Eigen::Vector3d d_cam(d_u[i] * fx / z, d_v[i] * fy / z,
                                -d_u[i] * fx * pc.x() / (z * z) - d_v[i] * fy * pc.y() / (z * z) + d_depth[i]);
    const Eigen::Vector3d d_world = m.camera.rotation.transpose() * d_cam;
    for (int a = 0; a < 3; ++a) {
      out.gradient(layout.position(i, a)) += d_world(a);
    }
  }
  return out;
}

/// Mean of per-view residual norms.
inline double multi_view_loss(const ColoredPointCloud& cloud, std::span<const Measurement> views) {
  if (views.empty()) {
    throw std::invalid_argument("multi-view loss needs at least one view");
  }
  double total = 0.0;
  for (const auto& m : views) {
    total += loss(cloud, m);
  }
  return total / static_cast<double>(views.size());
}

/// Mean of per-view gradients. `converged` is set only when every view hit
/// the gradient guard.
inline Evaluation multi_view_gradient(const ColoredPointCloud& cloud, std::span<const Measurement> views,
                                      double gradient_guard = kGradientGuard) {
  if (views.empty()) {
    throw std::invalid_argument("multi-view loss needs at least one view");
  }
  Evaluation out;
  out.gradient = Vector::Zero(static_cast<Eigen::Index>(cloud.state_size()));
  out.converged = true;
  for (const auto& m : views) {
    Evaluation e = loss_gradient(cloud, m, gradient_guard);
    out.value += e.value;
    out.gradient += e.gradient;
    out.converged = out.converged && e.converged;
  }
  const double inv = 1.0 / static_cast<double>(views.size());
  out.value *= inv;
  out.gradient *= inv;
  return out;
}

/// Objective over the flattened state for a fixed set of views.
class RenderObjective {
 public:
  RenderObjective(std::vector<Measurement> views, std::size_t channels)
      : views_(std::move(views)), channels_(channels) {
    if (views_.empty()) {
      throw std::invalid_argument("render objective needs at least one view");
    }
    for (const auto& m : views_) {
      m.validate(channels_);
    }
  }

  // Non-finite states render to an infinite loss so line searches can reject them.
  double value(const Vector& x) const {
    if (!x.allFinite()) {
      return std::numeric_limits<double>::infinity();
    }
    return multi_view_loss(ColoredPointCloud::from_state(x, channels_), views_);
  }
  Evaluation evaluate(const Vector& x) const {
    if (!x.allFinite()) {
      throw NumericalError("gradient requested at a non-finite state");
    }
    return multi_view_gradient(ColoredPointCloud::from_state(x, channels_), views_);
  }

  const std::vector<Measurement>& views() const { return views_; }
  std::size_t channels() const { return channels_; }

 private:
  std::vector<Measurement> views_;
  std::size_t channels_;
};

}  // namespace fcmpc
