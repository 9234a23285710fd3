#pragma once

#include "fcmpc/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcmpc::scenes {

// Built-in synthetic objects. All fit inside [-0.5, 0.5]^3 and carry RGB
// colors in [0, 1]. Generators are deterministic in (points, seed).

namespace detail {

inline Eigen::Vector3d hue(double h) {
  h = h - std::floor(h);
  const double r = std::clamp(std::abs(h * 6.0 - 3.0) - 1.0, 0.0, 1.0);
  const double g = std::clamp(2.0 - std::abs(h * 6.0 - 2.0), 0.0, 1.0);
  const double b = std::clamp(2.0 - std::abs(h * 6.0 - 4.0), 0.0, 1.0);
  // Keep away from white so objects stay visible on a white background.
  return Eigen::Vector3d(r, g, b) * 0.8 + Eigen::Vector3d::Constant(0.05);
}

// Fibonacci lattice on the unit sphere.
inline Eigen::Vector3d sphere_point(std::size_t i, std::size_t n) {
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
  const double phi = golden * static_cast<double>(i);
  return {r * std::cos(phi), y, r * std::sin(phi)};
}

}  // namespace detail

inline ColoredPointCloud axis_cube_8() {
  Positions p(8, 3);
  Features f(8, 3);
  static constexpr double kPalette[8][3] = {{0.85, 0.1, 0.1}, {0.1, 0.7, 0.1}, {0.1, 0.2, 0.85}, {0.85, 0.75, 0.1},
                                            {0.7, 0.1, 0.7},  {0.1, 0.7, 0.7}, {0.9, 0.45, 0.1}, {0.3, 0.3, 0.3}};
  for (int i = 0; i < 8; ++i) {
    p(i, 0) = (i & 1) ? 0.35 : -0.35;
    p(i, 1) = (i & 2) ? 0.35 : -0.35;
    p(i, 2) = (i & 4) ? 0.35 : -0.35;
    for (int c = 0; c < 3; ++c) {
      f(i, c) = kPalette[i][c];
    }
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

/// Torus in the xz-plane, colored by the angle around the main ring.
inline ColoredPointCloud torus(std::size_t n, double major = 0.3, double minor = 0.12) {
  Positions p(static_cast<Eigen::Index>(n), 3);
  Features f(static_cast<Eigen::Index>(n), 3);
  const double golden = (std::sqrt(5.0) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double v = std::fmod(static_cast<double>(i) * golden, 1.0);
    const double a = 2.0 * std::numbers::pi * u;
    const double b = 2.0 * std::numbers::pi * v;
    const auto row = static_cast<Eigen::Index>(i);
    p(row, 0) = (major + minor * std::cos(b)) * std::cos(a);
    p(row, 1) = minor * std::sin(b);
    p(row, 2) = (major + minor * std::cos(b)) * std::sin(a);
    f.row(row) = detail::hue(u).transpose();
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

/// Sphere shell, colored by height from red (bottom) to yellow (top).
inline ColoredPointCloud sphere(std::size_t n, double radius = 0.4) {
  Positions p(static_cast<Eigen::Index>(n), 3);
  Features f(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d s = detail::sphere_point(i, n);
    const auto row = static_cast<Eigen::Index>(i);
    p.row(row) = (radius * s).transpose();
    const double h = 0.5 * (s.y() + 1.0);
    f.row(row) << 0.85, 0.15 + 0.65 * h, 0.1;
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

/// Two spheres side by side along x: red on the left, blue on the right.
inline ColoredPointCloud two_spheres(std::size_t n, double radius = 0.2, double offset = 0.26) {
  Positions p(static_cast<Eigen::Index>(n), 3);
  Features f(static_cast<Eigen::Index>(n), 3);
  const std::size_t left = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_left = i < left;
    const std::size_t k = is_left ? i : i - left;
    const std::size_t m = is_left ? left : n - left;
    const Eigen::Vector3d s = detail::sphere_point(k, m);
    const auto row = static_cast<Eigen::Index>(i);
    p.row(row) = (radius * s + Eigen::Vector3d(is_left ? -offset : offset, 0.0, 0.0)).transpose();
    if (is_left) {
      f.row(row) << 0.85, 0.15, 0.15;
    } else {
      f.row(row) << 0.15, 0.25, 0.85;
    }
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

/// Surface of an axis-aligned box with one color per face pair.
inline ColoredPointCloud box(std::size_t n, double hx = 0.4, double hy = 0.25, double hz = 0.3) {
  Positions p(static_cast<Eigen::Index>(n), 3);
  Features f(static_cast<Eigen::Index>(n), 3);
  const double half[3] = {hx, hy, hz};
  const double golden = (std::sqrt(5.0) - 1.0) / 2.0;
  static constexpr double kFace[3][3] = {{0.2, 0.6, 0.2}, {0.6, 0.3, 0.1}, {0.2, 0.4, 0.7}};
  for (std::size_t i = 0; i < n; ++i) {
    const int face = static_cast<int>(i % 6);
    const int axis = face / 2;
    const double sign = (face % 2) ? 1.0 : -1.0;
    const double s = (static_cast<double>(i / 6) + 0.5) / std::ceil(static_cast<double>(n) / 6.0);
    const double t = std::fmod(static_cast<double>(i / 6) * golden, 1.0);
    const auto row = static_cast<Eigen::Index>(i);
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    p(row, axis) = sign * half[axis];
    p(row, a1) = (2.0 * s - 1.0) * half[a1];
    p(row, a2) = (2.0 * t - 1.0) * half[a2];
    f.row(row) << kFace[axis][0], kFace[axis][1], kFace[axis][2];
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

/// Lumpy sphere whose radius is modulated by a few random harmonics.
inline ColoredPointCloud blob(std::size_t n, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Eigen::Vector3d dirs[4];
  double amps[4];
  for (int k = 0; k < 4; ++k) {
    dirs[k] = Eigen::Vector3d(unit(rng), unit(rng), unit(rng)).normalized();
    amps[k] = 0.05 * unit(rng);
  }
  Positions p(static_cast<Eigen::Index>(n), 3);
  Features f(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d s = detail::sphere_point(i, n);
    double r = 0.32;
    for (int k = 0; k < 4; ++k) {
      r += amps[k] * std::cos(3.0 * s.dot(dirs[k]));
    }
    const auto row = static_cast<Eigen::Index>(i);
    p.row(row) = (r * s).transpose();
    f.row(row) = detail::hue(0.5 + 0.5 * s.x()).transpose();
  }
  return ColoredPointCloud(std::move(p), std::move(f));
}

inline std::vector<std::string> generator_names() {
  return {"axis_cube_8", "torus", "sphere", "two_spheres", "box", "blob"};
}

/// Looks up a generator by name. axis_cube_8 ignores `points`.
inline ColoredPointCloud make(const std::string& name, std::size_t points, std::uint64_t seed = 0) {
  if (name == "axis_cube_8") {
    return axis_cube_8();
  }
  if (points < 1) {
    throw std::invalid_argument("scene '" + name + "' needs at least one point");
  }
  if (name == "torus") return torus(points);
  if (name == "sphere") return sphere(points);
  if (name == "two_spheres") return two_spheres(points);
  if (name == "box") return box(points);
  if (name == "blob") return blob(points, seed);
  throw std::invalid_argument("unknown scene generator '" + name + "'");
}

/// Camera on a sphere around the origin looking at it, with +y up.
inline Camera orbit_camera(double azimuth_deg, double elevation_deg, double distance, double fov_deg, int width,
                           int height) {
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const Eigen::Vector3d eye(distance * std::cos(el) * std::sin(az), distance * std::sin(el),
                            distance * std::cos(el) * std::cos(az));
  const double focal = 0.5 * std::min(width, height) / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
  return Camera::look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), focal, width, height);
}

}  // namespace fcmpc::scenes
