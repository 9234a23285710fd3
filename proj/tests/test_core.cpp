#include "fcmpc/core.hpp"
#include "fcmpc/scenes.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace fcmpc;

TEST(Schedule, SingleStepProduct) {
  const auto s = make_linear_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
}

TEST(Schedule, TwoEqualBetas) {
  const auto s = make_linear_schedule(2, 0.1, 0.1);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.81, 1e-15);
}

TEST(Schedule, LongScheduleMatchesExtendedPrecisionProduct) {
  const int T = 256;
  const auto s = make_linear_schedule(T, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int i = 0; i < T; ++i) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(i) / (T - 1);
    prod *= 1.0L - beta;
  }
  EXPECT_NEAR(s.alpha_bar(T), static_cast<double>(prod), 1e-12);
  EXPECT_NEAR(s.beta(1), 1e-4, 1e-18);
  EXPECT_NEAR(s.beta(T), 0.02, 1e-15);
}

TEST(Schedule, RecurrenceAndMonotonicity) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(1e-5, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const int T = 1 + static_cast<int>(rng() % 300);
    const auto s = make_linear_schedule(T, a, b);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    for (int t = 1; t <= T; ++t) {
      EXPECT_NEAR(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - s.beta(t)), 1e-12);
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
}

TEST(Schedule, RejectsBadInputs) {
  EXPECT_THROW(make_linear_schedule(0), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.1), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 0.2, 0.1), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(10, NAN, 0.1), std::invalid_argument);
  const auto s = make_linear_schedule(4);
  EXPECT_THROW(s.alpha_bar(5), std::out_of_range);
  EXPECT_THROW(s.beta(0), std::out_of_range);
}

TEST(QSample, BoundaryIsIdentity) {
  const auto s = make_linear_schedule(8);
  const Vector x0 = Vector::LinSpaced(6, -1.0, 1.0);
  EXPECT_EQ(q_sample(x0, 0, Vector::Ones(6), s), x0);
}

TEST(QSample, ScalarSubstitution) {
  // abar = 0.25 in one step.
  const NoiseSchedule s({0.75});
  const Vector out = q_sample(Vector::Constant(1, 1.0), 1, Vector::Constant(1, 1.0), s);
  EXPECT_NEAR(out[0], 0.5 + std::sqrt(0.75), 1e-15);
  EXPECT_NEAR(out[0], 1.3660254, 1e-7);
}

TEST(QSample, AffineInNoise) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  const auto s = make_linear_schedule(32);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + static_cast<int>(rng() % 20);
    const int t = 1 + static_cast<int>(rng() % 32);
    Vector x0(d), n1(d), n2(d);
    for (int i = 0; i < d; ++i) {
      x0[i] = n01(rng);
      n1[i] = n01(rng);
      n2[i] = n01(rng);
    }
    const double a = n01(rng), b = n01(rng);
    const Vector lhs = q_sample(x0, t, a * n1 + b * n2, s);
    const Vector rhs = a * q_sample(x0, t, n1, s) + b * q_sample(x0, t, n2, s) -
                       (a + b - 1.0) * std::sqrt(s.alpha_bar(t)) * x0;
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QSample, MonteCarloMean) {
  const auto s = make_linear_schedule(16);
  const int t = 9;
  const Vector x0 = (Vector(3) << 0.4, -0.2, 0.9).finished();
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01;
  const int draws = 10000;
  Vector sum = Vector::Zero(3);
  for (int k = 0; k < draws; ++k) {
    const Vector n = (Vector(3) << n01(rng), n01(rng), n01(rng)).finished();
    sum += q_sample(x0, t, n, s);
  }
  const Vector mean = sum / draws;
  const double se = std::sqrt((1.0 - s.alpha_bar(t)) / draws);
  for (int i = 0; i < 3; ++i) {
    EXPECT_LT(std::abs(mean[i] - std::sqrt(s.alpha_bar(t)) * x0[i]), 4.0 * se);
  }
}

TEST(QSample, RejectsShapeMismatchAndBadStep) {
  const auto s = make_linear_schedule(4);
  EXPECT_THROW(q_sample(Vector::Zero(3), 1, Vector::Zero(2), s), std::invalid_argument);
  EXPECT_THROW(q_sample(Vector::Zero(3), 5, Vector::Zero(3), s), std::out_of_range);
}

TEST(PointCloud, StateRoundTripAndLayout) {
  const auto cloud = scenes::torus(17);
  const Vector x = cloud.to_state();
  ASSERT_EQ(static_cast<std::size_t>(x.size()), cloud.state_size());
  const StateLayout layout{cloud.size(), cloud.channels()};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(x[layout.position(i, a)], cloud.positions()(static_cast<Eigen::Index>(i), a));
    }
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(x[layout.feature(i, c)],
                cloud.features()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
    }
  }
  const auto back = ColoredPointCloud::from_state(x, 3);
  EXPECT_EQ(back.positions(), cloud.positions());
  EXPECT_EQ(back.features(), cloud.features());
}

TEST(PointCloud, RejectsInvalidClouds) {
  EXPECT_THROW(ColoredPointCloud(Positions(0, 3), Features(0, 3)), std::invalid_argument);
  EXPECT_THROW(ColoredPointCloud(Positions::Zero(2, 3), Features::Zero(3, 3)), std::invalid_argument);
  Positions p = Positions::Zero(1, 3);
  p(0, 1) = INFINITY;
  EXPECT_THROW(ColoredPointCloud(p, Features::Zero(1, 3)), std::invalid_argument);
  EXPECT_THROW(ColoredPointCloud::from_state(Vector::Zero(7), 3), std::invalid_argument);
}

TEST(CameraModel, ProjectUnprojectRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int k = 0; k < 20; ++k) {
    const Camera cam = scenes::orbit_camera(360.0 * (u(rng) + 0.5), 80.0 * u(rng), 2.0, 45.0, 40, 30);
    const Eigen::Vector3d p(u(rng), u(rng), u(rng));
    const Projection pr = cam.project(p);
    EXPECT_LT((cam.unproject(pr.u, pr.v, pr.depth) - p).norm(), 1e-12);
  }
}

TEST(CameraModel, LookAtCentersTarget) {
  const Camera cam = Camera::look_at({0.3, 0.4, 2.0}, {0.0, 0.1, 0.0}, {0, 1, 0}, 50.0, 64, 48);
  const Projection pr = cam.project({0.0, 0.1, 0.0});
  EXPECT_NEAR(pr.u, 32.0, 1e-12);
  EXPECT_NEAR(pr.v, 24.0, 1e-12);
  EXPECT_GT(pr.depth, 0.0);
  // +y world points toward smaller row indices.
  EXPECT_LT(cam.project({0.0, 0.3, 0.0}).v, 24.0);
}

TEST(CameraModel, ValidateRejectsBadCameras) {
  Camera cam;
  cam.width = cam.height = 8;
  EXPECT_NO_THROW(cam.validate());
  cam.rotation(0, 1) = 1e-6;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
  cam.rotation = Eigen::Matrix3d::Identity();
  cam.focal = {0.0, 1.0};
  EXPECT_THROW(cam.validate(), std::invalid_argument);
  cam.focal = {1.0, 1.0};
  cam.height = 0;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
}

TEST(Scenes, GeneratorsAreDeterministicAndBounded) {
  for (const auto& name : scenes::generator_names()) {
    const auto a = scenes::make(name, 200, 4);
    const auto b = scenes::make(name, 200, 4);
    EXPECT_EQ(a.positions(), b.positions()) << name;
    EXPECT_EQ(a.features(), b.features()) << name;
    EXPECT_LE(a.positions().cwiseAbs().maxCoeff(), 0.5) << name;
    EXPECT_GE(a.features().minCoeff(), 0.0) << name;
    EXPECT_LE(a.features().maxCoeff(), 1.0) << name;
  }
  EXPECT_THROW(scenes::make("teapot", 10), std::invalid_argument);
}
