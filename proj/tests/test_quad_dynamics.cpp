#include "protompc/quad_dynamics.hpp"
#include "protompc/wind.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <sstream>

using namespace protompc;

namespace {

constexpr double kPi = std::numbers::pi;

Quaternion random_unit_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
}

StateVec spinning_state() {
  QuadState s;
  s.p = Vec3(0.3, -0.2, 1.0);
  s.v = Vec3(0.5, 0.1, -0.2);
  s.q = Quaternion::from_axis_angle(Vec3(1, 2, 3), 0.4);
  s.omega = Vec3(1.5, -0.7, 2.0);
  return s.to_vector();
}

ControlVec thrusting_control() {
  ControlVec u;
  u << 11.0, 0.02, -0.01, 0.015;
  return u;
}

double max_abs(const StateVec& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Quaternion, IdentityIsNeutral) {
  const Quaternion q = Quaternion::from_axis_angle(Vec3(1, -1, 2), 0.7);
  const Quaternion r = quat_multiply(Quaternion::identity(), q);
  EXPECT_DOUBLE_EQ(r.w, q.w);
  EXPECT_DOUBLE_EQ(r.x, q.x);
  EXPECT_DOUBLE_EQ(r.y, q.y);
  EXPECT_DOUBLE_EQ(r.z, q.z);
}

TEST(Quaternion, TimesInverseIsIdentity) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Quaternion q = random_unit_quat(rng);
    const Quaternion r = quat_multiply(q, q.conjugate());
    EXPECT_NEAR(r.w, 1.0, 1e-12);
    EXPECT_NEAR(Vec3(r.x, r.y, r.z).norm(), 0.0, 1e-12);
  }
}

TEST(Quaternion, QuarterTurnsComposeToHalfTurn) {
  const Quaternion qz = Quaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  const Quaternion r = quat_multiply(qz, qz);
  // oracle: compose rotation matrices, then read the half-turn axis back
  const Eigen::Matrix3d m = qz.rotation_matrix() * qz.rotation_matrix();
  const Eigen::Quaterniond e(m);
  const double sign = e.z() < 0 ? -1.0 : 1.0;
  EXPECT_NEAR(r.w, sign * e.w(), 1e-12);
  EXPECT_NEAR(r.z, sign * e.z(), 1e-12);
  EXPECT_NEAR(r.w, 0.0, 1e-12);
  EXPECT_NEAR(r.x, 0.0, 1e-12);
  EXPECT_NEAR(r.y, 0.0, 1e-12);
  EXPECT_NEAR(r.z, 1.0, 1e-12);
}

TEST(Quaternion, UnitProductStaysUnit) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    EXPECT_NEAR(quat_multiply(random_unit_quat(rng), random_unit_quat(rng)).norm(), 1.0, 1e-12);
  }
}

TEST(QuatRotate, BasicCases) {
  const Vec3 e3 = Vec3::UnitZ();
  EXPECT_TRUE(quat_rotate(Quaternion::identity(), e3).isApprox(e3));
  const Vec3 flipped = quat_rotate(Quaternion::from_axis_angle(Vec3::UnitX(), kPi), e3);
  EXPECT_NEAR((flipped - Vec3(0, 0, -1)).norm(), 0.0, 1e-12);
}

TEST(QuatRotate, MatchesExplicitRotationMatrix) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Quaternion q = random_unit_quat(rng);
    const Vec3 v(n(rng), n(rng), n(rng));
    // independent oracle: Eigen's own quaternion-to-matrix conversion
    const Eigen::Matrix3d r = Eigen::Quaterniond(q.w, q.x, q.y, q.z).toRotationMatrix();
    EXPECT_NEAR((quat_rotate(q, v) - r * v).norm(), 0.0, 1e-12);
    EXPECT_NEAR(quat_rotate(q, v).norm(), v.norm(), 1e-12);
  }
}

TEST(NominalDeriv, HoverIsEquilibrium) {
  const QuadParams params;
  const StateVec d = nominal_deriv(hover_state(), hover_control(params), params);
  EXPECT_NEAR(d.segment<3>(kVelIdx).norm(), 0.0, 1e-14);
  EXPECT_NEAR(d.segment<3>(kOmegaIdx).norm(), 0.0, 1e-14);
}

TEST(NominalDeriv, FreeFall) {
  const QuadParams params;
  const StateVec d = nominal_deriv(hover_state(), ControlVec::Zero(), params);
  EXPECT_NEAR((d.segment<3>(kVelIdx) - Vec3(0, 0, -9.81)).norm(), 0.0, 1e-14);
}

TEST(NominalDeriv, PrincipalAxisSpinHasNoGyroscopicTerm) {
  const QuadParams params;
  StateVec s = hover_state();
  s.segment<3>(kOmegaIdx) = Vec3(0, 0, 1);
  const StateVec d = nominal_deriv(s, ControlVec::Zero(), params);
  EXPECT_NEAR(d.segment<3>(kOmegaIdx).norm(), 0.0, 1e-15);
}

TEST(NominalDeriv, AnalyticJacobiansMatchCentralDifferences) {
  QuadParams params;
  params.inertia_diag = Vec3(0.012, 0.015, 0.025);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    StateVec s = spinning_state();
    s += 0.3 * StateVec::NullaryExpr([&] { return n(rng); });
    ControlVec u = thrusting_control() + 0.1 * ControlVec::NullaryExpr([&] { return n(rng); });
    Eigen::Matrix<double, 13, 13> fs;
    Eigen::Matrix<double, 13, 4> fu;
    nominal_deriv_jacobians(s, u, params, fs, fu);
    const double h = 1e-6;
    for (int i = 0; i < 13; ++i) {
      StateVec sp = s, sm = s;
      sp(i) += h;
      sm(i) -= h;
      const StateVec col = (nominal_deriv(sp, u, params) - nominal_deriv(sm, u, params)) / (2 * h);
      EXPECT_LT((col - fs.col(i)).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, col.norm())) << "state column " << i;
    }
    for (int i = 0; i < 4; ++i) {
      ControlVec up = u, um = u;
      up(i) += h;
      um(i) -= h;
      const StateVec col = (nominal_deriv(s, up, params) - nominal_deriv(s, um, params)) / (2 * h);
      EXPECT_LT((col - fu.col(i)).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, col.norm())) << "control column " << i;
    }
  }
}

TEST(Drag, ZeroWhenMovingWithTheAir) {
  const DragParams dp{0.5, Vec3(0.1, 0.2, 0.3)};
  const Vec3 v(1.0, -2.0, 0.5);
  EXPECT_NEAR(drag_force(v, v, Quaternion::identity(), dp).norm(), 0.0, 1e-15);
}

TEST(Drag, HandValueInStillAir) {
  const DragParams dp{0.5, Vec3::Zero()};
  const Vec3 f = drag_force(Vec3(1, 0, 0), Vec3::Zero(), Quaternion::identity(), dp);
  EXPECT_NEAR((f - Vec3(-0.5, 0, 0)).norm(), 0.0, 1e-15);
}

TEST(Drag, QuadraticScalingAndOddness) {
  const DragParams quad_only{0.3, Vec3::Zero()};
  const Quaternion q = Quaternion::from_axis_angle(Vec3(0.2, 1, 0), 0.5);
  const Vec3 v(1.2, -0.4, 0.7);
  const Vec3 f1 = drag_force(v, Vec3::Zero(), q, quad_only);
  const Vec3 f2 = drag_force(2 * v, Vec3::Zero(), q, quad_only);
  EXPECT_NEAR(f2.norm(), 4 * f1.norm(), 1e-12);
  const DragParams both{0.3, Vec3(0.05, 0.07, 0.02)};
  EXPECT_NEAR((drag_force(-v, Vec3::Zero(), q, both) + drag_force(v, Vec3::Zero(), q, both)).norm(), 0.0, 1e-15);
}

TEST(Drag, LinearTermUsesBodyAxes) {
  const DragParams dp{0.0, Vec3(0.1, 0.2, 0.3)};
  const Quaternion q = Quaternion::from_axis_angle(Vec3(1, 1, 0), 0.8);
  const Vec3 v(0.4, 1.0, -0.3);
  const Eigen::Matrix3d r = q.rotation_matrix();
  const Vec3 expected = -(r * dp.c_lin.asDiagonal() * r.transpose()) * v;
  EXPECT_NEAR((drag_force(v, Vec3::Zero(), q, dp) - expected).norm(), 0.0, 1e-14);
}

TEST(Wind, ConstantRampAndGrid) {
  EXPECT_EQ(wind_at(WindField{ConstantWind{Vec3(2, 0, 0)}}, Vec3(5, -3, 1)), Vec3(2, 0, 0));
  // sin = +1 at p_x = period / 4
  const AnalyticRampWind ramp{0, 0.0, 10.0, 8.0, 0.0};
  EXPECT_NEAR((wind_at(ramp, Vec3(2.0, 0, 0)) - Vec3(10, 0, 0)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((wind_at(ramp, Vec3(6.0, 0, 0)) - Vec3(0, 0, 0)).norm(), 0.0, 1e-12);

  std::istringstream in("3 2 0.5 -1 0\n1 0 0\n2 0 0\n3 0 0\n4 1 0\n5 1 0\n6 1 0\n");
  const SpatialGridWind g = parse_wind_grid(in);
  EXPECT_EQ(wind_at(g, Vec3(-0.5, 0.5, 0)), Vec3(5, 1, 0));
  EXPECT_NEAR((wind_at(g, Vec3(-0.75, 0.25, 0)) - Vec3(3.0, 0.5, 0)).norm(), 0.0, 1e-12);
  // clamped outside
  EXPECT_EQ(wind_at(g, Vec3(100, 100, 0)), Vec3(6, 1, 0));
}

TEST(Wind, MalformedGridIsRejected) {
  std::istringstream bad("2 2 1.0 0 0\n1 0 0\n");
  EXPECT_THROW(parse_wind_grid(bad), std::exception);
}

TEST(Rk4, FreeFallIsExact) {
  const QuadParams params;
  StateVec s = hover_state();
  for (int i = 0; i < 500; ++i) s = rk4_step(s, ControlVec::Zero(), 1.0 / 500, params);
  EXPECT_NEAR(s(kVelIdx + 2), -9.81, 1e-9);
  EXPECT_NEAR(s(kPosIdx + 2), -4.905, 1e-9);
}

TEST(Rk4, HoverIsStationary) {
  const QuadParams params;
  const StateVec s0 = hover_state(Vec3(1, 2, 3));
  StateVec s = s0;
  for (int i = 0; i < 100; ++i) s = rk4_step(s, hover_control(params), 0.002, params);
  EXPECT_LT(max_abs(s - s0), 1e-12);
}

TEST(Rk4, QuaternionStaysUnit) {
  const QuadParams params;
  StateVec s = spinning_state();
  for (int i = 0; i < 1000; ++i) {
    s = rk4_step(s, thrusting_control(), 0.002, params);
    ASSERT_NEAR(s.segment<4>(kQuatIdx).norm(), 1.0, 1e-9);
  }
}

TEST(Rk4, FourthOrderConvergence) {
  QuadParams params;
  params.inertia_diag = Vec3(0.01, 0.015, 0.02);
  const double horizon = 0.5;
  auto integrate = [&](double dt) {
    StateVec s = spinning_state();
    const int n = static_cast<int>(std::lround(horizon / dt));
    for (int i = 0; i < n; ++i) s = rk4_step(s, thrusting_control(), dt, params);
    return s;
  };
  const double dt = 0.01;
  const StateVec ref = integrate(dt / 100);
  const double e1 = (integrate(dt) - ref).norm();
  const double e2 = (integrate(dt / 2) - ref).norm();
  const double ratio = e1 / e2;
  EXPECT_GE(ratio, 12.0);
  EXPECT_LE(ratio, 20.0);
}

TEST(Rk4, EnergyConservedInBallisticFlight) {
  const QuadParams params;
  StateVec s = hover_state();
  s.segment<3>(kVelIdx) = Vec3(3.0, -1.0, 5.0);
  auto energy = [&](const StateVec& x) {
    return 0.5 * params.mass * x.segment<3>(kVelIdx).squaredNorm() + params.mass * params.gravity * x(kPosIdx + 2);
  };
  const double e0 = energy(s);
  for (int i = 0; i < 500; ++i) s = rk4_step(s, ControlVec::Zero(), 0.002, params);
  EXPECT_LT(std::abs(energy(s) - e0) / std::abs(e0), 1e-6);
}

TEST(Rk4, ExtraForceEntersAsAcceleration) {
  QuadParams params;
  params.mass = 2.0;
  const auto push = [](const StateVec&) { return Vec3(1.0, 0.0, 0.0); };
  const double dt = 0.02;
  const StateVec s = rk4_step(hover_state(), hover_control(params), dt, params, push);
  EXPECT_NEAR(s(kVelIdx), dt / params.mass, 1e-12);
}

TEST(Rk4, ZeroWindZeroDragTruthEqualsNominal) {
  const QuadParams params;
  const WindField wind{ConstantWind{}};
  const DragParams drag{};
  const TruthDisturbance truth{&wind, &drag};
  const StateVec a = rk4_step(spinning_state(), thrusting_control(), 0.002, params, truth);
  const StateVec b = rk4_step(spinning_state(), thrusting_control(), 0.002, params);
  EXPECT_EQ(a, b);
}

TEST(Rk4, RejectsBadInputs) {
  const QuadParams params;
  EXPECT_THROW(rk4_step(hover_state(), hover_control(params), 0.0, params), std::invalid_argument);
  StateVec s = hover_state();
  s(0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(rk4_step(s, hover_control(params), 0.01, params), NumericError);
}

TEST(QuadParams, Validation) {
  QuadParams p;
  p.mass = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}
