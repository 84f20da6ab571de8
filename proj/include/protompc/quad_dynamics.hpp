#pragma once

// Rigid-body quadrotor model: quaternion algebra, nominal 6-DoF dynamics,
// truth-model aerodynamic drag and fixed-step RK4 integration.
//
// State layout used throughout the library (13 entries):
//   [ p(3) | v(3) | q(4, scalar first) | omega(3) ]
// Control layout (4 entries):
//   [ f | M(3) ]

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace protompc {

using Vec3 = Eigen::Vector3d;
using StateVec = Eigen::Matrix<double, 13, 1>;
using ControlVec = Eigen::Matrix<double, 4, 1>;

inline constexpr int kStateDim = 13;
inline constexpr int kControlDim = 4;
inline constexpr int kPosIdx = 0;
inline constexpr int kVelIdx = 3;
inline constexpr int kQuatIdx = 6;
inline constexpr int kOmegaIdx = 10;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scalar-first Hamilton quaternion.
struct Quaternion {
  double w{1.0};
  double x{0.0};
  double y{0.0};
  double z{0.0};

  static Quaternion identity() { return {}; }

  static Quaternion from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 n = axis.normalized();
    const double s = std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), s * n.x(), s * n.y(), s * n.z()};
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }

  static Quaternion from_coeffs(const Eigen::Ref<const Eigen::Vector4d>& c) {
    return {c(0), c(1), c(2), c(3)};
  }

  /// Rotation matrix R(q) mapping body-frame vectors into the inertial frame.
  Eigen::Matrix3d rotation_matrix() const {
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
  }
};

inline Quaternion quat_multiply(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

/// Rotates a body-frame vector into the inertial frame, q ⊗ [0 v] ⊗ q*.
inline Vec3 quat_rotate(const Quaternion& q, const Vec3& v) {
  // t = 2 q_v × v ; v' = v + w t + q_v × t
  const Vec3 qv(q.x, q.y, q.z);
  const Vec3 t = 2.0 * qv.cross(v);
  return v + q.w * t + qv.cross(t);
}

struct QuadState {
  Vec3 p{Vec3::Zero()};
  Vec3 v{Vec3::Zero()};
  Quaternion q{};
  Vec3 omega{Vec3::Zero()};

  StateVec to_vector() const {
    StateVec s;
    s << p, v, q.w, q.x, q.y, q.z, omega;
    return s;
  }

  static QuadState from_vector(const StateVec& s) {
    QuadState out;
    out.p = s.segment<3>(kPosIdx);
    out.v = s.segment<3>(kVelIdx);
    out.q = Quaternion::from_coeffs(s.segment<4>(kQuatIdx));
    out.omega = s.segment<3>(kOmegaIdx);
    return out;
  }
};

struct ControlInput {
  double f{0.0};
  Vec3 m_torque{Vec3::Zero()};

  ControlVec to_vector() const {
    ControlVec u;
    u << f, m_torque;
    return u;
  }

  static ControlInput from_vector(const ControlVec& u) {
    return {u(0), u.segment<3>(1)};
  }
};

struct QuadParams {
  double mass{1.0};
  Vec3 inertia_diag{0.01, 0.01, 0.02};
  double gravity{9.81};

  Vec3 gravity_vector() const { return {0.0, 0.0, -gravity}; }

  void validate() const {
    if (!(mass > 0.0) || !(inertia_diag.array() > 0.0).all()) {
      throw std::invalid_argument("QuadParams: mass and inertia must be positive");
    }
  }
};

struct DragParams {
  double c_quad{0.0};
  Vec3 c_lin{Vec3::Zero()};
};

inline Vec3 body_z(const Quaternion& q) { return quat_rotate(q, Vec3::UnitZ()); }

/// Time derivative of the 13-dim state under the nominal rigid-body model.
inline StateVec nominal_deriv(const StateVec& s, const ControlVec& u,
                              const QuadParams& params) {
  const Quaternion q = Quaternion::from_coeffs(s.segment<4>(kQuatIdx));
  const Vec3 omega = s.segment<3>(kOmegaIdx);
  const Vec3& j = params.inertia_diag;

  StateVec d;
  d.segment<3>(kPosIdx) = s.segment<3>(kVelIdx);
  d.segment<3>(kVelIdx) = (u(0) / params.mass) * body_z(q) + params.gravity_vector();
  const Quaternion qdot = quat_multiply(q, {0.0, omega.x(), omega.y(), omega.z()});
  d.segment<4>(kQuatIdx) = 0.5 * qdot.coeffs();
  const Vec3 j_omega = j.cwiseProduct(omega);
  d.segment<3>(kOmegaIdx) = (u.segment<3>(1) - omega.cross(j_omega)).cwiseQuotient(j);
  return d;
}

inline Eigen::Matrix3d skew(const Vec3& v) {
  Eigen::Matrix3d m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// Analytic Jacobians of nominal_deriv with respect to state and control,
/// valid for non-unit quaternions as well.
inline void nominal_deriv_jacobians(const StateVec& s, const ControlVec& u, const QuadParams& params,
                                    Eigen::Matrix<double, kStateDim, kStateDim>& fs,
                                    Eigen::Matrix<double, kStateDim, kControlDim>& fu) {
  const double w = s(kQuatIdx), x = s(kQuatIdx + 1), y = s(kQuatIdx + 2), z = s(kQuatIdx + 3);
  const Vec3 omega = s.segment<3>(kOmegaIdx);
  const Vec3& j = params.inertia_diag;
  fs.setZero();
  fu.setZero();

  fs.block<3, 3>(kPosIdx, kVelIdx).setIdentity();

  Eigen::Matrix<double, 3, 4> dbz;  // d body_z / d (w, x, y, z)
  dbz << 2 * y, 2 * z, 2 * w, 2 * x,
      -2 * x, -2 * w, 2 * z, 2 * y,
      0.0, -4 * x, -4 * y, 0.0;
  fs.block<3, 4>(kVelIdx, kQuatIdx) = (u(0) / params.mass) * dbz;
  fu.block<3, 1>(kVelIdx, 0) = body_z(Quaternion::from_coeffs(s.segment<4>(kQuatIdx))) / params.mass;

  Eigen::Matrix4d big_omega;
  big_omega << 0.0, -omega.x(), -omega.y(), -omega.z(),
      omega.x(), 0.0, omega.z(), -omega.y(),
      omega.y(), -omega.z(), 0.0, omega.x(),
      omega.z(), omega.y(), -omega.x(), 0.0;
  fs.block<4, 4>(kQuatIdx, kQuatIdx) = 0.5 * big_omega;
  Eigen::Matrix<double, 4, 3> xi;
  xi.row(0) << -x, -y, -z;
  xi.bottomRows<3>() = w * Eigen::Matrix3d::Identity() + skew(Vec3(x, y, z));
  fs.block<4, 3>(kQuatIdx, kOmegaIdx) = 0.5 * xi;

  const Eigen::Matrix3d d_gyro = skew(omega) * j.asDiagonal().toDenseMatrix() - skew(j.cwiseProduct(omega));
  fs.block<3, 3>(kOmegaIdx, kOmegaIdx) = -(j.cwiseInverse().asDiagonal() * d_gyro);
  fu.block<3, 3>(kOmegaIdx, 1) = j.cwiseInverse().asDiagonal();
}

inline StateVec nominal_deriv(const QuadState& s, const ControlInput& u,
                              const QuadParams& params) {
  return nominal_deriv(s.to_vector(), u.to_vector(), params);
}

/// Aerodynamic drag in the inertial frame: quadratic drag on the air-relative
/// velocity plus linear rotor drag acting along body axes.
inline Vec3 drag_force(const Vec3& v, const Vec3& v_wind, const Quaternion& q,
                       const DragParams& dp) {
  const Vec3 v_rel = v - v_wind;
  const Eigen::Matrix3d r = q.rotation_matrix();
  const Vec3 body_rel = r.transpose() * v_rel;
  return -dp.c_quad * v_rel.norm() * v_rel - r * dp.c_lin.cwiseProduct(body_rel);
}

inline void normalize_quaternion(StateVec& s) {
  s.segment<4>(kQuatIdx).normalize();
}

inline bool all_finite(const StateVec& s) { return s.allFinite(); }

/// Marker for integration without an external force term.
struct NoExtraForce {
  Vec3 operator()(const StateVec&) const { return Vec3::Zero(); }
};

namespace detail {

template <class ExtraForce>
StateVec augmented_deriv(const StateVec& s, const ControlVec& u,
                         const QuadParams& params, const ExtraForce& extra) {
  StateVec d = nominal_deriv(s, u, params);
  if constexpr (!std::is_same_v<ExtraForce, NoExtraForce>) {
    d.segment<3>(kVelIdx) += extra(s) / params.mass;
  }
  return d;
}

}  // namespace detail

/// One classical RK4 step of length dt. `extra` is evaluated at every stage
/// and enters the translational dynamics as a force. The quaternion is
/// renormalized after the step.
template <class ExtraForce = NoExtraForce>
StateVec rk4_step(const StateVec& s, const ControlVec& u, double dt,
                  const QuadParams& params, const ExtraForce& extra = {}) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  if (!s.allFinite() || !u.allFinite()) {
    throw NumericError("rk4_step: non-finite state or control");
  }
  const StateVec k1 = detail::augmented_deriv(s, u, params, extra);
  const StateVec k2 = detail::augmented_deriv(s + 0.5 * dt * k1, u, params, extra);
  const StateVec k3 = detail::augmented_deriv(s + 0.5 * dt * k2, u, params, extra);
  const StateVec k4 = detail::augmented_deriv(s + dt * k3, u, params, extra);
  StateVec next = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  normalize_quaternion(next);
  if (!next.allFinite()) throw NumericError("rk4_step: integration produced non-finite state");
  return next;
}

inline QuadState rk4_step(const QuadState& s, const ControlInput& u, double dt,
                          const QuadParams& params) {
  return QuadState::from_vector(rk4_step(s.to_vector(), u.to_vector(), dt, params));
}

inline StateVec hover_state(const Vec3& p = Vec3::Zero()) {
  QuadState s;
  s.p = p;
  return s.to_vector();
}

inline ControlVec hover_control(const QuadParams& params) {
  ControlVec u = ControlVec::Zero();
  u(0) = params.mass * params.gravity;
  return u;
}

}  // namespace protompc
