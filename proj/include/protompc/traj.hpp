#pragma once

// Minimum-snap piecewise polynomial trajectories and flat-output reference
// sampling for the tracking controller.

#include "protompc/quad_dynamics.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <array>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protompc {

class TrajectoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Waypoint {
  Vec3 position{Vec3::Zero()};
  double arrival_time{0.0};
};

inline constexpr int kPolyCoeffs = 8;  // 7th order
using SegmentCoeffs = Eigen::Matrix<double, kPolyCoeffs, 3>;

/// Piecewise 7th-order polynomial in local segment time. Row n of a segment's
/// coefficient block multiplies tau^n; columns are the x, y, z axes.
class PiecewisePoly {
 public:
  PiecewisePoly() = default;
  PiecewisePoly(std::vector<double> times, std::vector<SegmentCoeffs> coeffs)
      : times_(std::move(times)), coeffs_(std::move(coeffs)) {}

  double start_time() const { return times_.front(); }
  double final_time() const { return times_.back(); }
  std::size_t num_segments() const { return coeffs_.size(); }
  const std::vector<double>& times() const { return times_; }
  const SegmentCoeffs& segment(std::size_t i) const { return coeffs_[i]; }

  /// `order`-th time derivative at absolute time t, clamped to the time span.
  Vec3 eval(double t, int order = 0) const {
    t = std::clamp(t, start_time(), final_time());
    std::size_t seg = static_cast<std::size_t>(
        std::upper_bound(times_.begin(), times_.end(), t) - times_.begin());
    seg = std::clamp<std::size_t>(seg, 1, coeffs_.size()) - 1;
    return eval_segment(seg, t - times_[seg], order);
  }

  Vec3 eval_segment(std::size_t seg, double tau, int order) const {
    Vec3 out = Vec3::Zero();
    for (int n = order; n < kPolyCoeffs; ++n) {
      out += falling(n, order) * std::pow(tau, n - order) * coeffs_[seg].row(n).transpose();
    }
    return out;
  }

  static double falling(int n, int r) {
    double f = 1.0;
    for (int k = 0; k < r; ++k) f *= (n - k);
    return f;
  }

 private:
  std::vector<double> times_;
  std::vector<SegmentCoeffs> coeffs_;
};

namespace detail {

/// Gram matrix of the `r`-th derivative over [0, T]: entry (n, m) is
/// ∫ d^r(tau^n) d^r(tau^m) dtau.
inline Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs> derivative_gram(double T, int r) {
  Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs> h = Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs>::Zero();
  for (int n = r; n < kPolyCoeffs; ++n) {
    for (int m = r; m < kPolyCoeffs; ++m) {
      const int e = n + m - 2 * r + 1;
      h(n, m) = PiecewisePoly::falling(n, r) * PiecewisePoly::falling(m, r) * std::pow(T, e) / e;
    }
  }
  return h;
}

inline Eigen::Matrix<double, 1, kPolyCoeffs> derivative_row(double tau, int r) {
  Eigen::Matrix<double, 1, kPolyCoeffs> row = Eigen::Matrix<double, 1, kPolyCoeffs>::Zero();
  for (int n = r; n < kPolyCoeffs; ++n) row(n) = PiecewisePoly::falling(n, r) * std::pow(tau, n - r);
  return row;
}

/// Minimizes the integrated squared `cost_order`-th derivative subject to
/// waypoint interpolation and C4 continuity. One KKT system serves all
/// three axes.
inline PiecewisePoly min_derivative_solve(const std::vector<Waypoint>& wps, bool rest_to_rest,
                                          int cost_order) {
  if (wps.size() < 2) throw TrajectoryError("min_snap_solve: need at least 2 waypoints");
  for (std::size_t i = 1; i < wps.size(); ++i) {
    if (!(wps[i].arrival_time > wps[i - 1].arrival_time)) {
      throw TrajectoryError("min_snap_solve: singular constraint system (non-increasing times at waypoint " +
                            std::to_string(i) + ")");
    }
  }
  const int m = static_cast<int>(wps.size()) - 1;
  const int nvar = kPolyCoeffs * m;
  const int n_cont = 4;  // derivatives 1..4 continuous at interior knots
  const int ncon = 2 * m + n_cont * (m - 1) + (rest_to_rest ? 6 : 0);

  Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(nvar, nvar);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(ncon, nvar);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(ncon, 3);

  int row = 0;
  for (int i = 0; i < m; ++i) {
    const double T = wps[i + 1].arrival_time - wps[i].arrival_time;
    hess.block<kPolyCoeffs, kPolyCoeffs>(i * kPolyCoeffs, i * kPolyCoeffs) = derivative_gram(T, cost_order);
    a.block<1, kPolyCoeffs>(row, i * kPolyCoeffs) = derivative_row(0.0, 0);
    b.row(row++) = wps[i].position.transpose();
    a.block<1, kPolyCoeffs>(row, i * kPolyCoeffs) = derivative_row(T, 0);
    b.row(row++) = wps[i + 1].position.transpose();
    if (i + 1 < m) {
      for (int r = 1; r <= n_cont; ++r) {
        a.block<1, kPolyCoeffs>(row, i * kPolyCoeffs) = derivative_row(T, r);
        a.block<1, kPolyCoeffs>(row, (i + 1) * kPolyCoeffs) = -derivative_row(0.0, r);
        ++row;
      }
    }
  }
  if (rest_to_rest) {
    const double t_last = wps[m].arrival_time - wps[m - 1].arrival_time;
    for (int r = 1; r <= 3; ++r) {
      a.block<1, kPolyCoeffs>(row++, 0) = derivative_row(0.0, r);
      a.block<1, kPolyCoeffs>(row++, (m - 1) * kPolyCoeffs) = derivative_row(t_last, r);
    }
  }

  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nvar + ncon, nvar + ncon);
  kkt.topLeftCorner(nvar, nvar) = 2.0 * hess;
  kkt.topRightCorner(nvar, ncon) = a.transpose();
  kkt.bottomLeftCorner(ncon, nvar) = a;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(nvar + ncon, 3);
  rhs.bottomRows(ncon) = b;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
  if (lu.rank() < kkt.rows()) {
    throw TrajectoryError("min_snap_solve: singular constraint system");
  }
  const Eigen::MatrixXd sol = lu.solve(rhs);

  std::vector<double> times;
  std::vector<SegmentCoeffs> coeffs;
  for (const auto& wp : wps) times.push_back(wp.arrival_time);
  for (int i = 0; i < m; ++i) coeffs.push_back(sol.block<kPolyCoeffs, 3>(i * kPolyCoeffs, 0));
  return PiecewisePoly(std::move(times), std::move(coeffs));
}

}  // namespace detail

/// Per-axis piecewise 7th-order polynomial minimizing integrated squared snap.
inline PiecewisePoly min_snap_solve(const std::vector<Waypoint>& waypoints, bool rest_to_rest = true) {
  return detail::min_derivative_solve(waypoints, rest_to_rest, 4);
}

/// Exact integrated squared snap summed over the three axes.
inline double snap_cost(const PiecewisePoly& poly) {
  double total = 0.0;
  for (std::size_t i = 0; i < poly.num_segments(); ++i) {
    const double T = poly.times()[i + 1] - poly.times()[i];
    const auto h = detail::derivative_gram(T, 4);
    for (int ax = 0; ax < 3; ++ax) {
      const auto c = poly.segment(i).col(ax);
      total += c.dot(h * c);
    }
  }
  return total;
}

struct RefSample {
  QuadState ref_state;
  ControlInput ref_control;
  Vec3 pos{Vec3::Zero()};
  Vec3 vel{Vec3::Zero()};
  Vec3 acc{Vec3::Zero()};
  Vec3 jerk{Vec3::Zero()};
  Vec3 snap{Vec3::Zero()};
};

/// Flat-output reference at time t with zero yaw. Thrust direction follows
/// the required specific force, body rates follow from the jerk.
inline RefSample sample_ref(const PiecewisePoly& traj, double t, const QuadParams& params) {
  RefSample r;
  const bool past_end = t >= traj.final_time();
  r.pos = traj.eval(t, 0);
  r.vel = traj.eval(t, 1);
  r.acc = traj.eval(t, 2);
  r.jerk = traj.eval(t, 3);
  r.snap = traj.eval(t, 4);
  if (past_end) {
    // hold the final waypoint
    r.vel.setZero();
    r.acc.setZero();
    r.jerk.setZero();
    r.snap.setZero();
  }
  const Vec3 specific = r.acc - params.gravity_vector();
  const double sn = specific.norm();
  if (sn < 1e-6) throw TrajectoryError("sample_ref: free-fall reference has no thrust direction");
  const Vec3 zb = specific / sn;
  const Vec3 xc = Vec3::UnitX();
  Vec3 yb = zb.cross(xc);
  if (yb.norm() < 1e-9) throw TrajectoryError("sample_ref: thrust axis aligned with heading");
  yb.normalize();
  const Vec3 xb = yb.cross(zb);
  Eigen::Matrix3d rot;
  rot.col(0) = xb;
  rot.col(1) = yb;
  rot.col(2) = zb;
  const Eigen::Quaterniond eq(rot);

  const Vec3 h = (r.jerk - zb.dot(r.jerk) * zb) / sn;
  r.ref_state.p = r.pos;
  r.ref_state.v = r.vel;
  r.ref_state.q = Quaternion{eq.w(), eq.x(), eq.y(), eq.z()}.normalized();
  if (r.ref_state.q.w < 0.0) {
    r.ref_state.q = {-r.ref_state.q.w, -r.ref_state.q.x, -r.ref_state.q.y, -r.ref_state.q.z};
  }
  r.ref_state.omega = Vec3(-h.dot(yb), h.dot(xb), 0.0);
  r.ref_control.f = params.mass * sn;
  r.ref_control.m_torque.setZero();
  return r;
}

/// Writes `t,px,py,pz,vx,vy,vz,ax,ay,az` rows sampled every `dt` seconds.
inline void export_csv(const PiecewisePoly& traj, double dt, std::ostream& os) {
  os << "t,px,py,pz,vx,vy,vz,ax,ay,az\n";
  const int n = static_cast<int>(std::floor((traj.final_time() - traj.start_time()) / dt + 1e-9));
  char buf[512];
  for (int k = 0; k <= n; ++k) {
    const double t = traj.start_time() + k * dt;
    const Vec3 p = traj.eval(t, 0), v = traj.eval(t, 1), a = traj.eval(t, 2);
    std::snprintf(buf, sizeof(buf), "%.6f,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", t, p.x(), p.y(),
                  p.z(), v.x(), v.y(), v.z(), a.x(), a.y(), a.z());
    os << buf;
  }
}

namespace trajectories {

inline std::vector<Waypoint> make(std::initializer_list<std::array<double, 4>> rows) {
  std::vector<Waypoint> out;
  for (const auto& r : rows) out.push_back({Vec3(r[1], r[2], r[3]), r[0]});
  return out;
}

/// Aggressive closed loop used for data collection and constant-wind tests.
inline std::vector<Waypoint> training() {
  return make({{0.0, 0.0, 0.0, 1.0},
               {2.0, 1.8, 1.0, 1.3},
               {4.0, 0.5, 2.0, 1.6},
               {6.0, -1.8, 1.2, 1.2},
               {8.0, -0.6, -0.2, 0.9},
               {10.0, 1.8, -1.0, 1.4},
               {12.0, 0.4, -2.0, 1.7},
               {14.0, -1.8, -1.0, 1.2},
               {16.0, -1.0, 0.6, 1.0},
               {18.0, 0.0, 0.0, 1.0}});
}

/// Elongated figure-eight.
inline std::vector<Waypoint> test_figure_eight() {
  return make({{0.0, 0.0, 0.0, 1.2},
               {2.0, 1.6, 0.9, 1.2},
               {4.0, 2.4, 0.0, 1.3},
               {6.0, 1.6, -0.9, 1.2},
               {8.0, 0.0, 0.0, 1.2},
               {10.0, -1.6, 0.9, 1.2},
               {12.0, -2.4, 0.0, 1.3},
               {14.0, -1.6, -0.9, 1.2},
               {16.0, 0.0, 0.0, 1.2}});
}

/// Helix-like sweep climbing and descending around the origin.
inline std::vector<Waypoint> test_helix() {
  return make({{0.0, 0.0, 0.0, 0.9},
               {2.0, 1.5, 0.8, 1.1},
               {4.0, 0.3, 1.8, 1.3},
               {6.0, -1.5, 0.8, 1.5},
               {8.0, -1.0, -1.2, 1.7},
               {10.0, 1.0, -1.4, 1.5},
               {12.0, 1.7, 0.4, 1.3},
               {14.0, -0.2, 1.2, 1.1},
               {16.0, 0.0, 0.0, 0.9}});
}

/// Slalom through laterally offset gates and back.
inline std::vector<Waypoint> test_slalom() {
  return make({{0.0, -2.0, 0.0, 1.0},
               {2.0, -1.0, 1.2, 1.2},
               {4.0, 0.0, -1.2, 1.4},
               {6.0, 1.0, 1.2, 1.2},
               {8.0, 2.0, 0.0, 1.0},
               {10.0, 1.0, -1.2, 1.2},
               {12.0, 0.0, 1.2, 1.4},
               {14.0, -1.0, -1.2, 1.2},
               {16.0, -2.0, 0.0, 1.0}});
}

inline std::vector<Waypoint> by_name(const std::string& name) {
  if (name == "training") return training();
  if (name == "figure-eight") return test_figure_eight();
  if (name == "helix") return test_helix();
  if (name == "slalom") return test_slalom();
  throw std::invalid_argument("unknown trajectory '" + name + "'");
}

}  // namespace trajectories

}  // namespace protompc
