#pragma once

// Wind fields used by the truth simulator.

#include "protompc/quad_dynamics.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace protompc {

struct ConstantWind {
  Vec3 velocity{Vec3::Zero()};
};

/// Horizontal grid of wind vectors, bilinearly interpolated in (x, y) and
/// clamped at the borders. Values are stored with x varying fastest:
/// values[j * nx + i] is the node at (origin_x + i*cell, origin_y + j*cell).
struct SpatialGridWind {
  int nx{0};
  int ny{0};
  double cell_size{1.0};
  double origin_x{0.0};
  double origin_y{0.0};
  std::vector<Vec3> values;

  const Vec3& node(int i, int j) const { return values[static_cast<std::size_t>(j * nx + i)]; }
};

/// Wind along one inertial axis whose speed oscillates between v_min and v_max
/// as a sinusoid of the position along that same axis.
struct AnalyticRampWind {
  int axis{0};
  double v_min{0.0};
  double v_max{10.0};
  double period{8.0};
  double phase{0.0};
};

using WindField = std::variant<ConstantWind, SpatialGridWind, AnalyticRampWind>;

inline Vec3 wind_at(const ConstantWind& w, const Vec3&) { return w.velocity; }

inline Vec3 wind_at(const SpatialGridWind& w, const Vec3& p) {
  if (w.nx <= 0 || w.ny <= 0) return Vec3::Zero();
  const double gx = std::clamp((p.x() - w.origin_x) / w.cell_size, 0.0, double(w.nx - 1));
  const double gy = std::clamp((p.y() - w.origin_y) / w.cell_size, 0.0, double(w.ny - 1));
  const int i0 = std::min(static_cast<int>(gx), std::max(w.nx - 2, 0));
  const int j0 = std::min(static_cast<int>(gy), std::max(w.ny - 2, 0));
  const int i1 = std::min(i0 + 1, w.nx - 1);
  const int j1 = std::min(j0 + 1, w.ny - 1);
  const double tx = gx - i0;
  const double ty = gy - j0;
  return (1 - tx) * (1 - ty) * w.node(i0, j0) + tx * (1 - ty) * w.node(i1, j0) +
         (1 - tx) * ty * w.node(i0, j1) + tx * ty * w.node(i1, j1);
}

inline Vec3 wind_at(const AnalyticRampWind& w, const Vec3& p) {
  const double s = std::sin(2.0 * std::numbers::pi * p(w.axis) / w.period + w.phase);
  Vec3 out = Vec3::Zero();
  out(w.axis) = w.v_min + (w.v_max - w.v_min) * 0.5 * (1.0 + s);
  return out;
}

inline Vec3 wind_at(const WindField& w, const Vec3& p) {
  return std::visit([&](const auto& field) { return wind_at(field, p); }, w);
}

/// Reads `nx ny cell_size origin_x origin_y` followed by nx*ny rows of
/// `vx vy vz`.
inline SpatialGridWind parse_wind_grid(std::istream& in) {
  SpatialGridWind g;
  if (!(in >> g.nx >> g.ny >> g.cell_size >> g.origin_x >> g.origin_y)) {
    throw std::runtime_error("wind grid: malformed header");
  }
  if (g.nx <= 0 || g.ny <= 0 || !(g.cell_size > 0.0)) {
    throw std::runtime_error("wind grid: invalid dimensions");
  }
  g.values.reserve(static_cast<std::size_t>(g.nx * g.ny));
  for (int k = 0; k < g.nx * g.ny; ++k) {
    Vec3 v;
    if (!(in >> v.x() >> v.y() >> v.z())) {
      throw std::runtime_error("wind grid: expected " + std::to_string(g.nx * g.ny) + " rows");
    }
    if (!v.allFinite()) throw std::runtime_error("wind grid: non-finite value");
    g.values.push_back(v);
  }
  return g;
}

inline SpatialGridWind load_wind_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("wind grid: cannot open " + path);
  return parse_wind_grid(in);
}

inline std::string describe(const WindField& w) {
  std::ostringstream os;
  std::visit(
      [&](const auto& f) {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, ConstantWind>) {
          os << "constant(" << f.velocity.x() << "," << f.velocity.y() << "," << f.velocity.z() << ")";
        } else if constexpr (std::is_same_v<T, SpatialGridWind>) {
          os << "grid(" << f.nx << "x" << f.ny << ")";
        } else {
          os << "ramp(axis=" << f.axis << "," << f.v_min << ".." << f.v_max << ",period=" << f.period << ")";
        }
      },
      w);
  return os.str();
}

/// Truth-model force acting on the vehicle at state `s`.
struct TruthDisturbance {
  const WindField* wind;
  const DragParams* drag;

  Vec3 operator()(const StateVec& s) const {
    const Vec3 p = s.segment<3>(kPosIdx);
    const Quaternion q = Quaternion::from_coeffs(s.segment<4>(kQuatIdx));
    return drag_force(s.segment<3>(kVelIdx), wind_at(*wind, p), q, *drag);
  }
};

}  // namespace protompc
