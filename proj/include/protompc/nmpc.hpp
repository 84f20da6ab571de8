#pragma once

// Nonlinear MPC over the nominal + learned-residual model, solved by
// Gauss-Newton SQP: linearization along the current rollout (RK4 tangent
// propagation, with forward differences as fallback), a backward Riccati
// sweep for the LQR subproblem, control clamping in the forward pass and a
// backtracking line search on the true cost.

#include "protompc/epd.hpp"
#include "protompc/quad_dynamics.hpp"
#include "protompc/traj.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace protompc {

template <int NX, int NU>
struct MpcConfigT {
  using StateW = Eigen::Matrix<double, NX, 1>;
  using ControlW = Eigen::Matrix<double, NU, 1>;

  int horizon{20};
  double dt{0.02};
  StateW q{StateW::Ones()};
  ControlW r{ControlW::Ones()};
  StateW q_terminal{StateW::Ones()};
  ControlW u_min{ControlW::Constant(-std::numeric_limits<double>::infinity())};
  ControlW u_max{ControlW::Constant(std::numeric_limits<double>::infinity())};
  int max_iterations{10};
  double kkt_tolerance{1e-3};
  int max_line_search{10};

  void validate() const {
    if (horizon < 1) throw std::invalid_argument("MpcConfig: horizon must be >= 1");
    if (!(dt > 0.0)) throw std::invalid_argument("MpcConfig: dt must be positive");
    if ((q.array() < 0.0).any() || (r.array() < 0.0).any() || (q_terminal.array() < 0.0).any()) {
      throw std::invalid_argument("MpcConfig: weights must be nonnegative");
    }
    if ((u_min.array() > u_max.array()).any()) throw std::invalid_argument("MpcConfig: u_min > u_max");
  }
};

using MpcConfig = MpcConfigT<kStateDim, kControlDim>;

/// Default tracking weights and actuator box for a quadrotor of the given
/// parameters.
inline MpcConfig default_mpc_config(const QuadParams& params) {
  MpcConfig c;
  c.q << 10, 10, 10, 1, 1, 1, 5, 5, 5, 5, 0.1, 0.1, 0.1;
  c.r << 0.1, 1.0, 1.0, 1.0;
  c.q_terminal = 5.0 * c.q;
  c.u_min << 0.0, -0.2, -0.2, -0.2;
  c.u_max << 4.0 * params.mass * params.gravity, 0.2, 0.2, 0.2;
  c.kkt_tolerance = 1e-2;
  return c;
}

template <int NX, int NU>
struct MpcSolutionT {
  std::vector<Eigen::Matrix<double, NU, 1>> u_seq;
  std::vector<Eigen::Matrix<double, NX, 1>> x_pred;
  double cost{std::numeric_limits<double>::infinity()};
  double kkt_residual{std::numeric_limits<double>::infinity()};
  int iterations{0};
  bool degraded{false};
  std::vector<double> cost_history;  // cost after the initial rollout and each accepted iterate
};

using MpcSolution = MpcSolutionT<kStateDim, kControlDim>;

/// Generic discrete-time model interface used by the solver:
///   static constexpr int nx, nu;
///   State step(const State&, const Control&) const;
///   State error(const State& x, const State& ref) const;  // d/dx = I
template <class Model>
class GaussNewtonSqp {
 public:
  static constexpr int NX = Model::nx;
  static constexpr int NU = Model::nu;
  using State = Eigen::Matrix<double, NX, 1>;
  using Control = Eigen::Matrix<double, NU, 1>;
  using MatA = Eigen::Matrix<double, NX, NX>;
  using MatB = Eigen::Matrix<double, NX, NU>;
  using Config = MpcConfigT<NX, NU>;
  using Solution = MpcSolutionT<NX, NU>;

  GaussNewtonSqp(const Model& model, const Config& cfg) : model_(model), cfg_(cfg) { cfg_.validate(); }

  /// Jacobians of the discrete step: the model's own when it provides
  /// them, forward differences otherwise.
  void linearize(const State& x, const Control& u, MatA& a, MatB& b) const {
    if constexpr (requires { model_.jacobians(x, u, a, b); }) {
      model_.jacobians(x, u, a, b);
    } else {
      fd_linearize(x, u, a, b);
    }
  }

  /// Forward-difference Jacobians of the discrete step.
  void fd_linearize(const State& x, const Control& u, MatA& a, MatB& b) const {
    const State f0 = model_.step(x, u);
    for (int i = 0; i < NX; ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(i)));
      State xp = x;
      xp(i) += h;
      a.col(i) = (model_.step(xp, u) - f0) / h;
    }
    for (int i = 0; i < NU; ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(u(i)));
      Control up = u;
      up(i) += h;
      b.col(i) = (model_.step(x, up) - f0) / h;
    }
  }

  Control clamp(const Control& u) const { return u.cwiseMax(cfg_.u_min).cwiseMin(cfg_.u_max); }

  double cost(const std::vector<State>& xs, const std::vector<Control>& us, const std::vector<State>& x_ref,
              const std::vector<Control>& u_ref) const {
    double j = 0.0;
    const int n = cfg_.horizon;
    for (int k = 0; k < n; ++k) {
      const State e = model_.error(xs[k], x_ref[k]);
      const Control du = us[k] - u_ref[k];
      j += e.dot(cfg_.q.cwiseProduct(e)) + du.dot(cfg_.r.cwiseProduct(du));
    }
    const State e = model_.error(xs[n], x_ref[n]);
    return j + e.dot(cfg_.q_terminal.cwiseProduct(e));
  }

  std::vector<State> rollout(const State& x0, const std::vector<Control>& us) const {
    std::vector<State> xs;
    xs.reserve(us.size() + 1);
    xs.push_back(x0);
    for (const auto& u : us) xs.push_back(model_.step(xs.back(), u));
    return xs;
  }

  Solution solve(const State& x_init, const std::vector<State>& x_ref, const std::vector<Control>& u_ref,
                 const std::vector<Control>* warm_start = nullptr) const {
    const int n = cfg_.horizon;
    if (static_cast<int>(x_ref.size()) != n + 1 || static_cast<int>(u_ref.size()) < n) {
      throw std::invalid_argument("mpc_solve: reference length must be horizon + 1");
    }
    Solution sol;
    sol.u_seq.resize(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      const bool have_warm = warm_start && static_cast<int>(warm_start->size()) == n;
      sol.u_seq[k] = clamp(have_warm ? (*warm_start)[k] : u_ref[k]);
    }
    sol.x_pred = rollout(x_init, sol.u_seq);
    sol.cost = cost(sol.x_pred, sol.u_seq, x_ref, u_ref);
    if (!std::isfinite(sol.cost)) throw std::runtime_error("mpc_solve: non-finite initial cost");
    sol.cost_history.push_back(sol.cost);

    std::vector<MatA> a(static_cast<std::size_t>(n));
    std::vector<MatB> b(static_cast<std::size_t>(n));
    std::vector<Control> kff(static_cast<std::size_t>(n));
    std::vector<Eigen::Matrix<double, NU, NX>> kfb(static_cast<std::size_t>(n));
    bool converged = false;

    for (int it = 0; it < cfg_.max_iterations; ++it) {
      for (int k = 0; k < n; ++k) linearize(sol.x_pred[k], sol.u_seq[k], a[k], b[k]);
      sol.iterations = it + 1;

      // Reduced gradient by adjoint sweep, projected onto the box.
      State lam = 2.0 * cfg_.q_terminal.cwiseProduct(model_.error(sol.x_pred[n], x_ref[n]));
      double kkt = 0.0;
      for (int k = n - 1; k >= 0; --k) {
        Control g = 2.0 * cfg_.r.cwiseProduct(sol.u_seq[k] - u_ref[k]) + b[k].transpose() * lam;
        for (int i = 0; i < NU; ++i) {
          if (sol.u_seq[k](i) >= cfg_.u_max(i) && g(i) < 0.0) g(i) = 0.0;
          if (sol.u_seq[k](i) <= cfg_.u_min(i) && g(i) > 0.0) g(i) = 0.0;
        }
        kkt = std::max(kkt, g.cwiseAbs().maxCoeff());
        lam = 2.0 * cfg_.q.cwiseProduct(model_.error(sol.x_pred[k], x_ref[k])) + a[k].transpose() * lam;
      }
      sol.kkt_residual = kkt;
      if (kkt <= cfg_.kkt_tolerance) {
        converged = true;
        break;
      }

      backward_pass(sol, a, b, x_ref, u_ref, kff, kfb);

      bool improved = false;
      double alpha = 1.0;
      for (int ls = 0; ls < cfg_.max_line_search; ++ls, alpha *= 0.5) {
        std::vector<Control> us(static_cast<std::size_t>(n));
        std::vector<State> xs;
        xs.reserve(static_cast<std::size_t>(n + 1));
        xs.push_back(x_init);
        for (int k = 0; k < n; ++k) {
          const State dx = xs[k] - sol.x_pred[k];
          us[k] = clamp(sol.u_seq[k] + alpha * kff[k] + kfb[k] * dx);
          xs.push_back(model_.step(xs[k], us[k]));
        }
        const double j = cost(xs, us, x_ref, u_ref);
        if (std::isfinite(j) && j < sol.cost) {
          sol.u_seq = std::move(us);
          sol.x_pred = std::move(xs);
          sol.cost = j;
          sol.cost_history.push_back(j);
          improved = true;
          break;
        }
      }
      if (!improved) break;
    }
    if (!std::isfinite(sol.cost)) throw std::runtime_error("mpc_solve: non-finite cost");
    sol.degraded = !converged;
    return sol;
  }

  const Config& config() const { return cfg_; }
  const Model& model() const { return model_; }

 private:
  void backward_pass(const Solution& sol, const std::vector<MatA>& a, const std::vector<MatB>& b,
                     const std::vector<State>& x_ref, const std::vector<Control>& u_ref, std::vector<Control>& kff,
                     std::vector<Eigen::Matrix<double, NU, NX>>& kfb) const {
    const int n = cfg_.horizon;
    State vx = 2.0 * cfg_.q_terminal.cwiseProduct(model_.error(sol.x_pred[n], x_ref[n]));
    MatA vxx = (2.0 * cfg_.q_terminal).asDiagonal();
    for (int k = n - 1; k >= 0; --k) {
      const State lx = 2.0 * cfg_.q.cwiseProduct(model_.error(sol.x_pred[k], x_ref[k]));
      const Control lu = 2.0 * cfg_.r.cwiseProduct(sol.u_seq[k] - u_ref[k]);
      const State qx = lx + a[k].transpose() * vx;
      const Control qu = lu + b[k].transpose() * vx;
      const Eigen::Matrix<double, NX, NU> vb = vxx * b[k];
      MatA qxx = a[k].transpose() * vxx * a[k];
      qxx.diagonal() += 2.0 * cfg_.q;
      Eigen::Matrix<double, NU, NU> quu = b[k].transpose() * vb;
      quu.diagonal() += 2.0 * cfg_.r;
      const Eigen::Matrix<double, NU, NX> qux = vb.transpose() * a[k];

      Eigen::LLT<Eigen::Matrix<double, NU, NU>> llt(quu);
      double mu = 1e-9;
      while (llt.info() != Eigen::Success) {
        Eigen::Matrix<double, NU, NU> reg = quu;
        reg.diagonal().array() += mu;
        llt.compute(reg);
        mu *= 10.0;
        if (mu > 1e6) throw std::runtime_error("mpc_solve: control Hessian not positive definite");
      }
      kff[k] = -llt.solve(qu);
      kfb[k] = -llt.solve(qux);

      vx = qx + kfb[k].transpose() * quu * kff[k] + kfb[k].transpose() * qu + qux.transpose() * kff[k];
      vxx = qxx + kfb[k].transpose() * quu * kfb[k] + kfb[k].transpose() * qux + qux.transpose() * kfb[k];
      vxx = 0.5 * (vxx + vxx.transpose()).eval();
    }
  }

  Model model_;
  Config cfg_;
};

/// Nominal dynamics plus the learned residual under the current decoder. A
/// zero decoder (or missing encoder) is exactly the nominal model.
struct AugmentedModel {
  QuadParams params;
  const EncoderParams* encoder{nullptr};
  DecoderMatrix decoder;
  Vec3 target_scale{Vec3::Ones()};

  bool has_residual() const { return encoder != nullptr && decoder.w.size() > 0 && !decoder.is_zero(); }

  Vec3 residual(const StateVec& x, const ControlVec& u) const {
    if (!has_residual()) return Vec3::Zero();
    return residual_predict(*encoder, decoder, x, u, target_scale);
  }

  /// Residual and its 3 x 17 Jacobian with respect to [x; u], the latter in
  /// reverse mode through the encoder.
  void residual_with_jacobian(const StateVec& x, const ControlVec& u, Vec3& r,
                              Eigen::Matrix<double, 3, kInputDim>& jac) const {
    if (!has_residual()) {
      r.setZero();
      jac.setZero();
      return;
    }
    Eigen::VectorXd phi;
    const Eigen::MatrixXd cot = decoder.w.transpose() * target_scale.asDiagonal();  // p x 3
    jac = encoder_input_vjp(*encoder, make_input(x, u), cot, &phi);
    r = (decoder.w * phi).cwiseProduct(target_scale);
  }

  /// d residual / d [x; u], 3 x 17, through the encoder input Jacobian.
  Eigen::Matrix<double, 3, kInputDim> residual_jacobian(const StateVec& x, const ControlVec& u) const {
    if (!has_residual()) return Eigen::Matrix<double, 3, kInputDim>::Zero();
    const Eigen::MatrixXd jphi = encoder_input_jacobian(*encoder, make_input(x, u));
    return target_scale.asDiagonal() * (decoder.w * jphi);
  }
};

/// RK4 step of the augmented model. The residual is treated as a function
/// of the (intermediate) state with the control held constant.
inline StateVec predict_step(const AugmentedModel& model, const StateVec& x, const ControlVec& u, double dt) {
  if (!model.has_residual()) return rk4_step(x, u, dt, model.params);
  return rk4_step(x, u, dt, model.params, [&](const StateVec& s) { return model.residual(s, u); });
}

using StateJacobian = Eigen::Matrix<double, kStateDim, kStateDim>;
using ControlJacobian = Eigen::Matrix<double, kStateDim, kControlDim>;

/// Value and Jacobians of the augmented continuous vector field.
inline void augmented_deriv_jacobians(const AugmentedModel& model, const StateVec& s, const ControlVec& u,
                                      StateVec& f, StateJacobian& fs, ControlJacobian& fu) {
  Vec3 r;
  Eigen::Matrix<double, 3, kInputDim> jr;
  model.residual_with_jacobian(s, u, r, jr);
  f = nominal_deriv(s, u, model.params);
  f.segment<3>(kVelIdx) += r / model.params.mass;
  nominal_deriv_jacobians(s, u, model.params, fs, fu);
  fs.middleRows<3>(kVelIdx) += jr.leftCols<kStateDim>() / model.params.mass;
  fu.middleRows<3>(kVelIdx) += jr.rightCols<kControlDim>() / model.params.mass;
}

/// Jacobians of predict_step by tangent propagation through the four RK4
/// stages and the quaternion renormalization.
inline void predict_step_jacobians(const AugmentedModel& model, const StateVec& x, const ControlVec& u, double dt,
                                   StateJacobian& a, ControlJacobian& b) {
  StateVec k;
  StateJacobian fs;
  ControlJacobian fu;
  StateVec sum = StateVec::Zero();
  StateJacobian dsum_dx = StateJacobian::Zero();
  ControlJacobian dsum_du = ControlJacobian::Zero();
  // stage point s_i = x + c_i dt k_{i-1}
  StateVec s = x;
  StateJacobian ds_dx = StateJacobian::Identity();
  ControlJacobian ds_du = ControlJacobian::Zero();
  const double c[4] = {0.0, 0.5, 0.5, 1.0};
  const double w[4] = {1.0, 2.0, 2.0, 1.0};
  for (int i = 0; i < 4; ++i) {
    augmented_deriv_jacobians(model, s, u, k, fs, fu);
    const StateJacobian dk_dx = fs * ds_dx;
    const ControlJacobian dk_du = fs * ds_du + fu;
    sum += w[i] * k;
    dsum_dx += w[i] * dk_dx;
    dsum_du += w[i] * dk_du;
    if (i < 3) {
      s = x + c[i + 1] * dt * k;
      ds_dx = StateJacobian::Identity() + c[i + 1] * dt * dk_dx;
      ds_du = c[i + 1] * dt * dk_du;
    }
  }
  const StateVec raw = x + (dt / 6.0) * sum;
  a = StateJacobian::Identity() + (dt / 6.0) * dsum_dx;
  b = (dt / 6.0) * dsum_du;
  const Eigen::Vector4d q = raw.segment<4>(kQuatIdx);
  const double qn = q.norm();
  const Eigen::Vector4d qh = q / qn;
  const Eigen::Matrix4d dnorm = (Eigen::Matrix4d::Identity() - qh * qh.transpose()) / qn;
  a.middleRows<4>(kQuatIdx) = (dnorm * a.middleRows<4>(kQuatIdx)).eval();
  b.middleRows<4>(kQuatIdx) = (dnorm * b.middleRows<4>(kQuatIdx)).eval();
}

/// Quaternion-aware state difference: the reference quaternion is flipped
/// onto the hemisphere of q before subtracting.
inline StateVec state_error(const StateVec& x, const StateVec& ref) {
  StateVec e = x - ref;
  if (x.segment<4>(kQuatIdx).dot(ref.segment<4>(kQuatIdx)) < 0.0) {
    e.segment<4>(kQuatIdx) = x.segment<4>(kQuatIdx) + ref.segment<4>(kQuatIdx);
  }
  return e;
}

struct QuadMpcModel {
  static constexpr int nx = kStateDim;
  static constexpr int nu = kControlDim;
  AugmentedModel model;
  double dt{0.02};

  StateVec step(const StateVec& x, const ControlVec& u) const { return predict_step(model, x, u, dt); }
  void jacobians(const StateVec& x, const ControlVec& u, StateJacobian& a, ControlJacobian& b) const {
    predict_step_jacobians(model, x, u, dt, a, b);
  }
  StateVec error(const StateVec& x, const StateVec& ref) const { return state_error(x, ref); }
};

/// Forward-difference Jacobians of predict_step.
inline std::pair<Eigen::Matrix<double, kStateDim, kStateDim>, Eigen::Matrix<double, kStateDim, kControlDim>>
linearize(const AugmentedModel& model, const StateVec& x, const ControlVec& u, double dt) {
  MpcConfig cfg;
  cfg.dt = dt;
  GaussNewtonSqp<QuadMpcModel> solver(QuadMpcModel{model, dt}, cfg);
  Eigen::Matrix<double, kStateDim, kStateDim> a;
  Eigen::Matrix<double, kStateDim, kControlDim> b;
  solver.fd_linearize(x, u, a, b);
  return {a, b};
}

/// Solves the tracking problem over refs[0..N] starting from x_init. A warm
/// start, when given, supplies the initial control sequence.
inline MpcSolution mpc_solve(const AugmentedModel& model, const StateVec& x_init, const std::vector<RefSample>& refs,
                             const MpcConfig& cfg, const MpcSolution* warm_start = nullptr) {
  if (static_cast<int>(refs.size()) != cfg.horizon + 1) {
    throw std::invalid_argument("mpc_solve: need horizon + 1 reference samples");
  }
  std::vector<StateVec> x_ref;
  std::vector<ControlVec> u_ref;
  for (const auto& r : refs) {
    x_ref.push_back(r.ref_state.to_vector());
    u_ref.push_back(r.ref_control.to_vector());
  }
  GaussNewtonSqp<QuadMpcModel> solver(QuadMpcModel{model, cfg.dt}, cfg);
  return solver.solve(x_init, x_ref, u_ref, warm_start ? &warm_start->u_seq : nullptr);
}

/// Shifts a previous solution by one stage, repeating the last control.
template <int NX, int NU>
std::vector<Eigen::Matrix<double, NU, 1>> shifted_controls(const MpcSolutionT<NX, NU>& prev) {
  std::vector<Eigen::Matrix<double, NU, 1>> u(prev.u_seq.begin() + (prev.u_seq.empty() ? 0 : 1), prev.u_seq.end());
  if (!prev.u_seq.empty()) u.push_back(prev.u_seq.back());
  return u;
}

}  // namespace protompc
