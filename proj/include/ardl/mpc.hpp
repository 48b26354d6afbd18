#pragma once

// Finite-horizon tracking MPC over the nominal dynamics plus a frozen
// additive residual, solved by direct shooting: the control sequence is the
// only decision variable, gradients come from an adjoint sweep through the
// rollout Jacobians, and soft penalties handle the input constraints.

#include <Eigen/Dense>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ardl/adapter.hpp"
#include "ardl/dynamics.hpp"
#include "ardl/encoder.hpp"
#include "ardl/history.hpp"
#include "ardl/simulation.hpp"
#include "ardl/trainer.hpp"

namespace ardl {

struct MpcConfig {
    int N = 20;
    double dt = 0.05;
    Vector17d Q = default_state_weights();
    Vector17d P_f = 4.0 * default_state_weights();
    Vector6d R = default_input_weights();
    Vector6d input_min = default_input_min();
    Vector6d input_max = default_input_max();
    double smoothness_weight = 10.0;
    double soft_constraint_weight = 1000.0;
    int max_iters = 60;
    double grad_tol = 1e-8;
    int lbfgs_memory = 8;  // 0 falls back to steepest descent

    static Vector17d default_state_weights() {
        Vector17d q;
        q << 50, 50, 80, 10, 10, 10, 1, 5, 5, 5, 1, 1, 1, 20, 20, 5, 5;
        return q;
    }
    static Vector6d default_input_weights() {
        Vector6d r;
        r << 10, 20, 20, 20, 10, 10;
        return r;
    }
    // Thrust bounds are the published 0.1..20 mass-normalized values scaled
    // by the default platform mass (hover thrust must be feasible).
    // Joint-torque bounds read as symmetric +-1.0; the published table pins
    // them to exactly 1.0, which is exposed via pin_joint_inputs().
    static Vector6d default_input_min() {
        Vector6d u;
        u << 0.1 * 2.2, -0.5, -0.5, -0.5, -1.0, -1.0;
        return u;
    }
    static Vector6d default_input_max() {
        Vector6d u;
        u << 20.0 * 2.2, 0.5, 0.5, 0.5, 1.0, 1.0;
        return u;
    }

    void pin_joint_inputs() {
        input_min(4) = input_min(5) = 1.0;
        input_max(4) = input_max(5) = 1.0;
    }

    void validate() const {
        if (N < 1) throw std::invalid_argument("MpcConfig: N must be >= 1");
        if (!(dt > 0.0)) throw std::invalid_argument("MpcConfig: dt must be > 0");
        if ((Q.array() < 0).any() || (P_f.array() < 0).any() ||
            (R.array() < 0).any())
            throw std::invalid_argument("MpcConfig: negative weights");
        if ((input_min.array() > input_max.array()).any())
            throw std::invalid_argument("MpcConfig: input_min > input_max");
    }
};

struct Reference {
    std::vector<Vector17d> x;  // stages 0..N
    std::vector<Vector6d> u;   // stages 0..N-1

    void check(int N) const {
        if (static_cast<int>(x.size()) != N + 1 ||
            static_cast<int>(u.size()) != N)
            throw std::invalid_argument("Reference: must cover every stage");
    }
};

using ControlSequence = std::vector<Vector6d>;

/// Forward rollout: x_{i+1} = renorm(f_nom(x_i, u_i) + residual). The same
/// residual vector is added at every stage.
inline std::vector<SystemState> rollout(const SystemState& x0,
                                        const ControlSequence& controls,
                                        const Vector17d& residual,
                                        const NominalParams& params,
                                        const MpcConfig& cfg) {
    std::vector<SystemState> traj;
    traj.reserve(controls.size() + 1);
    traj.push_back(x0);
    const bool zero_residual = residual.isZero(0.0);
    for (size_t i = 0; i < controls.size(); ++i) {
        SystemState next =
            rk4_step(traj.back(), ControlInput::unflatten(controls[i]), params,
                     cfg.dt);
        if (!zero_residual) {
            const Vector17d xn = next.flatten() + residual;
            if (!xn.allFinite() || xn.segment<4>(6).norm() == 0.0)
                throw std::runtime_error(
                    "rollout: non-finite state at stage " + std::to_string(i));
            next = SystemState::unflatten(xn);
            next.q = quat_normalized(next.q);
        }
        if (!next.flatten().allFinite())
            throw std::runtime_error("rollout: non-finite state at stage " +
                                     std::to_string(i));
        traj.push_back(next);
    }
    return traj;
}

/// Tracking cost: weighted stage/terminal quadratics plus control-smoothness
/// and soft input-bound penalties.
inline double total_cost(const std::vector<SystemState>& traj,
                         const ControlSequence& controls, const Reference& ref,
                         const MpcConfig& cfg) {
    const int N = static_cast<int>(controls.size());
    double cost = 0.0;
    for (int i = 0; i < N; ++i) {
        const Vector17d ex = traj[size_t(i)].flatten() - ref.x[size_t(i)];
        const Vector6d eu = controls[size_t(i)] - ref.u[size_t(i)];
        cost += ex.cwiseProduct(cfg.Q).dot(ex) + eu.cwiseProduct(cfg.R).dot(eu);
    }
    const Vector17d exN = traj[size_t(N)].flatten() - ref.x[size_t(N)];
    cost += exN.cwiseProduct(cfg.P_f).dot(exN);

    for (int i = 0; i + 1 < N; ++i)
        cost += cfg.smoothness_weight *
                (controls[size_t(i + 1)] - controls[size_t(i)]).squaredNorm();

    for (int i = 0; i < N; ++i) {
        const Vector6d over =
            (controls[size_t(i)] - cfg.input_max).cwiseMax(0.0);
        const Vector6d under =
            (cfg.input_min - controls[size_t(i)]).cwiseMax(0.0);
        cost += cfg.soft_constraint_weight *
                (over.squaredNorm() + under.squaredNorm());
    }
    return cost;
}

namespace mpc_detail {

// Adjoint sweep: gradient of total_cost with respect to every control.
inline std::vector<Vector6d> cost_gradient(const ControlSequence& controls,
                                           const Vector17d& residual,
                                           const NominalParams& params,
                                           const Reference& ref,
                                           const MpcConfig& cfg,
                                           const std::vector<SystemState>& traj) {
    const int N = static_cast<int>(controls.size());
    std::vector<Matrix17d> A;
    std::vector<Matrix17x6d> B;
    A.resize(size_t(N));
    B.resize(size_t(N));
    for (int i = 0; i < N; ++i) {
        const ControlInput u = ControlInput::unflatten(controls[size_t(i)]);
        const StepJacobians sj =
            rk4_step_jacobians(traj[size_t(i)], u, params, cfg.dt);
        // Outer renormalization after adding the residual.
        const Vector17d pre =
            rk4_step(traj[size_t(i)], u, params, cfg.dt).flatten() + residual;
        const Matrix17d R = renorm_jacobian(pre);
        A[size_t(i)] = R * sj.A;
        B[size_t(i)] = R * sj.B;
    }

    std::vector<Vector6d> grad(size_t(N), Vector6d::Zero());
    Vector17d lambda =
        2.0 * cfg.P_f.cwiseProduct(traj[size_t(N)].flatten() - ref.x[size_t(N)]);
    for (int i = N - 1; i >= 0; --i) {
        grad[size_t(i)] =
            2.0 * cfg.R.cwiseProduct(controls[size_t(i)] - ref.u[size_t(i)]) +
            B[size_t(i)].transpose() * lambda;
        lambda = 2.0 * cfg.Q.cwiseProduct(traj[size_t(i)].flatten() -
                                          ref.x[size_t(i)]) +
                 A[size_t(i)].transpose() * lambda;
    }

    for (int i = 0; i < N; ++i) {
        if (i + 1 < N)
            grad[size_t(i)] -= 2.0 * cfg.smoothness_weight *
                               (controls[size_t(i + 1)] - controls[size_t(i)]);
        if (i > 0)
            grad[size_t(i)] += 2.0 * cfg.smoothness_weight *
                               (controls[size_t(i)] - controls[size_t(i - 1)]);
        const Vector6d over =
            (controls[size_t(i)] - cfg.input_max).cwiseMax(0.0);
        const Vector6d under =
            (cfg.input_min - controls[size_t(i)]).cwiseMax(0.0);
        grad[size_t(i)] += 2.0 * cfg.soft_constraint_weight * (over - under);
    }
    return grad;
}

inline Eigen::VectorXd flatten_controls(const ControlSequence& c) {
    Eigen::VectorXd v(6 * static_cast<Eigen::Index>(c.size()));
    for (size_t i = 0; i < c.size(); ++i) v.segment<6>(6 * Eigen::Index(i)) = c[i];
    return v;
}

inline ControlSequence unflatten_controls(const Eigen::VectorXd& v) {
    ControlSequence c(static_cast<size_t>(v.size() / 6));
    for (size_t i = 0; i < c.size(); ++i) c[i] = v.segment<6>(6 * Eigen::Index(i));
    return c;
}

}  // namespace mpc_detail

struct SolveReport {
    int iterations = 0;
    double final_cost = 0.0;
    double grad_norm = 0.0;
    bool converged = false;
};

/// Direct-shooting solve by L-BFGS (or steepest descent) with Armijo
/// backtracking; always returns the best iterate found, so the result never
/// costs more than the warm start.
inline std::pair<ControlSequence, SolveReport> solve(
    const SystemState& x0, const Reference& ref, const Vector17d& residual,
    const NominalParams& params, const MpcConfig& cfg,
    const ControlSequence& warm_start) {
    cfg.validate();
    ref.check(cfg.N);
    if (static_cast<int>(warm_start.size()) != cfg.N)
        throw std::invalid_argument("solve: warm start must have N stages");

    // Wild line-search candidates can blow up the rollout; an infinite cost
    // simply rejects the step.
    auto eval_cost = [&](const Eigen::VectorXd& uf) {
        try {
            const ControlSequence c = mpc_detail::unflatten_controls(uf);
            return total_cost(rollout(x0, c, residual, params, cfg), c, ref,
                              cfg);
        } catch (const std::exception&) {
            return std::numeric_limits<double>::infinity();
        }
    };
    auto eval_grad = [&](const Eigen::VectorXd& uf) {
        const ControlSequence c = mpc_detail::unflatten_controls(uf);
        const auto traj = rollout(x0, c, residual, params, cfg);
        return mpc_detail::flatten_controls(
            mpc_detail::cost_gradient(c, residual, params, ref, cfg, traj));
    };

    Eigen::VectorXd u = mpc_detail::flatten_controls(warm_start);
    double cost = eval_cost(u);
    Eigen::VectorXd best_u = u;
    double best_cost = cost;

    SolveReport bail;
    if (!std::isfinite(cost)) {
        bail.final_cost = cost;
        return {warm_start, bail};  // nothing sane to descend from
    }

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    Eigen::VectorXd grad = eval_grad(u);

    SolveReport report;
    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        report.iterations = iter;
        report.grad_norm = grad.norm();
        if (report.grad_norm <= cfg.grad_tol) {
            report.converged = true;
            break;
        }

        // Two-loop recursion over the stored curvature pairs.
        Eigen::VectorXd dir = -grad;
        if (!s_hist.empty()) {
            std::vector<double> alpha(s_hist.size());
            Eigen::VectorXd q = grad;
            for (int k = static_cast<int>(s_hist.size()) - 1; k >= 0; --k) {
                const double rho = 1.0 / y_hist[size_t(k)].dot(s_hist[size_t(k)]);
                alpha[size_t(k)] = rho * s_hist[size_t(k)].dot(q);
                q -= alpha[size_t(k)] * y_hist[size_t(k)];
            }
            const double gamma = s_hist.back().dot(y_hist.back()) /
                                 y_hist.back().squaredNorm();
            Eigen::VectorXd r = gamma * q;
            for (size_t k = 0; k < s_hist.size(); ++k) {
                const double rho = 1.0 / y_hist[k].dot(s_hist[k]);
                const double beta = rho * y_hist[k].dot(r);
                r += (alpha[k] - beta) * s_hist[k];
            }
            dir = -r;
            if (dir.dot(grad) > -1e-12 * dir.norm() * grad.norm())
                dir = -grad;  // not a descent direction; reset
        }

        // Armijo backtracking.
        const double slope = dir.dot(grad);
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            const Eigen::VectorXd u_new = u + t * dir;
            const double c_new = eval_cost(u_new);
            if (c_new <= cost + 1e-4 * t * slope) {
                const Eigen::VectorXd g_new = eval_grad(u_new);
                if (cfg.lbfgs_memory > 0) {
                    const Eigen::VectorXd s = u_new - u;
                    const Eigen::VectorXd y = g_new - grad;
                    if (y.dot(s) > 1e-12) {
                        s_hist.push_back(s);
                        y_hist.push_back(y);
                        while (static_cast<int>(s_hist.size()) >
                               cfg.lbfgs_memory) {
                            s_hist.pop_front();
                            y_hist.pop_front();
                        }
                    }
                }
                u = u_new;
                cost = c_new;
                grad = g_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (cost < best_cost) {
            best_cost = cost;
            best_u = u;
        }
        if (!accepted) break;  // line search exhausted; keep best iterate
    }
    report.final_cost = best_cost;
    report.grad_norm = grad.norm();
    return {mpc_detail::unflatten_controls(best_u), report};
}

// ---------------------------------------------------------------------------
// Closed-loop tick.
// ---------------------------------------------------------------------------

enum class ResidualMode { None, Frozen, Adaptive, Oracle };

struct ControlTickResult {
    ControlInput u;
    SystemState x_next;
    Vector17d delta_hat_std = Vector17d::Zero();  // standardized space
    Vector17d delta_obs_std = Vector17d::Zero();
    Vector17d residual_applied = Vector17d::Zero();  // physical units
    SolveReport solve;
    StepDiagnostics adapter_diag;
};

/// One closed-loop control tick: window -> encode -> residual prediction ->
/// shooting solve -> apply first input through the world -> residual target
/// -> decoder adaptation. `world` advances the true system over `tick_dt`
/// given (x, u).
///
/// The window is pushed with the previously applied input (the current one
/// does not exist yet) and the row is amended after the solve, so later
/// windows carry the true inputs. Residual predictions live on the tick_dt
/// scale and are rescaled by cfg.dt / tick_dt inside the horizon.
template <typename WorldFn>
ControlTickResult control_step(
    const SystemState& x, const ControlInput& prev_u, HistoryBuffer& buffer,
    AdapterState* adapter, const DecoderMatrix& theta0,
    EncoderParams& enc_params, const EncoderConfig& enc_cfg,
    const Standardizer& scaler, const Reference& ref,
    const NominalParams& params, const MpcConfig& cfg, double tick_dt,
    ControlSequence& warm_start, ResidualMode mode,
    const Vector17d& oracle_residual, WorldFn&& world) {
    ControlTickResult out;

    const HistoryMatrix H = push_history(buffer, x, prev_u);
    LatentFeature z;
    const bool needs_encoder =
        (mode == ResidualMode::Frozen || mode == ResidualMode::Adaptive);
    if (needs_encoder) {
        const MatrixXd H_std = scaler.standardize_history(H);
        z = encode(H_std, enc_params, enc_cfg);
    }

    switch (mode) {
        case ResidualMode::None:
            out.residual_applied.setZero();
            break;
        case ResidualMode::Frozen:
            out.delta_hat_std = predict_residual(z, theta0);
            out.residual_applied =
                scaler.destandardize_delta(out.delta_hat_std);
            break;
        case ResidualMode::Adaptive:
            out.delta_hat_std = predict_residual(z, adapter->posterior.theta());
            out.residual_applied =
                scaler.destandardize_delta(out.delta_hat_std);
            break;
        case ResidualMode::Oracle:
            out.residual_applied = oracle_residual;
            break;
    }

    const Vector17d horizon_residual =
        out.residual_applied * (cfg.dt / tick_dt);
    auto [controls, rep] =
        solve(x, ref, horizon_residual, params, cfg, warm_start);
    out.solve = rep;
    out.u = ControlInput::unflatten(controls[0]);
    buffer.amend_last_input(out.u);

    // Shift for the next tick's warm start.
    warm_start = controls;
    for (size_t i = 0; i + 1 < warm_start.size(); ++i)
        warm_start[i] = warm_start[i + 1];

    out.x_next = world(x, out.u);

    const Vector17d delta =
        residual_target(out.x_next, x, out.u, params, tick_dt);
    out.delta_obs_std = scaler.standardize_delta(delta);
    if (mode == ResidualMode::Adaptive && adapter != nullptr)
        out.adapter_diag = adapt_step(*adapter, z, out.delta_obs_std).second;

    return out;
}

}  // namespace ardl
