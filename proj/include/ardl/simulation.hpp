#pragma once

// Ground-truth world: nominal dynamics plus an injected regime-dependent
// residual (payload and arm-coupling effects through a first-order lag),
// residual targets, history windows, and seeded dataset generation.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "ardl/dynamics.hpp"
#include "ardl/history.hpp"

namespace ardl {

struct ResidualRegime {
    double payload_mass = 0.0;    // kg, carried at the end-effector
    double coupling_gain = 0.0;   // scale of arm-reaction wrench on the body
    double lag_tau = 0.15;        // s, first-order lag of the injected residual
    double active_from = 0.0;     // s
    double active_until = 0.0;    // s

    void validate() const {
        if (payload_mass < 0.0)
            throw std::invalid_argument("ResidualRegime: payload_mass < 0");
        if (!(lag_tau > 0.0))
            throw std::invalid_argument("ResidualRegime: lag_tau must be > 0");
        if (active_until < active_from)
            throw std::invalid_argument("ResidualRegime: empty interval");
    }
};

enum class RefPlane { XZ, YZ, XY_MajorX, XY_MajorY };

struct ReferenceSpec {
    RefPlane plane = RefPlane::XY_MajorX;
    double amplitude = 0.8;       // m, major-axis half width
    double period = 8.0;          // s
    double height = 1.0;          // m, hover height offset
    double switch_time = -1.0;    // s; < 0 disables the mid-run change
    RefPlane plane_after = RefPlane::XY_MajorY;
    double joint_amplitude = M_PI / 4.0;  // rad
    double joint_period = 5.0;            // s
};

struct ScenarioConfig {
    ReferenceSpec reference;
    std::vector<ResidualRegime> regimes;
    double duration = 60.0;       // s
    double dt = 0.02;             // s
    Vector17d noise_std = default_noise_std();
    std::uint64_t rng_seed = 0;
    double divergence_bound = 100.0;  // abort when |x| exceeds this

    static Vector17d default_noise_std() {
        Vector17d s;
        s.segment<3>(0).setConstant(1e-4);   // p
        s.segment<3>(3).setConstant(1e-3);   // v
        s.segment<4>(6).setConstant(1e-4);   // q
        s.segment<3>(10).setConstant(1e-3);  // w
        s.segment<2>(13).setConstant(1e-4);  // qm
        s.segment<2>(15).setConstant(1e-3);  // vm
        return s;
    }

    void validate() const {
        if (!(duration > 0.0) || !(dt > 0.0))
            throw std::invalid_argument("ScenarioConfig: duration and dt must be > 0");
        for (const auto& r : regimes) {
            r.validate();
            if (r.active_from < 0.0 || r.active_until > duration + 1e-9)
                throw std::invalid_argument(
                    "ScenarioConfig: regime outside [0, duration]");
        }
        for (size_t i = 0; i < regimes.size(); ++i)
            for (size_t j = i + 1; j < regimes.size(); ++j) {
                const double lo = std::max(regimes[i].active_from,
                                           regimes[j].active_from);
                const double hi = std::min(regimes[i].active_until,
                                           regimes[j].active_until);
                if (lo < hi)
                    throw std::invalid_argument(
                        "ScenarioConfig: overlapping regimes");
            }
    }

    // Index of the regime covering time t, or -1 when none is active.
    int regime_index(double t) const {
        for (size_t i = 0; i < regimes.size(); ++i)
            if (t >= regimes[i].active_from && t < regimes[i].active_until)
                return static_cast<int>(i);
        return -1;
    }

    ResidualRegime regime_at(double t) const {
        const int i = regime_index(t);
        if (i >= 0) return regimes[static_cast<size_t>(i)];
        ResidualRegime off;
        off.payload_mass = 0.0;
        off.coupling_gain = 0.0;
        return off;
    }
};

struct SampleRecord {
    HistoryMatrix H;
    Vector17d delta;
    double t = 0.0;
    int regime_id = -1;
};

using LagState = Vector17d;

namespace detail {

// Instantaneous residual before the lag filter. Payload changes the
// translational response to thrust; arm reaction maps smooth cross products
// of (qm, vm, um) onto the body rates. Only v and w channels are touched.
inline Vector17d raw_residual(const SystemState& x, const ControlInput& u,
                              const ResidualRegime& regime,
                              const NominalParams& params, double dt) {
    Vector17d r = Vector17d::Zero();
    if (regime.payload_mass > 0.0) {
        const double mp = regime.payload_mass;
        const double scale = 1.0 / (params.m + mp) - 1.0 / params.m;
        r.segment<3>(3) = dt * u.f * scale * body_z_axis(x.q);
    }
    if (regime.coupling_gain != 0.0) {
        const double q1 = x.qm(0), q2 = x.qm(1);
        const double v1 = x.vm(0), v2 = x.vm(1);
        Vector3d tau;
        tau(0) = std::sin(q1 + q2) * u.um(0) + 0.3 * v1 * v2;
        tau(1) = std::cos(q1) * u.um(1) + 0.3 * v1 * v1;
        tau(2) = std::sin(q2) * (u.um(0) - u.um(1)) + 0.2 * v2 * v2;
        r.segment<3>(10) = dt * regime.coupling_gain * tau;
    }
    return r;
}

}  // namespace detail

/// One-step injected residual: the raw payload/coupling effect passed
/// through a first-order lag with time constant regime.lag_tau.
inline std::pair<Vector17d, LagState> injected_residual(
    const SystemState& x, const ControlInput& u, const LagState& lag_state,
    const ResidualRegime& regime, const NominalParams& params, double dt) {
    if (!(dt > 0.0))
        throw std::invalid_argument("injected_residual: dt must be > 0");
    const Vector17d raw = detail::raw_residual(x, u, regime, params, dt);
    const double decay = std::exp(-dt / regime.lag_tau);
    const LagState next = raw + (lag_state - raw) * decay;
    return {next, next};
}

/// Ground-truth step: nominal RK4 plus injected residual plus Gaussian noise,
/// quaternion renormalized.
inline std::pair<SystemState, LagState> true_step(
    const SystemState& x, const ControlInput& u, const LagState& lag_state,
    const ResidualRegime& regime, const NominalParams& params,
    const Vector17d& noise_std, std::mt19937_64& noise_rng, double dt) {
    const SystemState nominal = rk4_step(x, u, params, dt);
    const auto [res, next_lag] =
        injected_residual(x, u, lag_state, regime, params, dt);

    Vector17d xn = nominal.flatten() + res;
    std::normal_distribution<double> gauss(0.0, 1.0);
    bool perturbed = !res.isZero(0.0);
    for (int i = 0; i < kStateDim; ++i)
        if (noise_std(i) > 0.0) {
            xn(i) += noise_std(i) * gauss(noise_rng);
            perturbed = true;
        }
    if (!perturbed) return {nominal, next_lag};

    SystemState out = SystemState::unflatten(xn);
    out.q = quat_normalized(out.q);
    return {out, next_lag};
}

/// One-step residual target: flatten(x_next) - flatten(f_nom(x, u)).
inline Vector17d residual_target(const SystemState& x_next,
                                 const SystemState& x, const ControlInput& u,
                                 const NominalParams& params, double dt) {
    return x_next.flatten() - rk4_step(x, u, params, dt).flatten();
}

// ---------------------------------------------------------------------------
// Reference trajectories and the data-collection tracking controller.
// ---------------------------------------------------------------------------

struct FlatReference {
    Vector3d p = Vector3d::Zero();
    Vector3d v = Vector3d::Zero();
    Vector3d a = Vector3d::Zero();
    Vector2d qm = Vector2d::Zero();
    Vector2d vm = Vector2d::Zero();
};

/// Figure-eight (Lissajous 1:2) reference in the configured plane, with a
/// sinusoidal joint excitation.
inline FlatReference reference_at(const ReferenceSpec& ref, double t) {
    const RefPlane plane =
        (ref.switch_time >= 0.0 && t >= ref.switch_time) ? ref.plane_after
                                                         : ref.plane;
    const double w = 2.0 * M_PI / ref.period;
    const double A = ref.amplitude;
    const double major = A * std::sin(w * t);
    const double minor = 0.5 * A * std::sin(2.0 * w * t);
    const double dmajor = A * w * std::cos(w * t);
    const double dminor = A * w * std::cos(2.0 * w * t);
    const double ddmajor = -A * w * w * std::sin(w * t);
    const double ddminor = -2.0 * A * w * w * std::sin(2.0 * w * t);

    FlatReference out;
    switch (plane) {
        case RefPlane::XZ:
            out.p = Vector3d(major, 0.0, ref.height + minor);
            out.v = Vector3d(dmajor, 0.0, dminor);
            out.a = Vector3d(ddmajor, 0.0, ddminor);
            break;
        case RefPlane::YZ:
            out.p = Vector3d(0.0, major, ref.height + minor);
            out.v = Vector3d(0.0, dmajor, dminor);
            out.a = Vector3d(0.0, ddmajor, ddminor);
            break;
        case RefPlane::XY_MajorX:
            out.p = Vector3d(major, minor, ref.height);
            out.v = Vector3d(dmajor, dminor, 0.0);
            out.a = Vector3d(ddmajor, ddminor, 0.0);
            break;
        case RefPlane::XY_MajorY:
            out.p = Vector3d(minor, major, ref.height);
            out.v = Vector3d(dminor, dmajor, 0.0);
            out.a = Vector3d(ddminor, ddmajor, 0.0);
            break;
    }
    const double wj = 2.0 * M_PI / ref.joint_period;
    out.qm = Vector2d(ref.joint_amplitude * std::sin(wj * t),
                      ref.joint_amplitude * std::sin(0.7 * wj * t + 1.0));
    out.vm = Vector2d(ref.joint_amplitude * wj * std::cos(wj * t),
                      0.7 * ref.joint_amplitude * wj *
                          std::cos(0.7 * wj * t + 1.0));
    return out;
}

struct PdGains {
    // Attitude runs several times faster than position; without that
    // bandwidth separation the cascade oscillates.
    double kp_pos = 4.0;
    double kd_pos = 4.0;
    double kq_att = 100.0;
    double kw_att = 16.0;
    // Acceleration-level joint gains; torques are scaled by the joint
    // inertias so the closed-loop joint poles stay well inside the step
    // size's stability region.
    double kp_joint = 40.0;
    double kd_joint = 10.0;
};

/// Position/attitude PD with gravity-torque feedforward on the joints;
/// the stand-in for the data-collection PID of the real platform.
inline ControlInput pd_tracking_control(const SystemState& x,
                                        const FlatReference& ref,
                                        const NominalParams& params,
                                        const PdGains& gains) {
    const Vector3d a_des = gains.kp_pos * (ref.p - x.p) +
                           gains.kd_pos * (ref.v - x.v) + ref.a +
                           Vector3d(0.0, 0.0, params.g0);

    // Thrust along the current body axis; desired attitude aligns z_B with
    // a_des at zero yaw.
    const Vector3d zb = body_z_axis(x.q);
    ControlInput u;
    u.f = params.m * std::max(0.0, a_des.dot(zb));

    Vector3d zd = a_des;
    const double an = zd.norm();
    zd = (an > 1e-9) ? Vector3d(zd / an) : Vector3d(0, 0, 1);
    // Quaternion rotating e3 onto zd (shortest arc), yaw left free.
    Vector4d q_des;
    const Vector3d e3(0, 0, 1);
    const double c = e3.dot(zd);
    if (c < -1.0 + 1e-12) {
        q_des = Vector4d(0, 1, 0, 0);
    } else {
        const Vector3d axis = e3.cross(zd);
        q_des = Vector4d(1.0 + c, axis(0), axis(1), axis(2));
        q_des.normalize();
    }
    // Attitude error in the body frame: q_err = q_des^-1 (x) q.
    const Vector4d q_des_inv(q_des(0), -q_des(1), -q_des(2), -q_des(3));
    Vector4d q_err = quat_mul(q_des_inv, x.q);
    if (q_err(0) < 0.0) q_err = -q_err;
    u.M = params.J * (-gains.kq_att * q_err.segment<3>(1) -
                      gains.kw_att * x.w);

    const Vector2d joint_acc = gains.kp_joint * (ref.qm - x.qm) +
                               gains.kd_joint * (ref.vm - x.vm);
    u.um = gravity_torque(x.qm, params) +
           Vector2d(params.J1 * joint_acc(0), params.J2 * joint_acc(1));
    return u;
}

// ---------------------------------------------------------------------------
// Dataset generation.
// ---------------------------------------------------------------------------

struct StepLogEntry {
    double t;
    Vector17d x;
    Vector6d u;
    Vector17d delta;
    int regime_id;
};

/// Runs the true world under the supplied closed-loop policy and records
/// (H_k, delta_{k+1}) pairs. The first h steps are warm-up and excluded.
/// Deterministic given cfg.rng_seed.
template <typename Policy>
std::vector<SampleRecord> generate_dataset(const ScenarioConfig& cfg,
                                           const NominalParams& params,
                                           int history_length, Policy&& policy,
                                           std::vector<StepLogEntry>* log = nullptr) {
    cfg.validate();
    params.validate();

    const int n_steps = static_cast<int>(std::llround(cfg.duration / cfg.dt));
    std::mt19937_64 rng(cfg.rng_seed);
    SystemState x;
    x.p = reference_at(cfg.reference, 0.0).p;
    LagState lag = LagState::Zero();
    HistoryBuffer buffer(history_length);

    std::vector<SampleRecord> samples;
    samples.reserve(static_cast<size_t>(std::max(0, n_steps - history_length)));

    for (int k = 0; k < n_steps; ++k) {
        const double t = k * cfg.dt;
        const ControlInput u = policy(x, t);
        const HistoryMatrix H = push_history(buffer, x, u);
        const ResidualRegime regime = cfg.regime_at(t);

        const auto [x_next, next_lag] = true_step(
            x, u, lag, regime, params, cfg.noise_std, rng, cfg.dt);
        const Vector17d delta = residual_target(x_next, x, u, params, cfg.dt);

        if (x_next.flatten().norm() > cfg.divergence_bound)
            throw std::runtime_error(
                "generate_dataset: trajectory diverged (unstable collection "
                "controller)");

        if (k >= history_length) {
            SampleRecord rec;
            rec.H = H;
            rec.delta = delta;
            rec.t = t;
            rec.regime_id = cfg.regime_index(t);
            samples.push_back(std::move(rec));
        }
        if (log) {
            log->push_back({t, x.flatten(), u.flatten(), delta,
                            cfg.regime_index(t)});
        }
        x = x_next;
        lag = next_lag;
    }
    return samples;
}

/// Default collection policy: PD tracking of the configured reference.
inline auto make_pd_policy(const ScenarioConfig& cfg,
                           const NominalParams& params,
                           const PdGains& gains = PdGains{}) {
    return [cfg, params, gains](const SystemState& x, double t) {
        return pd_tracking_control(x, reference_at(cfg.reference, t), params,
                                   gains);
    };
}

}  // namespace ardl
