#pragma once

// Nominal aerial-manipulator dynamics: rigid-body quadrotor plus a
// decoupled 2R arm, with RK4 discretization and analytic Jacobians.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace ardl {

using Vector2d = Eigen::Vector2d;
using Vector3d = Eigen::Vector3d;
using Vector4d = Eigen::Vector4d;
using Vector6d = Eigen::Matrix<double, 6, 1>;
using Vector17d = Eigen::Matrix<double, 17, 1>;
using Matrix17d = Eigen::Matrix<double, 17, 17>;
using Matrix17x6d = Eigen::Matrix<double, 17, 6>;

inline constexpr int kStateDim = 17;
inline constexpr int kInputDim = 6;

// Flattened state layout: p(0:3) v(3:6) q(6:10, scalar first) w(10:13)
// qm(13:15) vm(15:17).
struct SystemState {
    Vector3d p = Vector3d::Zero();
    Vector3d v = Vector3d::Zero();
    Vector4d q = Vector4d(1.0, 0.0, 0.0, 0.0);
    Vector3d w = Vector3d::Zero();
    Vector2d qm = Vector2d::Zero();
    Vector2d vm = Vector2d::Zero();

    Vector17d flatten() const {
        Vector17d x;
        x << p, v, q, w, qm, vm;
        return x;
    }

    static SystemState unflatten(const Vector17d& x) {
        SystemState s;
        s.p = x.segment<3>(0);
        s.v = x.segment<3>(3);
        s.q = x.segment<4>(6);
        s.w = x.segment<3>(10);
        s.qm = x.segment<2>(13);
        s.vm = x.segment<2>(15);
        return s;
    }
};

// Input layout: f(0) M(1:4) um(4:6).
struct ControlInput {
    double f = 0.0;
    Vector3d M = Vector3d::Zero();
    Vector2d um = Vector2d::Zero();

    Vector6d flatten() const {
        Vector6d u;
        u << f, M, um;
        return u;
    }

    static ControlInput unflatten(const Vector6d& u) {
        ControlInput c;
        c.f = u(0);
        c.M = u.segment<3>(1);
        c.um = u.segment<2>(4);
        return c;
    }
};

struct NominalParams {
    double m = 2.2;                 // platform mass [kg]
    Eigen::Matrix3d J =
        Eigen::Vector3d(0.032, 0.032, 0.058).asDiagonal();  // body inertia
    double g0 = 9.81;               // gravity [m/s^2]
    double m1 = 0.22, m2 = 0.3;     // link masses [kg]
    double l1 = 0.12, l2 = 0.16;    // link lengths [m]
    double lc1 = 0.05, lc2 = 0.1;   // link COM offsets [m]
    double J1 = 8.36e-4, J2 = 3.76e-3;  // joint inertias [kg m^2]

    // Gravity torque constants, always derived from the primitives.
    double gamma1() const { return (m1 * lc1 + m2 * l1) * g0; }
    double gamma2() const { return m2 * lc2 * g0; }

    void validate() const {
        if (!(m > 0 && m1 > 0 && m2 > 0 && l1 > 0 && l2 > 0 && lc1 > 0 &&
              lc2 > 0 && J1 > 0 && J2 > 0 && g0 > 0))
            throw std::invalid_argument("NominalParams: non-positive parameter");
        if (!J.isApprox(J.transpose(), 1e-12))
            throw std::invalid_argument("NominalParams: J not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(J);
        if (es.eigenvalues().minCoeff() <= 0.0)
            throw std::invalid_argument("NominalParams: J not positive definite");
    }
};

// Hamilton product of scalar-first quaternions.
inline Vector4d quat_mul(const Vector4d& a, const Vector4d& b) {
    const double aw = a(0), ax = a(1), ay = a(2), az = a(3);
    const double bw = b(0), bx = b(1), by = b(2), bz = b(3);
    return Vector4d(aw * bw - ax * bx - ay * by - az * bz,
                    aw * bx + ax * bw + ay * bz - az * by,
                    aw * by - ax * bz + ay * bw + az * bx,
                    aw * bz + ax * by - ay * bx + az * bw);
}

// Body z-axis rotated into the inertial frame, R(q) * [0,0,1].
inline Vector3d body_z_axis(const Vector4d& q) {
    const double w = q(0), x = q(1), y = q(2), z = q(3);
    return Vector3d(2.0 * (x * z + w * y), 2.0 * (y * z - w * x),
                    w * w - x * x - y * y + z * z);
}

inline Vector4d quat_normalized(const Vector4d& q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw std::invalid_argument("quat_normalized: degenerate quaternion");
    return q / n;
}

inline Eigen::Matrix3d skew(const Vector3d& a) {
    Eigen::Matrix3d s;
    s << 0, -a(2), a(1), a(2), 0, -a(0), -a(1), a(0), 0;
    return s;
}

/// Gravity torques on the two manipulator joints:
/// [g1*cos(q1) + g2*cos(q1+q2), g2*cos(q1+q2)].
inline Vector2d gravity_torque(const Vector2d& qm, const NominalParams& params) {
    const double g1 = params.gamma1();
    const double g2 = params.gamma2();
    const double c12 = std::cos(qm(0) + qm(1));
    return Vector2d(g1 * std::cos(qm(0)) + g2 * c12, g2 * c12);
}

namespace detail {

// Raw dynamics formula; well-defined for any finite q, no unit-norm check.
// RK4 stage points sit slightly off the sphere by design.
inline Vector17d deriv_impl(const SystemState& x, const ControlInput& u,
                            const NominalParams& params) {
    const Vector2d gm = gravity_torque(x.qm, params);
    Vector17d dx;
    dx.segment<3>(0) = x.v;
    dx.segment<3>(3) = (u.f / params.m) * body_z_axis(x.q) +
                       Vector3d(0.0, 0.0, -params.g0);
    dx.segment<4>(6) =
        0.5 * quat_mul(x.q, Vector4d(0.0, x.w(0), x.w(1), x.w(2)));
    dx.segment<3>(10) =
        params.J.ldlt().solve(u.M - x.w.cross(params.J * x.w));
    dx.segment<2>(13) = x.vm;
    dx.segment<2>(15) = Vector2d((u.um(0) - gm(0)) / params.J1,
                                 (u.um(1) - gm(1)) / params.J2);
    return dx;
}

inline Vector17d deriv_flat(const Vector17d& xf, const ControlInput& u,
                            const NominalParams& params) {
    return deriv_impl(SystemState::unflatten(xf), u, params);
}

}  // namespace detail

/// Continuous-time state derivative of the nominal model.
/// Requires a unit quaternion (1e-6) and finite inputs.
inline Vector17d continuous_derivative(const SystemState& x,
                                       const ControlInput& u,
                                       const NominalParams& params) {
    if (!x.flatten().allFinite() || !u.flatten().allFinite())
        throw std::invalid_argument("continuous_derivative: non-finite input");
    if (std::abs(x.q.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("continuous_derivative: quaternion not unit");
    return detail::deriv_impl(x, u, params);
}

/// Classical RK4 step with the input held constant; the quaternion is
/// renormalized after the step. This is f_nom.
inline SystemState rk4_step(const SystemState& x, const ControlInput& u,
                            const NominalParams& params, double dt) {
    if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be > 0");
    const Vector17d x0 = x.flatten();
    if (!x0.allFinite())
        throw std::invalid_argument("rk4_step: non-finite state");

    const Vector17d k1 = detail::deriv_flat(x0, u, params);
    const Vector17d k2 = detail::deriv_flat(x0 + 0.5 * dt * k1, u, params);
    const Vector17d k3 = detail::deriv_flat(x0 + 0.5 * dt * k2, u, params);
    const Vector17d k4 = detail::deriv_flat(x0 + dt * k3, u, params);

    Vector17d xn = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    SystemState out = SystemState::unflatten(xn);
    out.q = quat_normalized(out.q);
    return out;
}

// ---------------------------------------------------------------------------
// Analytic Jacobians (used by the shooting MPC adjoint pass).
// ---------------------------------------------------------------------------

struct ContinuousJacobians {
    Matrix17d A;     // d(dx)/dx
    Matrix17x6d B;   // d(dx)/du
};

inline ContinuousJacobians continuous_jacobians(const SystemState& x,
                                                const ControlInput& u,
                                                const NominalParams& params) {
    ContinuousJacobians jac;
    Matrix17d& A = jac.A;
    Matrix17x6d& B = jac.B;
    A.setZero();
    B.setZero();

    // dp/dt = v
    A.block<3, 3>(0, 3).setIdentity();

    // dv/dt = (f/m) R(q) e3 + g
    const double w = x.q(0), qx = x.q(1), qy = x.q(2), qz = x.q(3);
    Eigen::Matrix<double, 3, 4> dzb;  // d(R(q)e3)/dq
    dzb << 2 * qy, 2 * qz, 2 * w, 2 * qx,
          -2 * qx, -2 * w, 2 * qz, 2 * qy,
           2 * w, -2 * qx, -2 * qy, 2 * qz;
    A.block<3, 4>(3, 6) = (u.f / params.m) * dzb;
    B.block<3, 1>(3, 0) = body_z_axis(x.q) / params.m;

    // dq/dt = 0.5 q (x) [0; w]
    Eigen::Matrix4d dq_dq;
    const Vector3d& om = x.w;
    dq_dq << 0, -om(0), -om(1), -om(2),
             om(0), 0, om(2), -om(1),
             om(1), -om(2), 0, om(0),
             om(2), om(1), -om(0), 0;
    A.block<4, 4>(6, 6) = 0.5 * dq_dq;
    Eigen::Matrix<double, 4, 3> dq_dw;
    dq_dw.row(0) = -x.q.segment<3>(1).transpose();
    dq_dw.bottomRows<3>() =
        x.q(0) * Eigen::Matrix3d::Identity() + skew(x.q.segment<3>(1));
    A.block<4, 3>(6, 10) = 0.5 * dq_dw;

    // dw/dt = J^-1 (M - w x Jw)
    const Eigen::Matrix3d Jinv = params.J.inverse();
    A.block<3, 3>(10, 10) =
        -Jinv * (skew(x.w) * params.J - skew(params.J * x.w));
    B.block<3, 3>(10, 1) = Jinv;

    // dqm/dt = vm
    A.block<2, 2>(13, 15).setIdentity();

    // dvm/dt = B (um - gm(qm))
    const double g1 = params.gamma1(), g2 = params.gamma2();
    const double s1 = std::sin(x.qm(0)), s12 = std::sin(x.qm(0) + x.qm(1));
    Eigen::Matrix2d dgm;
    dgm << -g1 * s1 - g2 * s12, -g2 * s12,
           -g2 * s12, -g2 * s12;
    const Eigen::Matrix2d Binv =
        Eigen::Vector2d(1.0 / params.J1, 1.0 / params.J2).asDiagonal();
    A.block<2, 2>(15, 13) = -Binv * dgm;
    B.block<2, 2>(15, 4) = Binv;

    return jac;
}

// Jacobian of q -> q/|q| embedded as a 17x17 map (identity off the q block).
inline Matrix17d renorm_jacobian(const Vector17d& x_pre) {
    Matrix17d R = Matrix17d::Identity();
    const Vector4d q = x_pre.segment<4>(6);
    const double n = q.norm();
    R.block<4, 4>(6, 6) =
        (Eigen::Matrix4d::Identity() - (q / n) * (q / n).transpose()) / n;
    return R;
}

struct StepJacobians {
    Matrix17d A;     // d(x_next)/dx through RK4 and renormalization
    Matrix17x6d B;   // d(x_next)/du
};

/// Jacobians of rk4_step, chained through the four stages and the final
/// quaternion renormalization.
inline StepJacobians rk4_step_jacobians(const SystemState& x,
                                        const ControlInput& u,
                                        const NominalParams& params,
                                        double dt) {
    const Vector17d x0 = x.flatten();
    const Vector17d k1 = detail::deriv_flat(x0, u, params);
    const Vector17d x1 = x0 + 0.5 * dt * k1;
    const Vector17d k2 = detail::deriv_flat(x1, u, params);
    const Vector17d x2 = x0 + 0.5 * dt * k2;
    const Vector17d k3 = detail::deriv_flat(x2, u, params);
    const Vector17d x3 = x0 + dt * k3;
    const Vector17d k4 = detail::deriv_flat(x3, u, params);

    // The analytic blocks are polynomial in q, so intermediate stages may sit
    // slightly off the unit sphere.
    auto jac_at = [&](const Vector17d& xf) {
        return continuous_jacobians(SystemState::unflatten(xf), u, params);
    };

    const ContinuousJacobians j1 = jac_at(x0);
    const ContinuousJacobians j2 = jac_at(x1);
    const ContinuousJacobians j3 = jac_at(x2);
    const ContinuousJacobians j4 = jac_at(x3);

    const Matrix17d I = Matrix17d::Identity();
    const Matrix17d dk1 = j1.A;
    const Matrix17d dk2 = j2.A * (I + 0.5 * dt * dk1);
    const Matrix17d dk3 = j3.A * (I + 0.5 * dt * dk2);
    const Matrix17d dk4 = j4.A * (I + dt * dk3);

    const Matrix17x6d db1 = j1.B;
    const Matrix17x6d db2 = j2.B + 0.5 * dt * j2.A * db1;
    const Matrix17x6d db3 = j3.B + 0.5 * dt * j3.A * db2;
    const Matrix17x6d db4 = j4.B + dt * j4.A * db3;

    const Vector17d x_pre =
        x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    const Matrix17d R = renorm_jacobian(x_pre);

    StepJacobians out;
    out.A = R * (I + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4));
    out.B = R * ((dt / 6.0) * (db1 + 2.0 * db2 + 2.0 * db3 + db4));
    return out;
}

}  // namespace ardl
