#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ardl/mpc.hpp"

using namespace ardl;

namespace {

ControlInput hover_input(const NominalParams& p, const Vector2d& qm) {
    ControlInput u;
    u.f = p.m * p.g0;
    u.um = gravity_torque(qm, p);
    return u;
}

Reference hover_reference(const NominalParams& p, const MpcConfig& cfg,
                          const Vector3d& target) {
    Reference ref;
    SystemState xr;
    xr.p = target;
    for (int i = 0; i <= cfg.N; ++i) ref.x.push_back(xr.flatten());
    for (int i = 0; i < cfg.N; ++i)
        ref.u.push_back(hover_input(p, xr.qm).flatten());
    return ref;
}

ControlSequence constant_controls(const Vector6d& u, int N) {
    return ControlSequence(static_cast<size_t>(N), u);
}

}  // namespace

TEST_CASE("rollout with zero residual equals nominal integration bit-exactly") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 8;
    SystemState x0;
    x0.v = Vector3d(0.1, -0.2, 0.05);
    x0.w = Vector3d(0.2, 0.1, -0.1);

    const ControlSequence controls =
        constant_controls(hover_input(p, x0.qm).flatten(), cfg.N);
    const auto traj = rollout(x0, controls, Vector17d::Zero(), p, cfg);
    REQUIRE(traj.size() == size_t(cfg.N) + 1);

    SystemState s = x0;
    for (int i = 0; i < cfg.N; ++i) {
        s = rk4_step(s, ControlInput::unflatten(controls[size_t(i)]), p, cfg.dt);
        CHECK(traj[size_t(i) + 1].flatten() == s.flatten());
    }
}

TEST_CASE("constant residual on v_z accumulates linearly") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 10;
    SystemState x0;
    const ControlSequence controls =
        constant_controls(hover_input(p, x0.qm).flatten(), cfg.N);

    Vector17d residual = Vector17d::Zero();
    residual(5) = 0.01;  // v_z channel
    const auto with = rollout(x0, controls, residual, p, cfg);
    const auto without = rollout(x0, controls, Vector17d::Zero(), p, cfg);
    CHECK(with[10].v(2) - without[10].v(2) ==
          Catch::Approx(10 * 0.01).epsilon(1e-9));
}

TEST_CASE("single stage rollout") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 1;
    SystemState x0;
    const ControlSequence controls =
        constant_controls(hover_input(p, x0.qm).flatten(), 1);
    const auto traj = rollout(x0, controls, Vector17d::Zero(), p, cfg);
    CHECK(traj.size() == 2);
}

TEST_CASE("total cost zero at the reference and published weight entries") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 5;
    const Reference ref = hover_reference(p, cfg, Vector3d::Zero());
    const ControlSequence controls =
        constant_controls(ref.u[0], cfg.N);

    std::vector<SystemState> traj;
    for (int i = 0; i <= cfg.N; ++i)
        traj.push_back(SystemState::unflatten(ref.x[size_t(i)]));
    CHECK(total_cost(traj, controls, ref, cfg) == 0.0);

    SECTION("p_x deviation at one stage costs 50 e^2") {
        auto bumped = traj;
        const double e = 0.13;
        bumped[2].p(0) += e;
        CHECK(total_cost(bumped, controls, ref, cfg) ==
              Catch::Approx(50.0 * e * e).epsilon(1e-12));
    }
    SECTION("terminal deviation uses P_f = 4 Q") {
        auto bumped = traj;
        const double e = 0.07;
        bumped[size_t(cfg.N)].p(0) += e;
        CHECK(total_cost(bumped, controls, ref, cfg) ==
              Catch::Approx(200.0 * e * e).epsilon(1e-12));
    }
    SECTION("thrust above the bound pays the soft constraint weight") {
        MpcConfig soft = cfg;
        soft.Q.setZero();
        soft.P_f.setZero();
        soft.R.setZero();
        soft.smoothness_weight = 0.0;
        auto violating = controls;
        violating[3](0) = soft.input_max(0) + 1.0;
        CHECK(total_cost(traj, violating, ref, soft) ==
              Catch::Approx(1000.0).epsilon(1e-12));
    }
    SECTION("smoothness penalizes consecutive input changes") {
        MpcConfig smooth = cfg;
        smooth.Q.setZero();
        smooth.P_f.setZero();
        smooth.R.setZero();
        smooth.soft_constraint_weight = 0.0;
        auto wiggly = controls;
        wiggly[2](1) += 0.2;  // one torque channel deviates at one stage
        CHECK(total_cost(traj, wiggly, ref, smooth) ==
              Catch::Approx(10.0 * 2.0 * 0.2 * 0.2).epsilon(1e-12));
    }
}

TEST_CASE("adjoint gradient matches finite differences") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 5;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);

    SystemState x0;
    x0.p = Vector3d(0.1, -0.2, 0.9);
    x0.v = Vector3d(0.2, 0.1, -0.1);
    x0.w = Vector3d(0.1, -0.1, 0.2);
    x0.qm = Vector2d(0.3, -0.2);

    Reference ref = hover_reference(p, cfg, Vector3d(0, 0, 1));
    Vector17d residual = Vector17d::Zero();
    residual(5) = -0.02;
    residual(10) = 0.01;

    ControlSequence controls(size_t(cfg.N));
    for (auto& u : controls) {
        u = hover_input(p, x0.qm).flatten();
        for (int i = 0; i < kInputDim; ++i) u(i) += 0.2 * g(rng);
    }

    const auto traj = rollout(x0, controls, residual, p, cfg);
    const auto grad =
        mpc_detail::cost_gradient(controls, residual, p, ref, cfg, traj);

    const double h = 1e-6;
    double worst = 0.0;
    for (int i = 0; i < cfg.N; ++i)
        for (int c = 0; c < kInputDim; ++c) {
            auto up = controls, dn = controls;
            up[size_t(i)](c) += h;
            dn[size_t(i)](c) -= h;
            const double fu =
                total_cost(rollout(x0, up, residual, p, cfg), up, ref, cfg);
            const double fd =
                total_cost(rollout(x0, dn, residual, p, cfg), dn, ref, cfg);
            const double fd_grad = (fu - fd) / (2.0 * h);
            const double an = grad[size_t(i)](c);
            worst = std::max(worst, std::abs(fd_grad - an) /
                                        std::max({1.0, std::abs(fd_grad),
                                                  std::abs(an)}));
        }
    CAPTURE(worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("hover instance solves immediately") {
    NominalParams p;
    MpcConfig cfg;
    SystemState x0;
    x0.p = Vector3d(0, 0, 1);
    Reference ref = hover_reference(p, cfg, x0.p);
    const ControlSequence warm = constant_controls(ref.u[0], cfg.N);

    const auto [controls, report] =
        solve(x0, ref, Vector17d::Zero(), p, cfg, warm);
    CHECK(report.iterations <= 5);
    CHECK(report.final_cost < 1e-6);
    CHECK((controls[0] - ref.u[0]).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("solver never returns worse than the warm start") {
    NominalParams p;
    MpcConfig cfg;
    cfg.N = 8;
    cfg.max_iters = 15;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);

    for (int trial = 0; trial < 3; ++trial) {
        SystemState x0;
        x0.p = Vector3d(0.4 * g(rng), 0.4 * g(rng), 1.0 + 0.2 * g(rng));
        x0.v = Vector3d(0.3 * g(rng), 0.3 * g(rng), 0.3 * g(rng));
        Reference ref = hover_reference(p, cfg, Vector3d(0, 0, 1));
        ControlSequence warm(size_t(cfg.N));
        for (auto& u : warm) {
            u = hover_input(p, Vector2d::Zero()).flatten();
            for (int i = 0; i < kInputDim; ++i) u(i) += 0.5 * g(rng);
        }
        const double warm_cost = total_cost(
            rollout(x0, warm, Vector17d::Zero(), p, cfg), warm, ref, cfg);
        const auto [best, report] =
            solve(x0, ref, Vector17d::Zero(), p, cfg, warm);
        CHECK(report.final_cost <= warm_cost + 1e-12);
    }
}

TEST_CASE("payload-like residual raises the commanded thrust") {
    NominalParams p;
    MpcConfig cfg;
    SystemState x0;
    x0.p = Vector3d(0, 0, 1);
    Reference ref = hover_reference(p, cfg, x0.p);
    const ControlSequence warm = constant_controls(ref.u[0], cfg.N);

    // A 0.3 kg payload pulls v_z down each stage.
    const double mp = 0.3;
    Vector17d residual = Vector17d::Zero();
    residual(5) = p.m * p.g0 * (1.0 / (p.m + mp) - 1.0 / p.m) * cfg.dt;

    const auto [with_payload, r1] = solve(x0, ref, residual, p, cfg, warm);
    const auto [nominal, r2] =
        solve(x0, ref, Vector17d::Zero(), p, cfg, warm);
    CHECK(with_payload[0](0) > nominal[0](0) + 0.1);
}

TEST_CASE("converged solves respect the soft input bounds") {
    NominalParams p;
    MpcConfig cfg;
    SystemState x0;
    x0.p = Vector3d(0.3, -0.3, 0.8);
    x0.v = Vector3d(0.2, 0.2, -0.2);
    Reference ref = hover_reference(p, cfg, Vector3d(0, 0, 1));
    const ControlSequence warm = constant_controls(ref.u[0], cfg.N);

    const auto [controls, report] =
        solve(x0, ref, Vector17d::Zero(), p, cfg, warm);
    for (const auto& u : controls)
        for (int i = 0; i < kInputDim; ++i) {
            CHECK(u(i) >= cfg.input_min(i) - 0.1);
            CHECK(u(i) <= cfg.input_max(i) + 0.1);
        }
}

TEST_CASE("non-convergence is reported without aborting") {
    NominalParams p;
    MpcConfig cfg;
    cfg.max_iters = 1;
    cfg.grad_tol = 1e-16;
    SystemState x0;
    x0.p = Vector3d(2.0, -2.0, 3.0);
    Reference ref = hover_reference(p, cfg, Vector3d(0, 0, 1));
    ControlSequence warm = constant_controls(ref.u[0], cfg.N);
    warm[0](0) = 15.0;

    const auto [controls, report] =
        solve(x0, ref, Vector17d::Zero(), p, cfg, warm);
    CHECK_FALSE(report.converged);
    CHECK(controls.size() == size_t(cfg.N));
}

TEST_CASE("joint input pinning collapses the bounds to one") {
    MpcConfig cfg;
    cfg.pin_joint_inputs();
    CHECK(cfg.input_min(4) == 1.0);
    CHECK(cfg.input_max(4) == 1.0);
    CHECK(cfg.input_min(5) == 1.0);
    CHECK(cfg.input_max(5) == 1.0);
    cfg.validate();  // min == max is allowed
}
