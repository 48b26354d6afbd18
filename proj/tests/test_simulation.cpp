#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "ardl/io.hpp"
#include "ardl/simulation.hpp"

using namespace ardl;

namespace {

ScenarioConfig quiet_scenario(double duration, double dt) {
    ScenarioConfig cfg;
    cfg.duration = duration;
    cfg.dt = dt;
    cfg.noise_std.setZero();
    return cfg;
}

}  // namespace

TEST_CASE("injected residual is zero with all sources off") {
    NominalParams p;
    ResidualRegime regime;  // payload 0, coupling 0
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        SystemState x;
        x.qm = Vector2d(g(rng), g(rng));
        x.vm = Vector2d(g(rng), g(rng));
        ControlInput u;
        u.f = 20.0 + g(rng);
        u.um = Vector2d(g(rng), g(rng));
        const auto [res, lag] =
            injected_residual(x, u, LagState::Zero(), regime, p, 0.02);
        CHECK(res.isZero(0.0));
        CHECK(lag.isZero(0.0));
    }
}

TEST_CASE("injected residual acts only on v and w channels") {
    NominalParams p;
    ResidualRegime regime;
    regime.payload_mass = 0.4;
    regime.coupling_gain = 0.8;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < 50; ++i) {
        SystemState x;
        Vector4d q(1.0 + 0.2 * g(rng), 0.2 * g(rng), 0.2 * g(rng),
                   0.2 * g(rng));
        x.q = q / q.norm();
        x.qm = Vector2d(g(rng), g(rng));
        x.vm = Vector2d(g(rng), g(rng));
        ControlInput u;
        u.f = 18.0 + g(rng);
        u.um = Vector2d(g(rng), g(rng));
        LagState lag = LagState::Zero();
        lag.segment<3>(3).setRandom();
        const auto [res, next] = injected_residual(x, u, lag, regime, p, 0.02);
        CHECK(res.segment<3>(0).isZero(0.0));   // p
        CHECK(res.segment<4>(6).isZero(0.0));   // q
        CHECK(res.segment<2>(13).isZero(0.0));  // qm
        CHECK(res.segment<2>(15).isZero(0.0));  // vm
        CHECK(!res.segment<3>(3).isZero(0.0));
    }
}

TEST_CASE("lag filter passes raw residual through when tau is tiny") {
    NominalParams p;
    ResidualRegime regime;
    regime.payload_mass = 0.3;
    regime.coupling_gain = 0.5;
    regime.lag_tau = 1e-4;
    SystemState x;
    x.qm = Vector2d(0.4, -0.3);
    x.vm = Vector2d(1.0, 0.5);
    ControlInput u;
    u.f = 21.0;
    u.um = Vector2d(0.4, -0.2);

    LagState big = LagState::Constant(3.0);
    const auto [r1, l1] =
        injected_residual(x, u, LagState::Zero(), regime, p, 0.01);
    const auto [r2, l2] = injected_residual(x, u, big, regime, p, 0.01);
    CHECK((r1 - r2).cwiseAbs().maxCoeff() < 1e-6);  // history forgotten

    const Vector17d raw = detail::raw_residual(x, u, regime, p, 0.01);
    CHECK((r1 - raw).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("lag filter time constant is recoverable by exponential fit") {
    NominalParams p;
    ResidualRegime regime;
    regime.payload_mass = 0.3;
    regime.lag_tau = 0.15;
    SystemState x;  // hover attitude, constant input
    ControlInput u;
    u.f = 21.0;

    const double dt = 0.01;
    const Vector17d raw = detail::raw_residual(x, u, regime, p, dt);
    const double target = raw(5);  // v_z channel
    REQUIRE(std::abs(target) > 0.0);

    LagState lag = LagState::Zero();
    std::vector<double> values;
    for (int k = 0; k < 60; ++k) {
        const auto [res, next] = injected_residual(x, u, lag, regime, p, dt);
        lag = next;
        values.push_back(res(5));
    }
    // log(1 - r_k/target) = -(k+1) dt / tau; least squares for the slope.
    double sxx = 0.0, sxy = 0.0;
    for (int k = 0; k < static_cast<int>(values.size()); ++k) {
        const double tk = (k + 1) * dt;
        const double y = std::log(1.0 - values[size_t(k)] / target);
        sxx += tk * tk;
        sxy += tk * y;
    }
    const double tau_fit = -sxx / sxy;
    CHECK(tau_fit == Catch::Approx(regime.lag_tau).epsilon(0.10));
}

TEST_CASE("true step equals rk4 when noise and regime are off") {
    NominalParams p;
    ResidualRegime regime;
    SystemState x;
    x.v = Vector3d(0.2, -0.1, 0.3);
    x.w = Vector3d(0.1, 0.2, -0.3);
    ControlInput u;
    u.f = 20.0;
    std::mt19937_64 rng(5);
    const auto [next, lag] = true_step(x, u, LagState::Zero(), regime, p,
                                       Vector17d::Zero(), rng, 0.01);
    const SystemState ref = rk4_step(x, u, p, 0.01);
    CHECK(next.flatten() == ref.flatten());  // bit identical
}

TEST_CASE("true step is deterministic given the seed") {
    NominalParams p;
    ScenarioConfig cfg;
    cfg.duration = 1.0;
    cfg.dt = 0.01;
    cfg.rng_seed = 99;
    ResidualRegime regime;
    regime.payload_mass = 0.2;
    regime.coupling_gain = 0.3;

    auto run = [&]() {
        std::mt19937_64 rng(cfg.rng_seed);
        SystemState x;
        LagState lag = LagState::Zero();
        ControlInput u;
        u.f = p.m * p.g0;
        u.um = gravity_torque(x.qm, p);
        Vector17d sum = Vector17d::Zero();
        for (int i = 0; i < 100; ++i) {
            auto [xn, ln] =
                true_step(x, u, lag, regime, p, cfg.noise_std, rng, cfg.dt);
            x = xn;
            lag = ln;
            sum += x.flatten();
        }
        return sum;
    };
    CHECK(run() == run());
}

TEST_CASE("noise has zero empirical mean") {
    NominalParams p;
    ResidualRegime regime;  // off, so the residual does not confound the mean
    SystemState x;
    ControlInput u;
    u.f = p.m * p.g0;
    u.um = gravity_torque(x.qm, p);
    const Vector17d noise_std = ScenarioConfig::default_noise_std();

    std::mt19937_64 rng(7);
    const Vector17d base = rk4_step(x, u, p, 0.01).flatten();
    Vector17d acc = Vector17d::Zero();
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto [xn, ln] =
            true_step(x, u, LagState::Zero(), regime, p, noise_std, rng, 0.01);
        acc += xn.flatten() - base;
    }
    const Vector17d mean = acc / double(n);
    for (int i = 0; i < kStateDim; ++i)
        CHECK(std::abs(mean(i)) < 4.0 * noise_std(i) / std::sqrt(double(n)) +
                                      1e-12);
}

TEST_CASE("residual target basics") {
    NominalParams p;
    SystemState x;
    x.v = Vector3d(0.1, 0.0, -0.2);
    ControlInput u;
    u.f = 19.0;
    const SystemState next = rk4_step(x, u, p, 0.02);
    CHECK(residual_target(next, x, u, p, 0.02).isZero(0.0));

    SystemState bumped = next;
    bumped.v(0) += 0.01;
    const Vector17d d = residual_target(bumped, x, u, p, 0.02);
    CHECK(d(3) == Catch::Approx(0.01));
    Vector17d expected = Vector17d::Zero();
    expected(3) = 0.01;
    CHECK((d - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("noise-free residual target equals the injected residual") {
    NominalParams p;
    ResidualRegime regime;
    regime.payload_mass = 0.35;
    regime.coupling_gain = 0.6;
    SystemState x;
    x.qm = Vector2d(0.4, -0.2);
    x.vm = Vector2d(0.8, -0.4);
    LagState lag = LagState::Zero();
    std::mt19937_64 rng(11);
    ControlInput u;
    u.f = 20.0;
    u.um = Vector2d(0.3, 0.1);

    for (int k = 0; k < 50; ++k) {
        const auto [inj, next_lag] =
            injected_residual(x, u, lag, regime, p, 0.01);
        auto [xn, lag2] = true_step(x, u, lag, regime, p, Vector17d::Zero(),
                                    rng, 0.01);
        const Vector17d target = residual_target(xn, x, u, p, 0.01);
        CHECK((target - inj).cwiseAbs().maxCoeff() < 1e-10);
        x = xn;
        lag = lag2;
    }
}

TEST_CASE("push_history window shapes and warm-up") {
    SystemState x;
    ControlInput u;

    HistoryBuffer single(0);
    const HistoryMatrix H0 = push_history(single, x, u);
    CHECK(H0.rows() == 1);
    CHECK(H0.cols() == kHistoryCols);

    HistoryBuffer warm(2);
    SystemState x0;
    x0.p(0) = 7.0;
    const HistoryMatrix W = push_history(warm, x0, u);
    CHECK(W.rows() == 3);
    CHECK(W.row(0) == W.row(1));
    CHECK(W.row(1) == W.row(2));

    HistoryBuffer buf(15);
    HistoryMatrix H;
    for (int i = 0; i < 30; ++i) {
        SystemState xi;
        xi.p(0) = i;
        H = push_history(buf, xi, u);
    }
    CHECK(H.rows() == 16);
    CHECK(H.cols() == 23);
    CHECK(H(15, 0) == 29.0);
    CHECK(H(0, 0) == 14.0);  // oldest of the last 16
}

TEST_CASE("consecutive windows overlap in exactly h rows") {
    HistoryBuffer buf(5);
    ControlInput u;
    HistoryMatrix prev;
    for (int i = 0; i < 12; ++i) {
        SystemState x;
        x.p(1) = 3.0 * i;
        const HistoryMatrix H = push_history(buf, x, u);
        if (i > 6) {
            CHECK(H.topRows(5) == prev.bottomRows(5));
        }
        prev = H;
    }
}

TEST_CASE("generate_dataset sample count and regime histogram") {
    NominalParams params;
    ScenarioConfig cfg = quiet_scenario(10.0, 0.01);
    cfg.noise_std = ScenarioConfig::default_noise_std();
    ResidualRegime r0, r1, r2;
    r0.payload_mass = 0.0;
    r0.active_from = 0.0;
    r0.active_until = 4.0;
    r1.payload_mass = 0.2;
    r1.active_from = 4.0;
    r1.active_until = 7.0;
    r2.payload_mass = 0.4;
    r2.active_from = 7.0;
    r2.active_until = 10.0;
    cfg.regimes = {r0, r1, r2};

    const int h = 15;
    const auto ds = generate_dataset(cfg, params, h,
                                     make_pd_policy(cfg, params));
    CHECK(ds.size() == 1000 - size_t(h));

    std::map<int, int> hist;
    for (const auto& rec : ds) hist[rec.regime_id]++;
    CHECK(hist[0] == 400 - h);  // warm-up eats the start of regime 0
    CHECK(hist[1] == 300);
    CHECK(hist[2] == 300);
}

TEST_CASE("generate_dataset is byte-identical across reruns") {
    NominalParams params;
    ScenarioConfig cfg = quiet_scenario(3.0, 0.01);
    cfg.noise_std = ScenarioConfig::default_noise_std();
    cfg.rng_seed = 1234;
    ResidualRegime reg;
    reg.payload_mass = 0.2;
    reg.coupling_gain = 0.4;
    reg.active_from = 0.0;
    reg.active_until = 3.0;
    cfg.regimes = {reg};

    auto serialize = [&]() {
        const auto ds =
            generate_dataset(cfg, params, 15, make_pd_policy(cfg, params));
        std::string out;
        for (const auto& rec : ds) out += ardl::io::sample_to_json(rec).dump();
        return out;
    };
    CHECK(serialize() == serialize());
}

TEST_CASE("generate_dataset aborts when the trajectory diverges") {
    NominalParams params;
    ScenarioConfig cfg = quiet_scenario(5.0, 0.01);
    auto runaway = [](const SystemState&, double) {
        ControlInput u;
        u.f = 500.0;  // far beyond hover; the state runs off quickly
        return u;
    };
    CHECK_THROWS_AS(generate_dataset(cfg, params, 15, runaway),
                    std::runtime_error);
}

TEST_CASE("scenario validation rejects overlapping regimes") {
    ScenarioConfig cfg = quiet_scenario(10.0, 0.01);
    ResidualRegime a, b;
    a.active_from = 0.0;
    a.active_until = 6.0;
    b.active_from = 5.0;
    b.active_until = 10.0;
    cfg.regimes = {a, b};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
