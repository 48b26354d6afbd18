#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ardl/adapter.hpp"
#include "ardl/properties.hpp"

using namespace ardl;

namespace {

Eigen::VectorXd randn_vec(int n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = scale * g(rng);
    return v;
}

}  // namespace

TEST_CASE("adapter initialization matches the published defaults") {
    const int ell = 16;
    DecoderMatrix Theta0 = DecoderMatrix::Random(kStateDim, ell);
    const MatrixXd Lambda = 10.0 * MatrixXd::Identity(ell, ell);
    const AdapterState state =
        adapter_init(Theta0, Lambda, Vector17d::Constant(2.5e-3));

    CHECK(state.g == 0.0);
    CHECK(state.hyper.alpha == 0.1);
    CHECK(state.hyper.eta == 8.0);
    CHECK(state.hyper.beta == 2.0);
    for (int j = 0; j < kStateDim; ++j) {
        CHECK((state.posterior.mu[size_t(j)].transpose() - Theta0.row(j))
                  .cwiseAbs()
                  .maxCoeff() == 0.0);
        const MatrixXd expect = 0.1 * MatrixXd::Identity(ell, ell);
        CHECK((state.posterior.P[size_t(j)] - expect).cwiseAbs().maxCoeff() <
              1e-15);
        CHECK(state.posterior.sigma2(j) == 2.5e-3);
    }

    MatrixXd bad = MatrixXd::Identity(ell, ell);
    bad(0, 0) = -1.0;
    CHECK_THROWS_AS(adapter_init(Theta0, bad, Vector17d::Constant(1.0)),
                    std::invalid_argument);
}

TEST_CASE("lambda formula") {
    AdapterHyper hyper;  // eta 8, beta 2
    CHECK(compute_lambda(0.0, hyper) == 1.0);
    CHECK(compute_lambda(7.5, hyper) == 1.0);
    CHECK(compute_lambda(8.0, hyper) == 1.0);
    CHECK(std::abs(compute_lambda(9.0, hyper) - 1.0 / 3.0) <= 1e-15);
    hyper.beta = 0.5;
    CHECK(compute_lambda(10.0, hyper) == Catch::Approx(0.5));
}

TEST_CASE("inflation divides the covariance and leaves the mean") {
    const int ell = 6;
    std::mt19937_64 rng(1);
    DecoderMatrix Theta0 = DecoderMatrix::Random(kStateDim, ell);
    AdapterState state = adapter_init(
        Theta0, 4.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.01));

    const auto mu_before = state.posterior.mu;
    const auto P_before = state.posterior.P;

    SECTION("lambda = 1 is a bit-exact no-op") {
        inflate(state.posterior, 1.0);
        for (int j = 0; j < kStateDim; ++j)
            CHECK(state.posterior.P[size_t(j)] == P_before[size_t(j)]);
    }
    SECTION("lambda = 0.5 doubles every entry") {
        inflate(state.posterior, 0.5);
        for (int j = 0; j < kStateDim; ++j) {
            CHECK((state.posterior.P[size_t(j)] - 2.0 * P_before[size_t(j)])
                      .cwiseAbs()
                      .maxCoeff() < 1e-15);
            CHECK(state.posterior.mu[size_t(j)] == mu_before[size_t(j)]);
        }
    }
    SECTION("divide form equals the process-noise form") {
        std::uniform_real_distribution<double> lam(0.05, 1.0);
        for (int trial = 0; trial < 50; ++trial) {
            const double lambda = lam(rng);
            const MatrixXd P = P_before[0] * (1.0 + trial * 0.1);
            const MatrixXd q_form = P + (1.0 / lambda - 1.0) * P;
            const MatrixXd divide = P / lambda;
            CHECK(((q_form - divide).cwiseAbs().array() /
                   divide.cwiseAbs().array().max(1.0))
                      .maxCoeff() < 1e-14);
        }
    }
    SECTION("trace ceiling caps sustained inflation") {
        for (int k = 0; k < 2000; ++k)
            inflate(state.posterior, 0.5, state.trace_ceiling);
        for (const auto& P : state.posterior.P)
            CHECK(P.trace() <= state.trace_ceiling * (1.0 + 1e-12));
    }
}

TEST_CASE("prediction mean and variance") {
    SECTION("zero latent gives zero mean and floor variance") {
        const int ell = 5;
        AdapterState state = adapter_init(
            DecoderMatrix::Random(kStateDim, ell),
            2.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.07));
        const auto [mean, S] =
            predict(state.posterior, LatentFeature::Zero(ell));
        CHECK(mean.isZero(0.0));
        for (int j = 0; j < kStateDim; ++j) CHECK(S(j) == 0.07);
    }
    SECTION("scalar hand case") {
        DecoderMatrix Theta0 = DecoderMatrix::Zero(kStateDim, 1);
        Theta0(0, 0) = 2.0;
        AdapterState state = adapter_init(Theta0, MatrixXd::Identity(1, 1),
                                          Vector17d::Constant(1.0));
        state.posterior.P[0](0, 0) = 0.5;
        LatentFeature z(1);
        z(0) = 3.0;
        const auto [mean, S] = predict(state.posterior, z);
        CHECK(mean(0) == Catch::Approx(6.0));
        CHECK(S(0) == Catch::Approx(5.5));
    }
    SECTION("inflation strictly increases predictive variance") {
        const int ell = 4;
        std::mt19937_64 rng(2);
        AdapterState state = adapter_init(
            DecoderMatrix::Random(kStateDim, ell),
            MatrixXd::Identity(ell, ell), Vector17d::Constant(0.01));
        const LatentFeature z = randn_vec(ell, rng);
        const auto [m0, S0] = predict(state.posterior, z);
        inflate(state.posterior, 0.5);
        const auto [m1, S1] = predict(state.posterior, z);
        for (int j = 0; j < kStateDim; ++j) CHECK(S1(j) > S0(j));
    }
}

TEST_CASE("joseph update hand case and no-op on zero latent") {
    SECTION("scalar hand case") {
        AdapterState state =
            adapter_init(DecoderMatrix::Zero(kStateDim, 1),
                         MatrixXd::Identity(1, 1), Vector17d::Constant(1.0));
        LatentFeature z(1);
        z(0) = 1.0;
        update(state.posterior, z, Vector17d::Constant(1.0));
        CHECK(state.posterior.mu[0](0) == Catch::Approx(0.5));
        CHECK(state.posterior.P[0](0, 0) == Catch::Approx(0.5));
    }
    SECTION("zero latent leaves the posterior untouched") {
        const int ell = 6;
        std::mt19937_64 rng(3);
        AdapterState state = adapter_init(
            DecoderMatrix::Random(kStateDim, ell),
            3.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.2));
        const auto mu_before = state.posterior.mu;
        const auto P_before = state.posterior.P;
        update(state.posterior, LatentFeature::Zero(ell),
               Vector17d::Constant(5.0));
        for (int j = 0; j < kStateDim; ++j) {
            CHECK(state.posterior.mu[size_t(j)] == mu_before[size_t(j)]);
            CHECK((state.posterior.P[size_t(j)] - P_before[size_t(j)])
                      .cwiseAbs()
                      .maxCoeff() < 1e-15);
        }
    }
}

TEST_CASE("recursive posterior equals batch ridge regression") {
    const auto result = props::kalman_ridge_equivalence(9);
    CAPTURE(result.detail);
    CHECK(result.pass);
}

TEST_CASE("innovation score") {
    Vector17d S = Vector17d::Constant(0.3);
    CHECK(innovation_score(Vector17d::Zero(), S) == 0.0);

    Vector17d e = S.cwiseSqrt();
    CHECK(innovation_score(e, S) == Catch::Approx(17.0).margin(1e-12));

    std::mt19937_64 rng(4);
    const Vector17d r = randn_vec(kStateDim, rng);
    CHECK(innovation_score(2.0 * r, S) ==
          Catch::Approx(4.0 * innovation_score(r, S)).epsilon(1e-12));
    CHECK_THROWS_AS(innovation_score(e, Vector17d::Zero()),
                    std::invalid_argument);
}

TEST_CASE("ewma recursion") {
    CHECK(ewma(0.7, 3.0, 1.0) == 3.0);
    double gk = 0.0;
    for (int k = 0; k < 10; ++k) gk = ewma(gk, 1.0, 0.1);
    CHECK(gk == Catch::Approx(1.0 - std::pow(0.9, 10)).margin(1e-12));
    CHECK(ewma(0.42, 0.42, 0.3) == Catch::Approx(0.42).margin(1e-15));
}

TEST_CASE("zero innovation keeps lambda at one and freezes the mean") {
    const int ell = 5;
    std::mt19937_64 rng(5);
    AdapterState state = adapter_init(
        DecoderMatrix::Random(kStateDim, ell),
        10.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.05));

    double prev_g = 1e300;
    for (int k = 0; k < 50; ++k) {
        const LatentFeature z = randn_vec(ell, rng);
        const Vector17d delta_hat = predict(state.posterior, z).first;
        const auto mu_before = state.posterior.mu;
        const auto [pred, diag] = adapt_step(state, z, delta_hat);
        CHECK(diag.psi == 0.0);
        CHECK(diag.lambda == 1.0);
        CHECK((pred - delta_hat).cwiseAbs().maxCoeff() == 0.0);
        for (int j = 0; j < kStateDim; ++j)
            CHECK(state.posterior.mu[size_t(j)] == mu_before[size_t(j)]);
        if (k > 0) CHECK(diag.g <= prev_g);
        prev_g = diag.g;
    }
}

TEST_CASE("covariance inflation reacts to a parameter jump and settles") {
    const int ell = 4;
    std::mt19937_64 rng(6);
    DecoderMatrix theta_a = DecoderMatrix::Random(kStateDim, ell);
    DecoderMatrix theta_b = theta_a;
    theta_b.row(3).array() += 3.0;  // abrupt change in one output dimension

    // With matched noise the NIS floor is chi^2(17)-distributed with mean
    // 17, so the quiet threshold must sit above it.
    AdapterHyper hyper;
    hyper.eta = 30.0;
    AdapterState state = adapter_init(
        theta_a, 10.0 * MatrixXd::Identity(ell, ell),
        Vector17d::Constant(0.01), hyper);

    std::normal_distribution<double> g(0.0, 1.0);
    bool inflated_after_jump = false;
    double max_inv_lambda_before = 0.0;
    double last_lambda = 1.0;
    for (int k = 0; k < 400; ++k) {
        const DecoderMatrix& truth = (k < 200) ? theta_a : theta_b;
        const LatentFeature z = randn_vec(ell, rng);
        Vector17d delta = truth * z;
        for (int j = 0; j < kStateDim; ++j) delta(j) += 0.1 * g(rng);
        const auto [pred, diag] = adapt_step(state, z, delta);
        if (k >= 100 && k < 200)
            max_inv_lambda_before =
                std::max(max_inv_lambda_before, 1.0 / diag.lambda);
        if (k >= 200 && k < 260 && diag.lambda < 0.9) inflated_after_jump = true;
        last_lambda = diag.lambda;
    }
    CHECK(max_inv_lambda_before <= 1.05);  // quiet before the jump
    CHECK(inflated_after_jump);            // reacts after it
    CHECK(last_lambda > 0.95);             // re-converged by the end
}

TEST_CASE("positive semidefiniteness is preserved") {
    const auto result = props::psd_preservation(11);
    CAPTURE(result.detail);
    CHECK(result.pass);
}

TEST_CASE("information is monotone along a fixed direction without inflation") {
    const int ell = 6;
    std::mt19937_64 rng(7);
    AdapterState state = adapter_init(
        DecoderMatrix::Zero(kStateDim, ell),
        5.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.1));
    const LatentFeature dir = randn_vec(ell, rng).normalized();

    double prev = dir.dot(state.posterior.P[2] * dir);
    for (int k = 0; k < 100; ++k) {
        const LatentFeature z = randn_vec(ell, rng);
        update(state.posterior, z, randn_vec(kStateDim, rng, 0.3));
        const double now = dir.dot(state.posterior.P[2] * dir);
        CHECK(now <= prev + 1e-12);
        prev = now;
    }
}

TEST_CASE("one-step prediction error obeys the triangle bound") {
    const int ell = 5;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(0.0, 1.0);
    DecoderMatrix theta_star = DecoderMatrix::Random(kStateDim, ell);
    AdapterState state = adapter_init(
        DecoderMatrix::Zero(kStateDim, ell),
        10.0 * MatrixXd::Identity(ell, ell), Vector17d::Constant(0.04));

    for (int k = 0; k < 200; ++k) {
        const LatentFeature z = randn_vec(ell, rng);
        Vector17d eps;
        for (int j = 0; j < kStateDim; ++j) eps(j) = 0.2 * g(rng);
        const Vector17d delta = theta_star * z + eps;

        // Bound uses the prior mean, which adapt_step's prediction exports.
        const DecoderMatrix mu_prior = state.posterior.theta();
        const auto [pred, diag] = adapt_step(state, z, delta);
        for (int j = 0; j < kStateDim; ++j) {
            const double lhs = std::abs(delta(j) - pred(j));
            const double rhs =
                z.norm() *
                    (theta_star.row(j) - mu_prior.row(j)).norm() +
                std::abs(eps(j));
            CHECK(lhs <= rhs + 1e-9);
        }
    }
}

TEST_CASE("per-dimension updates are independent") {
    const int ell = 4;
    std::mt19937_64 rng(9);
    DecoderMatrix ta = DecoderMatrix::Random(kStateDim, ell);
    DecoderMatrix tb = DecoderMatrix::Random(kStateDim, ell);
    tb.row(5) = ta.row(5);  // dimension 5 starts identical

    AdapterState a = adapter_init(ta, 2.0 * MatrixXd::Identity(ell, ell),
                                  Vector17d::Constant(0.02));
    AdapterState b = adapter_init(tb, 2.0 * MatrixXd::Identity(ell, ell),
                                  Vector17d::Constant(0.02));

    for (int k = 0; k < 25; ++k) {
        const LatentFeature z = randn_vec(ell, rng);
        Vector17d da = randn_vec(kStateDim, rng);
        Vector17d db = randn_vec(kStateDim, rng);
        db(5) = da(5);  // same data stream on dimension 5
        update(a.posterior, z, da);
        update(b.posterior, z, db);
    }
    CHECK(a.posterior.mu[5] == b.posterior.mu[5]);  // bit identical
    CHECK(a.posterior.P[5] == b.posterior.P[5]);
}

TEST_CASE("adapt_step diagnostics expose every intermediate") {
    const int ell = 3;
    std::mt19937_64 rng(10);
    AdapterState state = adapter_init(
        DecoderMatrix::Random(kStateDim, ell),
        MatrixXd::Identity(ell, ell), Vector17d::Constant(0.1));
    const LatentFeature z = randn_vec(ell, rng);
    const Vector17d delta = randn_vec(kStateDim, rng);

    const auto [pred, diag] = adapt_step(state, z, delta);
    CHECK(diag.delta_hat == pred);
    CHECK((diag.innovation - (delta - pred)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(diag.psi == innovation_score(diag.innovation, diag.S));
    CHECK(diag.g == state.g);
    for (int j = 0; j < kStateDim; ++j) {
        CHECK(diag.S(j) >= 0.1);
        CHECK(diag.gain_norm(j) >= 0.0);
    }
}
