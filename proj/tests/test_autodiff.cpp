#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ardl/autodiff.hpp"

using namespace ardl;
using Eigen::MatrixXd;

namespace {

MatrixXd randn(int r, int c, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = g(rng);
    return m;
}

// FD check of d(scalar graph)/d(inputs) for an arbitrary graph builder.
// build(t, leaves) must return a 1x1 node.
template <typename Builder>
void check_gradients(std::vector<MatrixXd> inputs, Builder&& build,
                     double tol = 1e-6) {
    ad::Tape t;
    std::vector<ad::Var> leaves;
    for (const auto& m : inputs) leaves.push_back(t.leaf(m));
    const ad::Var out = build(t, leaves);
    t.backward(out);

    std::vector<MatrixXd> analytic;
    for (auto v : leaves) analytic.push_back(t.grad(v));

    const double h = 1e-6;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
            auto eval = [&](double delta) {
                std::vector<MatrixXd> shifted = inputs;
                *(shifted[k].data() + i) += delta;
                ad::Tape t2;
                std::vector<ad::Var> ls;
                for (const auto& m : shifted) ls.push_back(t2.leaf(m));
                return t2.value(build(t2, ls))(0, 0);
            };
            const double fd = (eval(h) - eval(-h)) / (2.0 * h);
            const double an = *(analytic[k].data() + i);
            INFO("input " << k << " coord " << i << " fd=" << fd
                          << " an=" << an);
            CHECK(std::abs(fd - an) <=
                  tol * std::max({1.0, std::abs(fd), std::abs(an)}));
        }
    }
}

}  // namespace

TEST_CASE("matmul chain gradients") {
    std::mt19937_64 rng(1);
    check_gradients({randn(3, 4, rng), randn(4, 2, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return t.squared_norm(t.matmul(v[0], v[1]));
                    });
}

TEST_CASE("add sub scale cmul gradients") {
    std::mt19937_64 rng(2);
    check_gradients({randn(3, 3, rng), randn(3, 3, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        const ad::Var a = t.scale(t.add(v[0], v[1]), 1.7);
                        const ad::Var b = t.cmul(t.sub(v[0], v[1]), a);
                        return t.sum_all(b);
                    });
}

TEST_CASE("rowvec broadcast and scalar broadcast gradients") {
    std::mt19937_64 rng(3);
    check_gradients({randn(4, 3, rng), randn(1, 3, rng), randn(1, 1, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        const ad::Var a = t.add_rowvec(v[0], v[1]);
                        const ad::Var b = t.add_scalar(a, v[2]);
                        return t.squared_norm(b);
                    });
}

TEST_CASE("transpose rows vstack permute gradients") {
    std::mt19937_64 rng(4);
    check_gradients(
        {randn(6, 3, rng)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) {
            const ad::Var top = t.rows(v[0], 0, 3);
            const ad::Var bottom = t.rows(v[0], 3, 3);
            const ad::Var swapped = t.vstack({bottom, top});
            const ad::Var perm =
                t.permute_rows(swapped, {2, 0, 1, 5, 3, 4});
            return t.squared_norm(t.transpose(perm));
        });
}

TEST_CASE("softmax gradients") {
    std::mt19937_64 rng(5);
    check_gradients({randn(3, 4, rng), randn(3, 4, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        const ad::Var s = t.softmax_rows(v[0]);
                        return t.sum_all(t.cmul(s, v[1]));
                    });
    check_gradients({randn(4, 2, rng), randn(4, 2, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        const ad::Var s = t.softmax_all(v[0]);
                        return t.sum_all(t.cmul(s, v[1]));
                    });
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(6);
    ad::Tape t;
    const ad::Var s = t.softmax_rows(t.leaf(randn(5, 7, rng)));
    const Eigen::VectorXd sums = t.value(s).rowwise().sum();
    for (Eigen::Index r = 0; r < sums.size(); ++r)
        CHECK(sums(r) == Catch::Approx(1.0).margin(1e-12));
    const ad::Var j = t.softmax_all(t.leaf(randn(5, 7, rng)));
    CHECK(t.value(j).sum() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("layer norm gradients") {
    std::mt19937_64 rng(7);
    check_gradients(
        {randn(3, 5, rng), randn(1, 5, rng), randn(1, 5, rng),
         randn(3, 5, rng)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) {
            const ad::Var n = t.layer_norm_rows(v[0], v[1], v[2]);
            return t.sum_all(t.cmul(n, v[3]));
        },
        5e-6);
}

TEST_CASE("elu gradients and values") {
    std::mt19937_64 rng(8);
    check_gradients({randn(4, 4, rng)},
                    [](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return t.squared_norm(t.elu(v[0]));
                    });
    ad::Tape t;
    MatrixXd x(1, 3);
    x << -1.0, 0.0, 2.0;
    const MatrixXd y = t.value(t.elu(t.leaf(x)));
    CHECK(y(0, 0) == Catch::Approx(std::expm1(-1.0)));
    CHECK(y(0, 1) == 0.0);
    CHECK(y(0, 2) == 2.0);
}

TEST_CASE("backward requires a scalar node") {
    ad::Tape t;
    const ad::Var m = t.leaf(MatrixXd::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(m), std::invalid_argument);
}

TEST_CASE("gradient accumulates over reused nodes") {
    // f(x) = sum(x * x) computed via two separate uses of the same node.
    ad::Tape t;
    MatrixXd x(1, 2);
    x << 3.0, -2.0;
    const ad::Var v = t.leaf(x);
    const ad::Var out = t.sum_all(t.cmul(v, v));
    t.backward(out);
    CHECK(t.grad(v)(0, 0) == Catch::Approx(6.0));
    CHECK(t.grad(v)(0, 1) == Catch::Approx(-4.0));
}
