#include <doctest.h>

#include <random>

#include "dehash/sparse.hpp"
#include "oracles.hpp"

using namespace dehash;

TEST_SUITE("sparse") {

TEST_CASE("orthonormal two-column example") {
    const Matrix d = Matrix::Identity(2, 2);
    const Vector v = d.col(0);
    const auto res = solve_nn_lasso(d, v, 0.1);
    REQUIRE(res.converged);
    CHECK(res.coefficients(0) == doctest::Approx(0.95).epsilon(1e-12));
    CHECK(res.coefficients(1) == 0.0);

    // dense grid over [0,2]^2 with step 1e-3
    double best = 1e300;
    double bx = 0, by = 0;
    for (int i = 0; i <= 2000; ++i)
        for (int j = 0; j <= 2000; ++j) {
            Vector h(2);
            h << i * 1e-3, j * 1e-3;
            const double f = oracle::lasso_objective(d, v, h, 0.1);
            if (f < best) {
                best = f;
                bx = h(0);
                by = h(1);
            }
        }
    CHECK(bx == doctest::Approx(0.95).epsilon(1e-9));
    CHECK(by == 0.0);
    const Vector pg = oracle::projected_gradient_lasso(d, v, 0.1);
    CHECK((pg - res.coefficients).norm() < 1e-8);
}

TEST_CASE("random instances against the projected-gradient oracle") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(1, 10), cols(1, 20);
    std::uniform_real_distribution<double> lam(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int dd = dim(rng), t = cols(rng);
        const Matrix d = oracle::gaussian_matrix(dd, t, rng);
        const Vector v = oracle::gaussian_matrix(dd, 1, rng);
        const double lambda = lam(rng);
        const auto res = solve_nn_lasso(d, v, lambda);
        const Vector ref = oracle::projected_gradient_lasso(d, v, lambda);
        CHECK(res.converged);
        CHECK(res.coefficients.minCoeff() >= 0.0);
        CHECK(res.objective <= oracle::lasso_objective(d, v, ref, lambda) + 1e-6);
        CHECK(res.kkt_violation <= 1e-5);
        CHECK(lasso_kkt_violation(d, v, res.coefficients, lambda) == doctest::Approx(res.kkt_violation));
    }
}

TEST_CASE("kkt conditions checked from first principles") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix d = oracle::gaussian_matrix(8, 15, rng);
        const Vector v = oracle::gaussian_matrix(8, 1, rng);
        const auto res = solve_nn_lasso(d, v, 0.3);
        const Vector g = -2.0 * d.transpose() * (v - d * res.coefficients) + Vector::Constant(15, 0.3);
        for (long t = 0; t < 15; ++t) {
            if (res.coefficients(t) > 0)
                CHECK(std::abs(g(t)) <= 1e-5);
            else
                CHECK(g(t) >= -1e-5);
        }
    }
}

TEST_CASE("exact recovery without penalty") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix d = oracle::gaussian_matrix(10, 6, rng);  // full column rank almost surely
        Vector h(6);
        for (long t = 0; t < 6; ++t) h(t) = u(rng) < 0.7 ? 0.0 : u(rng);
        const auto res = solve_nn_lasso(d, d * h, 0.0, {.tol = 1e-14, .max_iter = 100000});
        CHECK((res.coefficients - h).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("large lambda kills every coefficient") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix d = oracle::gaussian_matrix(6, 9, rng);
        const Vector v = oracle::gaussian_matrix(6, 1, rng);
        const double lambda = 2.0 * (d.transpose() * v).cwiseAbs().maxCoeff();
        const auto res = solve_nn_lasso(d, v, lambda);
        CHECK(res.coefficients.isZero(0.0));
        CHECK(solve_nn_lasso(d, v, 10.0 * lambda).coefficients.isZero(0.0));
    }
}

TEST_CASE("objective never increases between sweeps") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const Matrix d = oracle::gaussian_matrix(10, 20, rng);
        const Vector v = oracle::gaussian_matrix(10, 1, rng);
        for (int steps : {0, 40}) {
            const auto res = solve_nn_lasso(d, v, 0.05, {.path_steps = steps, .record_trace = true});
            REQUIRE(!res.trace.empty());
            for (std::size_t k = 1; k < res.trace.size(); ++k) CHECK(res.trace[k] <= res.trace[k - 1] + 1e-12);
            CHECK(res.trace.back() == doctest::Approx(res.objective));
        }
    }
}

TEST_CASE("homogeneity: scaling v and lambda scales the solution") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix d = oracle::gaussian_matrix(6, 5, rng);  // unique minimizer
        const Vector v = oracle::gaussian_matrix(6, 1, rng);
        const double c = 3.5;
        const auto a = solve_nn_lasso(d, v, 0.2, {.tol = 1e-14, .max_iter = 100000});
        const auto b = solve_nn_lasso(d, c * v, c * 0.2, {.tol = 1e-14, .max_iter = 100000});
        CHECK((b.coefficients - c * a.coefficients).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("zero columns stay zero and inputs are validated") {
    Matrix d(3, 3);
    d << 1, 0, 0, 0, 0, 1, 0, 0, 0;
    Vector v(3);
    v << 1, 1, 0;
    const auto res = solve_nn_lasso(d, v, 0.0);
    CHECK(res.coefficients(1) == 0.0);
    CHECK(res.coefficients(0) == doctest::Approx(1.0));
    CHECK(res.coefficients(2) == doctest::Approx(1.0));

    Vector bad = v;
    bad(0) = std::nan("");
    CHECK_THROWS_AS(solve_nn_lasso(d, bad, 0.1), Error);
    CHECK_THROWS_AS(solve_nn_lasso(d, v, -1.0), Error);
    CHECK_THROWS_AS(solve_nn_lasso(d, Vector::Zero(2), 0.1), Error);
}

TEST_CASE("iteration cap reports non-convergence") {
    std::mt19937_64 rng(8);
    const Matrix d = oracle::gaussian_matrix(10, 20, rng);
    const Vector v = oracle::gaussian_matrix(10, 1, rng);
    const auto res = solve_nn_lasso(d, v, 1e-4, {.tol = 1e-15, .max_iter = 1, .path_steps = 0});
    CHECK_FALSE(res.converged);
    CHECK(res.iterations == 1);
    CHECK(res.coefficients.minCoeff() >= 0.0);
}

TEST_CASE("tikhonov rewrite equals the direct form") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> a(0.05, 0.95);
    std::uniform_int_distribution<int> cols(1, 50);
    for (int trial = 0; trial < 100; ++trial) {
        const int t = trial < 50 ? 20 : cols(rng);
        const Matrix d = oracle::gaussian_matrix(8, t, rng);
        const Vector v = oracle::gaussian_matrix(8, 1, rng);
        const Vector h0 = oracle::gaussian_matrix(t, 1, rng).cwiseAbs();
        const double alpha = a(rng);
        const Vector got = solve_tikhonov(d, v, h0, alpha);
        const Vector ref = oracle::tikhonov_direct(d, v, h0, alpha / v.squaredNorm(), (1 - alpha) / h0.squaredNorm());
        CHECK((got - ref).cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("tikhonov with identity dictionary averages data and prior") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const Vector v = oracle::gaussian_matrix(6, 1, rng);
        const Vector h0 = oracle::gaussian_matrix(6, 1, rng);
        const Vector got = solve_tikhonov(Matrix::Identity(6, 6), v, h0, 0.5, TikhonovNormalizers{1.0, 1.0});
        CHECK((got - 0.5 * (v + h0)).cwiseAbs().maxCoeff() <= 4 * std::numeric_limits<double>::epsilon() *
                                                               std::max(1.0, (v + h0).cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("tikhonov near alpha = 1 fits the data at least as well as the prior") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix d = oracle::gaussian_matrix(8, 20, rng);
        const Vector v = oracle::gaussian_matrix(8, 1, rng);
        const Vector h0 = oracle::gaussian_matrix(20, 1, rng).cwiseAbs();
        const Vector h = solve_tikhonov(d, v, h0, 1.0 - 1e-9);
        CHECK((v - d * h).norm() <= (v - d * h0).norm());
        CHECK((v - d * h).norm() < 1e-6 * v.norm());
        const Vector ref = oracle::tikhonov_direct(d, v, h0, (1.0 - 1e-9) / v.squaredNorm(), 1e-9 / h0.squaredNorm());
        CHECK((v - d * h).norm() <= (v - d * ref).norm() + 1e-6);
    }
}

TEST_CASE("tikhonov argument errors") {
    const Matrix d = Matrix::Identity(3, 3);
    const Vector v = Vector::Ones(3);
    CHECK_THROWS_AS(solve_tikhonov(d, v, Vector::Ones(3), 0.0), Error);
    CHECK_THROWS_AS(solve_tikhonov(d, v, Vector::Ones(3), 1.0), Error);
    CHECK_THROWS_AS(solve_tikhonov(d, Vector::Zero(3), Vector::Ones(3), 0.5), Error);
    CHECK_THROWS_AS(solve_tikhonov(d, v, Vector::Zero(3), 0.5), Error);
    CHECK_THROWS_AS(solve_tikhonov(d, v, Vector::Ones(2), 0.5), Error);
}

TEST_CASE("dictionary restriction keeps aligned columns") {
    Dictionary dict;
    dict.vlad_id = 2;
    dict.columns = Matrix::Zero(2, 4);
    dict.columns.col(0) << 1, 0;
    dict.columns.col(2) << 0, 1;
    dict.columns.col(3) << 1, 1;
    dict.column_ids = {8, 9, 10, 11};
    CHECK(dict.zero_columns() == std::vector<std::size_t>{1});
    const std::vector<LeafId> keep{9, 11, 40};
    const auto r = dict.restrict_to(keep);
    CHECK(r.column_ids == std::vector<LeafId>{9, 11});
    CHECK(r.columns.col(1) == dict.columns.col(3));
    CHECK(r.vlad_id == 2);
}

}  // TEST_SUITE
