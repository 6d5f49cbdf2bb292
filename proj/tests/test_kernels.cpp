#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "stssad/common.hpp"
#include "stssad/kernels.hpp"

using namespace stssad;

namespace {

std::vector<double> rand_vec(size_t n, RandomStream& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

}  // namespace

// The parallel kernels and the serial reference must agree bitwise: parallelism
// only ever splits work across independent outputs or across the fixed blocks of
// the blocked sum.
TEST_CASE("parallel kernels are bitwise equal to the serial reference") {
    RandomStream rng(42);
    kernels::set_parallel(true);

    const int64_t n = 37, k = 53, m = 29;
    auto a = rand_vec(size_t(n * k), rng), b = rand_vec(size_t(k * m), rng);
    std::vector<double> y_par(size_t(n * m)), y_ser(size_t(n * m));
    kernels::matmul(a.data(), b.data(), y_par.data(), n, k, m);
    kernels::serial::matmul(a.data(), b.data(), y_ser.data(), n, k, m);
    CHECK(y_par == y_ser);

    // Big enough to clear the parallel grain threshold.
    auto big = rand_vec(100003, rng, 0.1, 3.0);
    std::vector<double> u_par(big.size()), u_ser(big.size());
    for (auto op : {kernels::Unary::Exp, kernels::Unary::Log, kernels::Unary::Sqrt,
                    kernels::Unary::Sigmoid, kernels::Unary::Softplus, kernels::Unary::Sin}) {
        kernels::unary_map(op, big.data(), u_par.data(), int64_t(big.size()));
        kernels::serial::unary_map(op, big.data(), u_ser.data(), int64_t(big.size()));
        CHECK(u_par == u_ser);
    }

    auto big2 = rand_vec(100003, rng, 0.5, 2.0);
    for (auto op : {kernels::Binary::Add, kernels::Binary::Sub, kernels::Binary::Mul,
                    kernels::Binary::Div}) {
        kernels::binary_map(op, big.data(), big2.data(), u_par.data(), int64_t(big.size()));
        kernels::serial::binary_map(op, big.data(), big2.data(), u_ser.data(),
                                    int64_t(big.size()));
        CHECK(u_par == u_ser);
    }

    CHECK(kernels::sum_blocked(big.data(), int64_t(big.size())) ==
          kernels::serial::sum_blocked(big.data(), int64_t(big.size())));

    const int64_t rows = 211, cols = 503;
    auto rx = rand_vec(size_t(rows * cols), rng);
    std::vector<double> r_par(static_cast<size_t>(rows)), r_ser(static_cast<size_t>(rows));
    kernels::row_sumsq(rx.data(), r_par.data(), rows, cols);
    kernels::serial::row_sumsq(rx.data(), r_ser.data(), rows, cols);
    CHECK(r_par == r_ser);
}

TEST_CASE("blocked sum does not depend on the parallel switch") {
    RandomStream rng(43);
    auto v = rand_vec(300000, rng);
    kernels::set_parallel(false);
    const double off = kernels::sum_blocked(v.data(), int64_t(v.size()));
    kernels::set_parallel(true);
    const double on = kernels::sum_blocked(v.data(), int64_t(v.size()));
    CHECK(off == on);
}

TEST_CASE("matmul result is the textbook triple loop") {
    RandomStream rng(44);
    const int64_t n = 5, k = 7, m = 3;
    auto a = rand_vec(size_t(n * k), rng), b = rand_vec(size_t(k * m), rng);
    std::vector<double> y(size_t(n * m));
    kernels::matmul(a.data(), b.data(), y.data(), n, k, m);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) s += a[size_t(i * k + kk)] * b[size_t(kk * m + j)];
            CHECK(y[size_t(i * m + j)] == doctest::Approx(s).epsilon(1e-12));
        }
}
