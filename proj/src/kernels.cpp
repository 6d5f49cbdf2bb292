#include "stssad/kernels.hpp"

#include <atomic>
#include <cmath>
#include <vector>

namespace stssad::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Work below this size is not worth a parallel region.
constexpr int64_t kParGrain = 16384;

inline double apply_unary(Unary op, double v) {
    switch (op) {
        case Unary::Exp: return std::exp(v);
        case Unary::Log: return std::log(v);
        case Unary::Sqrt: return std::sqrt(v);
        case Unary::Square: return v * v;
        case Unary::Neg: return -v;
        case Unary::Relu: return v > 0.0 ? v : 0.0;
        case Unary::Sigmoid: {
            // Stable in both tails.
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        }
        case Unary::Clamp01: return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        case Unary::Sin: return std::sin(v);
        case Unary::Cos: return std::cos(v);
        case Unary::Softplus:
            // log(1+e^v) without overflow: max(v,0) + log1p(e^-|v|).
            return (v > 0.0 ? v : 0.0) + std::log1p(std::exp(-std::fabs(v)));
    }
    return 0.0;
}

inline double apply_binary(Binary op, double a, double b) {
    switch (op) {
        case Binary::Add: return a + b;
        case Binary::Sub: return a - b;
        case Binary::Mul: return a * b;
        case Binary::Div: return a / b;
    }
    return 0.0;
}

inline void matmul_row(const double* a, const double* b, double* y, int64_t i, int64_t k,
                       int64_t m) {
    double* yi = y + i * m;
    for (int64_t j = 0; j < m; ++j) yi[j] = 0.0;
    const double* ai = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
        const double aik = ai[kk];
        const double* bk = b + kk * m;
        for (int64_t j = 0; j < m; ++j) yi[j] += aik * bk[j];
    }
}

inline double sum_block_range(const double* x, int64_t lo, int64_t hi) {
    double s = 0.0;
    for (int64_t i = lo; i < hi; ++i) s += x[i];
    return s;
}

}  // namespace

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void matmul(const double* a, const double* b, double* y, int64_t n, int64_t k, int64_t m) {
    const bool par = parallel_enabled() && n * k * m >= kParGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) matmul_row(a, b, y, i, k, m);
}

void unary_map(Unary op, const double* x, double* y, int64_t n) {
    const bool par = parallel_enabled() && n >= kParGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) y[i] = apply_unary(op, x[i]);
}

void binary_map(Binary op, const double* a, const double* b, double* y, int64_t n) {
    const bool par = parallel_enabled() && n >= kParGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) y[i] = apply_binary(op, a[i], b[i]);
}

double sum_blocked(const double* x, int64_t n) {
    if (n == 0) return 0.0;
    const int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
    if (nblocks == 1) return sum_block_range(x, 0, n);
    std::vector<double> partial(static_cast<size_t>(nblocks));
    const bool par = parallel_enabled() && n >= kParGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t bi = 0; bi < nblocks; ++bi) {
        const int64_t lo = bi * kSumBlock;
        const int64_t hi = lo + kSumBlock < n ? lo + kSumBlock : n;
        partial[size_t(bi)] = sum_block_range(x, lo, hi);
    }
    return sum_block_range(partial.data(), 0, nblocks);
}

void row_sumsq(const double* x, double* y, int64_t rows, int64_t cols) {
    const bool par = parallel_enabled() && rows * cols >= kParGrain;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < rows; ++i) {
        const double* xi = x + i * cols;
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += xi[j] * xi[j];
        y[i] = s;
    }
}

namespace serial {

void matmul(const double* a, const double* b, double* y, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) matmul_row(a, b, y, i, k, m);
}

void unary_map(Unary op, const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = apply_unary(op, x[i]);
}

void binary_map(Binary op, const double* a, const double* b, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = apply_binary(op, a[i], b[i]);
}

double sum_blocked(const double* x, int64_t n) {
    if (n == 0) return 0.0;
    const int64_t nblocks = (n + kSumBlock - 1) / kSumBlock;
    if (nblocks == 1) return sum_block_range(x, 0, n);
    std::vector<double> partial(static_cast<size_t>(nblocks));
    for (int64_t bi = 0; bi < nblocks; ++bi) {
        const int64_t lo = bi * kSumBlock;
        const int64_t hi = lo + kSumBlock < n ? lo + kSumBlock : n;
        partial[size_t(bi)] = sum_block_range(x, lo, hi);
    }
    return sum_block_range(partial.data(), 0, nblocks);
}

void row_sumsq(const double* x, double* y, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        const double* xi = x + i * cols;
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += xi[j] * xi[j];
        y[i] = s;
    }
}

}  // namespace serial

}  // namespace stssad::kernels
