#pragma once
// Low-level numeric loops. Two variants of each kernel: the default one is
// OpenMP-parallel, and stssad::kernels::serial keeps a plain reference
// implementation for testing and benchmarking.
//
// Determinism contract: both variants perform the identical floating-point
// operations in the identical order, so their results are bitwise equal no
// matter how many threads run. Parallelism is only ever across independent
// output elements (matmul rows, map elements, row reductions) or across the
// fixed-size blocks of the blocked sum, whose combine step stays serial.

#include <cstdint>

namespace stssad::kernels {

enum class Unary { Exp, Log, Sqrt, Square, Neg, Relu, Sigmoid, Clamp01, Sin, Cos, Softplus };
enum class Binary { Add, Sub, Mul, Div };

// Runtime switch consulted by the default kernels; serial:: ignores it.
void set_parallel(bool on);
bool parallel_enabled();

// y(n x m) = a(n x k) * b(k x m), row-major, accumulation in fixed k order.
void matmul(const double* a, const double* b, double* y, int64_t n, int64_t k, int64_t m);
void unary_map(Unary op, const double* x, double* y, int64_t n);
void binary_map(Binary op, const double* a, const double* b, double* y, int64_t n);
// Fixed-shape reduction tree: serial sums over blocks of kSumBlock elements,
// then a serial left-to-right combine of the block sums.
double sum_blocked(const double* x, int64_t n);
// y[i] = sum_j x[i*cols+j]^2
void row_sumsq(const double* x, double* y, int64_t rows, int64_t cols);

constexpr int64_t kSumBlock = 1024;

namespace serial {
void matmul(const double* a, const double* b, double* y, int64_t n, int64_t k, int64_t m);
void unary_map(Unary op, const double* x, double* y, int64_t n);
void binary_map(Binary op, const double* a, const double* b, double* y, int64_t n);
double sum_blocked(const double* x, int64_t n);
void row_sumsq(const double* x, double* y, int64_t rows, int64_t cols);
}  // namespace serial

}  // namespace stssad::kernels
