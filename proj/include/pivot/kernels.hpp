#pragma once

// Dense row-major matrix and the handful of kernels the model needs.
//
// Every kernel exists twice: a plain serial loop kept as the reference, and
// an OpenMP version that splits work over output rows only. Each output
// element is accumulated by a single thread in the same order as the serial
// loop, so both backends produce bitwise-identical results regardless of the
// thread count.

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace pivot {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

namespace kernels {

enum class Backend { serial, openmp };

void set_backend(Backend b);
Backend backend();
int max_threads();
/// True when the OpenMP backend is active and `work` multiply-adds justify a fork.
bool parallel_worthwhile(std::size_t work);

// C = A * B.  A: m x k, B: k x n.
void matmul(const Matrix& a, const Matrix& b, Matrix& c);
// C = A^T * B.  A: k x m, B: k x n.
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c);
// C = A * B^T.  A: m x k, B: n x k.
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
// out[j] += sum_i A(i, j)
void add_column_sums(const Matrix& a, std::span<double> out);
// Row-wise broadcast: A(i, :) += bias
void add_row_bias(Matrix& a, std::span<const double> bias);

namespace serial {
void matmul(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
void add_column_sums(const Matrix& a, std::span<double> out);
} // namespace serial

namespace omp {
void matmul(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
void add_column_sums(const Matrix& a, std::span<double> out);
} // namespace omp

} // namespace kernels
} // namespace pivot
