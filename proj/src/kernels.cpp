#include "pivot/kernels.hpp"

#include "pivot/common.hpp"

#include <algorithm>
#include <atomic>

#ifdef PIVOT_HAS_OPENMP
#include <omp.h>
#endif

namespace pivot::kernels {

namespace {

std::atomic<Backend> g_backend{
#ifdef PIVOT_HAS_OPENMP
    Backend::openmp
#else
    Backend::serial
#endif
};

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

void check_matmul(const Matrix& a, const Matrix& b, std::size_t inner_a, std::size_t inner_b) {
    if (inner_a != inner_b) {
        throw Error("matmul: inner dimension mismatch (" + std::to_string(a.rows) + "x" +
                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                    std::to_string(b.cols) + ")");
    }
}

void reshape(Matrix& c, std::size_t r, std::size_t k) {
    c.rows = r;
    c.cols = k;
    c.data.assign(r * k, 0.0);
}

// Row kernels shared by both backends so the accumulation order is identical.
inline void nn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    double* ci = c.data.data() + i * c.cols;
    const double* ai = a.data.data() + i * a.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
        const double av = ai[p];
        const double* bp = b.data.data() + p * b.cols;
        for (std::size_t j = 0; j < b.cols; ++j) ci[j] += av * bp[j];
    }
}

inline void tn_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    double* ci = c.data.data() + i * c.cols;
    for (std::size_t p = 0; p < a.rows; ++p) {
        const double av = a.data[p * a.cols + i];
        const double* bp = b.data.data() + p * b.cols;
        for (std::size_t j = 0; j < b.cols; ++j) ci[j] += av * bp[j];
    }
}

inline void nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const double* ai = a.data.data() + i * a.cols;
    double* ci = c.data.data() + i * c.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
        const double* bj = b.data.data() + j * b.cols;
        double s = 0.0;
        for (std::size_t p = 0; p < a.cols; ++p) s += ai[p] * bj[p];
        ci[j] = s;
    }
}

} // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

int max_threads() {
#ifdef PIVOT_HAS_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool parallel_worthwhile(std::size_t work) {
    return backend() == Backend::openmp && work >= kParallelWork && max_threads() > 1;
}

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.cols, b.rows);
    reshape(c, a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) nn_row(a, b, c, i);
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.rows, b.rows);
    reshape(c, a.cols, b.cols);
    for (std::size_t i = 0; i < a.cols; ++i) tn_row(a, b, c, i);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.cols, b.cols);
    reshape(c, a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) nt_row(a, b, c, i);
}

void add_column_sums(const Matrix& a, std::span<double> out) {
    for (std::size_t j = 0; j < a.cols; ++j) {
        double s = out[j];
        for (std::size_t i = 0; i < a.rows; ++i) s += a.data[i * a.cols + j];
        out[j] = s;
    }
}

} // namespace serial

namespace omp {

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.cols, b.rows);
    reshape(c, a.rows, b.cols);
    const auto m = static_cast<std::ptrdiff_t>(a.rows);
    [[maybe_unused]] const bool big = a.rows * a.cols * b.cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < m; ++i) nn_row(a, b, c, static_cast<std::size_t>(i));
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.rows, b.rows);
    reshape(c, a.cols, b.cols);
    const auto m = static_cast<std::ptrdiff_t>(a.cols);
    [[maybe_unused]] const bool big = a.rows * a.cols * b.cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < m; ++i) tn_row(a, b, c, static_cast<std::size_t>(i));
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    check_matmul(a, b, a.cols, b.cols);
    reshape(c, a.rows, b.rows);
    const auto m = static_cast<std::ptrdiff_t>(a.rows);
    [[maybe_unused]] const bool big = a.rows * a.cols * b.rows >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < m; ++i) nt_row(a, b, c, static_cast<std::size_t>(i));
}

void add_column_sums(const Matrix& a, std::span<double> out) {
    const auto n = static_cast<std::ptrdiff_t>(a.cols);
    [[maybe_unused]] const bool big = a.rows * a.cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t jj = 0; jj < n; ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        double s = out[j];
        for (std::size_t i = 0; i < a.rows; ++i) s += a.data[i * a.cols + j];
        out[j] = s;
    }
}

} // namespace omp

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
    backend() == Backend::openmp ? omp::matmul(a, b, c) : serial::matmul(a, b, c);
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c) {
    backend() == Backend::openmp ? omp::matmul_tn(a, b, c) : serial::matmul_tn(a, b, c);
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    backend() == Backend::openmp ? omp::matmul_nt(a, b, c) : serial::matmul_nt(a, b, c);
}

void add_column_sums(const Matrix& a, std::span<double> out) {
    if (out.size() != a.cols) throw Error("add_column_sums: output length mismatch");
    backend() == Backend::openmp ? omp::add_column_sums(a, out) : serial::add_column_sums(a, out);
}

void add_row_bias(Matrix& a, std::span<const double> bias) {
    if (bias.size() != a.cols) throw Error("add_row_bias: bias length mismatch");
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* r = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < a.cols; ++j) r[j] += bias[j];
    }
}

} // namespace pivot::kernels
