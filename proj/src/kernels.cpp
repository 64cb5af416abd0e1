#include "gabliteration/kernels.hpp"

#include <cstdint>
#include <string>

namespace gabl::kernels {

static void check_matmul_shapes(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw InvalidInputError("matmul shape mismatch: " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols));
    }
}

// i-k-j order: for a fixed output row the accumulation over k is strictly
// sequential, which is what makes the OpenMP variant bit-identical.
static inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t n = a.cols;
    const std::size_t m = b.cols;
    double* ci = c.row_ptr(i);
    const double* ai = a.row_ptr(i);
    for (std::size_t k = 0; k < n; ++k) {
        const double aik = ai[k];
        if (aik == 0.0) continue;
        const double* bk = b.row_ptr(k);
        for (std::size_t j = 0; j < m; ++j) {
            ci[j] += aik * bk[j];
        }
    }
}

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    check_matmul_shapes(a, b);
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        matmul_row(a, b, c, i);
    }
    return c;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_matmul_shapes(a, b);
    const std::size_t flops = a.rows * a.cols * b.cols;
    if (flops < kParallelFlopThreshold) {
        return matmul_serial(a, b);
    }
    Matrix c(a.rows, b.cols);
    const std::int64_t nrows = static_cast<std::int64_t>(a.rows);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < nrows; ++i) {
        matmul_row(a, b, c, static_cast<std::size_t>(i));
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        for (std::size_t j = 0; j < a.cols; ++j) {
            t(j, i) = ai[j];
        }
    }
    return t;
}

static void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw InvalidInputError(std::string(what) + ": shape mismatch");
    }
}

Matrix sub_scaled_serial(const Matrix& a, const Matrix& b, double alpha) {
    check_same_shape(a, b, "sub_scaled");
    Matrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        c.data[i] = a.data[i] - alpha * b.data[i];
    }
    return c;
}

Matrix sub_scaled(const Matrix& a, const Matrix& b, double alpha) {
    check_same_shape(a, b, "sub_scaled");
    const std::size_t n = a.data.size();
    if (n < kParallelFlopThreshold) {
        return sub_scaled_serial(a, b, alpha);
    }
    Matrix c(a.rows, a.cols);
    const std::int64_t sn = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < sn; ++i) {
        c.data[i] = a.data[i] - alpha * b.data[i];
    }
    return c;
}

}  // namespace gabl::kernels
