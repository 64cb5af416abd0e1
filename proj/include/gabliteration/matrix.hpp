#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "gabliteration/errors.hpp"

namespace gabl {

// Dense 2-D array of doubles, row-major. The universal numeric carrier:
// weight matrices, hidden-state batches, direction bases all ride on it.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    Matrix() = default;

    // Zero-initialized rows x cols.
    Matrix(std::size_t r, std::size_t c);

    // Takes ownership of d; validates length and finiteness.
    Matrix(std::size_t r, std::size_t c, std::vector<double> d);

    // Nested-list literal, for tests and small fixtures.
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows_init);

    static Matrix identity(std::size_t n);

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }

    bool is_finite() const;

    // Throws InvalidInputError when any entry is NaN or Inf.
    void require_finite(const char* what) const;
};

bool operator==(const Matrix& a, const Matrix& b);

}  // namespace gabl
