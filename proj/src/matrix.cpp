#include "gabliteration/matrix.hpp"

#include <cmath>
#include <string>

namespace gabl {

Matrix::Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {
    if (r < 1 || c < 1) {
        throw InvalidInputError("matrix dimensions must be at least 1x1, got " +
                                std::to_string(r) + "x" + std::to_string(c));
    }
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
    if (r < 1 || c < 1) {
        throw InvalidInputError("matrix dimensions must be at least 1x1, got " +
                                std::to_string(r) + "x" + std::to_string(c));
    }
    if (data.size() != r * c) {
        throw InvalidInputError("matrix data length " + std::to_string(data.size()) +
                                " does not match " + std::to_string(r) + "x" + std::to_string(c));
    }
    require_finite("matrix construction");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows_init) {
    std::size_t r = rows_init.size();
    std::size_t c = r > 0 ? rows_init.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows_init) {
        if (row.size() != c) {
            throw InvalidInputError("ragged row in matrix literal");
        }
        d.insert(d.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(d));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool Matrix::is_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void Matrix::require_finite(const char* what) const {
    if (!is_finite()) {
        throw InvalidInputError(std::string(what) + ": non-finite entry (NaN or Inf)");
    }
}

bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

}  // namespace gabl
