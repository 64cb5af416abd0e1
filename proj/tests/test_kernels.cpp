#include <doctest.h>

#include "gabliteration/kernels.hpp"
#include "test_oracles.hpp"

using namespace gabl;
using oracle::random_matrix;

TEST_CASE("matmul matches the naive oracle") {
    const Matrix a = random_matrix(7, 5, 101);
    const Matrix b = random_matrix(5, 9, 102);
    const Matrix c = kernels::matmul(a, b);
    CHECK(oracle::rel_fro_diff(oracle::multiply(a, b), c) < 1e-14);
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    // Sizes straddling the parallel threshold.
    for (std::size_t n : {8, 32, 64, 96}) {
        const Matrix a = random_matrix(n, n, 200 + n);
        const Matrix b = random_matrix(n, n, 300 + n);
        CHECK(kernels::matmul(a, b) == kernels::matmul_serial(a, b));
        CHECK(kernels::sub_scaled(a, b, 0.37) == kernels::sub_scaled_serial(a, b, 0.37));
    }
    const Matrix big_a = random_matrix(300, 300, 1);
    const Matrix big_b = random_matrix(300, 300, 2);
    CHECK(kernels::matmul(big_a, big_b) == kernels::matmul_serial(big_a, big_b));
}

TEST_CASE("transpose is an involution") {
    const Matrix a = random_matrix(6, 11, 104);
    CHECK(kernels::transpose(kernels::transpose(a)) == a);
}

TEST_CASE("matmul shape mismatch throws") {
    CHECK_THROWS_AS(kernels::matmul(Matrix(2, 3), Matrix(2, 3)), InvalidInputError);
}

TEST_CASE("sub_scaled closed form") {
    const Matrix a = Matrix::from_rows({{1.0, 2.0}});
    const Matrix b = Matrix::from_rows({{4.0, 8.0}});
    const Matrix c = kernels::sub_scaled(a, b, 0.25);
    CHECK(c(0, 0) == doctest::Approx(0.0));
    CHECK(c(0, 1) == doctest::Approx(0.0));
}
