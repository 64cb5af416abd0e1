#pragma once

#include <vector>

#include "gabliteration/matrix.hpp"

namespace gabl::linalg {

// Thin SVD a = u * diag(singular_values) * vt with r = min(rows, cols)
// components. Singular values are sorted nonincreasing; u columns and vt
// rows are orthonormal. Sign convention: the largest-magnitude entry of
// each right singular vector is positive (first occurrence on ties), so
// repeated calls on identical input are bit-identical.
struct SvdResult {
    Matrix u;                            // n x r
    std::vector<double> singular_values; // length r, nonincreasing, >= 0
    Matrix vt;                           // r x d
};

// One-sided Jacobi. Converges when every normalized column inner product
// falls below 1e-12; throws NumericFailureError after 100 sweeps.
SvdResult svd_thin(const Matrix& a);

// Cholesky factor of a symmetric positive definite matrix. Kept as a type
// so callers can factor once and solve many right-hand sides.
struct CholeskyFactor {
    Matrix lower;  // k x k lower triangular, g = lower * lower^T
};

// Throws InvalidInputError when g is asymmetric (beyond 1e-10 relative)
// or not positive definite. No silent regularization: shifting the
// spectrum is the caller's decision.
CholeskyFactor cholesky(const Matrix& g);

// Solves g * x = b given the factor of g. b is k x m.
Matrix cholesky_solve(const CholeskyFactor& f, const Matrix& b);

// Convenience: factor and solve in one call.
Matrix solve_spd(const Matrix& g, const Matrix& b);

// Largest singular value via power iteration on a^T a, relative tolerance
// tol. Deterministic all-ones start vector; returns 0 for the zero matrix.
double spectral_norm(const Matrix& a, double tol);

double frobenius_norm(const Matrix& a);

}  // namespace gabl::linalg
