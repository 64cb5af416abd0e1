#include "gabliteration/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gabliteration/kernels.hpp"

namespace gabl::linalg {

namespace {

constexpr int kJacobiMaxSweeps = 100;
constexpr double kJacobiTol = 1e-12;

double column_dot(const Matrix& m, std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        s += m(i, p) * m(i, q);
    }
    return s;
}

void rotate_columns(Matrix& m, std::size_t p, std::size_t q, double c, double s) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double mp = m(i, p);
        const double mq = m(i, q);
        m(i, p) = c * mp - s * mq;
        m(i, q) = s * mp + c * mq;
    }
}

// Orthogonalizes columns of b in place, accumulating rotations into v.
// Returns false when the sweep cap is reached without convergence.
bool jacobi_orthogonalize(Matrix& b, Matrix& v) {
    const std::size_t d = b.cols;
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        double worst = 0.0;
        for (std::size_t p = 0; p + 1 < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double alpha = column_dot(b, p, p);
                const double beta = column_dot(b, q, q);
                const double gamma = column_dot(b, p, q);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double scale = std::sqrt(alpha * beta);
                const double off = std::abs(gamma) / scale;
                worst = std::max(worst, off);
                if (off <= kJacobiTol) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(b, p, q, c, s);
                rotate_columns(v, p, q, c, s);
            }
        }
        if (worst <= kJacobiTol) return true;
    }
    return false;
}

// Deterministic completion of an orthonormal column set: orthogonalize each
// canonical basis vector against the columns already fixed and keep the one
// with the largest residual (lowest index on ties).
void fill_null_column(Matrix& u, std::size_t col, std::size_t num_cols) {
    const std::size_t n = u.rows;
    std::vector<double> best;
    double best_norm = 0.0;
    for (std::size_t e = 0; e < n; ++e) {
        std::vector<double> cand(n, 0.0);
        cand[e] = 1.0;
        for (std::size_t j = 0; j < num_cols; ++j) {
            if (j == col) continue;
            double proj = 0.0;
            for (std::size_t i = 0; i < n; ++i) proj += cand[i] * u(i, j);
            for (std::size_t i = 0; i < n; ++i) cand[i] -= proj * u(i, j);
        }
        double norm = 0.0;
        for (double x : cand) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > best_norm) {
            best_norm = norm;
            best = std::move(cand);
        }
    }
    if (best_norm <= 1e-6) {
        throw NumericFailureError("svd_thin: could not complete orthonormal basis");
    }
    for (std::size_t i = 0; i < n; ++i) u(i, col) = best[i] / best_norm;
}

void apply_sign_convention(Matrix& u, Matrix& vt) {
    for (std::size_t j = 0; j < vt.rows; ++j) {
        std::size_t imax = 0;
        double best = 0.0;
        for (std::size_t i = 0; i < vt.cols; ++i) {
            const double mag = std::abs(vt(j, i));
            if (mag > best) {
                best = mag;
                imax = i;
            }
        }
        if (vt(j, imax) < 0.0) {
            for (std::size_t i = 0; i < vt.cols; ++i) vt(j, i) = -vt(j, i);
            for (std::size_t i = 0; i < u.rows; ++i) u(i, j) = -u(i, j);
        }
    }
}

}  // namespace

SvdResult svd_thin(const Matrix& a) {
    a.require_finite("svd_thin");
    if (a.rows < 1 || a.cols < 1) {
        throw InvalidInputError("svd_thin: empty matrix");
    }

    const bool transposed = a.rows < a.cols;
    Matrix b = transposed ? kernels::transpose(a) : a;  // n x r with n >= r
    const std::size_t r = b.cols;

    Matrix v = Matrix::identity(r);
    if (!jacobi_orthogonalize(b, v)) {
        throw NumericFailureError("svd_thin: no convergence after " +
                                  std::to_string(kJacobiMaxSweeps) + " sweeps");
    }

    std::vector<double> sigma(r);
    for (std::size_t j = 0; j < r; ++j) {
        sigma[j] = std::sqrt(column_dot(b, j, j));
    }

    // Sort nonincreasing; stable so equal values keep Jacobi order.
    std::vector<std::size_t> order(r);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double sig_max = sigma.empty() ? 0.0 : sigma[order[0]];
    const double null_tol = sig_max * 1e-14;

    Matrix left(b.rows, r);
    Matrix right(r, r);  // columns are right singular vectors of b
    std::vector<double> sorted_sigma(r);
    for (std::size_t j = 0; j < r; ++j) {
        const std::size_t src = order[j];
        sorted_sigma[j] = sigma[src];
        for (std::size_t i = 0; i < r; ++i) right(i, j) = v(i, src);
        if (sigma[src] > null_tol && sigma[src] > 0.0) {
            for (std::size_t i = 0; i < b.rows; ++i) left(i, j) = b(i, src) / sigma[src];
        } else {
            fill_null_column(left, j, r);
        }
    }

    SvdResult out;
    if (!transposed) {
        out.u = std::move(left);
        out.vt = kernels::transpose(right);
    } else {
        // a = right * diag(sigma) * left^T
        out.u = std::move(right);
        out.vt = kernels::transpose(left);
    }
    out.singular_values = std::move(sorted_sigma);
    apply_sign_convention(out.u, out.vt);
    return out;
}

CholeskyFactor cholesky(const Matrix& g) {
    g.require_finite("cholesky");
    if (g.rows != g.cols) {
        throw InvalidInputError("cholesky: matrix must be square");
    }
    const std::size_t k = g.rows;
    double max_abs = 0.0;
    for (double x : g.data) max_abs = std::max(max_abs, std::abs(x));
    const double sym_tol = 1e-10 * std::max(1.0, max_abs);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            if (std::abs(g(i, j) - g(j, i)) > sym_tol) {
                throw InvalidInputError("cholesky: matrix is not symmetric");
            }
        }
    }

    CholeskyFactor f{Matrix(k, k)};
    Matrix& l = f.lower;
    for (std::size_t j = 0; j < k; ++j) {
        double diag = g(j, j);
        for (std::size_t p = 0; p < j; ++p) diag -= l(j, p) * l(j, p);
        if (!(diag > 0.0)) {
            throw InvalidInputError("cholesky: matrix is not positive definite");
        }
        l(j, j) = std::sqrt(diag);
        for (std::size_t i = j + 1; i < k; ++i) {
            double s = g(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
            l(i, j) = s / l(j, j);
        }
    }
    return f;
}

Matrix cholesky_solve(const CholeskyFactor& f, const Matrix& b) {
    const Matrix& l = f.lower;
    const std::size_t k = l.rows;
    if (b.rows != k) {
        throw InvalidInputError("cholesky_solve: right-hand side has wrong row count");
    }
    Matrix x = b;
    // Forward substitution l * y = b.
    for (std::size_t col = 0; col < x.cols; ++col) {
        for (std::size_t i = 0; i < k; ++i) {
            double s = x(i, col);
            for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * x(p, col);
            x(i, col) = s / l(i, i);
        }
        // Back substitution l^T * x = y.
        for (std::size_t ii = k; ii > 0; --ii) {
            const std::size_t i = ii - 1;
            double s = x(i, col);
            for (std::size_t p = i + 1; p < k; ++p) s -= l(p, i) * x(p, col);
            x(i, col) = s / l(i, i);
        }
    }
    return x;
}

Matrix solve_spd(const Matrix& g, const Matrix& b) {
    return cholesky_solve(cholesky(g), b);
}

double spectral_norm(const Matrix& a, double tol) {
    a.require_finite("spectral_norm");
    if (!(tol > 0.0)) {
        throw InvalidInputError("spectral_norm: tolerance must be positive");
    }
    if (frobenius_norm(a) == 0.0) return 0.0;

    const std::size_t d = a.cols;
    std::vector<double> v(d, 1.0 / std::sqrt(static_cast<double>(d)));

    auto ata_apply = [&](const std::vector<double>& x, std::vector<double>& out) {
        std::vector<double> w(a.rows, 0.0);
        for (std::size_t i = 0; i < a.rows; ++i) {
            const double* ai = a.row_ptr(i);
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += ai[j] * x[j];
            w[i] = s;
        }
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t i = 0; i < a.rows; ++i) {
            const double* ai = a.row_ptr(i);
            const double wi = w[i];
            if (wi == 0.0) continue;
            for (std::size_t j = 0; j < d; ++j) out[j] += ai[j] * wi;
        }
    };

    std::vector<double> z(d, 0.0);
    double sigma_prev = 0.0;
    constexpr int kMaxIters = 10000;
    for (int iter = 0; iter < kMaxIters; ++iter) {
        ata_apply(v, z);
        double zn = 0.0, lam = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            zn += z[j] * z[j];
            lam += v[j] * z[j];
        }
        zn = std::sqrt(zn);
        if (zn == 0.0) {
            // Start vector landed in the null space; restart from the first
            // canonical direction the operator does not annihilate.
            bool restarted = false;
            for (std::size_t e = 0; e < d && !restarted; ++e) {
                std::fill(v.begin(), v.end(), 0.0);
                v[e] = 1.0;
                ata_apply(v, z);
                double n2 = 0.0;
                for (double x : z) n2 += x * x;
                if (n2 > 0.0) restarted = true;
            }
            if (!restarted) return 0.0;
            continue;
        }
        const double sigma = std::sqrt(std::max(lam, 0.0));
        if (iter > 0 && std::abs(sigma - sigma_prev) <= tol * std::max(sigma, 1e-300)) {
            return sigma;
        }
        sigma_prev = sigma;
        for (std::size_t j = 0; j < d; ++j) v[j] = z[j] / zn;
    }
    return sigma_prev;
}

double frobenius_norm(const Matrix& a) {
    a.require_finite("frobenius_norm");
    double s = 0.0;
    for (double x : a.data) s += x * x;
    return std::sqrt(s);
}

}  // namespace gabl::linalg
