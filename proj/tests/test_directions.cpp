#include <doctest.h>

#include <cmath>

#include "gabliteration/directions.hpp"
#include "gabliteration/kernels.hpp"
#include "test_oracles.hpp"

using namespace gabl;
using namespace gabl::dirs;
using oracle::random_matrix;

namespace {

toy::HiddenStateBatch batch(Matrix states, std::size_t layer = 1) {
    return toy::HiddenStateBatch{layer, std::move(states)};
}

double column_cos(const Matrix& a, std::size_t ca, const Matrix& b, std::size_t cb) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        dot += a(i, ca) * b(i, cb);
        na += a(i, ca) * a(i, ca);
        nb += b(i, cb) * b(i, cb);
    }
    return dot / std::sqrt(na * nb);
}

// d x k basis whose singular values are exactly the given scales
// (orthonormal directions scaled per column).
DirectionSet scaled_orthonormal_basis(std::size_t d, const std::vector<double>& scales,
                                      std::uint64_t seed) {
    const Matrix g = random_matrix(d, d, seed);
    const auto svd = linalg::svd_thin(g);  // u: d x d orthonormal
    DirectionSet out;
    out.basis = Matrix(d, scales.size());
    out.singular_values = scales;
    for (std::size_t j = 0; j < scales.size(); ++j) {
        for (std::size_t i = 0; i < d; ++i) out.basis(i, j) = svd.u(i, j) * scales[j];
    }
    return out;
}

}  // namespace

TEST_CASE("difference matrix: identical batches have zero row mean") {
    const Matrix h = random_matrix(16, 6, 60);
    const Matrix diff = build_difference_matrix(batch(h), batch(h), 4, 3);
    for (std::size_t j = 0; j < diff.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < diff.rows; ++i) mean += diff(i, j);
        mean /= static_cast<double>(diff.rows);
        CHECK(std::abs(mean) < 1e-12);
    }
}

TEST_CASE("difference matrix: n = min(n_h, n_n) rows per shuffle") {
    const Matrix hh = random_matrix(5, 4, 61);
    const Matrix hn = random_matrix(3, 4, 62);
    const Matrix diff = build_difference_matrix(batch(hh), batch(hn), 2, 0);
    CHECK(diff.rows == 6);
    CHECK(diff.cols == 4);
}

TEST_CASE("difference matrix: constant offset over a constant base is recovered exactly") {
    Matrix base(10, 3);
    for (std::size_t i = 0; i < base.rows; ++i) {
        base(i, 0) = 1.0;
        base(i, 1) = -2.0;
        base(i, 2) = 0.5;
    }
    Matrix shifted = base;
    const double offset[3] = {0.25, 1.5, -0.75};
    for (std::size_t i = 0; i < base.rows; ++i) {
        for (std::size_t j = 0; j < 3; ++j) shifted(i, j) += offset[j];
    }
    const Matrix diff = build_difference_matrix(batch(shifted), batch(base), 3, 9);
    for (std::size_t i = 0; i < diff.rows; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(diff(i, j) == doctest::Approx(offset[j]).epsilon(1e-14));
        }
    }
}

TEST_CASE("difference matrix: deterministic given seed, layer mismatch rejected") {
    const Matrix hh = random_matrix(8, 4, 63);
    const Matrix hn = random_matrix(8, 4, 64);
    CHECK(build_difference_matrix(batch(hh), batch(hn), 3, 5) ==
          build_difference_matrix(batch(hh), batch(hn), 3, 5));
    CHECK_THROWS_AS(build_difference_matrix(batch(hh, 1), batch(hn, 2), 1, 0),
                    InvalidInputError);
    CHECK_THROWS_AS(
        build_difference_matrix(batch(hh), batch(random_matrix(8, 5, 65)), 1, 0),
        InvalidInputError);
}

TEST_CASE("svd extraction: exact rank-1 input") {
    const std::vector<double> v = {0.6, 0.0, 0.8};
    Matrix diff(5, 3);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) diff(i, j) = (1.0 + static_cast<double>(i)) * v[j];
    }
    const DirectionSet ds = extract_directions_svd(diff, 1);
    CHECK(ds.method == Method::svd_pairing);
    CHECK(std::abs(std::abs(ds.basis(0, 0)) - 0.6) < 1e-12);
    CHECK(std::abs(std::abs(ds.basis(2, 0)) - 0.8) < 1e-12);
    CHECK(ds.singular_values.size() == 1);
}

TEST_CASE("svd extraction: k out of range") {
    const Matrix diff = random_matrix(4, 6, 66);
    CHECK_THROWS_AS(extract_directions_svd(diff, 5), InvalidInputError);
    CHECK_THROWS_AS(extract_directions_svd(diff, 0), InvalidInputError);
}

TEST_CASE("svd extraction captures the dominant directions") {
    // Spectrum (10, 5, 0.1): keeping k = 2 leaves relative energy
    // 0.1 / sqrt(125.01).
    const std::size_t d = 12;
    const Matrix g = random_matrix(16, 16, 95);
    const auto left = linalg::svd_thin(g);
    const Matrix h = random_matrix(d, d, 96);
    const auto right = linalg::svd_thin(h);
    const double sigma[3] = {10.0, 5.0, 0.1};
    Matrix diff(16, d);
    for (std::size_t i = 0; i < 16; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < 3; ++p) s += left.u(i, p) * sigma[p] * right.u(j, p);
            diff(i, j) = s;
        }
    }
    const DirectionSet ds = extract_directions_svd(diff, 2);
    CHECK(ds.singular_values[0] == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(ds.singular_values[1] == doctest::Approx(5.0).epsilon(1e-9));
    // Projecting onto the extracted pair reproduces diff up to the tail.
    const Matrix approx = kernels::matmul(kernels::matmul(diff, ds.basis),
                                          kernels::transpose(ds.basis));
    const Matrix gap = kernels::sub_scaled(diff, approx, 1.0);
    const double rel = linalg::frobenius_norm(gap) / linalg::frobenius_norm(diff);
    CHECK(rel <= 0.1 / std::sqrt(125.01) + 1e-12);
}

TEST_CASE("ridge projection: orthonormal basis scales by 1/(1+lambda)") {
    const DirectionSet ds = scaled_orthonormal_basis(8, {1.0, 1.0}, 67);
    const FactoredProjection proj = build_ridge_projection(ds, 0.1);
    for (std::size_t col = 0; col < 2; ++col) {
        std::vector<double> x(8);
        for (std::size_t i = 0; i < 8; ++i) x[i] = ds.basis(i, col);
        const auto px = apply_projection_vector(x, proj);
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(px[i] == doctest::Approx(x[i] / 1.1).epsilon(1e-12));
        }
    }
}

TEST_CASE("ridge projection: single direction with norm 5") {
    const DirectionSet ds = scaled_orthonormal_basis(6, {5.0}, 68);
    const FactoredProjection proj = build_ridge_projection(ds, 0.1);
    std::vector<double> r(6);
    for (std::size_t i = 0; i < 6; ++i) r[i] = ds.basis(i, 0);
    const auto pr = apply_projection_vector(r, proj);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(pr[i] == doctest::Approx(r[i] * 25.0 / 25.1).epsilon(1e-12));
    }
}

TEST_CASE("ridge projection: lambda 0 acts as the exact projector on the span") {
    const DirectionSet ds = scaled_orthonormal_basis(10, {2.0, 0.5, 1.0}, 69);
    const FactoredProjection proj = build_ridge_projection(ds, 0.0);
    // x = basis combination.
    std::vector<double> x(10, 0.0);
    for (std::size_t i = 0; i < 10; ++i) {
        x[i] = 0.3 * ds.basis(i, 0) - 1.2 * ds.basis(i, 1) + 0.7 * ds.basis(i, 2);
    }
    const auto px = apply_projection_vector(x, proj);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(px[i] == doctest::Approx(x[i]).epsilon(1e-10));
    }
}

TEST_CASE("ridge projection: rank-deficient basis with lambda 0 raises and advises") {
    DirectionSet ds;
    ds.basis = Matrix(6, 2);
    for (std::size_t i = 0; i < 6; ++i) {
        ds.basis(i, 0) = 1.0;
        ds.basis(i, 1) = 1.0;  // duplicate column
    }
    try {
        (void)build_ridge_projection(ds, 0.0);
        FAIL("expected SingularityError");
    } catch (const SingularityError& e) {
        CHECK(std::string(e.what()).find("lambda") != std::string::npos);
    }
    CHECK_NOTHROW(build_ridge_projection(ds, 0.01));
}

TEST_CASE("apply_projection_right: rows orthogonal to the span vanish") {
    const Matrix g = random_matrix(12, 12, 70);
    const auto svd = linalg::svd_thin(g);
    DirectionSet ds;
    ds.basis = Matrix(12, 2);
    for (std::size_t i = 0; i < 12; ++i) {
        ds.basis(i, 0) = svd.u(i, 0);
        ds.basis(i, 1) = svd.u(i, 1);
    }
    const auto proj = build_ridge_projection(ds, 0.05);
    Matrix w(3, 12);  // rows from complementary directions
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t i = 0; i < 12; ++i) w(r, i) = svd.u(i, 3 + r);
    }
    const Matrix wp = apply_projection_right(w, proj);
    for (double x : wp.data) CHECK(std::abs(x) < 1e-10);
}

TEST_CASE("apply_projection_right agrees with the materialized projector") {
    const std::size_t d = 32;
    DirectionSet ds;
    ds.basis = random_matrix(d, 3, 71);
    const auto proj = build_ridge_projection(ds, 0.1);
    const Matrix w = random_matrix(8, d, 72);

    // Oracle: P = R (R^T R + lambda I)^-1 R^T built with an explicit inverse.
    Matrix gram = oracle::gram(ds.basis);
    for (std::size_t i = 0; i < 3; ++i) gram(i, i) += 0.1;
    const Matrix inv = oracle::gauss_jordan_inverse(gram);
    const Matrix p = oracle::multiply(oracle::multiply(ds.basis, inv),
                                      kernels::transpose(ds.basis));
    const Matrix expected = oracle::multiply(w, p);
    const Matrix got = apply_projection_right(w, proj);
    for (std::size_t i = 0; i < got.data.size(); ++i) {
        CHECK(std::abs(got.data[i] - expected.data[i]) < 1e-10);
    }
}

TEST_CASE("projection contraction and monotonicity in lambda") {
    const DirectionSet ds = scaled_orthonormal_basis(16, {3.0, 1.0, 0.4}, 73);
    std::vector<double> x(16);
    for (std::size_t i = 0; i < 16; ++i) {
        x[i] = ds.basis(i, 0) + 0.5 * ds.basis(i, 1) + 2.0 * ds.basis(i, 2);
    }
    double prev_norm = 1e300;
    for (double lambda : {0.0, 0.01, 0.1, 1.0, 10.0}) {
        const auto proj = build_ridge_projection(ds, lambda);
        const auto px = apply_projection_vector(x, proj);
        double nx = 0.0, npx = 0.0;
        for (std::size_t i = 0; i < 16; ++i) {
            nx += x[i] * x[i];
            npx += px[i] * px[i];
        }
        CHECK(npx <= nx * (1.0 + 1e-12));  // operator norm <= 1
        CHECK(std::sqrt(npx) < prev_norm);  // strictly decreasing in lambda
        prev_norm = std::sqrt(npx);
    }

    // Contraction on arbitrary vectors too.
    for (std::uint64_t seed : {74, 75, 76}) {
        const auto proj = build_ridge_projection(ds, 0.05);
        const Matrix xr = random_matrix(1, 16, seed);
        const auto px = apply_projection_vector(xr.data, proj);
        double nx = 0.0, npx = 0.0;
        for (std::size_t i = 0; i < 16; ++i) {
            nx += xr.data[i] * xr.data[i];
            npx += px[i] * px[i];
        }
        CHECK(npx <= nx * (1.0 + 1e-12));
    }
}

TEST_CASE("approximation error norm is exactly lambda/(sigma_min^2 + lambda)") {
    const DirectionSet ds = scaled_orthonormal_basis(20, {4.0, 2.0, 1.5}, 77);
    const double lambda = 0.2;
    const Matrix p_reg = materialize_projection(build_ridge_projection(ds, lambda));
    const Matrix p_exact = materialize_projection(build_ridge_projection(ds, 0.0));
    const Matrix delta = kernels::sub_scaled(p_reg, p_exact, 1.0);
    const double observed = linalg::spectral_norm(delta, 1e-10);
    const double expected = lambda / (1.5 * 1.5 + lambda);
    CHECK(observed == doctest::Approx(expected).epsilon(1e-8));
}

TEST_CASE("shuffle stability: two shuffle seeds give nearly the same subspace") {
    // Fixed well-separated clusters; only the pairing permutation changes.
    // The within-class noise is anisotropic (one loud axis) so the second
    // subspace direction is identifiable; with isotropic noise it would be
    // population-degenerate and no pairing scheme could pin it down.
    const std::size_t n = 256, d = 16;
    rng::Rng rng(123);
    Matrix hh(n, d), hn(n, d);
    std::vector<double> v(d);
    double vnorm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        v[j] = rng.normal();
        vnorm += v[j] * v[j];
    }
    vnorm = std::sqrt(vnorm);
    const double noise_scale = 2.0;  // loudest axis
    for (std::size_t j = 0; j < d; ++j) v[j] *= 5.0 * noise_scale / vnorm;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double sigma = (j == 0) ? noise_scale : 1.0;
            hh(i, j) = v[j] + sigma * rng.normal();
            hn(i, j) = sigma * rng.normal();
        }
    }
    const Matrix d1 = build_difference_matrix(batch(hh), batch(hn), 3, 1);
    const Matrix d2 = build_difference_matrix(batch(hh), batch(hn), 3, 2);
    const DirectionSet b1 = extract_directions_svd(d1, 2);
    const DirectionSet b2 = extract_directions_svd(d2, 2);

    // Largest principal angle between the two orthonormal bases.
    const Matrix cross = kernels::matmul(kernels::transpose(b1.basis), b2.basis);
    const auto svd = linalg::svd_thin(cross);
    const double cos_min = std::min(1.0, svd.singular_values.back());
    const double angle_deg = std::acos(cos_min) * 180.0 / 3.14159265358979323846;
    CHECK(angle_deg <= 5.0);
}

TEST_CASE("fisher lda: exactly isotropic classes reproduce the mean difference") {
    const std::size_t d = 6;
    std::vector<double> mu_h(d, 0.0), mu_n(d, 0.0);
    mu_h[0] = 1.0;
    mu_h[2] = 2.0;
    mu_h[4] = -1.0;
    const double s = 0.7;
    Matrix hh(2 * d, d), hn(2 * d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            hh(2 * i, j) = mu_h[j] + (i == j ? s : 0.0);
            hh(2 * i + 1, j) = mu_h[j] - (i == j ? s : 0.0);
            hn(2 * i, j) = mu_n[j] + (i == j ? s : 0.0);
            hn(2 * i + 1, j) = mu_n[j] - (i == j ? s : 0.0);
        }
    }
    const DirectionSet fisher = fisher_lda_directions(batch(hh), batch(hn), 1, 0.0);
    const DirectionSet meandiff = mean_difference_direction(batch(hh), batch(hn));
    CHECK(std::abs(column_cos(fisher.basis, 0, meandiff.basis, 0)) >= 1.0 - 1e-6);
    CHECK(fisher.singular_values.empty());
    CHECK(fisher.method == Method::fisher_lda);
}

TEST_CASE("fisher lda: anisotropic within-class covariance reweights the direction") {
    // Sample S_w exactly diag(100, 1): points mu +- c_i e_i with
    // c_i^2 = (3/2) * diag_i, both classes, so that direction 1 is
    // proportional to (0.01, 1).
    const double c1 = std::sqrt(150.0), c2 = std::sqrt(1.5);
    Matrix hh(4, 2), hn(4, 2);
    const double mu_h[2] = {1.0, 1.0};
    for (std::size_t j = 0; j < 2; ++j) {
        hh(0, j) = mu_h[j] + (j == 0 ? c1 : 0.0);
        hh(1, j) = mu_h[j] - (j == 0 ? c1 : 0.0);
        hh(2, j) = mu_h[j] + (j == 1 ? c2 : 0.0);
        hh(3, j) = mu_h[j] - (j == 1 ? c2 : 0.0);
        hn(0, j) = (j == 0 ? c1 : 0.0);
        hn(1, j) = -(j == 0 ? c1 : 0.0);
        hn(2, j) = (j == 1 ? c2 : 0.0);
        hn(3, j) = -(j == 1 ? c2 : 0.0);
    }
    const DirectionSet fisher = fisher_lda_directions(batch(hh), batch(hn), 1, 0.0);
    const double norm = std::sqrt(0.01 * 0.01 + 1.0);
    CHECK(std::abs(fisher.basis(0, 0)) == doctest::Approx(0.01 / norm).epsilon(1e-9));
    CHECK(std::abs(fisher.basis(1, 0)) == doctest::Approx(1.0 / norm).epsilon(1e-9));
}

TEST_CASE("fisher lda: k = 2 directions are orthonormal") {
    const Matrix hh = random_matrix(40, 8, 80);
    Matrix hn = random_matrix(40, 8, 81);
    for (std::size_t i = 0; i < hn.rows; ++i) hn(i, 0) += 3.0;
    const DirectionSet fisher = fisher_lda_directions(batch(hh), batch(hn), 2, -1.0);
    REQUIRE(fisher.k() == 2);
    double dot = 0.0, n0 = 0.0, n1 = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        dot += fisher.basis(i, 0) * fisher.basis(i, 1);
        n0 += fisher.basis(i, 0) * fisher.basis(i, 0);
        n1 += fisher.basis(i, 1) * fisher.basis(i, 1);
    }
    CHECK(std::abs(dot) < 1e-8);
    CHECK(n0 == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(n1 == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("logistic probe recovers a separable offset direction") {
    rng::Rng rng(82);
    const std::size_t n = 64, d = 8;
    Matrix hh(n, d), hn(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double noise = 0.1 * rng.normal();
            hh(i, j) = (j == 2 ? 1.0 : 0.0) + noise;
            hn(i, j) = (j == 2 ? -1.0 : 0.0) + 0.1 * rng.normal();
        }
    }
    const DirectionSet probe = logistic_probe_directions(batch(hh), batch(hn), 1, 500, 0.1, 0);
    Matrix truth(d, 1);
    truth(2, 0) = 1.0;
    CHECK(std::abs(column_cos(probe.basis, 0, truth, 0)) >= 0.99);
}

TEST_CASE("logistic probe: identical class distributions leave the weight tiny") {
    // Same distribution at data scale eps: the separating gradient is zero
    // in expectation, so the weight norm stays bounded by lr * steps * eps.
    const double eps = 1e-3;
    Matrix hh = random_matrix(32, 6, 83);
    Matrix hn = random_matrix(32, 6, 88);
    for (double& x : hh.data) x *= eps;
    for (double& x : hn.data) x *= eps;
    const std::size_t steps = 100;
    const double lr = 0.1;
    std::vector<double> raw_norms;
    (void)logistic_probe_directions(batch(hh), batch(hn), 1, steps, lr, 0, &raw_norms);
    REQUIRE(raw_norms.size() == 1);
    CHECK(raw_norms[0] < 10.0 * lr * static_cast<double>(steps) * eps);

    // Bit-identical classes leave only summation round-off in the weight.
    const Matrix h = random_matrix(32, 6, 89);
    raw_norms.clear();
    (void)logistic_probe_directions(batch(h), batch(h), 1, 100, 0.1, 0, &raw_norms);
    CHECK(raw_norms[0] < 1e-12);

    // All-zero data has no separating direction at all.
    const Matrix zero(8, 6);
    CHECK_THROWS_AS(logistic_probe_directions(batch(zero), batch(zero), 1, 100, 0.1, 0),
                    DegenerateInputError);
}

TEST_CASE("logistic probe: determinism and divergence error") {
    const Matrix hh = random_matrix(16, 4, 84);
    Matrix hn = random_matrix(16, 4, 85);
    for (std::size_t i = 0; i < hn.rows; ++i) hn(i, 1) -= 2.0;
    const auto a = logistic_probe_directions(batch(hh), batch(hn), 2, 200, 0.1, 7);
    const auto b = logistic_probe_directions(batch(hh), batch(hn), 2, 200, 0.1, 7);
    CHECK(a.basis == b.basis);

    Matrix huge_h = hh, huge_n = hn;
    for (double& x : huge_h.data) x *= 1e150;
    for (double& x : huge_n.data) x *= 1e150;
    CHECK_THROWS_AS(logistic_probe_directions(batch(huge_h), batch(huge_n), 1, 50, 1e250, 0),
                    NumericFailureError);
}

TEST_CASE("mean difference: closed form and degenerate input") {
    Matrix hh(4, 5), hn(4, 5);
    for (std::size_t i = 0; i < 4; ++i) {
        hh(i, 0) = 3.0;
        hh(i, 1) = 4.0;
    }
    const DirectionSet ds = mean_difference_direction(batch(hh), batch(hn));
    CHECK(ds.basis(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(ds.basis(1, 0) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(ds.method == Method::mean_difference);

    CHECK_THROWS_AS(mean_difference_direction(batch(hn), batch(hn)), DegenerateInputError);
}

TEST_CASE("mean difference and svd agree on rank-1 data") {
    rng::Rng rng(86);
    const std::size_t n = 24, d = 10;
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    Matrix hh(n, d), hn(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = 1.0 + rng.uniform();
        for (std::size_t j = 0; j < d; ++j) {
            hn(i, j) = 2.0;  // constant base
            hh(i, j) = 2.0 + a * v[j];
        }
    }
    const DirectionSet md = mean_difference_direction(batch(hh), batch(hn));
    const Matrix diff = build_difference_matrix(batch(hh), batch(hn), 3, 4);
    const DirectionSet svd1 = extract_directions_svd(diff, 1);
    CHECK(std::abs(column_cos(md.basis, 0, svd1.basis, 0)) >= 0.99);
}

TEST_CASE("direction set json round trip") {
    DirectionSet ds = scaled_orthonormal_basis(5, {2.0, 1.0}, 87);
    ds.method = Method::fisher_lda;
    const std::string text = directions_to_json(ds, 0.1);
    const DirectionSet back = directions_from_json(text);
    CHECK(back.method == Method::fisher_lda);
    CHECK(back.basis == ds.basis);
    CHECK(back.singular_values == ds.singular_values);
}
