#include "gabliteration/directions.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "gabliteration/kernels.hpp"
#include "gabliteration/rng.hpp"

namespace gabl::dirs {

using nlohmann::json;

std::string method_name(Method m) {
    switch (m) {
        case Method::svd_pairing: return "svd_pairing";
        case Method::fisher_lda: return "fisher_lda";
        case Method::logistic_probe: return "logistic_probe";
        case Method::mean_difference: return "mean_difference";
    }
    throw InvalidInputError("unknown extraction method enum value");
}

Method method_from_name(const std::string& name) {
    if (name == "svd_pairing") return Method::svd_pairing;
    if (name == "fisher_lda") return Method::fisher_lda;
    if (name == "logistic_probe") return Method::logistic_probe;
    if (name == "mean_difference") return Method::mean_difference;
    throw InvalidInputError("unknown extraction method \"" + name + "\"");
}

namespace {

void check_batch_pair(const toy::HiddenStateBatch& a, const toy::HiddenStateBatch& b) {
    if (a.states.cols != b.states.cols) {
        throw InvalidInputError("hidden-state batches have different widths: " +
                                std::to_string(a.states.cols) + " vs " +
                                std::to_string(b.states.cols));
    }
    if (a.layer != b.layer) {
        throw InvalidInputError("hidden-state batches come from different layers: " +
                                std::to_string(a.layer) + " vs " + std::to_string(b.layer));
    }
}

std::vector<double> column_means(const Matrix& m) {
    std::vector<double> mu(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.row_ptr(i);
        for (std::size_t j = 0; j < m.cols; ++j) mu[j] += row[j];
    }
    for (double& v : mu) v /= static_cast<double>(m.rows);
    return mu;
}

// Sample covariance (n - 1 denominator), or zero matrix for n = 1.
Matrix sample_covariance(const Matrix& m, const std::vector<double>& mu) {
    const std::size_t d = m.cols;
    Matrix cov(d, d);
    if (m.rows < 2) return cov;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.row_ptr(i);
        for (std::size_t a = 0; a < d; ++a) {
            const double da = row[a] - mu[a];
            if (da == 0.0) continue;
            for (std::size_t b = 0; b < d; ++b) {
                cov(a, b) += da * (row[b] - mu[b]);
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(m.rows - 1);
    for (double& v : cov.data) v *= inv;
    return cov;
}

void normalize_column(Matrix& m, std::size_t col) {
    double norm2 = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) norm2 += m(i, col) * m(i, col);
    const double norm = std::sqrt(norm2);
    if (norm == 0.0) {
        throw DegenerateInputError("direction has zero norm");
    }
    for (std::size_t i = 0; i < m.rows; ++i) m(i, col) /= norm;
}

}  // namespace

Matrix build_difference_matrix(const toy::HiddenStateBatch& h_harmful,
                               const toy::HiddenStateBatch& h_harmless,
                               std::size_t num_shuffles, std::uint64_t seed) {
    check_batch_pair(h_harmful, h_harmless);
    if (num_shuffles < 1) {
        throw InvalidInputError("build_difference_matrix: num_shuffles must be >= 1");
    }
    const Matrix& hh = h_harmful.states;
    const Matrix& hn = h_harmless.states;
    const std::size_t n = std::min(hh.rows, hn.rows);
    const std::size_t d = hh.cols;

    Matrix diff(num_shuffles * n, d);
    rng::Rng root(seed);
    const std::int64_t rounds = static_cast<std::int64_t>(num_shuffles);
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < rounds; ++s) {
        const std::uint64_t us = static_cast<std::uint64_t>(s);
        auto perm_h = root.derive(2 * us).permutation(hh.rows);
        auto perm_n = root.derive(2 * us + 1).permutation(hn.rows);
        for (std::size_t i = 0; i < n; ++i) {
            double* row = diff.row_ptr(static_cast<std::size_t>(s) * n + i);
            const double* rh = hh.row_ptr(perm_h[i]);
            const double* rn = hn.row_ptr(perm_n[i]);
            for (std::size_t j = 0; j < d; ++j) row[j] = rh[j] - rn[j];
        }
    }
    return diff;
}

DirectionSet extract_directions_svd(const Matrix& diff, std::size_t k) {
    const std::size_t max_k = std::min(diff.rows, diff.cols);
    if (k < 1 || k > max_k) {
        throw InvalidInputError("extract_directions_svd: k = " + std::to_string(k) +
                                " outside 1.." + std::to_string(max_k));
    }
    linalg::SvdResult svd = linalg::svd_thin(diff);
    DirectionSet out;
    out.method = Method::svd_pairing;
    out.basis = Matrix(diff.cols, k);
    out.singular_values.assign(svd.singular_values.begin(), svd.singular_values.begin() + k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < diff.cols; ++i) {
            out.basis(i, j) = svd.vt(j, i);
        }
    }
    return out;
}

FactoredProjection build_ridge_projection(const DirectionSet& directions, double lambda) {
    if (lambda < 0.0) {
        throw InvalidInputError("build_ridge_projection: lambda must be >= 0");
    }
    directions.basis.require_finite("build_ridge_projection basis");
    const std::size_t k = directions.k();
    Matrix gram = kernels::matmul(kernels::transpose(directions.basis), directions.basis);
    for (std::size_t i = 0; i < k; ++i) gram(i, i) += lambda;

    FactoredProjection proj;
    proj.basis = directions.basis;
    proj.lambda = lambda;
    try {
        proj.gram_chol = linalg::cholesky(gram);
    } catch (const InvalidInputError&) {
        throw SingularityError(
            "regularized Gram matrix is singular; the basis is rank-deficient, use lambda > 0");
    }
    return proj;
}

Matrix apply_projection_right(const Matrix& w, const FactoredProjection& proj) {
    if (w.cols != proj.basis.rows) {
        throw InvalidInputError("apply_projection_right: w has " + std::to_string(w.cols) +
                                " columns, basis lives in dimension " +
                                std::to_string(proj.basis.rows));
    }
    Matrix wr = kernels::matmul(w, proj.basis);                       // rows x k
    Matrix solved = linalg::cholesky_solve(proj.gram_chol, kernels::transpose(wr));  // k x rows
    return kernels::matmul(kernels::transpose(solved), kernels::transpose(proj.basis));
}

std::vector<double> apply_projection_vector(const std::vector<double>& x,
                                            const FactoredProjection& proj) {
    Matrix row(1, x.size(), std::vector<double>(x));
    Matrix out = apply_projection_right(row, proj);
    return out.data;
}

Matrix materialize_projection(const FactoredProjection& proj) {
    return apply_projection_right(Matrix::identity(proj.basis.rows), proj);
}

DirectionSet fisher_lda_directions(const toy::HiddenStateBatch& h_harmful,
                                   const toy::HiddenStateBatch& h_harmless, std::size_t k,
                                   double ridge) {
    check_batch_pair(h_harmful, h_harmless);
    if (k < 1) throw InvalidInputError("fisher_lda_directions: k must be >= 1");
    const Matrix& hh = h_harmful.states;
    const Matrix& hn = h_harmless.states;
    const std::size_t d = hh.cols;
    if (k > d) throw InvalidInputError("fisher_lda_directions: k exceeds dimension");

    const std::vector<double> mu_h = column_means(hh);
    const std::vector<double> mu_n = column_means(hn);
    Matrix cov_h = sample_covariance(hh, mu_h);
    Matrix cov_n = sample_covariance(hn, mu_n);

    Matrix sw(d, d);
    for (std::size_t i = 0; i < d * d; ++i) sw.data[i] = 0.5 * (cov_h.data[i] + cov_n.data[i]);

    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) trace += sw(i, i);
    const double eff_ridge = ridge >= 0.0 ? ridge : 1e-6 * trace / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) sw(i, i) += eff_ridge;

    Matrix mu_diff(d, 1);
    for (std::size_t i = 0; i < d; ++i) mu_diff(i, 0) = mu_h[i] - mu_n[i];

    linalg::CholeskyFactor sw_chol;
    try {
        sw_chol = linalg::cholesky(sw);
    } catch (const InvalidInputError&) {
        throw SingularityError("within-class covariance is singular; use a positive ridge");
    }

    DirectionSet out;
    out.method = Method::fisher_lda;
    out.basis = Matrix(d, k);

    Matrix dir1 = linalg::cholesky_solve(sw_chol, mu_diff);
    for (std::size_t i = 0; i < d; ++i) out.basis(i, 0) = dir1(i, 0);
    normalize_column(out.basis, 0);

    if (k > 1) {
        // Whiten the paired difference rows with S_w^{-1/2} (eigenbasis of
        // the regularized S_w), take dominant right singular vectors, map
        // back, and Gram-Schmidt against the directions already picked.
        linalg::SvdResult sw_svd = linalg::svd_thin(sw);
        Matrix inv_sqrt(d, d);
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    s += sw_svd.u(a, j) * sw_svd.u(b, j) / std::sqrt(sw_svd.singular_values[j]);
                }
                inv_sqrt(a, b) = s;
            }
        }
        const std::size_t n = std::min(hh.rows, hn.rows);
        Matrix diff(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) diff(i, j) = hh(i, j) - hn(i, j);
        }
        linalg::SvdResult white_svd = linalg::svd_thin(kernels::matmul(diff, inv_sqrt));

        std::size_t filled = 1;
        for (std::size_t cand = 0; cand < white_svd.vt.rows && filled < k; ++cand) {
            std::vector<double> v(d, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    v[i] += inv_sqrt(i, j) * white_svd.vt(cand, j);
                }
            }
            for (std::size_t prev = 0; prev < filled; ++prev) {
                double proj = 0.0;
                for (std::size_t i = 0; i < d; ++i) proj += v[i] * out.basis(i, prev);
                for (std::size_t i = 0; i < d; ++i) v[i] -= proj * out.basis(i, prev);
            }
            double norm2 = 0.0;
            for (double x : v) norm2 += x * x;
            if (norm2 < 1e-16) continue;
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t i = 0; i < d; ++i) out.basis(i, filled) = v[i] * inv;
            ++filled;
        }
        if (filled < k) {
            throw DegenerateInputError("fisher_lda_directions: data supports only " +
                                       std::to_string(filled) + " of " + std::to_string(k) +
                                       " directions");
        }
    }
    return out;
}

DirectionSet logistic_probe_directions(const toy::HiddenStateBatch& h_harmful,
                                       const toy::HiddenStateBatch& h_harmless, std::size_t k,
                                       std::size_t steps, double lr, std::uint64_t seed,
                                       std::vector<double>* raw_norms) {
    check_batch_pair(h_harmful, h_harmless);
    if (steps < 1) throw InvalidInputError("logistic_probe_directions: steps must be >= 1");
    if (!(lr > 0.0)) throw InvalidInputError("logistic_probe_directions: lr must be > 0");
    if (k < 1 || k > h_harmful.states.cols) {
        throw InvalidInputError("logistic_probe_directions: k out of range");
    }
    (void)seed;  // training is deterministic (full batch, zero init); seed kept for interface parity

    const std::size_t d = h_harmful.states.cols;
    const std::size_t nh = h_harmful.states.rows;
    const std::size_t nn = h_harmless.states.rows;
    const std::size_t n = nh + nn;

    // Working copy of the data; deflation projects it off found directions.
    Matrix x(n, d);
    for (std::size_t i = 0; i < nh; ++i) {
        std::copy(h_harmful.states.row_ptr(i), h_harmful.states.row_ptr(i) + d, x.row_ptr(i));
    }
    for (std::size_t i = 0; i < nn; ++i) {
        std::copy(h_harmless.states.row_ptr(i), h_harmless.states.row_ptr(i) + d,
                  x.row_ptr(nh + i));
    }

    DirectionSet out;
    out.method = Method::logistic_probe;
    out.basis = Matrix(d, k);

    for (std::size_t dir = 0; dir < k; ++dir) {
        std::vector<double> w(d, 0.0);
        double bias = 0.0;
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<double> grad_w(d, 0.0);
            double grad_b = 0.0;
            double loss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* xi = x.row_ptr(i);
                double z = bias;
                for (std::size_t j = 0; j < d; ++j) z += w[j] * xi[j];
                const double p = 1.0 / (1.0 + std::exp(-z));
                const double y = i < nh ? 1.0 : 0.0;
                const double err = p - y;
                for (std::size_t j = 0; j < d; ++j) grad_w[j] += err * xi[j];
                grad_b += err;
                loss += y > 0.5 ? -std::log(std::max(p, 1e-300))
                                : -std::log(std::max(1.0 - p, 1e-300));
            }
            if (!std::isfinite(loss)) {
                throw NumericFailureError(
                    "logistic_probe_directions: loss diverged; reduce the learning rate");
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < d; ++j) w[j] -= lr * grad_w[j] * inv_n;
            bias -= lr * grad_b * inv_n;
        }
        for (double v : w) {
            if (!std::isfinite(v)) {
                throw NumericFailureError(
                    "logistic_probe_directions: weights diverged; reduce the learning rate");
            }
        }

        double norm2 = 0.0;
        for (double v : w) norm2 += v * v;
        if (raw_norms) raw_norms->push_back(std::sqrt(norm2));
        if (norm2 == 0.0) {
            throw DegenerateInputError(
                "logistic_probe_directions: training produced a zero weight vector");
        }
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::size_t i = 0; i < d; ++i) out.basis(i, dir) = w[i] * inv;

        if (dir + 1 < k) {
            for (std::size_t i = 0; i < n; ++i) {
                double* xi = x.row_ptr(i);
                double proj = 0.0;
                for (std::size_t j = 0; j < d; ++j) proj += xi[j] * out.basis(j, dir);
                for (std::size_t j = 0; j < d; ++j) xi[j] -= proj * out.basis(j, dir);
            }
        }
    }
    return out;
}

DirectionSet mean_difference_direction(const toy::HiddenStateBatch& h_harmful,
                                       const toy::HiddenStateBatch& h_harmless) {
    check_batch_pair(h_harmful, h_harmless);
    if (h_harmful.states.rows == 0 || h_harmless.states.rows == 0) {
        throw InvalidInputError("mean_difference_direction: empty batch");
    }
    const std::size_t d = h_harmful.states.cols;
    const std::vector<double> mu_h = column_means(h_harmful.states);
    const std::vector<double> mu_n = column_means(h_harmless.states);

    DirectionSet out;
    out.method = Method::mean_difference;
    out.basis = Matrix(d, 1);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        out.basis(i, 0) = mu_h[i] - mu_n[i];
        norm2 += out.basis(i, 0) * out.basis(i, 0);
    }
    if (norm2 == 0.0) {
        throw DegenerateInputError("mean_difference_direction: the class means coincide");
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t i = 0; i < d; ++i) out.basis(i, 0) *= inv;
    return out;
}

std::string directions_to_json(const DirectionSet& directions, double lambda) {
    json j;
    j["method"] = method_name(directions.method);
    j["k"] = directions.k();
    j["dim"] = directions.dim();
    if (lambda >= 0.0) j["lambda"] = lambda;
    j["singular_values"] = directions.singular_values;
    j["basis"] = directions.basis.data;  // row-major d x k
    return j.dump(2) + "\n";
}

DirectionSet directions_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("directions: invalid JSON: ") + e.what());
    }
    DirectionSet out;
    try {
        out.method = method_from_name(j.at("method").get<std::string>());
        const std::size_t k = j.at("k").get<std::size_t>();
        const std::size_t d = j.at("dim").get<std::size_t>();
        out.singular_values = j.at("singular_values").get<std::vector<double>>();
        out.basis = Matrix(d, k, j.at("basis").get<std::vector<double>>());
    } catch (const json::exception& e) {
        throw FormatError(std::string("directions: missing or mistyped field: ") + e.what());
    }
    return out;
}

}  // namespace gabl::dirs
