#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gabliteration/linalg.hpp"
#include "gabliteration/matrix.hpp"
#include "gabliteration/toy_model.hpp"

namespace gabl::dirs {

enum class Method { svd_pairing, fisher_lda, logistic_probe, mean_difference };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

// A d x k refusal basis. singular_values is empty for baseline methods
// that do not produce them.
struct DirectionSet {
    Matrix basis;                         // d x k, directions as columns
    std::vector<double> singular_values;  // length k or empty
    Method method = Method::svd_pairing;

    std::size_t k() const { return basis.cols; }
    std::size_t dim() const { return basis.rows; }
};

// Ridge-regularized projection onto span(basis), kept factored: the d x d
// matrix is never materialized. Applying to x solves the k x k regularized
// Gram system, so the operator is basis * (G + lambda I)^-1 * basis^T.
struct FactoredProjection {
    Matrix basis;                       // d x k
    linalg::CholeskyFactor gram_chol;   // factor of basis^T basis + lambda I
    double lambda = 0.0;
};

// Paired difference rows between two hidden-state batches at the same
// layer. For each of num_shuffles rounds both batches are independently
// permuted (counter-based seeded streams, so parallel evaluation matches
// sequential), the first n = min(n_h, n_n) rows are differenced, and all
// rounds are stacked: (num_shuffles * n) x d.
Matrix build_difference_matrix(const toy::HiddenStateBatch& h_harmful,
                               const toy::HiddenStateBatch& h_harmless,
                               std::size_t num_shuffles, std::uint64_t seed);

// Top-k right singular vectors of the difference matrix, with their
// singular values.
DirectionSet extract_directions_svd(const Matrix& diff, std::size_t k);

// Stores basis plus the Cholesky factor of (basis^T basis + lambda I).
// lambda = 0 demands full column rank; otherwise a SingularityError
// suggests raising lambda.
FactoredProjection build_ridge_projection(const DirectionSet& directions, double lambda);

// w * P computed as ((w * basis) * gram_solve) * basis^T; cost
// O(rows * k * d). w must have d columns.
Matrix apply_projection_right(const Matrix& w, const FactoredProjection& proj);

// P * x for a length-d vector (P is symmetric).
std::vector<double> apply_projection_vector(const std::vector<double>& x,
                                            const FactoredProjection& proj);

// Materialized d x d projection matrix. For verification and small-d
// oracles only; the modification path never calls this.
Matrix materialize_projection(const FactoredProjection& proj);

// Fisher discriminant directions. Direction 1 solves
// (S_w + ridge I) w = mu_h - mu_n with S_w the pooled within-class
// covariance; directions 2..k come from the SVD of the whitened paired
// difference matrix, Gram-Schmidt orthogonalized against earlier picks.
// ridge < 0 selects the default 1e-6 * trace(S_w) / d.
DirectionSet fisher_lda_directions(const toy::HiddenStateBatch& h_harmful,
                                   const toy::HiddenStateBatch& h_harmless, std::size_t k,
                                   double ridge);

// Binary logistic probe trained by full-batch gradient descent
// (harmful = 1, harmless = 0, zero init). Directions 2..k by deflation:
// project the data off earlier directions and retrain. raw_norms, when
// given, receives the pre-normalization weight norm per direction.
DirectionSet logistic_probe_directions(const toy::HiddenStateBatch& h_harmful,
                                       const toy::HiddenStateBatch& h_harmless, std::size_t k,
                                       std::size_t steps, double lr, std::uint64_t seed,
                                       std::vector<double>* raw_norms = nullptr);

// Normalized mean difference, single direction.
DirectionSet mean_difference_direction(const toy::HiddenStateBatch& h_harmful,
                                       const toy::HiddenStateBatch& h_harmless);

// JSON interchange: {"method", "k", "lambda"?, "singular_values",
// "basis"} with the basis flattened row-major d x k.
std::string directions_to_json(const DirectionSet& directions, double lambda = -1.0);
DirectionSet directions_from_json(const std::string& text);

}  // namespace gabl::dirs
