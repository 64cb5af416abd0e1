#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gabliteration/checkpoint.hpp"
#include "gabliteration/directions.hpp"
#include "gabliteration/pipeline.hpp"

namespace gabl::verify {

// One numeric check: a claimed bound, the observed value, and whether the
// observed value satisfies the stated relation. Reproducible bit-for-bit
// under the same seed.
struct CheckResult {
    std::string name;
    double claimed_bound = 0.0;
    double observed = 0.0;
    bool passed = false;
    std::string detail;
};

std::string check_results_to_json(const std::vector<CheckResult>& results);

// Seeded d x k frame with orthonormal columns (Gaussian + modified
// Gram-Schmidt). Building block for prescribed-spectrum test matrices.
Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed);

// d x k basis with the given singular values.
dirs::DirectionSet basis_with_spectrum(std::size_t d, const std::vector<double>& singular_values,
                                       std::uint64_t seed);

// || P_lambda - P_exact ||_2 must equal lambda / (sigma_min^2 + lambda)
// within 1e-8 relative (1e-12 absolute when lambda = 0).
CheckResult check_projection_error(std::size_t d, std::size_t k,
                                   const std::vector<double>& singular_values, double lambda);

// Condition number of the regularized Gram matrix: equals
// (sigma_1^2 + lambda) / (sigma_k^2 + lambda) within 1e-10 relative and is
// bounded by sigma_1^2 / lambda + 1.
CheckResult check_condition_number(const std::vector<double>& singular_values, double lambda);

// || (W - W P_lambda) - W (I - Rt Rt^T) ||_F over a lambda sweep: each value
// bounded by ||W||_F * lambda / (sigma_min^2 + lambda), strictly decreasing
// as lambda decreases, exact at lambda = 0. One result per lambda plus a
// monotonicity row.
std::vector<CheckResult> check_equivalence(const Matrix& w, const dirs::DirectionSet& directions,
                                           const std::vector<double>& lambda_sweep);

// Global Frobenius change between two checkpoints must equal the
// sqrt-of-squares of the per-layer terms within 1e-9 and never exceed the
// triangle-inequality sum; the cardinality * alpha_max * max-term bound is
// reported alongside.
CheckResult check_modification_bound(const ckpt::Checkpoint& before, const ckpt::Checkpoint& after,
                                     const std::map<std::size_t, double>& layer_alphas,
                                     const dirs::FactoredProjection& proj);

// Task matrix with exact principal angle theta against span(R), singular
// values all 5: the task-component change obeys
// alpha * ||W_T||_F * cos(theta) * sigma^2 / (sigma^2 + lambda), and
// vanishes (<= 1e-10) at theta = pi/2. The Frobenius-mass variant of the
// factor is reported in the detail, not asserted.
CheckResult check_preservation_bound(std::size_t d, std::size_t k, double theta, double alpha,
                                     double lambda, std::uint64_t seed);

// Monte Carlo probe of the mean-difference concentration bound
// 2 R sqrt(2 log(4/delta) / n): the fraction of trials exceeding it must
// stay below delta.
CheckResult concentration_probe(std::size_t n, std::size_t d, double radius, std::size_t trials,
                                double delta, std::uint64_t seed);

// Mean absolute deviation of the separability statistic across trials;
// the probe's sqrt(n) scaling test compares this at n and 4n.
double concentration_deviation_scale(std::size_t n, std::size_t d, double radius,
                                     std::size_t trials, std::uint64_t seed);

// Constructive instance of separability-guided selection: on the planted
// model, modifying the argmax-separability layer reduces the refusal rate
// at least as much as modifying any near-zero-separability layer.
CheckResult check_layer_selection_proxy(std::uint64_t seed);

// ---------- hyperparameter sweep ----------

struct SweepPoint {
    double alpha_base = 0.0;
    double beta = 0.0;
    double lambda = 0.0;
    double refusal_rate = 0.0;
    double harmless_agreement = 0.0;
    double delta_w_fro = 0.0;
    std::string error;  // empty on success
};

struct SweepReport {
    std::vector<SweepPoint> points;
    // Central finite differences at the grid center:
    // rows = {refusal_rate, harmless_agreement, delta_w_fro},
    // cols = {alpha_base, beta, lambda}.
    double jacobian[3][3] = {};
    double lambda_fit_slope = 0.0;
    double lambda_fit_residual = 0.0;
    double lambda_fit_ratio = 0.0;  // residual / norm of fitted term

    std::string to_json_string() const;
};

// Runs the full pipeline at every grid point on the given model, measures
// refusal rate, harmless agreement, and total weight change, differentiates
// the metrics numerically, and fits ||dW(lambda) - dW(0)||_F against lambda
// (directions held fixed) to expose the first-order behavior in lambda.
SweepReport hyperparameter_sweep(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                 const std::vector<std::string>& harmful_prompts,
                                 const std::vector<std::string>& harmless_prompts,
                                 const pipeline::GabliterationConfig& base,
                                 const std::vector<double>& alpha_grid,
                                 const std::vector<double>& beta_grid,
                                 const std::vector<double>& lambda_grid);

// The whole suite. Names are stable; a prefix filter selects a subset
// ("all" keeps everything).
std::vector<CheckResult> run_all_checks(std::uint64_t seed, const std::string& filter = "all");

}  // namespace gabl::verify
