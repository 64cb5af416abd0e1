#include "gabliteration/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "gabliteration/kernels.hpp"
#include "gabliteration/rng.hpp"

namespace gabl::verify {

using nlohmann::json;

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

double frobenius_diff(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b) {
    double sum = 0.0;
    for (const auto& [name, ta] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end() || !ta.same_shape(it->second)) {
            throw InvalidInputError("checkpoints are not structurally identical at tensor \"" +
                                    name + "\"");
        }
        for (std::size_t i = 0; i < ta.data.size(); ++i) {
            const double d = it->second.data[i] - ta.data[i];
            sum += d * d;
        }
    }
    if (a.tensors.size() != b.tensors.size()) {
        throw InvalidInputError("checkpoints have different tensor sets");
    }
    return std::sqrt(sum);
}

}  // namespace

std::string check_results_to_json(const std::vector<CheckResult>& results) {
    json arr = json::array();
    for (const auto& r : results) {
        arr.push_back({{"name", r.name},
                       {"claimed_bound", r.claimed_bound},
                       {"observed", r.observed},
                       {"passed", r.passed},
                       {"detail", r.detail}});
    }
    return arr.dump(2) + "\n";
}

Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    if (cols > rows) {
        throw InvalidInputError("random_orthonormal: more columns than rows");
    }
    rng::Rng rng(seed);
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.normal();
    // Modified Gram-Schmidt, two passes for orthogonality at machine level.
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < cols; ++j) {
            for (std::size_t p = 0; p < j; ++p) {
                double proj = 0.0;
                for (std::size_t i = 0; i < rows; ++i) proj += m(i, j) * m(i, p);
                for (std::size_t i = 0; i < rows; ++i) m(i, j) -= proj * m(i, p);
            }
            double norm2 = 0.0;
            for (std::size_t i = 0; i < rows; ++i) norm2 += m(i, j) * m(i, j);
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t i = 0; i < rows; ++i) m(i, j) *= inv;
        }
    }
    return m;
}

dirs::DirectionSet basis_with_spectrum(std::size_t d, const std::vector<double>& singular_values,
                                       std::uint64_t seed) {
    const std::size_t k = singular_values.size();
    if (k < 1 || k > d) {
        throw InvalidInputError("basis_with_spectrum: need 1 <= k <= d singular values");
    }
    Matrix u = random_orthonormal(d, k, seed);
    Matrix v = random_orthonormal(k, k, seed ^ 0x517cc1b727220a95ull);
    dirs::DirectionSet out;
    out.method = dirs::Method::svd_pairing;
    out.singular_values = singular_values;
    out.basis = Matrix(d, k);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += u(i, p) * singular_values[p] * v(j, p);
            }
            out.basis(i, j) = s;
        }
    }
    return out;
}

CheckResult check_projection_error(std::size_t d, std::size_t k,
                                   const std::vector<double>& singular_values, double lambda) {
    if (singular_values.size() != k) {
        throw InvalidInputError("check_projection_error: k does not match singular value count");
    }
    for (double s : singular_values) {
        if (!(s > 0.0)) {
            throw InvalidInputError("check_projection_error: singular values must be positive");
        }
    }
    const dirs::DirectionSet basis = basis_with_spectrum(d, singular_values, 0xce11);
    const Matrix p_reg = dirs::materialize_projection(dirs::build_ridge_projection(basis, lambda));
    const Matrix p_exact = dirs::materialize_projection(dirs::build_ridge_projection(basis, 0.0));
    const Matrix delta = kernels::sub_scaled(p_reg, p_exact, 1.0);
    const double observed = linalg::spectral_norm(delta, 1e-10);

    const double sig_min = *std::min_element(singular_values.begin(), singular_values.end());
    const double claimed = lambda / (sig_min * sig_min + lambda);

    CheckResult r;
    r.name = "projection_error";
    r.claimed_bound = claimed;
    r.observed = observed;
    r.passed = lambda == 0.0 ? observed <= 1e-12
                             : std::abs(observed - claimed) <= 1e-8 * claimed;
    r.detail = "sigma_min=" + fmt(sig_min) + " lambda=" + fmt(lambda) + " d=" +
               std::to_string(d) + " k=" + std::to_string(k);
    return r;
}

CheckResult check_condition_number(const std::vector<double>& singular_values, double lambda) {
    if (singular_values.empty()) {
        throw InvalidInputError("check_condition_number: need singular values");
    }
    const std::size_t k = singular_values.size();
    const double sig_max = *std::max_element(singular_values.begin(), singular_values.end());
    const double sig_min = *std::min_element(singular_values.begin(), singular_values.end());

    CheckResult r;
    r.name = "condition_number";
    if (lambda == 0.0 && sig_min == 0.0) {
        r.claimed_bound = std::numeric_limits<double>::infinity();
        r.observed = std::numeric_limits<double>::infinity();
        r.passed = false;
        r.detail = "unbounded: lambda = 0 with a zero singular value";
        return r;
    }

    // Regularized Gram matrix with the prescribed spectrum, rotated by a
    // seeded orthogonal matrix so the eigensolve does real work.
    Matrix v = random_orthonormal(k, k, 0xc07du);
    Matrix gram(k, k);
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += v(a, p) * (singular_values[p] * singular_values[p] + lambda) * v(b, p);
            }
            gram(a, b) = s;
        }
    }
    const linalg::SvdResult eig = linalg::svd_thin(gram);
    const double observed = eig.singular_values.front() / eig.singular_values.back();
    const double claimed = (sig_max * sig_max + lambda) / (sig_min * sig_min + lambda);
    const double stability_bound =
        lambda > 0.0 ? sig_max * sig_max / lambda + 1.0 : std::numeric_limits<double>::infinity();

    r.claimed_bound = claimed;
    r.observed = observed;
    r.passed = std::abs(observed - claimed) <= 1e-10 * claimed && observed <= stability_bound;
    r.detail = "stability_bound=" + fmt(stability_bound) + " lambda=" + fmt(lambda);
    return r;
}

std::vector<CheckResult> check_equivalence(const Matrix& w, const dirs::DirectionSet& directions,
                                           const std::vector<double>& lambda_sweep) {
    const linalg::SvdResult basis_svd = linalg::svd_thin(directions.basis);
    const double sig_min = basis_svd.singular_values.back();
    const double sig_max = basis_svd.singular_values.front();
    if (sig_min <= 1e-12 * std::max(sig_max, 1.0)) {
        throw InvalidInputError("check_equivalence: basis must have full column rank");
    }
    const Matrix& rt = basis_svd.u;  // orthonormal, same span
    Matrix exact_removed = kernels::matmul(kernels::matmul(w, rt), kernels::transpose(rt));
    const double w_fro = linalg::frobenius_norm(w);

    std::vector<CheckResult> out;
    std::vector<std::pair<double, double>> positive;  // (lambda, diff)
    for (double lambda : lambda_sweep) {
        const dirs::FactoredProjection proj = dirs::build_ridge_projection(directions, lambda);
        const Matrix wp = dirs::apply_projection_right(w, proj);
        // (W - W P) - W (I - Rt Rt^T) = W Rt Rt^T - W P
        const Matrix gap = kernels::sub_scaled(exact_removed, wp, 1.0);
        const double diff = linalg::frobenius_norm(gap);
        const double bound = w_fro * lambda / (sig_min * sig_min + lambda);

        CheckResult r;
        r.observed = diff;
        if (lambda == 0.0) {
            r.name = "equivalence_lambda_exact";
            r.claimed_bound = 1e-10;
            r.passed = diff <= 1e-10;
        } else {
            std::ostringstream name;
            name << "equivalence_lambda_" << lambda;
            r.name = name.str();
            r.claimed_bound = bound;
            r.passed = diff <= bound * (1.0 + 1e-9) + 1e-12;
            positive.emplace_back(lambda, diff);
        }
        r.detail = "sigma_min=" + fmt(sig_min);
        out.push_back(r);
    }

    if (positive.size() >= 2) {
        std::sort(positive.begin(), positive.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });
        bool monotone = true;
        for (std::size_t i = 0; i + 1 < positive.size(); ++i) {
            if (!(positive[i].second > positive[i + 1].second)) monotone = false;
        }
        CheckResult r;
        r.name = "equivalence_monotone_in_lambda";
        r.claimed_bound = 0.0;
        r.observed = monotone ? 1.0 : 0.0;
        r.passed = monotone;
        r.detail = "differences strictly decrease as lambda decreases";
        out.push_back(r);
    }
    return out;
}

CheckResult check_modification_bound(const ckpt::Checkpoint& before, const ckpt::Checkpoint& after,
                                     const std::map<std::size_t, double>& layer_alphas,
                                     const dirs::FactoredProjection& proj) {
    const double lhs = frobenius_diff(before, after);

    double sq_sum = 0.0;
    double tri_sum = 0.0;
    double max_term = 0.0;
    double alpha_max = 0.0;
    for (const auto& [layer, alpha] : layer_alphas) {
        const auto keys = ckpt::resolve_weight_keys(before.config, layer - 1);
        double c2 = 0.0;
        for (const std::string& name : {keys.attn_out, keys.mlp_down}) {
            auto it = before.tensors.find(name);
            if (it == before.tensors.end()) {
                throw InvalidInputError("check_modification_bound: missing tensor \"" + name +
                                        "\"");
            }
            const Matrix wp = dirs::apply_projection_right(it->second, proj);
            const double n = linalg::frobenius_norm(wp);
            c2 += n * n;
        }
        const double c = std::sqrt(c2);
        sq_sum += alpha * alpha * c2;
        tri_sum += alpha * c;
        max_term = std::max(max_term, c);
        alpha_max = std::max(alpha_max, alpha);
    }
    const double sqrt_form = std::sqrt(sq_sum);
    const double corollary =
        static_cast<double>(layer_alphas.size()) * alpha_max * max_term;

    CheckResult r;
    r.name = "modification_bound";
    r.claimed_bound = tri_sum;
    r.observed = lhs;
    const double tol = 1e-9 * std::max(1.0, sqrt_form);
    r.passed = std::abs(lhs - sqrt_form) <= tol && lhs <= tri_sum + tol && lhs <= corollary + tol;
    r.detail = "sqrt_form=" + fmt(sqrt_form) + " triangle_sum=" + fmt(tri_sum) +
               " corollary_bound=" + fmt(corollary);
    return r;
}

CheckResult check_preservation_bound(std::size_t d, std::size_t k, double theta, double alpha,
                                     double lambda, std::uint64_t seed) {
    constexpr double kSigma = 5.0;
    if (theta < 0.0 || theta > std::numbers::pi / 2.0 + 1e-12) {
        throw InvalidInputError("check_preservation_bound: theta must lie in [0, pi/2]");
    }
    if (d < k + 2) {
        throw InvalidInputError(
            "check_preservation_bound: need d >= k + 2 to hold both subspaces");
    }

    // Frame with k columns for the refusal basis plus one spare direction
    // orthogonal to it; rotating inside the shared plane gives the task
    // direction an exact principal angle theta.
    Matrix frame = random_orthonormal(d, k + 1, seed);
    std::vector<double> sv(k, kSigma);
    Matrix v_rot = random_orthonormal(k, k, seed ^ 0xabcdull);
    dirs::DirectionSet basis;
    basis.method = dirs::Method::svd_pairing;
    basis.singular_values = sv;
    basis.basis = Matrix(d, k);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += frame(i, p) * kSigma * v_rot(j, p);
            basis.basis(i, j) = s;
        }
    }

    std::vector<double> task_dir(d);
    const double c = std::cos(theta), s = std::sin(theta);
    for (std::size_t i = 0; i < d; ++i) {
        task_dir[i] = c * frame(i, 0) + s * frame(i, k);
    }

    rng::Rng rng(seed ^ 0x7a5cull);
    const std::size_t rows = 8;
    Matrix w_task(rows, d);
    double y_norm2 = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double y = rng.normal();
        y_norm2 += y * y;
        for (std::size_t j = 0; j < d; ++j) w_task(i, j) = y * task_dir[j];
    }
    const double w_fro = std::sqrt(y_norm2);  // task direction is unit norm

    const dirs::FactoredProjection proj = dirs::build_ridge_projection(basis, lambda);
    const Matrix wp = dirs::apply_projection_right(w_task, proj);
    const double observed = alpha * linalg::frobenius_norm(wp);

    const double reg_factor = kSigma * kSigma / (kSigma * kSigma + lambda);
    const double bound = alpha * w_fro * std::cos(theta) * reg_factor;
    const double fro_mass = static_cast<double>(k) * kSigma * kSigma;
    const double fro_variant = alpha * w_fro * std::cos(theta) * fro_mass / (fro_mass + lambda);

    CheckResult r;
    r.name = "preservation_bound";
    r.claimed_bound = bound;
    r.observed = observed;
    if (theta >= std::numbers::pi / 2.0 - 1e-12) {
        // cos(pi/2) underflows to ~6e-17; the orthogonality corollary is
        // asserted as an absolute zero tolerance instead.
        r.claimed_bound = 1e-10;
        r.passed = observed <= 1e-10;
    } else {
        // Exact by construction (uniform spectrum), so demand agreement,
        // not just the inequality.
        r.passed = observed <= bound + 1e-9 && std::abs(observed - bound) <= 1e-6 * bound + 1e-12;
    }
    r.detail = "theta=" + fmt(theta) + " alpha=" + fmt(alpha) + " lambda=" + fmt(lambda) +
               " fro_mass_variant=" + fmt(fro_variant) + " (reported, not asserted)";
    return r;
}

namespace {

// Bounded sample: direction uniform on the sphere, radius R * u^(1/d)
// (uniform in the ball).
void sample_bounded(rng::Rng& rng, double radius, std::vector<double>& out) {
    const std::size_t d = out.size();
    double norm2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        out[i] = rng.normal();
        norm2 += out[i] * out[i];
    }
    const double r = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
    const double scale = norm2 > 0.0 ? r / std::sqrt(norm2) : 0.0;
    for (double& x : out) x *= scale;
}

std::vector<double> concentration_trials(std::size_t n, std::size_t d, double radius,
                                         std::size_t trials, std::uint64_t seed) {
    std::vector<double> stats(trials);
    rng::Rng root(seed);
    const std::int64_t count = static_cast<std::int64_t>(trials);
#pragma omp parallel for schedule(static)
    for (std::int64_t t = 0; t < count; ++t) {
        rng::Rng rng = root.derive(static_cast<std::uint64_t>(t));
        std::vector<double> x(d), mu_h(d, 0.0), mu_n(d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            sample_bounded(rng, radius, x);
            for (std::size_t j = 0; j < d; ++j) mu_h[j] += x[j];
            sample_bounded(rng, radius, x);
            for (std::size_t j = 0; j < d; ++j) mu_n[j] += x[j];
        }
        double s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = (mu_h[j] - mu_n[j]) / static_cast<double>(n);
            s2 += diff * diff;
        }
        stats[static_cast<std::size_t>(t)] = std::sqrt(s2);
    }
    return stats;
}

}  // namespace

CheckResult concentration_probe(std::size_t n, std::size_t d, double radius, std::size_t trials,
                                double delta, std::uint64_t seed) {
    if (trials < 100) {
        throw InvalidInputError("concentration_probe: need at least 100 trials");
    }
    const std::vector<double> stats = concentration_trials(n, d, radius, trials, seed);
    double mean = 0.0;
    for (double s : stats) mean += s;
    mean /= static_cast<double>(trials);

    const double bound = 2.0 * radius * std::sqrt(2.0 * std::log(4.0 / delta) /
                                                  static_cast<double>(n));
    std::size_t exceed = 0;
    double mad = 0.0;
    for (double s : stats) {
        const double dev = std::abs(s - mean);
        mad += dev;
        if (dev > bound) ++exceed;
    }
    mad /= static_cast<double>(trials);
    const double freq = static_cast<double>(exceed) / static_cast<double>(trials);

    CheckResult r;
    r.name = "concentration_probe";
    r.claimed_bound = delta;
    r.observed = freq;
    r.passed = freq <= delta;
    r.detail = "deviation_bound=" + fmt(bound) + " mean_abs_deviation=" + fmt(mad) +
               " n=" + std::to_string(n);
    return r;
}

double concentration_deviation_scale(std::size_t n, std::size_t d, double radius,
                                     std::size_t trials, std::uint64_t seed) {
    const std::vector<double> stats = concentration_trials(n, d, radius, trials, seed);
    double mean = 0.0;
    for (double s : stats) mean += s;
    mean /= static_cast<double>(trials);
    double mad = 0.0;
    for (double s : stats) mad += std::abs(s - mean);
    return mad / static_cast<double>(trials);
}

CheckResult check_layer_selection_proxy(std::uint64_t seed) {
    const toy::PlantedModel planted = toy::build_planted_refusal_model(32, 8, 64, 3, seed);
    const auto& model = planted.checkpoint;
    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();
    constexpr std::size_t kTokens = 8;

    pipeline::GabliterationConfig cfg;
    cfg.seed = seed;
    const auto candidates = pipeline::candidate_layers(cfg, model.config.num_layers);
    const auto reports = pipeline::separability_scan(model, planted.vocab, planted.harmful_prompts,
                                                     planted.harmless_prompts, candidates);
    std::size_t argmax_layer = 0;
    double best = -1.0;
    for (const auto& r : reports) {
        if (r.separability > best) {
            best = r.separability;
            argmax_layer = r.layer;
        }
    }

    const auto harmful_tok = toy::tokenize_prompts(planted.vocab, planted.harmful_prompts);
    const auto harmless_tok = toy::tokenize_prompts(planted.vocab, planted.harmless_prompts);
    const auto h_h = toy::extract_hidden_states(model, harmful_tok, argmax_layer);
    const auto h_n = toy::extract_hidden_states(model, harmless_tok, argmax_layer);
    const Matrix diff = dirs::build_difference_matrix(h_h, h_n, 3, seed);
    const auto directions = dirs::extract_directions_svd(diff, 1);
    const auto proj = dirs::build_ridge_projection(directions, 1e-4);

    const double rho_base = pipeline::refusal_rate(model, planted.vocab, planted.harmful_prompts,
                                                   lexicon, kTokens);
    const double rho_star =
        pipeline::evaluate_layer_refusal_rate(model, planted.vocab, argmax_layer, proj, 0.8,
                                              planted.harmful_prompts, lexicon, kTokens);
    const double reduction_star = rho_base - rho_star;

    double reduction_low = -1.0;
    for (std::size_t layer : {std::size_t{1}, std::size_t{2}}) {  // separability < 1e-6 here
        const double rho =
            pipeline::evaluate_layer_refusal_rate(model, planted.vocab, layer, proj, 0.8,
                                                  planted.harmful_prompts, lexicon, kTokens);
        reduction_low = std::max(reduction_low, rho_base - rho);
    }

    CheckResult r;
    r.name = "layer_selection_proxy";
    r.claimed_bound = reduction_low;
    r.observed = reduction_star;
    r.passed = reduction_star >= reduction_low - 1e-12;
    r.detail = "argmax_layer=" + std::to_string(argmax_layer) + " baseline_rate=" + fmt(rho_base);
    return r;
}

// ---------- hyperparameter sweep ----------

std::string SweepReport::to_json_string() const {
    json arr = json::array();
    for (const auto& p : points) {
        json e;
        e["alpha_base"] = p.alpha_base;
        e["beta"] = p.beta;
        e["lambda"] = p.lambda;
        if (p.error.empty()) {
            e["refusal_rate"] = p.refusal_rate;
            e["harmless_agreement"] = p.harmless_agreement;
            e["delta_w_fro"] = p.delta_w_fro;
        } else {
            e["error"] = p.error;
        }
        arr.push_back(e);
    }
    json j;
    j["points"] = arr;
    j["jacobian"] = {{"metrics", {"refusal_rate", "harmless_agreement", "delta_w_fro"}},
                     {"params", {"alpha_base", "beta", "lambda"}},
                     {"rows",
                      {{jacobian[0][0], jacobian[0][1], jacobian[0][2]},
                       {jacobian[1][0], jacobian[1][1], jacobian[1][2]},
                       {jacobian[2][0], jacobian[2][1], jacobian[2][2]}}}};
    j["lambda_fit"] = {{"slope", lambda_fit_slope},
                       {"residual", lambda_fit_residual},
                       {"residual_over_fit", lambda_fit_ratio}};
    return j.dump(2) + "\n";
}

SweepReport hyperparameter_sweep(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                 const std::vector<std::string>& harmful_prompts,
                                 const std::vector<std::string>& harmless_prompts,
                                 const pipeline::GabliterationConfig& base,
                                 const std::vector<double>& alpha_grid,
                                 const std::vector<double>& beta_grid,
                                 const std::vector<double>& lambda_grid) {
    if (alpha_grid.empty() || beta_grid.empty() || lambda_grid.empty()) {
        throw InvalidInputError("hyperparameter_sweep: grids must be non-empty");
    }
    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();
    SweepReport report;

    const std::size_t na = alpha_grid.size(), nb = beta_grid.size(), nl = lambda_grid.size();
    std::vector<SweepPoint> grid(na * nb * nl);
    auto at = [&](std::size_t ia, std::size_t ib, std::size_t il) -> SweepPoint& {
        return grid[(ia * nb + ib) * nl + il];
    };

    for (std::size_t ia = 0; ia < na; ++ia) {
        for (std::size_t ib = 0; ib < nb; ++ib) {
            for (std::size_t il = 0; il < nl; ++il) {
                SweepPoint& pt = at(ia, ib, il);
                pt.alpha_base = alpha_grid[ia];
                pt.beta = beta_grid[ib];
                pt.lambda = lambda_grid[il];
                pipeline::GabliterationConfig cfg = base;
                cfg.alpha_base = pt.alpha_base;
                cfg.beta = pt.beta;
                cfg.lambda = pt.lambda;
                try {
                    const auto res = pipeline::gabliterate(model, vocab, harmful_prompts,
                                                           harmless_prompts, cfg, lexicon);
                    pt.refusal_rate = pipeline::refusal_rate(res.checkpoint, vocab,
                                                             harmful_prompts, lexicon,
                                                             cfg.max_tokens);
                    pt.harmless_agreement = pipeline::harmless_agreement(
                        model, res.checkpoint, vocab, harmless_prompts, cfg.max_tokens);
                    pt.delta_w_fro = frobenius_diff(model, res.checkpoint);
                } catch (const Error& e) {
                    pt.error = e.what();
                }
            }
        }
    }
    report.points = grid;

    // Central finite differences at the grid center (one-sided at edges,
    // zero when an axis has a single point or a neighbor failed).
    const std::size_t ca = na / 2, cb = nb / 2, cl = nl / 2;
    auto metric = [&](const SweepPoint& p, int m) {
        return m == 0 ? p.refusal_rate : m == 1 ? p.harmless_agreement : p.delta_w_fro;
    };
    auto axis_diff = [&](int m, int axis) -> double {
        std::size_t lo_a = ca, hi_a = ca, lo_b = cb, hi_b = cb, lo_l = cl, hi_l = cl;
        double lo_x, hi_x;
        if (axis == 0) {
            if (na < 2) return 0.0;
            lo_a = ca > 0 ? ca - 1 : ca;
            hi_a = ca + 1 < na ? ca + 1 : ca;
            lo_x = alpha_grid[lo_a];
            hi_x = alpha_grid[hi_a];
        } else if (axis == 1) {
            if (nb < 2) return 0.0;
            lo_b = cb > 0 ? cb - 1 : cb;
            hi_b = cb + 1 < nb ? cb + 1 : cb;
            lo_x = beta_grid[lo_b];
            hi_x = beta_grid[hi_b];
        } else {
            if (nl < 2) return 0.0;
            lo_l = cl > 0 ? cl - 1 : cl;
            hi_l = cl + 1 < nl ? cl + 1 : cl;
            lo_x = lambda_grid[lo_l];
            hi_x = lambda_grid[hi_l];
        }
        const SweepPoint& lo = at(lo_a, lo_b, lo_l);
        const SweepPoint& hi = at(hi_a, hi_b, hi_l);
        if (!lo.error.empty() || !hi.error.empty() || hi_x == lo_x) return 0.0;
        return (metric(hi, m) - metric(lo, m)) / (hi_x - lo_x);
    };
    for (int m = 0; m < 3; ++m) {
        for (int axis = 0; axis < 3; ++axis) {
            report.jacobian[m][axis] = axis_diff(m, axis);
        }
    }

    // First-order behavior in lambda with the directions held fixed:
    // f(lambda) = || dW(lambda) - dW(0) ||_F against a through-origin line.
    {
        std::size_t extraction_layer;
        if (base.manual_layers) {
            extraction_layer = base.manual_layers->front();
        } else {
            const auto candidates =
                pipeline::candidate_layers(base, model.config.num_layers);
            const auto reports = pipeline::separability_scan(model, vocab, harmful_prompts,
                                                             harmless_prompts, candidates);
            extraction_layer = candidates.front();
            double best = -1.0;
            for (const auto& r : reports) {
                if (r.separability > best) {
                    best = r.separability;
                    extraction_layer = r.layer;
                }
            }
        }
        const auto harmful_tok = toy::tokenize_prompts(vocab, harmful_prompts);
        const auto harmless_tok = toy::tokenize_prompts(vocab, harmless_prompts);
        const auto h_h = toy::extract_hidden_states(model, harmful_tok, extraction_layer);
        const auto h_n = toy::extract_hidden_states(model, harmless_tok, extraction_layer);
        const Matrix diff = dirs::build_difference_matrix(h_h, h_n, base.num_shuffles, base.seed);
        const auto directions = dirs::extract_directions_svd(diff, base.k);

        const auto keys = ckpt::resolve_weight_keys(model.config, extraction_layer - 1);
        const Matrix& wa = model.tensors.at(keys.attn_out);
        const Matrix& wm = model.tensors.at(keys.mlp_down);
        const auto proj0 = dirs::build_ridge_projection(directions, 0.0);
        const Matrix wa0 = dirs::apply_projection_right(wa, proj0);
        const Matrix wm0 = dirs::apply_projection_right(wm, proj0);

        std::vector<double> xs, fs;
        for (double lambda : lambda_grid) {
            if (!(lambda > 0.0)) continue;
            const auto projl = dirs::build_ridge_projection(directions, lambda);
            const Matrix da = kernels::sub_scaled(dirs::apply_projection_right(wa, projl), wa0, 1.0);
            const Matrix dm = kernels::sub_scaled(dirs::apply_projection_right(wm, projl), wm0, 1.0);
            const double fa = linalg::frobenius_norm(da);
            const double fm = linalg::frobenius_norm(dm);
            xs.push_back(lambda);
            fs.push_back(std::sqrt(fa * fa + fm * fm));
        }
        double sxy = 0.0, sxx = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            sxy += xs[i] * fs[i];
            sxx += xs[i] * xs[i];
        }
        const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
        double res2 = 0.0, fit2 = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double fit = slope * xs[i];
            res2 += (fs[i] - fit) * (fs[i] - fit);
            fit2 += fit * fit;
        }
        report.lambda_fit_slope = slope;
        report.lambda_fit_residual = std::sqrt(res2);
        report.lambda_fit_ratio = fit2 > 0.0 ? std::sqrt(res2) / std::sqrt(fit2) : 0.0;
    }
    return report;
}

std::vector<CheckResult> run_all_checks(std::uint64_t seed, const std::string& filter) {
    std::vector<CheckResult> results;
    auto add = [&](CheckResult r, const std::string& suffix = "") {
        if (!suffix.empty()) r.name += "_" + suffix;
        results.push_back(std::move(r));
    };

    // Projection approximation error.
    add(check_projection_error(128, 2, {5.0, 5.0}, 0.1), "reference_regime");
    add(check_projection_error(32, 2, {5.0, 3.0}, 0.0), "zero_lambda");
    add(check_projection_error(16, 2, {2.0, 1.0}, 1.0), "formula");

    // Condition number of the regularized Gram matrix.
    add(check_condition_number({10.0, 1.0}, 0.1), "reference_regime");
    add(check_condition_number({4.0, 4.0, 4.0}, 0.5), "equal_sigma");
    add(check_condition_number({3.0, 1.0}, 1.0), "formula");

    // Equivalence with exact orthogonalization.
    {
        rng::Rng rng(seed ^ 0xe101u);
        Matrix w(16, 64);
        for (double& x : w.data) x = rng.normal();
        const auto basis = basis_with_spectrum(64, {2.0, 1.0, 0.7}, seed ^ 0xe102u);
        for (auto& r : check_equivalence(w, basis, {1e-2, 1e-4, 1e-6, 0.0})) {
            results.push_back(r);
        }
    }

    // Single-pass modification bound on a three-layer random edit.
    {
        const std::uint64_t mod_seed = 4;
        rng::Rng rng(mod_seed);
        ckpt::ModelConfig cfg;
        cfg.num_layers = 5;
        cfg.hidden_dim = 24;
        cfg.vocab_size = 8;
        cfg.mlp_dim = 24;
        cfg.layer_key_template = {{"attn_out", "layers.{i}.attn.wo"},
                                  {"mlp_down", "layers.{i}.mlp.down"}};
        cfg.residual_orientation = {{"attn_out", "cols"}, {"mlp_down", "cols"}};
        ckpt::Checkpoint before;
        before.config = cfg;
        for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
            for (const char* role : {"attn.wo", "mlp.down"}) {
                Matrix m(24, 24);
                for (double& x : m.data) x = rng.normal();
                const std::string name = "layers." + std::to_string(layer) + "." + role;
                before.tensors.emplace(name, std::move(m));
                before.dtype_map.emplace(name, ckpt::Dtype::F64);
            }
        }
        const auto basis = basis_with_spectrum(24, {3.0, 1.5}, mod_seed ^ 0xb0);
        const auto proj = dirs::build_ridge_projection(basis, 0.05);
        std::map<std::size_t, double> alphas;
        ckpt::Checkpoint after = before;
        std::size_t rank = 1;
        for (std::size_t layer : {std::size_t{2}, std::size_t{3}, std::size_t{4}}) {
            const double alpha = pipeline::adaptive_scale(rank, 3, 0.3, 0.5);
            after = pipeline::apply_layer_modification(after, layer, proj, alpha);
            alphas[layer] = alpha;
            ++rank;
        }
        add(check_modification_bound(before, after, alphas, proj), "three_layers");
    }

    // Preservation bound across principal angles.
    add(check_preservation_bound(32, 2, std::numbers::pi / 2.0, 0.3, 0.1, seed), "orthogonal");
    add(check_preservation_bound(32, 2, 0.0, 1.0, 0.0, seed), "aligned");
    add(check_preservation_bound(32, 2, std::numbers::pi / 3.0, 0.3, 0.1, seed), "pi_over_3");
    add(check_preservation_bound(32, 2, std::numbers::pi / 4.0, 0.3, 0.1, seed), "pi_over_4");
    add(check_preservation_bound(32, 2, std::numbers::pi / 6.0, 0.3, 0.1, seed), "pi_over_6");

    // Concentration of the separability statistic.
    add(concentration_probe(1024, 64, 1.0, 200, 0.05, seed));
    {
        const double scale_n = concentration_deviation_scale(1024, 64, 1.0, 200, seed);
        const double scale_4n = concentration_deviation_scale(4096, 64, 1.0, 200, seed + 1);
        CheckResult r;
        r.name = "concentration_sqrt_n_scaling";
        r.claimed_bound = 2.0;
        r.observed = scale_4n > 0.0 ? scale_n / scale_4n : 0.0;
        r.passed = r.observed >= 1.4 && r.observed <= 2.6;
        r.detail = "scale_n=" + fmt(scale_n) + " scale_4n=" + fmt(scale_4n) +
                   " (quadrupling n should halve the scale, within 30%)";
        results.push_back(r);
    }

    add(check_layer_selection_proxy(seed));

    // Pipeline-level sweep rows on the planted model.
    {
        const toy::PlantedModel planted = toy::build_planted_refusal_model(32, 8, 64, 3, seed);
        pipeline::GabliterationConfig base;
        base.seed = seed;
        base.k = 1;
        base.beta = 0.0;
        base.max_tokens = 8;
        base.manual_layers = std::vector<std::size_t>{3};
        const auto lexicon = pipeline::RefusalLexicon::default_lexicon();

        const double rho_baseline = pipeline::refusal_rate(
            planted.checkpoint, planted.vocab, planted.harmful_prompts, lexicon, base.max_tokens);

        SweepReport sweep = hyperparameter_sweep(
            planted.checkpoint, planted.vocab, planted.harmful_prompts, planted.harmless_prompts,
            base, {0.7, 0.85, 1.0}, {0.0}, {1e-4, 1e-3, 3.16e-3, 1e-2});

        // alpha_base = 0 leaves the model untouched.
        {
            pipeline::GabliterationConfig cfg = base;
            cfg.alpha_base = 0.0;
            cfg.lambda = 1e-3;
            const auto res = pipeline::gabliterate(planted.checkpoint, planted.vocab,
                                                   planted.harmful_prompts,
                                                   planted.harmless_prompts, cfg, lexicon);
            const double dw = frobenius_diff(planted.checkpoint, res.checkpoint);
            const double rho = pipeline::refusal_rate(res.checkpoint, planted.vocab,
                                                      planted.harmful_prompts, lexicon,
                                                      base.max_tokens);
            CheckResult r;
            r.name = "sweep_alpha_zero_identity";
            r.claimed_bound = 0.0;
            r.observed = dw;
            r.passed = dw == 0.0 && rho == rho_baseline;
            r.detail = "refusal_rate=" + fmt(rho) + " baseline=" + fmt(rho_baseline);
            results.push_back(r);
        }
        {
            bool increasing = true;
            double prev = -1.0;
            for (const auto& p : sweep.points) {
                if (p.lambda != 1e-3 || !p.error.empty()) continue;
                if (p.delta_w_fro <= prev) increasing = false;
                prev = p.delta_w_fro;
            }
            CheckResult r;
            r.name = "sweep_deltaw_monotone_in_alpha";
            r.claimed_bound = 0.0;
            r.observed = increasing ? 1.0 : 0.0;
            r.passed = increasing;
            r.detail = "||dW||_F strictly increases along the alpha_base grid";
            results.push_back(r);
        }
        {
            CheckResult r;
            r.name = "sweep_lambda_linear_fit";
            r.claimed_bound = 0.1;
            r.observed = sweep.lambda_fit_ratio;
            r.passed = sweep.lambda_fit_ratio <= 0.1;
            r.detail = "slope=" + fmt(sweep.lambda_fit_slope) +
                       " residual=" + fmt(sweep.lambda_fit_residual);
            results.push_back(r);
        }
    }

    if (filter != "all" && !filter.empty()) {
        std::vector<CheckResult> kept;
        for (auto& r : results) {
            if (r.name.rfind(filter, 0) == 0) kept.push_back(std::move(r));
        }
        return kept;
    }
    return results;
}

}  // namespace gabl::verify
