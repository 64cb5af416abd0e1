#include "gabliteration/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "gabliteration/kernels.hpp"
#include "gabliteration/rng.hpp"

namespace gabl::pipeline {

using nlohmann::json;

namespace {

constexpr std::size_t kTestPromptCap = 32;
constexpr std::uint64_t kTagTestPrompts = 0x7e57;

std::string lowercase(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// One forward per prompt, filling every requested layer's batch at once.
std::vector<toy::HiddenStateBatch> capture_batches(const ckpt::Checkpoint& model,
                                                   const std::vector<toy::TokenSequence>& prompts,
                                                   const std::vector<std::size_t>& layers) {
    std::vector<toy::HiddenStateBatch> batches(layers.size());
    for (std::size_t b = 0; b < layers.size(); ++b) {
        batches[b].layer = layers[b];
        batches[b].states = Matrix(prompts.size(), model.config.hidden_dim);
    }
    const std::int64_t count = static_cast<std::int64_t>(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < count; ++i) {
        const auto fwd = toy::forward_with_hidden_states(model, prompts[static_cast<std::size_t>(i)]);
        for (std::size_t b = 0; b < layers.size(); ++b) {
            const auto& state = fwd.per_layer_last[layers[b] - 1];
            std::copy(state.begin(), state.end(),
                      batches[b].states.row_ptr(static_cast<std::size_t>(i)));
        }
    }
    return batches;
}

double euclidean_mean_distance(const Matrix& a, const Matrix& b) {
    const std::size_t d = a.cols;
    double dist2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) ma += a(i, j);
        for (std::size_t i = 0; i < b.rows; ++i) mb += b(i, j);
        ma /= static_cast<double>(a.rows);
        mb /= static_cast<double>(b.rows);
        dist2 += (ma - mb) * (ma - mb);
    }
    return std::sqrt(dist2);
}

void check_layer_range(std::size_t layer, std::size_t L, const char* what) {
    if (layer < 1 || layer > L) {
        throw IndexError(std::string(what) + ": layer " + std::to_string(layer) +
                         " outside 1.." + std::to_string(L));
    }
}

// Trial edit for one layer, returned as a patch overlay.
toy::TensorPatch modification_patch(const ckpt::Checkpoint& model, std::size_t layer,
                                    const dirs::FactoredProjection& proj, double alpha) {
    const auto keys = ckpt::resolve_weight_keys(model.config, layer - 1);
    toy::TensorPatch patch;
    for (const std::string& name : {keys.attn_out, keys.mlp_down}) {
        auto it = model.tensors.find(name);
        if (it == model.tensors.end()) {
            throw ConfigError("checkpoint is missing tensor \"" + name + "\"");
        }
        Matrix wp = dirs::apply_projection_right(it->second, proj);
        patch.emplace(name, kernels::sub_scaled(it->second, wp, alpha));
    }
    return patch;
}

}  // namespace

// ---------- config / reports / lexicon ----------

void GabliterationConfig::validate() const {
    if (k < 1) throw ConfigError("config: k must be >= 1");
    if (lambda < 0.0) throw ConfigError("config: lambda must be >= 0");
    if (alpha_base < 0.0) throw ConfigError("config: alpha_base must be >= 0");
    // tau = 0 is legal and filters out every layer (no modification).
    if (tau < 0.0 || tau > 1.0) throw ConfigError("config: tau must be in [0, 1]");
    if (beta < 0.0) throw ConfigError("config: beta must be >= 0");
    if (max_tokens < 1) throw ConfigError("config: max_tokens must be >= 1");
    if (num_shuffles < 1) throw ConfigError("config: num_shuffles must be >= 1");
    if (manual_layers && manual_layers->empty()) {
        throw ConfigError("config: manual_layers, when given, must be non-empty");
    }
}

std::string GabliterationConfig::to_json_string() const {
    json j;
    j["k"] = k;
    j["lambda"] = lambda;
    j["alpha_base"] = alpha_base;
    j["tau"] = tau;
    j["beta"] = beta;
    j["skip_start"] = skip_start;
    j["skip_end"] = skip_end;
    j["max_tokens"] = max_tokens;
    j["num_shuffles"] = num_shuffles;
    j["seed"] = seed;
    if (manual_layers) j["manual_layers"] = *manual_layers;
    return j.dump();
}

std::string reports_to_json(const std::vector<LayerReport>& reports, const std::string& status) {
    json arr = json::array();
    for (const auto& r : reports) {
        json e;
        e["layer"] = r.layer;
        e["separability"] = r.separability;
        if (r.refusal_rate) e["refusal_rate"] = *r.refusal_rate;
        if (r.alpha) e["alpha"] = *r.alpha;
        e["selected"] = r.selected;
        arr.push_back(e);
    }
    json out;
    out["status"] = status;
    out["layers"] = arr;
    return out.dump(2) + "\n";
}

void RefusalLexicon::validate() const {
    if (phrases.empty()) throw ConfigError("refusal lexicon must not be empty");
    for (const auto& p : phrases) {
        if (p != lowercase(p)) {
            throw ConfigError("refusal lexicon phrase \"" + p + "\" must be lowercase");
        }
    }
}

RefusalLexicon RefusalLexicon::default_lexicon() {
    return RefusalLexicon{{"i cannot", "i apologize", "i'm unable", "i can't assist",
                           "i cannot provide", "i'm not able", "i cannot help"}};
}

RefusalLexicon RefusalLexicon::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("lexicon: invalid JSON: ") + e.what());
    }
    if (!j.is_array()) throw FormatError("lexicon: expected a JSON array of strings");
    RefusalLexicon lex{j.get<std::vector<std::string>>()};
    lex.validate();
    return lex;
}

std::string RefusalLexicon::to_json_string() const {
    return json(phrases).dump() + "\n";
}

// ---------- phases ----------

std::vector<std::size_t> candidate_layers(const GabliterationConfig& config, std::size_t L) {
    std::vector<std::size_t> out;
    for (std::size_t layer = config.skip_start + 1; layer + config.skip_end < L; ++layer) {
        out.push_back(layer);
    }
    if (out.empty()) {
        throw ConfigError("candidate layer set {layer : " + std::to_string(config.skip_start) +
                          " < layer < " + std::to_string(L) + " - " +
                          std::to_string(config.skip_end) + "} is empty");
    }
    return out;
}

std::vector<LayerReport> separability_scan(const ckpt::Checkpoint& model,
                                           const toy::Vocabulary& vocab,
                                           const std::vector<std::string>& harmful_prompts,
                                           const std::vector<std::string>& harmless_prompts,
                                           const std::vector<std::size_t>& candidates) {
    if (harmful_prompts.empty() || harmless_prompts.empty()) {
        throw InvalidInputError("separability_scan: prompt sets must be non-empty");
    }
    const std::size_t L = model.config.num_layers;
    for (std::size_t layer : candidates) check_layer_range(layer, L, "separability_scan");

    const auto harmful_tok = toy::tokenize_prompts(vocab, harmful_prompts);
    const auto harmless_tok = toy::tokenize_prompts(vocab, harmless_prompts);
    const auto batches_h = capture_batches(model, harmful_tok, candidates);
    const auto batches_n = capture_batches(model, harmless_tok, candidates);

    std::vector<LayerReport> reports(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        reports[i].layer = candidates[i];
        reports[i].separability =
            euclidean_mean_distance(batches_h[i].states, batches_n[i].states);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].separability > reports[best].separability) best = i;
    }
    if (!reports.empty()) reports[best].selected = true;
    return reports;
}

bool detect_refusal(const std::string& output_text, const RefusalLexicon& lexicon) {
    const std::string lower = lowercase(output_text);
    for (const auto& phrase : lexicon.phrases) {
        if (lower.find(phrase) != std::string::npos) return true;
    }
    return false;
}

double evaluate_layer_refusal_rate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                   std::size_t layer, const dirs::FactoredProjection& proj,
                                   double alpha, const std::vector<std::string>& test_prompts,
                                   const RefusalLexicon& lexicon, std::size_t max_tokens) {
    if (test_prompts.empty()) {
        throw InvalidInputError("evaluate_layer_refusal_rate: empty test prompt set");
    }
    check_layer_range(layer, model.config.num_layers, "evaluate_layer_refusal_rate");
    const toy::TensorPatch patch = modification_patch(model, layer, proj, alpha);
    const auto tokens = toy::tokenize_prompts(vocab, test_prompts);

    std::size_t refusals = 0;
    const std::int64_t count = static_cast<std::int64_t>(tokens.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : refusals)
    for (std::int64_t i = 0; i < count; ++i) {
        const auto& prompt = tokens[static_cast<std::size_t>(i)];
        const toy::TokenSequence full = toy::generate_greedy(model, patch, prompt, max_tokens);
        toy::TokenSequence continuation;
        continuation.ids.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt.ids.size()),
                                full.ids.end());
        if (detect_refusal(vocab.decode(continuation), lexicon)) ++refusals;
    }
    return static_cast<double>(refusals) / static_cast<double>(tokens.size());
}

std::vector<std::size_t> effective_layers(const std::vector<LayerReport>& reports, double tau) {
    std::vector<std::size_t> out;
    for (const auto& r : reports) {
        if (!r.refusal_rate) {
            throw InvalidInputError("effective_layers: report for layer " +
                                    std::to_string(r.layer) + " has no refusal rate");
        }
        if (*r.refusal_rate < tau) out.push_back(r.layer);
    }
    std::sort(out.begin(), out.end());
    return out;
}

double adaptive_scale(std::size_t rank, std::size_t m, double alpha_base, double beta) {
    if (m < 1 || rank < 1 || rank > m) {
        throw InvalidInputError("adaptive_scale: rank " + std::to_string(rank) +
                                " outside 1.." + std::to_string(m));
    }
    if (m == 1) return alpha_base * (1.0 + beta);
    const double xi = (2.0 * static_cast<double>(rank) - static_cast<double>(m) - 1.0) /
                      (static_cast<double>(m) - 1.0);
    return alpha_base * (1.0 + beta * (1.0 - std::abs(xi)));
}

ckpt::Checkpoint apply_layer_modification(const ckpt::Checkpoint& model, std::size_t layer,
                                          const dirs::FactoredProjection& proj, double alpha) {
    check_layer_range(layer, model.config.num_layers, "apply_layer_modification");
    toy::TensorPatch patch = modification_patch(model, layer, proj, alpha);
    ckpt::Checkpoint out = model;
    for (auto& [name, m] : patch) {
        out.tensors[name] = std::move(m);
    }
    return out;
}

ckpt::Checkpoint apply_exact_orthogonalization(const ckpt::Checkpoint& model,
                                               const std::vector<std::size_t>& layers,
                                               const dirs::DirectionSet& directions) {
    const Matrix& basis = directions.basis;
    if (basis.rows < basis.cols) {
        throw InvalidInputError("apply_exact_orthogonalization: more directions than dimensions");
    }
    linalg::SvdResult svd = linalg::svd_thin(basis);
    const double smax = svd.singular_values.front();
    const double smin = svd.singular_values.back();
    if (smin <= 1e-10 * std::max(smax, 1.0)) {
        throw SingularityError("apply_exact_orthogonalization: basis is rank-deficient");
    }
    // Orthonormalized basis spans the same subspace as the left factor.
    const Matrix& rt = svd.u;           // d x k
    const Matrix rt_t = kernels::transpose(rt);

    ckpt::Checkpoint out = model;
    for (std::size_t layer : layers) {
        check_layer_range(layer, model.config.num_layers, "apply_exact_orthogonalization");
        const auto keys = ckpt::resolve_weight_keys(model.config, layer - 1);
        for (const std::string& name : {keys.attn_out, keys.mlp_down}) {
            auto it = out.tensors.find(name);
            if (it == out.tensors.end()) {
                throw ConfigError("checkpoint is missing tensor \"" + name + "\"");
            }
            Matrix wr = kernels::matmul(it->second, rt);
            Matrix removed = kernels::matmul(wr, rt_t);
            it->second = kernels::sub_scaled(it->second, removed, 1.0);
        }
    }
    return out;
}

GabliterationResult gabliterate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                const std::vector<std::string>& harmful_prompts,
                                const std::vector<std::string>& harmless_prompts,
                                const GabliterationConfig& config,
                                const RefusalLexicon& lexicon) {
    config.validate();
    lexicon.validate();
    if (harmful_prompts.empty() || harmless_prompts.empty()) {
        throw InvalidInputError("gabliterate: prompt sets must be non-empty");
    }
    const std::size_t L = model.config.num_layers;

    GabliterationResult result;
    result.status = "ok";

    using Clock = std::chrono::steady_clock;
    auto phase_start = Clock::now();
    auto mark_phase = [&](int phase) {
        const auto now = Clock::now();
        result.phase_seconds[phase] = std::chrono::duration<double>(now - phase_start).count();
        phase_start = now;
    };

    // Phase 1: candidate set and separability scan (skipped under manual
    // selection, which keeps full control with the caller).
    std::vector<std::size_t> candidates;
    std::size_t extraction_layer = 0;
    if (config.manual_layers) {
        candidates = *config.manual_layers;
        for (std::size_t layer : candidates) check_layer_range(layer, L, "gabliterate");
        extraction_layer = candidates.front();
        std::sort(candidates.begin(), candidates.end());
        candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
        result.reports.resize(candidates.size());
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            result.reports[i].layer = candidates[i];
        }
    } else {
        candidates = candidate_layers(config, L);
        result.reports =
            separability_scan(model, vocab, harmful_prompts, harmless_prompts, candidates);
        double best = -1.0;
        for (const auto& r : result.reports) {
            if (r.separability > best) {
                best = r.separability;
                extraction_layer = r.layer;
            }
        }
    }
    result.extraction_layer = extraction_layer;
    mark_phase(0);

    // Phase 2: multi-directional extraction at the selected layer.
    const auto harmful_tok = toy::tokenize_prompts(vocab, harmful_prompts);
    const auto harmless_tok = toy::tokenize_prompts(vocab, harmless_prompts);
    const auto h_h = toy::extract_hidden_states(model, harmful_tok, extraction_layer);
    const auto h_n = toy::extract_hidden_states(model, harmless_tok, extraction_layer);
    const Matrix diff = dirs::build_difference_matrix(h_h, h_n, config.num_shuffles, config.seed);
    result.directions = dirs::extract_directions_svd(diff, config.k);
    mark_phase(1);

    // Phase 3: ridge-regularized projection, factored.
    const dirs::FactoredProjection proj =
        dirs::build_ridge_projection(result.directions, config.lambda);
    mark_phase(2);

    // Phase 4: per-layer effectiveness on a seeded test subset. Layers are
    // independent; reports are assembled in layer order.
    std::vector<std::string> test_prompts;
    {
        rng::Rng rng(config.seed);
        const auto perm = rng.derive(kTagTestPrompts).permutation(harmful_prompts.size());
        const std::size_t take = std::min<std::size_t>(kTestPromptCap, harmful_prompts.size());
        for (std::size_t i = 0; i < take; ++i) test_prompts.push_back(harmful_prompts[perm[i]]);
    }
    const std::int64_t ncand = static_cast<std::int64_t>(candidates.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < ncand; ++i) {
        const double rho = evaluate_layer_refusal_rate(
            model, vocab, candidates[static_cast<std::size_t>(i)], proj, config.alpha_base,
            test_prompts, lexicon, config.max_tokens);
        result.reports[static_cast<std::size_t>(i)].refusal_rate = rho;
    }
    const std::vector<std::size_t> effective = effective_layers(result.reports, config.tau);
    mark_phase(3);

    // Phase 5: adaptive single-pass modification.
    if (effective.empty()) {
        result.status = "warning: effective layer set is empty; checkpoint returned unmodified";
        result.checkpoint = model;
        mark_phase(4);
        return result;
    }
    ckpt::Checkpoint modified = model;
    double alpha_min = 0.0, alpha_max = 0.0;
    for (std::size_t rank = 1; rank <= effective.size(); ++rank) {
        const std::size_t layer = effective[rank - 1];
        const double alpha = adaptive_scale(rank, effective.size(), config.alpha_base, config.beta);
        modified = apply_layer_modification(modified, layer, proj, alpha);
        for (auto& r : result.reports) {
            if (r.layer == layer) {
                r.alpha = alpha;
                r.selected = true;
            }
        }
        if (rank == 1) {
            alpha_min = alpha_max = alpha;
        } else {
            alpha_min = std::min(alpha_min, alpha);
            alpha_max = std::max(alpha_max, alpha);
        }
    }
    result.alpha_middle_over_boundary = alpha_min > 0.0 ? alpha_max / alpha_min : 1.0;
    result.checkpoint = std::move(modified);
    mark_phase(4);
    return result;
}

double harmless_agreement(const ckpt::Checkpoint& model_a, const ckpt::Checkpoint& model_b,
                          const toy::Vocabulary& vocab, const std::vector<std::string>& prompts,
                          std::size_t max_tokens) {
    if (prompts.empty()) {
        throw InvalidInputError("harmless_agreement: empty prompt set");
    }
    const auto tokens = toy::tokenize_prompts(vocab, prompts);
    std::size_t agree = 0;
    const std::int64_t count = static_cast<std::int64_t>(tokens.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : agree)
    for (std::int64_t i = 0; i < count; ++i) {
        const auto& prompt = tokens[static_cast<std::size_t>(i)];
        const auto out_a = toy::generate_greedy(model_a, prompt, max_tokens);
        const auto out_b = toy::generate_greedy(model_b, prompt, max_tokens);
        if (out_a.ids == out_b.ids) ++agree;
    }
    return static_cast<double>(agree) / static_cast<double>(tokens.size());
}

double refusal_rate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                    const std::vector<std::string>& prompts, const RefusalLexicon& lexicon,
                    std::size_t max_tokens) {
    if (prompts.empty()) {
        throw InvalidInputError("refusal_rate: empty prompt set");
    }
    const auto tokens = toy::tokenize_prompts(vocab, prompts);
    std::size_t refusals = 0;
    const std::int64_t count = static_cast<std::int64_t>(tokens.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : refusals)
    for (std::int64_t i = 0; i < count; ++i) {
        const auto& prompt = tokens[static_cast<std::size_t>(i)];
        const auto full = toy::generate_greedy(model, prompt, max_tokens);
        toy::TokenSequence continuation;
        continuation.ids.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt.ids.size()),
                                full.ids.end());
        if (detect_refusal(vocab.decode(continuation), lexicon)) ++refusals;
    }
    return static_cast<double>(refusals) / static_cast<double>(tokens.size());
}

}  // namespace gabl::pipeline
