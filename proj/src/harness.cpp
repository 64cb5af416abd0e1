#include "gabliteration/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "gabliteration/kernels.hpp"
#include "gabliteration/rng.hpp"

namespace gabl::harness {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

std::string ComparisonReport::to_json_string() const {
    json arr = json::array();
    for (const auto& r : rows) {
        json e;
        e["method"] = r.method;
        if (r.error.empty()) {
            e["delta_rho"] = r.delta_rho;
            e["time_s"] = r.extraction_time_s;
            e["quality_delta"] = r.quality_delta;
            e["k"] = r.directions.k();
        } else {
            e["error"] = r.error;
        }
        arr.push_back(e);
    }
    json j;
    j["baseline_refusal_rate"] = baseline_refusal_rate;
    j["columns"] = {"method", "delta_rho", "time_s", "quality_delta"};
    j["rows"] = arr;
    return j.dump(2) + "\n";
}

ComparisonReport compare_extraction_methods(const ckpt::Checkpoint& model,
                                            const toy::Vocabulary& vocab,
                                            const std::vector<std::string>& harmful_prompts,
                                            const std::vector<std::string>& harmless_prompts,
                                            const pipeline::GabliterationConfig& config,
                                            const std::vector<dirs::Method>& methods,
                                            const pipeline::RefusalLexicon& lexicon) {
    if (methods.size() < 2) {
        throw UsageError("compare_extraction_methods: need at least two methods");
    }
    config.validate();
    lexicon.validate();

    // Shared extraction layer: manual override or separability argmax.
    std::size_t layer;
    if (config.manual_layers) {
        layer = config.manual_layers->front();
    } else {
        const auto candidates = pipeline::candidate_layers(config, model.config.num_layers);
        const auto reports = pipeline::separability_scan(model, vocab, harmful_prompts,
                                                         harmless_prompts, candidates);
        layer = candidates.front();
        double best = -1.0;
        for (const auto& r : reports) {
            if (r.separability > best) {
                best = r.separability;
                layer = r.layer;
            }
        }
    }

    const auto harmful_tok = toy::tokenize_prompts(vocab, harmful_prompts);
    const auto harmless_tok = toy::tokenize_prompts(vocab, harmless_prompts);
    const auto h_h = toy::extract_hidden_states(model, harmful_tok, layer);
    const auto h_n = toy::extract_hidden_states(model, harmless_tok, layer);

    ComparisonReport report;
    report.baseline_refusal_rate = pipeline::refusal_rate(model, vocab, harmful_prompts, lexicon,
                                                          config.max_tokens);

    for (dirs::Method method : methods) {
        MethodRow row;
        row.method = dirs::method_name(method);
        try {
            const auto start = Clock::now();
            switch (method) {
                case dirs::Method::svd_pairing: {
                    const Matrix diff = dirs::build_difference_matrix(h_h, h_n,
                                                                      config.num_shuffles,
                                                                      config.seed);
                    row.directions = dirs::extract_directions_svd(diff, config.k);
                    break;
                }
                case dirs::Method::fisher_lda:
                    row.directions = dirs::fisher_lda_directions(h_h, h_n, config.k, -1.0);
                    break;
                case dirs::Method::logistic_probe:
                    row.directions =
                        dirs::logistic_probe_directions(h_h, h_n, config.k, 500, 0.1, config.seed);
                    break;
                case dirs::Method::mean_difference:
                    row.directions = dirs::mean_difference_direction(h_h, h_n);
                    break;
            }
            row.extraction_time_s = seconds_since(start);

            // Identical post-extraction phases for every method.
            const auto proj = dirs::build_ridge_projection(row.directions, config.lambda);
            std::vector<pipeline::LayerReport> reports(1);
            reports[0].layer = layer;
            reports[0].refusal_rate = pipeline::evaluate_layer_refusal_rate(
                model, vocab, layer, proj, config.alpha_base, harmful_prompts, lexicon,
                config.max_tokens);
            const auto effective = pipeline::effective_layers(reports, config.tau);

            ckpt::Checkpoint modified = model;
            for (std::size_t rank = 1; rank <= effective.size(); ++rank) {
                const double alpha = pipeline::adaptive_scale(rank, effective.size(),
                                                              config.alpha_base, config.beta);
                modified =
                    pipeline::apply_layer_modification(modified, effective[rank - 1], proj, alpha);
            }
            const double rho_after = pipeline::refusal_rate(modified, vocab, harmful_prompts,
                                                            lexicon, config.max_tokens);
            row.delta_rho = rho_after - report.baseline_refusal_rate;
            row.quality_delta = pipeline::harmless_agreement(model, modified, vocab,
                                                             harmless_prompts,
                                                             config.max_tokens) -
                                1.0;
        } catch (const Error& e) {
            row.error = e.what();
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

ProjectionTiming time_projection_phase(std::size_t d, std::size_t k, std::size_t rows,
                                       std::size_t reps, std::size_t runs, std::uint64_t seed) {
    rng::Rng rng(seed);
    Matrix basis(d, k);
    for (double& x : basis.data) x = rng.normal();
    Matrix w(rows, d);
    for (double& x : w.data) x = rng.normal();
    dirs::DirectionSet directions;
    directions.basis = basis;

    std::vector<double> build_times, apply_times;
    for (std::size_t run = 0; run < runs; ++run) {
        auto start = Clock::now();
        dirs::FactoredProjection proj;
        for (std::size_t r = 0; r < reps; ++r) {
            proj = dirs::build_ridge_projection(directions, 0.1);
        }
        build_times.push_back(seconds_since(start));

        start = Clock::now();
        double sink = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            const Matrix wp = dirs::apply_projection_right(w, proj);
            sink += wp.data[0];
        }
        apply_times.push_back(seconds_since(start));
        volatile double guard = sink;  // keep the apply loop from being elided
        (void)guard;
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    ProjectionTiming t;
    t.d = d;
    t.k = k;
    t.build_seconds = median(build_times);
    t.apply_seconds = median(apply_times);
    return t;
}

std::vector<ProjectionTiming> projection_scaling_study(const std::vector<std::size_t>& dims,
                                                       std::size_t k, std::uint64_t seed) {
    std::vector<ProjectionTiming> out;
    constexpr std::size_t kRows = 2048;
    constexpr std::size_t kReps = 40;
    constexpr std::size_t kRuns = 3;
    for (std::size_t d : dims) {
        out.push_back(time_projection_phase(d, k, kRows, kReps, kRuns, seed));
    }
    return out;
}

std::string timings_to_json(const std::vector<ProjectionTiming>& timings) {
    json arr = json::array();
    for (const auto& t : timings) {
        arr.push_back({{"d", t.d},
                       {"k", t.k},
                       {"build_seconds", t.build_seconds},
                       {"apply_seconds", t.apply_seconds},
                       {"total_seconds", t.build_seconds + t.apply_seconds}});
    }
    return arr.dump(2) + "\n";
}

}  // namespace gabl::harness
