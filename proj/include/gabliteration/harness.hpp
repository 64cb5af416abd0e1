#pragma once

#include <string>
#include <vector>

#include "gabliteration/pipeline.hpp"

namespace gabl::harness {

// One row per extraction method, same columns as the ablation table:
// refusal-rate change, wall time, quality delta (harmless-agreement change
// against the unmodified model).
struct MethodRow {
    std::string method;
    double delta_rho = 0.0;
    double extraction_time_s = 0.0;
    double quality_delta = 0.0;
    dirs::DirectionSet directions;
    std::string error;  // empty on success
};

struct ComparisonReport {
    std::vector<MethodRow> rows;
    double baseline_refusal_rate = 0.0;
    std::string to_json_string() const;  // timings included; see manifest note in the CLI
};

// Extracts directions with every listed method at the same layer, runs the
// identical downstream phases (projection, effectiveness filter, adaptive
// modification) per method, and reports the table. Methods keep their own
// natural direction counts where the method defines one (mean difference
// is always a single direction). Needs at least two methods.
ComparisonReport compare_extraction_methods(const ckpt::Checkpoint& model,
                                            const toy::Vocabulary& vocab,
                                            const std::vector<std::string>& harmful_prompts,
                                            const std::vector<std::string>& harmless_prompts,
                                            const pipeline::GabliterationConfig& config,
                                            const std::vector<dirs::Method>& methods,
                                            const pipeline::RefusalLexicon& lexicon =
                                                pipeline::RefusalLexicon::default_lexicon());

// Projection build + apply timing at one dimension: median over `runs`
// repetitions of (build factored projection, apply it to a rows x d
// matrix `reps` times).
struct ProjectionTiming {
    std::size_t d = 0;
    std::size_t k = 0;
    double build_seconds = 0.0;
    double apply_seconds = 0.0;
};

ProjectionTiming time_projection_phase(std::size_t d, std::size_t k, std::size_t rows,
                                       std::size_t reps, std::size_t runs, std::uint64_t seed);

// The scaling study behind the complexity contract: times the projection
// phase at each dimension (3-run medians by default).
std::vector<ProjectionTiming> projection_scaling_study(const std::vector<std::size_t>& dims,
                                                       std::size_t k, std::uint64_t seed);

std::string timings_to_json(const std::vector<ProjectionTiming>& timings);

}  // namespace gabl::harness
