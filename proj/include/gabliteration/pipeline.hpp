#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gabliteration/checkpoint.hpp"
#include "gabliteration/directions.hpp"
#include "gabliteration/toy_model.hpp"

namespace gabl::pipeline {

// Five phases over a checkpoint: separability scan, layer selection
// (automatic or manual), per-layer effectiveness evaluation via refusal
// rate, adaptive scaling, single-pass weight modification. Layer indices
// are 1-based throughout this module.

struct GabliterationConfig {
    std::size_t k = 2;
    double lambda = 0.1;
    double alpha_base = 0.3;
    double tau = 0.8;
    double beta = 0.5;
    std::size_t skip_start = 2;
    std::size_t skip_end = 2;
    std::size_t max_tokens = 16;
    std::size_t num_shuffles = 3;
    std::uint64_t seed = 0;
    std::optional<std::vector<std::size_t>> manual_layers;

    void validate() const;
    std::string to_json_string() const;
};

struct LayerReport {
    std::size_t layer = 0;                // 1-based
    double separability = 0.0;            // S at this layer (0 when Phase 1 was skipped)
    std::optional<double> refusal_rate;   // filled by Phase 4
    std::optional<double> alpha;          // filled by Phase 5
    // After a scan: marks the argmax-separability layer. After the full
    // run: marks the layers that were actually modified.
    bool selected = false;
};

std::string reports_to_json(const std::vector<LayerReport>& reports, const std::string& status);

struct RefusalLexicon {
    std::vector<std::string> phrases;  // all lowercase

    void validate() const;
    static RefusalLexicon default_lexicon();
    static RefusalLexicon from_json_string(const std::string& text);
    std::string to_json_string() const;
};

// Candidate set {layer : skip_start < layer < L - skip_end}, 1-based.
// Throws ConfigError when the set is empty.
std::vector<std::size_t> candidate_layers(const GabliterationConfig& config, std::size_t L);

// One report per candidate layer with the Euclidean distance between mean
// last-token hidden states; the argmax layer (lowest index on ties) gets
// selected = true.
std::vector<LayerReport> separability_scan(const ckpt::Checkpoint& model,
                                           const toy::Vocabulary& vocab,
                                           const std::vector<std::string>& harmful_prompts,
                                           const std::vector<std::string>& harmless_prompts,
                                           const std::vector<std::size_t>& candidates);

// True iff any lexicon phrase is a substring of the lowercased text.
bool detect_refusal(const std::string& output_text, const RefusalLexicon& lexicon);

// Applies the trial edit W <- W - alpha (W P) to the attention output and
// MLP down projections at one layer (patch overlay; the checkpoint itself
// is untouched), generates greedily for every test prompt, and returns the
// fraction of continuations containing a refusal phrase.
double evaluate_layer_refusal_rate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                   std::size_t layer, const dirs::FactoredProjection& proj,
                                   double alpha, const std::vector<std::string>& test_prompts,
                                   const RefusalLexicon& lexicon, std::size_t max_tokens);

// Layers whose refusal rate stayed below tau, ascending.
std::vector<std::size_t> effective_layers(const std::vector<LayerReport>& reports, double tau);

// Position-dependent scaling over the effective set: maximal at the middle
// rank, alpha_base at the boundary ranks, alpha_base*(1+beta) when the set
// is a single layer. rank is the 1-based position in the ascending set.
double adaptive_scale(std::size_t rank, std::size_t m, double alpha_base, double beta);

// W <- W - alpha (W P) on both target matrices at one layer; every other
// tensor is carried over bit-identical.
ckpt::Checkpoint apply_layer_modification(const ckpt::Checkpoint& model, std::size_t layer,
                                          const dirs::FactoredProjection& proj, double alpha);

// W <- W (I - Rt Rt^T) with Rt the orthonormalized basis, applied to both
// target matrices at each listed layer.
ckpt::Checkpoint apply_exact_orthogonalization(const ckpt::Checkpoint& model,
                                               const std::vector<std::size_t>& layers,
                                               const dirs::DirectionSet& directions);

struct GabliterationResult {
    ckpt::Checkpoint checkpoint;
    std::vector<LayerReport> reports;
    dirs::DirectionSet directions;
    std::string status;                       // "ok" or a warning
    std::size_t extraction_layer = 0;         // 1-based
    double alpha_middle_over_boundary = 1.0;  // max/min applied alpha
    double phase_seconds[5] = {};             // wall clock per phase
};

// Phases 1-5 end to end. With manual_layers set, Phase 1 is skipped and
// directions are extracted at the first listed layer. An empty effective
// set is a soft outcome: the checkpoint comes back unmodified with a
// warning status. Deterministic given config.seed.
GabliterationResult gabliterate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                                const std::vector<std::string>& harmful_prompts,
                                const std::vector<std::string>& harmless_prompts,
                                const GabliterationConfig& config, const RefusalLexicon& lexicon);

// Fraction of prompts whose greedy continuations under the two models are
// token-identical.
double harmless_agreement(const ckpt::Checkpoint& model_a, const ckpt::Checkpoint& model_b,
                          const toy::Vocabulary& vocab, const std::vector<std::string>& prompts,
                          std::size_t max_tokens);

// Refusal rate of a model on a prompt set (no modification).
double refusal_rate(const ckpt::Checkpoint& model, const toy::Vocabulary& vocab,
                    const std::vector<std::string>& prompts, const RefusalLexicon& lexicon,
                    std::size_t max_tokens);

}  // namespace gabl::pipeline
