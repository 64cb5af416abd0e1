#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gabliteration/checkpoint.hpp"
#include "gabliteration/matrix.hpp"

namespace gabl::toy {

// Minimal deterministic decoder-only transformer: pre-norm residual blocks,
// weightless RMS normalization, single-head causal attention, two-matrix
// ReLU MLP, untied unembedding. Activations are row vectors, so every
// residual-writing matrix has the residual dimension as its columns and
// weight edits compose as right-multiplication.
//
// Tensor names: tok_embeddings [V,d], layers.{i}.attn.{wq,wk,wv,wo} [d,d],
// layers.{i}.mlp.up [d,mlp], layers.{i}.mlp.down [mlp,d], unembed [d,V].
// Layer indices are 1-based in this API; {i} in tensor names is 0-based.

struct TokenSequence {
    std::vector<std::size_t> ids;
};

// Fixed word-list vocabulary; decode joins words with single spaces.
// Token 0 is the end-of-sequence marker.
struct Vocabulary {
    std::vector<std::string> words;

    static constexpr std::size_t kEosId = 0;

    TokenSequence encode(const std::string& text) const;
    std::string decode(const TokenSequence& tokens) const;

    std::string to_json_string() const;
    static Vocabulary from_json_string(const std::string& text);
};

// Last-token hidden states for a batch of prompts at one layer.
struct HiddenStateBatch {
    std::size_t layer = 0;  // 1-based
    Matrix states;          // num_prompts x d
};

struct ForwardResult {
    Matrix logits;                                      // 1 x V, final position
    std::vector<std::vector<double>> per_layer_last;    // L entries, each length d
};

// Sparse overlay consulted before the checkpoint's tensor map. Lets a
// caller evaluate a trial weight edit while copying only the tensors it
// actually changed.
using TensorPatch = std::map<std::string, Matrix>;

// Final-position logits plus the post-block residual at the last token
// position for every layer.
ForwardResult forward_with_hidden_states(const ckpt::Checkpoint& model,
                                         const TokenSequence& tokens);
ForwardResult forward_with_hidden_states(const ckpt::Checkpoint& model, const TensorPatch& patch,
                                         const TokenSequence& tokens);

// Full residual capture: one positions x d matrix per layer. Used by the
// causality tests and by batch extraction.
std::vector<Matrix> forward_capture_all(const ckpt::Checkpoint& model,
                                        const TokenSequence& tokens);
std::vector<Matrix> forward_capture_all(const ckpt::Checkpoint& model, const TensorPatch& patch,
                                        const TokenSequence& tokens);

// Greedy decoding: appends up to max_tokens argmax tokens to the prompt,
// stopping after an end-of-sequence token. Ties break toward the lowest
// token id. Returns the extended sequence (prompt + generated).
TokenSequence generate_greedy(const ckpt::Checkpoint& model, const TokenSequence& prompt,
                              std::size_t max_tokens);
TokenSequence generate_greedy(const ckpt::Checkpoint& model, const TensorPatch& patch,
                              const TokenSequence& prompt, std::size_t max_tokens);

// Batch hidden-state extraction at one layer; prompts run in parallel and
// the result is bit-identical to sequential evaluation.
HiddenStateBatch extract_hidden_states(const ckpt::Checkpoint& model,
                                       const std::vector<TokenSequence>& prompts,
                                       std::size_t layer);

// Synthetic model with a known trigger -> direction -> refusal pathway.
struct PlantedSpec {
    std::size_t planted_layer = 0;            // 1-based
    std::vector<double> refusal_direction;    // unit vector in R^d
    std::size_t trigger_token = 0;
    std::vector<std::size_t> refusal_phrase;  // decodes to text containing a refusal keyword
    double write_magnitude = 0.0;             // guaranteed <state, r> for the emitted prompts
};

struct PlantedModel {
    ckpt::Checkpoint checkpoint;
    PlantedSpec spec;
    Vocabulary vocab;
    std::vector<std::string> harmful_prompts;   // trigger-bearing
    std::vector<std::string> harmless_prompts;  // matched, trigger-free
};

// Builds a model in which the MLP down-projection at planted_layer writes
// write_magnitude * r into the residual stream iff the trigger token
// appeared, the unembedding chains out the refusal phrase from r, and the
// harmless next-token echo task lives on coordinates orthogonal to r.
// Prompt sets are matched pairs (same words, trigger swapped in at a
// non-final position), 32 of each. Deterministic given the seed.
PlantedModel build_planted_refusal_model(std::size_t d, std::size_t num_layers,
                                         std::size_t vocab_size, std::size_t planted_layer,
                                         std::uint64_t seed);

// Prompt files: UTF-8 JSONL, one {"text": string} per line.
std::vector<std::string> load_prompts_jsonl(const std::string& path);
void save_prompts_jsonl(const std::vector<std::string>& prompts, const std::string& path);

void save_vocabulary(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocabulary(const std::string& path);

std::vector<TokenSequence> tokenize_prompts(const Vocabulary& vocab,
                                            const std::vector<std::string>& prompts);

}  // namespace gabl::toy
