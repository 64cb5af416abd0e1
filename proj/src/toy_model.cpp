#include "gabliteration/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gabliteration/kernels.hpp"
#include "gabliteration/rng.hpp"

namespace gabl::toy {

using nlohmann::json;

namespace {

constexpr double kRmsEps = 1e-6;

const TensorPatch& empty_patch() {
    static const TensorPatch patch;
    return patch;
}

const Matrix& tensor(const ckpt::Checkpoint& model, const TensorPatch& patch,
                     const std::string& name) {
    auto pit = patch.find(name);
    if (pit != patch.end()) return pit->second;
    auto it = model.tensors.find(name);
    if (it == model.tensors.end()) {
        throw ConfigError("model is missing tensor \"" + name + "\"");
    }
    return it->second;
}

std::string block_key(std::size_t block, const char* suffix) {
    return "layers." + std::to_string(block) + "." + suffix;
}

// Row-wise RMS normalization, no learned gain.
Matrix rmsnorm_rows(const Matrix& x) {
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row_ptr(i);
        double ms = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) ms += xi[j] * xi[j];
        ms /= static_cast<double>(x.cols);
        const double inv = 1.0 / std::sqrt(ms + kRmsEps);
        double* oi = out.row_ptr(i);
        for (std::size_t j = 0; j < x.cols; ++j) oi[j] = xi[j] * inv;
    }
    return out;
}

// Causal single-head attention over row activations.
Matrix attention(const Matrix& xh, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                 const Matrix& wo) {
    const std::size_t n = xh.rows;
    const std::size_t d = xh.cols;
    Matrix q = kernels::matmul(xh, wq);
    Matrix k = kernels::matmul(xh, wk);
    Matrix v = kernels::matmul(xh, wv);
    Matrix ctx(n, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores;
    for (std::size_t i = 0; i < n; ++i) {
        scores.assign(i + 1, 0.0);
        double smax = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            const double* qi = q.row_ptr(i);
            const double* kj = k.row_ptr(j);
            for (std::size_t c = 0; c < d; ++c) s += qi[c] * kj[c];
            scores[j] = s * scale;
            smax = std::max(smax, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            scores[j] = std::exp(scores[j] - smax);
            z += scores[j];
        }
        double* ci = ctx.row_ptr(i);
        for (std::size_t j = 0; j <= i; ++j) {
            const double p = scores[j] / z;
            const double* vj = v.row_ptr(j);
            for (std::size_t c = 0; c < d; ++c) ci[c] += p * vj[c];
        }
    }
    return kernels::matmul(ctx, wo);
}

Matrix relu(Matrix m) {
    for (double& x : m.data) x = x > 0.0 ? x : 0.0;
    return m;
}

void add_inplace(Matrix& a, const Matrix& b) {
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace

// ---------- vocabulary ----------

TokenSequence Vocabulary::encode(const std::string& text) const {
    TokenSequence out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        auto it = std::find(words.begin(), words.end(), word);
        if (it == words.end()) {
            throw InvalidInputError("unknown word \"" + word + "\" in prompt");
        }
        out.ids.push_back(static_cast<std::size_t>(it - words.begin()));
    }
    return out;
}

std::string Vocabulary::decode(const TokenSequence& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
        if (tokens.ids[i] >= words.size()) {
            throw InvalidInputError("token id " + std::to_string(tokens.ids[i]) +
                                    " outside vocabulary");
        }
        if (i > 0) out += ' ';
        out += words[tokens.ids[i]];
    }
    return out;
}

std::string Vocabulary::to_json_string() const {
    return json(words).dump() + "\n";
}

Vocabulary Vocabulary::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("vocabulary: invalid JSON: ") + e.what());
    }
    if (!j.is_array()) throw FormatError("vocabulary: expected a JSON array of strings");
    Vocabulary v;
    v.words = j.get<std::vector<std::string>>();
    return v;
}

// ---------- forward ----------

std::vector<Matrix> forward_capture_all(const ckpt::Checkpoint& model, const TensorPatch& patch,
                                        const TokenSequence& tokens) {
    const auto& cfg = model.config;
    if (tokens.ids.empty()) {
        throw InvalidInputError("forward: empty token sequence");
    }
    for (std::size_t id : tokens.ids) {
        if (id >= cfg.vocab_size) {
            throw InvalidInputError("forward: token id " + std::to_string(id) +
                                    " >= vocab_size " + std::to_string(cfg.vocab_size));
        }
    }
    const Matrix& emb = tensor(model, patch, "tok_embeddings");
    const std::size_t n = tokens.ids.size();
    const std::size_t d = cfg.hidden_dim;

    Matrix x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* e = emb.row_ptr(tokens.ids[i]);
        std::copy(e, e + d, x.row_ptr(i));
    }

    std::vector<Matrix> per_layer;
    per_layer.reserve(cfg.num_layers);
    for (std::size_t block = 0; block < cfg.num_layers; ++block) {
        Matrix attn_out =
            attention(rmsnorm_rows(x), tensor(model, patch, block_key(block, "attn.wq")),
                      tensor(model, patch, block_key(block, "attn.wk")),
                      tensor(model, patch, block_key(block, "attn.wv")),
                      tensor(model, patch, block_key(block, "attn.wo")));
        add_inplace(x, attn_out);
        Matrix h = relu(
            kernels::matmul(rmsnorm_rows(x), tensor(model, patch, block_key(block, "mlp.up"))));
        Matrix mlp_out = kernels::matmul(h, tensor(model, patch, block_key(block, "mlp.down")));
        add_inplace(x, mlp_out);
        per_layer.push_back(x);
    }
    return per_layer;
}

std::vector<Matrix> forward_capture_all(const ckpt::Checkpoint& model,
                                        const TokenSequence& tokens) {
    return forward_capture_all(model, empty_patch(), tokens);
}

ForwardResult forward_with_hidden_states(const ckpt::Checkpoint& model, const TensorPatch& patch,
                                         const TokenSequence& tokens) {
    std::vector<Matrix> states = forward_capture_all(model, patch, tokens);
    const std::size_t last = tokens.ids.size() - 1;
    const std::size_t d = model.config.hidden_dim;

    ForwardResult out;
    out.per_layer_last.reserve(states.size());
    for (const Matrix& layer_states : states) {
        const double* row = layer_states.row_ptr(last);
        out.per_layer_last.emplace_back(row, row + d);
    }
    Matrix final_row(1, d);
    std::copy(states.back().row_ptr(last), states.back().row_ptr(last) + d, final_row.row_ptr(0));
    out.logits = kernels::matmul(final_row, tensor(model, patch, "unembed"));
    return out;
}

ForwardResult forward_with_hidden_states(const ckpt::Checkpoint& model,
                                         const TokenSequence& tokens) {
    return forward_with_hidden_states(model, empty_patch(), tokens);
}

TokenSequence generate_greedy(const ckpt::Checkpoint& model, const TensorPatch& patch,
                              const TokenSequence& prompt, std::size_t max_tokens) {
    if (max_tokens < 1) {
        throw InvalidInputError("generate_greedy: max_tokens must be >= 1");
    }
    TokenSequence seq = prompt;
    for (std::size_t step = 0; step < max_tokens; ++step) {
        ForwardResult fwd = forward_with_hidden_states(model, patch, seq);
        std::size_t best = 0;
        double best_logit = fwd.logits(0, 0);
        for (std::size_t v = 1; v < fwd.logits.cols; ++v) {
            if (fwd.logits(0, v) > best_logit) {
                best_logit = fwd.logits(0, v);
                best = v;
            }
        }
        seq.ids.push_back(best);
        if (best == Vocabulary::kEosId) break;
    }
    return seq;
}

TokenSequence generate_greedy(const ckpt::Checkpoint& model, const TokenSequence& prompt,
                              std::size_t max_tokens) {
    return generate_greedy(model, empty_patch(), prompt, max_tokens);
}

HiddenStateBatch extract_hidden_states(const ckpt::Checkpoint& model,
                                       const std::vector<TokenSequence>& prompts,
                                       std::size_t layer) {
    if (layer < 1 || layer > model.config.num_layers) {
        throw IndexError("extract_hidden_states: layer " + std::to_string(layer) +
                         " outside 1.." + std::to_string(model.config.num_layers));
    }
    if (prompts.empty()) {
        throw InvalidInputError("extract_hidden_states: empty prompt set");
    }
    HiddenStateBatch batch;
    batch.layer = layer;
    batch.states = Matrix(prompts.size(), model.config.hidden_dim);
    const std::int64_t count = static_cast<std::int64_t>(prompts.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t i = 0; i < count; ++i) {
        ForwardResult fwd = forward_with_hidden_states(model, prompts[static_cast<std::size_t>(i)]);
        const std::vector<double>& state = fwd.per_layer_last[layer - 1];
        std::copy(state.begin(), state.end(), batch.states.row_ptr(static_cast<std::size_t>(i)));
    }
    return batch;
}

// ---------- planted model ----------

namespace {

const std::vector<std::string>& base_harmless_words() {
    static const std::vector<std::string> words = {
        "the",    "sun",    "rises",  "over",   "green",  "hills",   "a",       "quiet",
        "river",  "flows",  "past",   "old",    "stone",  "bridges", "birds",   "sing",
        "in",     "tall",   "trees",  "every",  "morning", "people", "walk",    "along",
        "sandy",  "paths",  "to",     "small",  "markets", "fresh",  "bread",   "smells",
        "warm",   "and",    "sweet",  "children", "play",  "near",   "blue",    "water",
        "soft",   "clouds", "drift",  "across", "wide",   "skies",   "gentle",  "winds",
        "carry",  "seeds",  "far",    "away",   "autumn", "leaves",  "fall",    "on",
        "mossy",  "ground", "winter", "snow",   "covers", "silent",  "fields",  "spring",
        "rain",   "feeds",  "young",  "plants", "summer", "light",   "lingers", "late",
        "farmers", "tend",  "rows",   "of",     "corn",   "cats",    "sleep",   "by",
        "open",   "windows", "dogs",  "chase",  "sticks", "through", "meadows", "stars",
        "shine",  "above",  "calm",   "lakes",  "boats"};
    return words;
}

// Phrase word ids 2..6; the decoded phrase contains the "i cannot" keyword.
const std::vector<std::string>& phrase_words() {
    static const std::vector<std::string> words = {"i", "cannot", "help", "with", "that"};
    return words;
}

constexpr std::size_t kTriggerId = 1;
constexpr std::size_t kFirstPhraseId = 2;
constexpr std::size_t kNumPhraseWords = 5;
constexpr std::size_t kNumReservedCoords = 2 + kNumPhraseWords;  // trigger flag, refusal, codes
constexpr std::size_t kPromptLen = 8;
constexpr std::size_t kPromptCount = 32;
constexpr double kRefusalWrite = 3.0;   // <state, r> at the planted layer for the prompts
constexpr double kChainGain = 6.0;      // phrase-chain unembedding gain
constexpr double kEmbeddingCosCap = 0.9;

}  // namespace

PlantedModel build_planted_refusal_model(std::size_t d, std::size_t num_layers,
                                         std::size_t vocab_size, std::size_t planted_layer,
                                         std::uint64_t seed) {
    if (d < 16 || vocab_size < 32) {
        throw InvalidInputError("planted model needs d >= 16 and vocab_size >= 32");
    }
    if (planted_layer < 1 || planted_layer + 1 >= num_layers) {
        throw InvalidInputError("planted_layer must satisfy 1 <= layer < num_layers - 1");
    }
    if (d <= kNumReservedCoords) {
        throw ConstructionError(
            "harmless vocabulary embeddings would span all of R^d; no direction can stay "
            "orthogonal to them");
    }

    PlantedModel out;
    Vocabulary& vocab = out.vocab;
    vocab.words.reserve(vocab_size);
    vocab.words.push_back("<eos>");
    vocab.words.push_back("forbidden");  // trigger
    for (const auto& w : phrase_words()) vocab.words.push_back(w);
    const std::size_t num_harmless = vocab_size - vocab.words.size();
    const auto& base = base_harmless_words();
    for (std::size_t i = 0; i < num_harmless; ++i) {
        vocab.words.push_back(i < base.size() ? base[i] : "item" + std::to_string(i));
    }

    const std::size_t first_harmless = kFirstPhraseId + kNumPhraseWords;  // vocab id 7

    // Embeddings. Reserved coordinates: 0 trigger flag, 1 refusal write,
    // 2..6 phrase codes. Harmless words get random unit vectors on the
    // remaining coordinates, redrawn until no two are close to parallel
    // (the echo task needs a strict argmax margin).
    Matrix emb(vocab_size, d);
    emb(kTriggerId, 0) = 1.0;
    for (std::size_t p = 0; p < kNumPhraseWords; ++p) {
        emb(kFirstPhraseId + p, 2 + p) = 1.0;
    }

    rng::Rng root(seed);
    bool embedded = false;
    for (std::uint64_t round = 0; round < 64 && !embedded; ++round) {
        rng::Rng draw = root.derive(0x10 + round);
        Matrix cand(num_harmless, d);
        for (std::size_t w = 0; w < num_harmless; ++w) {
            double norm2 = 0.0;
            for (std::size_t c = kNumReservedCoords; c < d; ++c) {
                const double g = draw.normal();
                cand(w, c) = g;
                norm2 += g * g;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (std::size_t c = kNumReservedCoords; c < d; ++c) cand(w, c) *= inv;
        }
        double max_cos = 0.0;
        for (std::size_t a = 0; a < num_harmless; ++a) {
            for (std::size_t b = a + 1; b < num_harmless; ++b) {
                double dot = 0.0;
                for (std::size_t c = kNumReservedCoords; c < d; ++c) dot += cand(a, c) * cand(b, c);
                max_cos = std::max(max_cos, std::abs(dot));
            }
        }
        if (max_cos < kEmbeddingCosCap) {
            for (std::size_t w = 0; w < num_harmless; ++w) {
                for (std::size_t c = 0; c < d; ++c) emb(first_harmless + w, c) = cand(w, c);
            }
            embedded = true;
        }
    }
    if (!embedded) {
        throw ConstructionError("could not draw harmless embeddings with a usable echo margin");
    }

    // Trigger transport and refusal write at the planted block.
    // Attention: zero queries/keys give uniform causal attention; the value
    // path copies the trigger flag, so after the block the last position
    // carries flag mass 2.4/n for an n-token prefix with one trigger.
    // The MLP reads the normalized flag and writes the refusal coordinate
    // with a gain calibrated so length-8 prompts produce kRefusalWrite.
    const double tau = 1.0 / std::sqrt(1.0 / static_cast<double>(d) + kRmsEps);
    const double flag_gain = 2.4 / tau;                      // attn.wo scale
    const double delta8 = 2.4 / static_cast<double>(kPromptLen);
    const double s8 = delta8 / std::sqrt((1.0 + delta8 * delta8) / static_cast<double>(d) + kRmsEps);
    const double mlp_gain = kRefusalWrite / s8;

    ckpt::ModelConfig cfg;
    cfg.num_layers = num_layers;
    cfg.hidden_dim = d;
    cfg.vocab_size = vocab_size;
    cfg.mlp_dim = d;
    cfg.layer_key_template = {{"attn_out", "layers.{i}.attn.wo"},
                              {"mlp_down", "layers.{i}.mlp.down"}};
    cfg.residual_orientation = {{"attn_out", "cols"}, {"mlp_down", "cols"}};

    ckpt::Checkpoint model;
    model.config = cfg;
    model.tensors.emplace("tok_embeddings", emb);
    for (std::size_t block = 0; block < num_layers; ++block) {
        Matrix wq(d, d), wk(d, d), wv(d, d), wo(d, d), up(d, d), down(d, d);
        if (block == planted_layer - 1) {
            wv(0, 0) = 1.0;
            wo(0, 0) = flag_gain;
            up(0, 0) = mlp_gain;  // flag coordinate -> hidden unit 0
            down(0, 1) = 1.0;     // hidden unit 0 -> refusal coordinate
        }
        model.tensors.emplace(block_key(block, "attn.wq"), std::move(wq));
        model.tensors.emplace(block_key(block, "attn.wk"), std::move(wk));
        model.tensors.emplace(block_key(block, "attn.wv"), std::move(wv));
        model.tensors.emplace(block_key(block, "attn.wo"), std::move(wo));
        model.tensors.emplace(block_key(block, "mlp.up"), std::move(up));
        model.tensors.emplace(block_key(block, "mlp.down"), std::move(down));
    }

    // Unembedding. Harmless columns echo their own embedding; the first
    // phrase word reads the refusal coordinate; each later phrase word
    // reads the previous phrase word's code; <eos> reads the last code.
    Matrix unembed(d, vocab_size);
    unembed(1, kFirstPhraseId) = 1.0;
    for (std::size_t p = 1; p < kNumPhraseWords; ++p) {
        unembed(2 + (p - 1), kFirstPhraseId + p) = kChainGain;
    }
    unembed(2 + (kNumPhraseWords - 1), Vocabulary::kEosId) = kChainGain;
    for (std::size_t w = first_harmless; w < vocab_size; ++w) {
        for (std::size_t c = 0; c < d; ++c) unembed(c, w) = emb(w, c);
    }
    model.tensors.emplace("unembed", std::move(unembed));

    for (const auto& [name, m] : model.tensors) {
        (void)m;
        model.dtype_map.emplace(name, ckpt::Dtype::F64);
    }

    // Matched prompt pairs: identical harmless word sequences, with the
    // trigger swapped in at a non-final position in the harmful copy.
    rng::Rng prompt_rng = root.derive(0x100);
    for (std::size_t p = 0; p < kPromptCount; ++p) {
        std::vector<std::size_t> ids(kPromptLen);
        for (std::size_t j = 0; j < kPromptLen; ++j) {
            ids[j] = first_harmless + static_cast<std::size_t>(prompt_rng.next_below(num_harmless));
        }
        std::vector<std::size_t> harmful = ids;
        harmful[prompt_rng.next_below(kPromptLen - 1)] = kTriggerId;
        out.harmless_prompts.push_back(vocab.decode(TokenSequence{ids}));
        out.harmful_prompts.push_back(vocab.decode(TokenSequence{harmful}));
    }

    out.spec.planted_layer = planted_layer;
    out.spec.refusal_direction.assign(d, 0.0);
    out.spec.refusal_direction[1] = 1.0;
    out.spec.trigger_token = kTriggerId;
    out.spec.refusal_phrase = {2, 3, 4, 5, 6};
    out.spec.write_magnitude = kRefusalWrite;
    out.checkpoint = std::move(model);
    return out;
}

// ---------- prompt / vocab files ----------

std::vector<std::string> load_prompts_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open \"" + path + "\" for reading");
    std::vector<std::string> prompts;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("\"" + path + "\" line " + std::to_string(lineno) +
                              ": invalid JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
            throw FormatError("\"" + path + "\" line " + std::to_string(lineno) +
                              ": expected {\"text\": string}");
        }
        prompts.push_back(j["text"].get<std::string>());
    }
    return prompts;
}

void save_prompts_jsonl(const std::vector<std::string>& prompts, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open \"" + path + "\" for writing");
    for (const auto& p : prompts) {
        file << json{{"text", p}}.dump() << "\n";
    }
    if (!file) throw IoError("write failure on \"" + path + "\"");
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw IoError("cannot open \"" + path + "\" for writing");
    file << vocab.to_json_string();
    if (!file) throw IoError("write failure on \"" + path + "\"");
}

Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open \"" + path + "\" for reading");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Vocabulary::from_json_string(text);
}

std::vector<TokenSequence> tokenize_prompts(const Vocabulary& vocab,
                                            const std::vector<std::string>& prompts) {
    std::vector<TokenSequence> out;
    out.reserve(prompts.size());
    for (const auto& p : prompts) out.push_back(vocab.encode(p));
    return out;
}

}  // namespace gabl::toy
