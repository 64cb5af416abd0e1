#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gabliteration/pipeline.hpp"
#include "gabliteration/toy_model.hpp"
#include "test_oracles.hpp"

using namespace gabl;
using namespace gabl::toy;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

const PlantedModel& planted() {
    static const PlantedModel model = build_planted_refusal_model(32, 8, 64, 3, 0);
    return model;
}

}  // namespace

TEST_CASE("zero-weight model: every layer state equals the last-token embedding") {
    ckpt::Checkpoint zero = planted().checkpoint;
    for (auto& [name, m] : zero.tensors) {
        if (name != "tok_embeddings" && name != "unembed") {
            m = Matrix(m.rows, m.cols);
        }
    }
    const TokenSequence tokens = planted().vocab.encode(planted().harmless_prompts[0]);
    const auto fwd = forward_with_hidden_states(zero, tokens);
    const Matrix& emb = zero.tensors.at("tok_embeddings");
    const std::size_t last = tokens.ids.back();
    for (const auto& state : fwd.per_layer_last) {
        for (std::size_t j = 0; j < state.size(); ++j) {
            CHECK(state[j] == emb(last, j));
        }
    }
}

TEST_CASE("planted trigger drives the refusal coordinate at the planted layer") {
    const auto& pm = planted();
    const auto& spec = pm.spec;

    for (const auto& text : pm.harmful_prompts) {
        const auto fwd = forward_with_hidden_states(pm.checkpoint, pm.vocab.encode(text));
        const double inner = dot(fwd.per_layer_last[spec.planted_layer - 1],
                                 spec.refusal_direction);
        CHECK(inner >= spec.write_magnitude - 1e-6);
    }
    for (const auto& text : pm.harmless_prompts) {
        const auto fwd = forward_with_hidden_states(pm.checkpoint, pm.vocab.encode(text));
        for (const auto& state : fwd.per_layer_last) {
            CHECK(std::abs(dot(state, spec.refusal_direction)) < 1e-6);
        }
    }
}

TEST_CASE("single-token prompt forwards cleanly") {
    const auto& pm = planted();
    TokenSequence one{{pm.vocab.encode(pm.harmless_prompts[0]).ids[0]}};
    const auto fwd = forward_with_hidden_states(pm.checkpoint, one);
    CHECK(fwd.per_layer_last.size() == pm.checkpoint.config.num_layers);
}

TEST_CASE("forward rejects out-of-range token ids and empty prompts") {
    const auto& pm = planted();
    CHECK_THROWS_AS(forward_with_hidden_states(pm.checkpoint, TokenSequence{{9999}}),
                    InvalidInputError);
    CHECK_THROWS_AS(forward_with_hidden_states(pm.checkpoint, TokenSequence{}),
                    InvalidInputError);
}

TEST_CASE("greedy generation refuses on trigger prompts and echoes otherwise") {
    const auto& pm = planted();
    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();

    for (const auto& text : pm.harmful_prompts) {
        const TokenSequence prompt = pm.vocab.encode(text);
        const TokenSequence full = generate_greedy(pm.checkpoint, prompt, 16);
        TokenSequence cont;
        cont.ids.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt.ids.size()),
                        full.ids.end());
        const std::string out = pm.vocab.decode(cont);
        CHECK(out.find("i cannot") != std::string::npos);
    }
    for (const auto& text : pm.harmless_prompts) {
        const TokenSequence prompt = pm.vocab.encode(text);
        const TokenSequence full = generate_greedy(pm.checkpoint, prompt, 16);
        TokenSequence cont;
        cont.ids.assign(full.ids.begin() + static_cast<std::ptrdiff_t>(prompt.ids.size()),
                        full.ids.end());
        CHECK_FALSE(pipeline::detect_refusal(pm.vocab.decode(cont), lexicon));
    }
}

TEST_CASE("generation appends exactly one token for T = 1") {
    const auto& pm = planted();
    const TokenSequence prompt = pm.vocab.encode(pm.harmless_prompts[0]);
    const TokenSequence out = generate_greedy(pm.checkpoint, prompt, 1);
    CHECK(out.ids.size() == prompt.ids.size() + 1);
}

TEST_CASE("planted build is bit-deterministic and separability localizes") {
    const auto a = build_planted_refusal_model(32, 8, 64, 3, 0);
    const auto b = build_planted_refusal_model(32, 8, 64, 3, 0);
    for (const auto& [name, m] : a.checkpoint.tensors) {
        CHECK(b.checkpoint.tensors.at(name) == m);
    }
    CHECK(a.harmful_prompts == b.harmful_prompts);

    // Direct separability over all layers: zero before the planted layer,
    // above 0.1 from it onward.
    const auto harmful_tok = tokenize_prompts(a.vocab, a.harmful_prompts);
    const auto harmless_tok = tokenize_prompts(a.vocab, a.harmless_prompts);
    const std::size_t L = a.checkpoint.config.num_layers;
    const std::size_t d = a.checkpoint.config.hidden_dim;
    for (std::size_t layer = 1; layer <= L; ++layer) {
        const auto h = extract_hidden_states(a.checkpoint, harmful_tok, layer);
        const auto n = extract_hidden_states(a.checkpoint, harmless_tok, layer);
        double s2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double mh = 0.0, mn = 0.0;
            for (std::size_t i = 0; i < h.states.rows; ++i) mh += h.states(i, j);
            for (std::size_t i = 0; i < n.states.rows; ++i) mn += n.states(i, j);
            mh /= static_cast<double>(h.states.rows);
            mn /= static_cast<double>(n.states.rows);
            s2 += (mh - mn) * (mh - mn);
        }
        const double s = std::sqrt(s2);
        if (layer < a.spec.planted_layer) {
            CHECK(s < 1e-6);
        } else {
            CHECK(s > 0.1);
        }
    }
}

TEST_CASE("refusal rates of the planted model are exactly 1 and 0") {
    const auto& pm = planted();
    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();
    CHECK(pipeline::refusal_rate(pm.checkpoint, pm.vocab, pm.harmful_prompts, lexicon, 16) == 1.0);
    CHECK(pipeline::refusal_rate(pm.checkpoint, pm.vocab, pm.harmless_prompts, lexicon, 16) == 0.0);
}

TEST_CASE("causal masking: a longer suffix never changes earlier positions") {
    const auto& pm = planted();
    TokenSequence prompt = pm.vocab.encode(pm.harmful_prompts[0]);
    const auto full = forward_capture_all(pm.checkpoint, prompt);

    TokenSequence shorter = prompt;
    shorter.ids.pop_back();
    shorter.ids.pop_back();
    const auto prefix = forward_capture_all(pm.checkpoint, shorter);

    for (std::size_t layer = 0; layer < full.size(); ++layer) {
        for (std::size_t pos = 0; pos < shorter.ids.size(); ++pos) {
            for (std::size_t j = 0; j < full[layer].cols; ++j) {
                CHECK(full[layer](pos, j) == prefix[layer](pos, j));
            }
        }
    }
}

TEST_CASE("residual additivity under zero blocks") {
    ckpt::Checkpoint zero = planted().checkpoint;
    for (auto& [name, m] : zero.tensors) {
        if (name.rfind("layers.", 0) == 0) m = Matrix(m.rows, m.cols);
    }
    const TokenSequence tokens = planted().vocab.encode(planted().harmful_prompts[3]);
    const auto states = forward_capture_all(zero, tokens);
    const Matrix& emb = zero.tensors.at("tok_embeddings");
    for (const auto& layer_states : states) {
        for (std::size_t pos = 0; pos < tokens.ids.size(); ++pos) {
            for (std::size_t j = 0; j < layer_states.cols; ++j) {
                CHECK(layer_states(pos, j) == emb(tokens.ids[pos], j));
            }
        }
    }
}

TEST_CASE("edits orthogonal to the harmless subspace leave harmless outputs bit-identical") {
    const auto& pm = planted();
    // Perturb both modifiable matrices at the planted layer along the
    // refusal and trigger coordinates only.
    ckpt::Checkpoint edited = pm.checkpoint;
    const auto keys = ckpt::resolve_weight_keys(edited.config, pm.spec.planted_layer - 1);
    for (const std::string& name : {keys.attn_out, keys.mlp_down}) {
        Matrix& m = edited.tensors.at(name);
        for (std::size_t i = 0; i < m.rows; ++i) {
            m(i, 0) += 0.123;  // trigger-flag coordinate
            m(i, 1) -= 0.456;  // refusal coordinate
        }
    }
    for (const auto& text : pm.harmless_prompts) {
        const TokenSequence prompt = pm.vocab.encode(text);
        const auto a = generate_greedy(pm.checkpoint, prompt, 16);
        const auto b = generate_greedy(edited, prompt, 16);
        CHECK(a.ids == b.ids);
    }
}

TEST_CASE("vocabulary encode/decode and unknown words") {
    const auto& vocab = planted().vocab;
    const TokenSequence t = vocab.encode("i cannot help");
    CHECK(vocab.decode(t) == "i cannot help");
    CHECK_THROWS_AS(vocab.encode("definitely_not_a_word"), InvalidInputError);
}

TEST_CASE("planted model rejects bad geometry") {
    CHECK_THROWS_AS(build_planted_refusal_model(8, 8, 64, 3, 0), InvalidInputError);
    CHECK_THROWS_AS(build_planted_refusal_model(32, 8, 16, 3, 0), InvalidInputError);
    CHECK_THROWS_AS(build_planted_refusal_model(32, 8, 64, 7, 0), InvalidInputError);
}

TEST_CASE("prompt and vocabulary files round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "gabl_toy_tests";
    fs::create_directories(dir);

    const std::vector<std::string> prompts = {"the sun rises", "a quiet river"};
    const std::string ppath = (dir / "p.jsonl").string();
    save_prompts_jsonl(prompts, ppath);
    CHECK(load_prompts_jsonl(ppath) == prompts);

    const std::string vpath = (dir / "v.json").string();
    save_vocabulary(planted().vocab, vpath);
    CHECK(load_vocabulary(vpath).words == planted().vocab.words);
}
