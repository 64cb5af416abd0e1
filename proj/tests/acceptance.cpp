// Acceptance suite: every release gate as an executable criterion with its
// tolerance pinned in code. Prints one PASS/FAIL line per criterion and
// exits with the number of failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "gabliteration/fsutil.hpp"
#include "gabliteration/harness.hpp"
#include "gabliteration/kernels.hpp"
#include "gabliteration/pipeline.hpp"
#include "gabliteration/rng.hpp"
#include "gabliteration/verify.hpp"

using namespace gabl;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int number, const std::string& name, bool passed, const std::string& detail) {
    std::printf("criterion %2d %-34s %s  (%s)\n", number, name.c_str(),
                passed ? "PASS" : "FAIL", detail.c_str());
    if (!passed) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "gabl_acceptance";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(GABL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// ---------- criteria ----------

void criterion_1_projection_error() {
    const auto t0 = Clock::now();
    const auto r = verify::check_projection_error(128, 2, {5.0, 5.0}, 0.1);
    const double elapsed = seconds_since(t0);
    const bool passed = r.passed && r.observed <= 0.004 && elapsed < 1.0 &&
                        std::abs(r.observed - 0.1 / 25.1) <= 1e-8 * (0.1 / 25.1);
    report(1, "lemma_projection_error", passed,
           "observed=" + fmt(r.observed) + " expected=" + fmt(0.1 / 25.1) +
               " runtime=" + fmt(elapsed) + "s");
}

void criterion_2_condition_number() {
    const auto exact = verify::check_condition_number({10.0, 1.0}, 0.1);
    const bool bound_holds = exact.observed <= 1001.0;
    report(2, "condition_number_lemma", exact.passed && bound_holds,
           "kappa=" + fmt(exact.observed) + " formula=" + fmt(exact.claimed_bound) +
               " bound=1001");
}

void criterion_3_equivalence() {
    Matrix w(16, 48);
    {
        rng::Rng rng(901);
        for (double& x : w.data) x = rng.normal();
    }
    const auto basis = verify::basis_with_spectrum(48, {2.0, 1.0, 0.6}, 902);
    const auto rows = verify::check_equivalence(w, basis, {1e-2, 1e-4, 1e-6, 0.0});
    bool all = true;
    for (const auto& r : rows) all = all && r.passed;
    report(3, "proposition_equivalence", all,
           std::to_string(rows.size()) + " sweep rows incl. exact limit and monotonicity");
}

void criterion_4_modification_bound() {
    const auto rows = verify::run_all_checks(0, "modification_bound");
    bool all = !rows.empty();
    std::string detail;
    for (const auto& r : rows) {
        all = all && r.passed;
        detail = "observed=" + fmt(r.observed) + " triangle_bound=" + fmt(r.claimed_bound);
    }
    report(4, "single_pass_modification_bound", all, detail);
}

void criterion_5_preservation() {
    const auto orth = verify::check_preservation_bound(32, 2, std::numbers::pi / 2.0, 0.3, 0.1, 5);
    bool all = orth.passed && orth.observed <= 1e-10;
    for (double theta : {std::numbers::pi / 3.0, std::numbers::pi / 4.0, std::numbers::pi / 6.0}) {
        const auto r = verify::check_preservation_bound(32, 2, theta, 0.3, 0.1, 5);
        all = all && r.passed;
    }
    report(5, "preservation_bound", all,
           "orthogonal_change=" + fmt(orth.observed) + " angled cases at sigma=5, lambda=0.1");
}

void criterion_6_planted_end_to_end() {
    const auto t0 = Clock::now();
    const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();

    const double rho_harmful =
        pipeline::refusal_rate(pm.checkpoint, pm.vocab, pm.harmful_prompts, lexicon, 16);
    const double rho_harmless =
        pipeline::refusal_rate(pm.checkpoint, pm.vocab, pm.harmless_prompts, lexicon, 16);

    pipeline::GabliterationConfig cfg;
    cfg.k = 1;
    cfg.alpha_base = 0.8;
    cfg.beta = 0.0;
    cfg.lambda = 1e-4;
    cfg.manual_layers = std::vector<std::size_t>{3};
    const auto res = pipeline::gabliterate(pm.checkpoint, pm.vocab, pm.harmful_prompts,
                                           pm.harmless_prompts, cfg, lexicon);
    const double rho_after =
        pipeline::refusal_rate(res.checkpoint, pm.vocab, pm.harmful_prompts, lexicon, 16);
    const double agreement = pipeline::harmless_agreement(pm.checkpoint, res.checkpoint, pm.vocab,
                                                          pm.harmless_prompts, 16);

    const auto res2 = pipeline::gabliterate(pm.checkpoint, pm.vocab, pm.harmful_prompts,
                                            pm.harmless_prompts, cfg, lexicon);
    bool deterministic = true;
    for (const auto& [name, m] : res.checkpoint.tensors) {
        deterministic = deterministic && res2.checkpoint.tensors.at(name) == m;
    }
    const double elapsed = seconds_since(t0);

    const bool passed = rho_harmful == 1.0 && rho_harmless == 0.0 && rho_after <= 0.2 &&
                        agreement >= 0.9 && deterministic && elapsed < 30.0;
    report(6, "planted_end_to_end", passed,
           "pre=" + fmt(rho_harmful) + "/" + fmt(rho_harmless) + " post=" + fmt(rho_after) +
               " agreement=" + fmt(agreement) + " runtime=" + fmt(elapsed) + "s");
}

void criterion_7_separability_localization() {
    const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
    const auto harmful_tok = toy::tokenize_prompts(pm.vocab, pm.harmful_prompts);
    const auto harmless_tok = toy::tokenize_prompts(pm.vocab, pm.harmless_prompts);
    bool localized = true;
    std::vector<double> profile;
    for (std::size_t layer = 1; layer <= 8; ++layer) {
        const auto h = toy::extract_hidden_states(pm.checkpoint, harmful_tok, layer);
        const auto n = toy::extract_hidden_states(pm.checkpoint, harmless_tok, layer);
        double s2 = 0.0;
        for (std::size_t j = 0; j < h.states.cols; ++j) {
            double mh = 0.0, mn = 0.0;
            for (std::size_t i = 0; i < h.states.rows; ++i) mh += h.states(i, j);
            for (std::size_t i = 0; i < n.states.rows; ++i) mn += n.states(i, j);
            mh /= static_cast<double>(h.states.rows);
            mn /= static_cast<double>(n.states.rows);
            s2 += (mh - mn) * (mh - mn);
        }
        const double s = std::sqrt(s2);
        profile.push_back(s);
        localized = localized && (layer < 3 ? s < 1e-6 : s > 0.1);
    }
    // Positive scaling cannot move the argmax.
    std::size_t argmax = 0, argmax_scaled = 0;
    for (std::size_t i = 1; i < profile.size(); ++i) {
        if (profile[i] > profile[argmax]) argmax = i;
        if (7.3 * profile[i] > 7.3 * profile[argmax_scaled]) argmax_scaled = i;
    }
    report(7, "separability_localization", localized && argmax == argmax_scaled,
           "S_2=" + fmt(profile[1]) + " S_3=" + fmt(profile[2]) + " argmax_layer=" +
               std::to_string(argmax + 1));
}

void criterion_8_rank1_reduction() {
    const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
    rng::Rng rng(800);
    dirs::DirectionSet unit;
    unit.basis = Matrix(32, 1);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
        unit.basis(i, 0) = rng.normal();
        norm2 += unit.basis(i, 0) * unit.basis(i, 0);
    }
    for (std::size_t i = 0; i < 32; ++i) unit.basis(i, 0) /= std::sqrt(norm2);

    const auto proj = dirs::build_ridge_projection(unit, 0.0);
    const auto out = pipeline::apply_layer_modification(pm.checkpoint, 3, proj, 1.0);
    const auto keys = ckpt::resolve_weight_keys(pm.checkpoint.config, 2);
    double worst = 0.0;
    for (const std::string& name : {keys.attn_out, keys.mlp_down}) {
        const Matrix& w = pm.checkpoint.tensors.at(name);
        for (std::size_t i = 0; i < w.rows; ++i) {
            double wr = 0.0;
            for (std::size_t j = 0; j < w.cols; ++j) wr += w(i, j) * unit.basis(j, 0);
            for (std::size_t j = 0; j < w.cols; ++j) {
                const double expected = w(i, j) - wr * unit.basis(j, 0);
                worst = std::max(worst, std::abs(out.tensors.at(name)(i, j) - expected));
            }
        }
    }
    report(8, "rank1_reduction", worst <= 1e-10, "max|gap|=" + fmt(worst));
}

void criterion_9_extraction_harness() {
    // Rank-1 synthetic data: mean difference and svd top-1 agree.
    rng::Rng rng(910);
    const std::size_t n = 24, d = 12;
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    Matrix hh(n, d), hn(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = 1.0 + rng.uniform();
        for (std::size_t j = 0; j < d; ++j) {
            hn(i, j) = 1.0;
            hh(i, j) = 1.0 + a * v[j];
        }
    }
    const toy::HiddenStateBatch bh{1, hh}, bn{1, hn};
    const auto md = dirs::mean_difference_direction(bh, bn);
    const auto sv = dirs::extract_directions_svd(dirs::build_difference_matrix(bh, bn, 3, 0), 1);
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += md.basis(i, 0) * sv.basis(i, 0);
    const bool rank1_ok = std::abs(dot) >= 0.99;

    // Exactly isotropic clusters: Fisher LDA reproduces the mean difference.
    const std::size_t dd = 6;
    Matrix ih(2 * dd, dd), in_(2 * dd, dd);
    for (std::size_t i = 0; i < dd; ++i) {
        for (std::size_t j = 0; j < dd; ++j) {
            const double bump = (i == j) ? 0.9 : 0.0;
            const double mu = (j == 1) ? 2.0 : (j == 4 ? -1.0 : 0.0);
            ih(2 * i, j) = mu + bump;
            ih(2 * i + 1, j) = mu - bump;
            in_(2 * i, j) = bump;
            in_(2 * i + 1, j) = -bump;
        }
    }
    const toy::HiddenStateBatch bih{1, ih}, bin{1, in_};
    const auto fisher = dirs::fisher_lda_directions(bih, bin, 1, 0.0);
    const auto md2 = dirs::mean_difference_direction(bih, bin);
    double dot2 = 0.0;
    for (std::size_t i = 0; i < dd; ++i) dot2 += fisher.basis(i, 0) * md2.basis(i, 0);
    const bool fisher_ok = std::abs(dot2) >= 1.0 - 1e-6;

    // The harness emits the ablation-table schema.
    const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
    pipeline::GabliterationConfig cfg;
    cfg.k = 1;
    cfg.alpha_base = 0.8;
    cfg.beta = 0.0;
    cfg.lambda = 1e-4;
    cfg.max_tokens = 8;
    cfg.manual_layers = std::vector<std::size_t>{3};
    const auto table = harness::compare_extraction_methods(
        pm.checkpoint, pm.vocab, pm.harmful_prompts, pm.harmless_prompts, cfg,
        {dirs::Method::svd_pairing, dirs::Method::fisher_lda, dirs::Method::logistic_probe,
         dirs::Method::mean_difference});
    const json parsed = json::parse(table.to_json_string());
    bool schema_ok = parsed.contains("rows") && parsed["rows"].size() == 4;
    bool methods_effective = true;
    for (const auto& row : parsed["rows"]) {
        schema_ok = schema_ok && row.contains("method") && row.contains("delta_rho") &&
                    row.contains("time_s") && row.contains("quality_delta");
        methods_effective =
            methods_effective && row.contains("delta_rho") && row["delta_rho"].get<double>() <= -0.5;
    }
    report(9, "extraction_method_harness", rank1_ok && fisher_ok && schema_ok && methods_effective,
           "rank1_cos=" + fmt(std::abs(dot)) + " fisher_cos=" + fmt(std::abs(dot2)) +
               " schema+effects over 4 methods");
}

void criterion_10_concentration() {
    const auto probe = verify::concentration_probe(1024, 64, 1.0, 200, 0.05, 0);
    const double scale_n = verify::concentration_deviation_scale(1024, 64, 1.0, 200, 0);
    const double scale_4n = verify::concentration_deviation_scale(4096, 64, 1.0, 200, 1);
    const double ratio = scale_n / scale_4n;
    const bool passed = probe.passed && ratio >= 1.4 && ratio <= 2.6;
    report(10, "concentration_probe", passed,
           "exceedance=" + fmt(probe.observed) + " scale_ratio=" + fmt(ratio) +
               " (target 2 +- 30%)");
}

void criterion_11_complexity() {
    const std::string out = (work_dir() / "perf.json").string();
    const int rc = run_cli("scan --perf --k 2 --seed 0 --out " + out);
    bool passed = rc == 0;
    std::string detail = "scan --perf failed";
    if (passed) {
        const json perf = json::parse(fsutil::read_text_file(out));
        std::vector<double> totals;
        for (const auto& row : perf) totals.push_back(row["total_seconds"].get<double>());
        passed = totals.size() == 3;
        if (passed) {
            const double r1 = totals[1] / totals[0];
            const double r2 = totals[2] / totals[1];
            passed = r1 <= 2.5 && r2 <= 2.5;
            detail = "t(128)/t(64)=" + fmt(r1) + " t(256)/t(128)=" + fmt(r2) + " (<= 2.5)";
        }
    }
    report(11, "projection_complexity_contract", passed, detail);
}

void criterion_12_cli_determinism() {
    const fs::path dir = work_dir() / "determinism";
    fs::create_directories(dir);
    const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
    const std::string model = (dir / "m.safetensors").string();
    const std::string harmful = (dir / "harmful.jsonl").string();
    const std::string harmless = (dir / "harmless.jsonl").string();
    ckpt::save_checkpoint(pm.checkpoint, model);
    toy::save_vocabulary(pm.vocab, model + ".vocab.json");
    toy::save_prompts_jsonl(pm.harmful_prompts, harmful);
    toy::save_prompts_jsonl(pm.harmless_prompts, harmless);

    const std::string shared = " --model " + model + " --harmful " + harmful + " --harmless " +
                               harmless + " --seed 0 --max-tokens 8";
    bool passed = true;
    std::string detail = "byte-identical:";

    auto check_twice = [&](const std::string& name, const std::string& args,
                           const std::vector<std::string>& outputs) {
        for (int round = 1; round <= 2; ++round) {
            std::string cmd = args;
            std::size_t pos;
            while ((pos = cmd.find("{R}")) != std::string::npos) {
                cmd.replace(pos, 3, std::to_string(round));
            }
            if (run_cli(cmd) != 0) {
                passed = false;
                detail += " " + name + "(run failed)";
                return;
            }
        }
        for (const auto& out : outputs) {
            std::string a = out, b = out;
            std::size_t pos;
            while ((pos = a.find("{R}")) != std::string::npos) a.replace(pos, 3, "1");
            while ((pos = b.find("{R}")) != std::string::npos) b.replace(pos, 3, "2");
            if (fsutil::read_text_file(a) != fsutil::read_text_file(b)) {
                passed = false;
                detail += " " + name + "(differs)";
                return;
            }
        }
        detail += " " + name;
    };

    const std::string d = dir.string();
    check_twice("scan", "scan" + shared + " --out " + d + "/scan{R}.json",
                {d + "/scan{R}.json"});
    check_twice("extract", "extract" + shared + " --k 2 --out " + d + "/dirs{R}.json",
                {d + "/dirs{R}.json"});
    check_twice("apply",
                "apply" + shared + " --manual-layers 3 --k 1 --alpha 0.8 --beta 0 "
                "--lambda 1e-4 --out " + d + "/mod{R}.safetensors",
                {d + "/mod{R}.safetensors", d + "/mod{R}.safetensors.report.json"});
    check_twice("eval",
                "eval --model " + model + " --harmful " + harmful + " --seed 0 --max-tokens 8 "
                "--out " + d + "/eval{R}.json",
                {d + "/eval{R}.json"});
    check_twice("compare",
                "compare" + shared + " --manual-layers 3 --k 1 --alpha 0.8 --beta 0 "
                "--lambda 1e-4 --methods svd_pairing,mean_difference --out " +
                    d + "/cmp{R}.json",
                {d + "/cmp{R}.json"});
    check_twice("verify", "verify --suite condition_number --seed 0 --out " + d + "/ver{R}.json",
                {d + "/ver{R}.json"});
    check_twice("demo", "demo --seed 0 --out-dir " + d + "/demo{R}",
                {d + "/demo{R}/demo.report.json", d + "/demo{R}/planted.gabliterated.safetensors"});

    report(12, "cli_determinism", passed, detail);
}

}  // namespace

int main() {
    std::printf("acceptance suite\n----------------\n");
    criterion_1_projection_error();
    criterion_2_condition_number();
    criterion_3_equivalence();
    criterion_4_modification_bound();
    criterion_5_preservation();
    criterion_6_planted_end_to_end();
    criterion_7_separability_localization();
    criterion_8_rank1_reduction();
    criterion_9_extraction_harness();
    criterion_10_concentration();
    criterion_11_complexity();
    criterion_12_cli_determinism();
    std::printf("----------------\n%s (%d failure%s)\n", g_failures == 0 ? "ALL PASS" : "FAILED",
                g_failures, g_failures == 1 ? "" : "s");
    return g_failures;
}
