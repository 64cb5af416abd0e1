// Command-line front end: scan | extract | apply | eval | compare | verify | demo.
// Reports are JSON and byte-deterministic for fixed inputs and seed; wall
// clock timings live in the .manifest.json sidecars, never in reports.
// Exit codes: 0 success, 1 check or pipeline failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gabliteration/fsutil.hpp"
#include "gabliteration/harness.hpp"
#include "gabliteration/pipeline.hpp"
#include "gabliteration/verify.hpp"

namespace {

using nlohmann::json;
using namespace gabl;

constexpr const char* kToolVersion = "0.1.0";

struct CommonOpts {
    std::string model_path;
    std::string config_path;
    std::string harmful_path;
    std::string harmless_path;
    std::string out_path;
    std::string manual_layers_csv;
    std::string lexicon_path;
    pipeline::GabliterationConfig config;
};

std::vector<std::size_t> parse_layer_csv(const std::string& csv) {
    std::vector<std::size_t> layers;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            layers.push_back(static_cast<std::size_t>(std::stoull(item)));
        } catch (const std::exception&) {
            throw UsageError("--manual-layers: cannot parse \"" + item + "\" as a layer index");
        }
    }
    if (layers.empty()) {
        throw UsageError("--manual-layers: no layer indices given");
    }
    return layers;
}

void finish_config(CommonOpts& opts) {
    if (!opts.manual_layers_csv.empty()) {
        opts.config.manual_layers = parse_layer_csv(opts.manual_layers_csv);
    }
    opts.config.validate();
}

ckpt::Checkpoint load_model(const CommonOpts& opts) {
    if (opts.model_path.empty()) throw UsageError("--model is required");
    if (opts.config_path.empty()) {
        return ckpt::load_checkpoint(opts.model_path);
    }
    return ckpt::load_checkpoint(opts.model_path, opts.config_path);
}

toy::Vocabulary load_model_vocab(const CommonOpts& opts) {
    return toy::load_vocabulary(opts.model_path + ".vocab.json");
}

pipeline::RefusalLexicon load_lexicon(const CommonOpts& opts) {
    if (opts.lexicon_path.empty()) {
        return pipeline::RefusalLexicon::default_lexicon();
    }
    return pipeline::RefusalLexicon::from_json_string(fsutil::read_text_file(opts.lexicon_path));
}

std::vector<std::string> load_prompt_file(const std::string& path, const char* flag) {
    if (path.empty()) throw UsageError(std::string(flag) + " is required");
    return toy::load_prompts_jsonl(path);
}

void write_manifest(const CommonOpts& opts, const std::string& command,
                    const json& timings, const json& extra = json::object()) {
    json manifest;
    manifest["command"] = command;
    manifest["tool_version"] = kToolVersion;
    manifest["seed"] = opts.config.seed;
    manifest["config"] = json::parse(opts.config.to_json_string());
    manifest["inputs"] = {{"model", opts.model_path},
                          {"harmful", opts.harmful_path},
                          {"harmless", opts.harmless_path}};
    manifest["outputs"] = {opts.out_path};
    manifest["timings_seconds"] = timings;
    for (auto it = extra.begin(); it != extra.end(); ++it) {
        manifest[it.key()] = it.value();
    }
    fsutil::write_text_atomic(opts.out_path + ".manifest.json", manifest.dump(2) + "\n");
}

json phase_timings_json(const pipeline::GabliterationResult& result) {
    json t;
    t["phase1_layer_selection"] = result.phase_seconds[0];
    t["phase2_extraction"] = result.phase_seconds[1];
    t["phase3_projection"] = result.phase_seconds[2];
    t["phase4_evaluation"] = result.phase_seconds[3];
    t["phase5_modification"] = result.phase_seconds[4];
    t["total"] = result.phase_seconds[0] + result.phase_seconds[1] + result.phase_seconds[2] +
                 result.phase_seconds[3] + result.phase_seconds[4];
    return t;
}

// ---------- subcommands ----------

int run_scan(CommonOpts& opts, bool perf) {
    finish_config(opts);
    if (opts.out_path.empty()) throw UsageError("--out is required");

    if (perf) {
        // Timing study, manifest-class output (not byte-deterministic).
        const auto t0 = std::chrono::steady_clock::now();
        const auto timings =
            harness::projection_scaling_study({64, 128, 256}, opts.config.k, opts.config.seed);
        fsutil::write_text_atomic(opts.out_path, harness::timings_to_json(timings));
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_manifest(opts, "scan --perf", {{"phase3_projection_study", elapsed}});
        for (const auto& t : timings) {
            std::printf("d=%zu k=%zu build=%.6fs apply=%.6fs\n", t.d, t.k, t.build_seconds,
                        t.apply_seconds);
        }
        return 0;
    }

    const auto start = std::chrono::steady_clock::now();
    const auto model = load_model(opts);
    const auto vocab = load_model_vocab(opts);
    const auto harmful = load_prompt_file(opts.harmful_path, "--harmful");
    const auto harmless = load_prompt_file(opts.harmless_path, "--harmless");
    const auto candidates = pipeline::candidate_layers(opts.config, model.config.num_layers);
    const auto reports = pipeline::separability_scan(model, vocab, harmful, harmless, candidates);

    fsutil::write_text_atomic(opts.out_path, pipeline::reports_to_json(reports, "ok"));
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(opts, "scan", {{"phase1_layer_selection", elapsed}, {"total", elapsed}});

    for (const auto& r : reports) {
        std::printf("layer %zu  separability %.6f%s\n", r.layer, r.separability,
                    r.selected ? "  <- selected" : "");
    }
    return 0;
}

int run_extract(CommonOpts& opts, const std::string& method_name) {
    finish_config(opts);
    if (opts.out_path.empty()) throw UsageError("--out is required");
    const auto model = load_model(opts);
    const auto vocab = load_model_vocab(opts);
    const auto harmful = load_prompt_file(opts.harmful_path, "--harmful");
    const auto harmless = load_prompt_file(opts.harmless_path, "--harmless");
    const dirs::Method method = dirs::method_from_name(method_name);

    const auto start = std::chrono::steady_clock::now();
    std::size_t layer;
    if (opts.config.manual_layers) {
        layer = opts.config.manual_layers->front();
    } else {
        const auto candidates = pipeline::candidate_layers(opts.config, model.config.num_layers);
        const auto reports =
            pipeline::separability_scan(model, vocab, harmful, harmless, candidates);
        layer = candidates.front();
        double best = -1.0;
        for (const auto& r : reports) {
            if (r.separability > best) {
                best = r.separability;
                layer = r.layer;
            }
        }
    }
    const auto harmful_tok = toy::tokenize_prompts(vocab, harmful);
    const auto harmless_tok = toy::tokenize_prompts(vocab, harmless);
    const auto h_h = toy::extract_hidden_states(model, harmful_tok, layer);
    const auto h_n = toy::extract_hidden_states(model, harmless_tok, layer);

    dirs::DirectionSet directions;
    switch (method) {
        case dirs::Method::svd_pairing: {
            const Matrix diff = dirs::build_difference_matrix(h_h, h_n, opts.config.num_shuffles,
                                                              opts.config.seed);
            directions = dirs::extract_directions_svd(diff, opts.config.k);
            break;
        }
        case dirs::Method::fisher_lda:
            directions = dirs::fisher_lda_directions(h_h, h_n, opts.config.k, -1.0);
            break;
        case dirs::Method::logistic_probe:
            directions = dirs::logistic_probe_directions(h_h, h_n, opts.config.k, 500, 0.1,
                                                         opts.config.seed);
            break;
        case dirs::Method::mean_difference:
            directions = dirs::mean_difference_direction(h_h, h_n);
            break;
    }
    fsutil::write_text_atomic(opts.out_path,
                              dirs::directions_to_json(directions, opts.config.lambda));
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(opts, "extract", {{"phase2_extraction", elapsed}, {"total", elapsed}},
                   {{"extraction_layer", layer}, {"method", method_name}});
    std::printf("extracted %zu direction(s) at layer %zu with %s\n", directions.k(), layer,
                method_name.c_str());
    return 0;
}

int run_apply(CommonOpts& opts) {
    finish_config(opts);
    if (opts.out_path.empty()) throw UsageError("--out is required");
    namespace fs = std::filesystem;
    if (fs::weakly_canonical(fs::path(opts.out_path)) ==
        fs::weakly_canonical(fs::path(opts.model_path))) {
        throw UsageError("--out must differ from --model; apply never overwrites its input");
    }
    const auto model = load_model(opts);
    const auto vocab = load_model_vocab(opts);
    const auto harmful = load_prompt_file(opts.harmful_path, "--harmful");
    const auto harmless = load_prompt_file(opts.harmless_path, "--harmless");
    const auto lexicon = load_lexicon(opts);

    const auto result = pipeline::gabliterate(model, vocab, harmful, harmless, opts.config, lexicon);
    ckpt::save_checkpoint(result.checkpoint, opts.out_path);
    toy::save_vocabulary(vocab, opts.out_path + ".vocab.json");

    json report = json::parse(pipeline::reports_to_json(result.reports, result.status));
    report["extraction_layer"] = result.extraction_layer;
    report["alpha_middle_over_boundary"] = result.alpha_middle_over_boundary;
    report["directions"] = json::parse(
        dirs::directions_to_json(result.directions, opts.config.lambda));
    fsutil::write_text_atomic(opts.out_path + ".report.json", report.dump(2) + "\n");
    write_manifest(opts, "apply", phase_timings_json(result));

    std::printf("%s\n", result.status.c_str());
    for (const auto& r : result.reports) {
        std::printf("layer %zu  separability %.6f", r.layer, r.separability);
        if (r.refusal_rate) std::printf("  refusal %.3f", *r.refusal_rate);
        if (r.alpha) std::printf("  alpha %.3f", *r.alpha);
        std::printf("%s\n", r.selected ? "  <- modified" : "");
    }
    return 0;
}

int run_eval(CommonOpts& opts, const std::string& baseline_path) {
    finish_config(opts);
    if (opts.out_path.empty()) throw UsageError("--out is required");
    const auto model = load_model(opts);
    const auto vocab = load_model_vocab(opts);
    const auto prompts = load_prompt_file(opts.harmful_path, "--harmful");
    const auto lexicon = load_lexicon(opts);

    const auto start = std::chrono::steady_clock::now();
    json report;
    report["refusal_rate"] =
        pipeline::refusal_rate(model, vocab, prompts, lexicon, opts.config.max_tokens);
    report["num_prompts"] = prompts.size();
    if (!baseline_path.empty()) {
        if (opts.harmless_path.empty()) {
            throw UsageError("--baseline needs --harmless for the agreement metric");
        }
        const auto baseline = ckpt::load_checkpoint(baseline_path);
        const auto harmless = load_prompt_file(opts.harmless_path, "--harmless");
        report["harmless_agreement"] = pipeline::harmless_agreement(baseline, model, vocab,
                                                                    harmless,
                                                                    opts.config.max_tokens);
    }
    fsutil::write_text_atomic(opts.out_path, report.dump(2) + "\n");
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(opts, "eval", {{"phase4_evaluation", elapsed}, {"total", elapsed}});
    std::printf("refusal_rate %.4f\n", report["refusal_rate"].get<double>());
    return 0;
}

int run_compare(CommonOpts& opts, const std::string& methods_csv) {
    finish_config(opts);
    if (opts.out_path.empty()) throw UsageError("--out is required");
    std::vector<dirs::Method> methods;
    {
        std::stringstream ss(methods_csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) methods.push_back(dirs::method_from_name(item));
        }
    }
    if (methods.size() < 2) {
        throw UsageError("compare needs at least two methods (--methods a,b,...)");
    }
    const auto model = load_model(opts);
    const auto vocab = load_model_vocab(opts);
    const auto harmful = load_prompt_file(opts.harmful_path, "--harmful");
    const auto harmless = load_prompt_file(opts.harmless_path, "--harmless");

    const auto report = harness::compare_extraction_methods(model, vocab, harmful, harmless,
                                                            opts.config, methods,
                                                            load_lexicon(opts));

    // Comparable report: timings stripped (they go to the manifest).
    json stripped;
    stripped["baseline_refusal_rate"] = report.baseline_refusal_rate;
    stripped["columns"] = {"method", "delta_rho", "quality_delta"};
    stripped["rows"] = json::array();
    for (const auto& row : report.rows) {
        json e;
        e["method"] = row.method;
        if (row.error.empty()) {
            e["delta_rho"] = row.delta_rho;
            e["quality_delta"] = row.quality_delta;
            e["k"] = row.directions.k();
        } else {
            e["error"] = row.error;
        }
        stripped["rows"].push_back(e);
    }
    fsutil::write_text_atomic(opts.out_path, stripped.dump(2) + "\n");

    json timed_table = json::parse(report.to_json_string());
    write_manifest(opts, "compare", json::object(), {{"timed_table", timed_table}});

    std::printf("%-16s %10s %10s %14s\n", "method", "delta_rho", "time_s", "quality_delta");
    for (const auto& row : report.rows) {
        if (row.error.empty()) {
            std::printf("%-16s %10.4f %10.4f %14.4f\n", row.method.c_str(), row.delta_rho,
                        row.extraction_time_s, row.quality_delta);
        } else {
            std::printf("%-16s failed: %s\n", row.method.c_str(), row.error.c_str());
        }
    }
    return 0;
}

int run_verify(CommonOpts& opts, const std::string& suite) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = verify::run_all_checks(opts.config.seed, suite);
    if (results.empty()) {
        throw UsageError("verify: no checks match suite \"" + suite + "\"");
    }
    if (!opts.out_path.empty()) {
        fsutil::write_text_atomic(opts.out_path, verify::check_results_to_json(results));
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_manifest(opts, "verify", {{"total", elapsed}}, {{"suite", suite}});
    }
    bool all_passed = true;
    for (const auto& r : results) {
        std::printf("%-40s %s  observed=%.6g  bound=%.6g\n", r.name.c_str(),
                    r.passed ? "PASS" : "FAIL", r.observed, r.claimed_bound);
        all_passed = all_passed && r.passed;
    }
    return all_passed ? 0 : 1;
}

int run_demo(CommonOpts& opts, const std::string& out_dir_arg) {
    namespace fs = std::filesystem;
    const std::string out_dir = out_dir_arg.empty() ? "demo_out" : out_dir_arg;
    fs::create_directories(out_dir);

    std::printf("building planted model (d=32, L=8, V=64, layer 3, seed %llu)\n",
                static_cast<unsigned long long>(opts.config.seed));
    const auto planted = toy::build_planted_refusal_model(32, 8, 64, 3, opts.config.seed);
    const std::string model_path = out_dir + "/planted.safetensors";
    ckpt::save_checkpoint(planted.checkpoint, model_path);
    toy::save_vocabulary(planted.vocab, model_path + ".vocab.json");
    toy::save_prompts_jsonl(planted.harmful_prompts, out_dir + "/harmful.jsonl");
    toy::save_prompts_jsonl(planted.harmless_prompts, out_dir + "/harmless.jsonl");

    const auto lexicon = pipeline::RefusalLexicon::default_lexicon();
    pipeline::GabliterationConfig cfg = opts.config;
    cfg.k = 1;
    cfg.alpha_base = 0.8;
    cfg.beta = 0.0;
    cfg.lambda = 1e-4;
    cfg.manual_layers = std::vector<std::size_t>{3};

    const double rho_before = pipeline::refusal_rate(planted.checkpoint, planted.vocab,
                                                     planted.harmful_prompts, lexicon,
                                                     cfg.max_tokens);
    std::printf("refusal rate before: %.3f\n", rho_before);

    const auto result = pipeline::gabliterate(planted.checkpoint, planted.vocab,
                                              planted.harmful_prompts, planted.harmless_prompts,
                                              cfg, lexicon);
    const double rho_after = pipeline::refusal_rate(result.checkpoint, planted.vocab,
                                                    planted.harmful_prompts, lexicon,
                                                    cfg.max_tokens);
    const double agreement = pipeline::harmless_agreement(planted.checkpoint, result.checkpoint,
                                                          planted.vocab,
                                                          planted.harmless_prompts,
                                                          cfg.max_tokens);
    std::printf("refusal rate after:  %.3f\n", rho_after);
    std::printf("harmless agreement:  %.3f\n", agreement);

    const std::string modified_path = out_dir + "/planted.gabliterated.safetensors";
    ckpt::save_checkpoint(result.checkpoint, modified_path);
    toy::save_vocabulary(planted.vocab, modified_path + ".vocab.json");

    json report = json::parse(pipeline::reports_to_json(result.reports, result.status));
    report["refusal_rate_before"] = rho_before;
    report["refusal_rate_after"] = rho_after;
    report["harmless_agreement"] = agreement;
    fsutil::write_text_atomic(out_dir + "/demo.report.json", report.dump(2) + "\n");

    CommonOpts manifest_opts = opts;
    manifest_opts.config = cfg;
    manifest_opts.model_path = model_path;
    manifest_opts.out_path = out_dir + "/demo.report.json";
    write_manifest(manifest_opts, "demo", phase_timings_json(result));

    std::printf("wrote %s\n", modified_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gabliterate: refusal-subspace weight surgery toolkit"};
    app.require_subcommand(1);

    CommonOpts opts;
    auto add_common = [&](CLI::App* sub, bool with_prompts = true) {
        sub->add_option("--model", opts.model_path, "checkpoint container path");
        sub->add_option("--config", opts.config_path,
                        "model config JSON (default: <model>.config.json)");
        if (with_prompts) {
            sub->add_option("--harmful", opts.harmful_path, "harmful prompts JSONL");
            sub->add_option("--harmless", opts.harmless_path, "harmless prompts JSONL");
        }
        sub->add_option("--out", opts.out_path, "output path");
        sub->add_option("--seed", opts.config.seed, "random seed");
        sub->add_option("--manual-layers", opts.manual_layers_csv,
                        "comma-separated 1-based layer indices (skips the scan)");
        sub->add_option("--k", opts.config.k, "number of directions");
        sub->add_option("--lambda", opts.config.lambda, "ridge regularization");
        sub->add_option("--alpha", opts.config.alpha_base, "base scaling");
        sub->add_option("--tau", opts.config.tau, "effectiveness threshold");
        sub->add_option("--beta", opts.config.beta, "adaptive scaling strength");
        sub->add_option("--max-tokens", opts.config.max_tokens, "generation length");
        sub->add_option("--num-shuffles", opts.config.num_shuffles, "difference-matrix shuffles");
        sub->add_option("--lexicon", opts.lexicon_path,
                        "refusal lexicon JSON array (default: built-in phrase list)");
    };

    bool scan_perf = false;
    auto* scan = app.add_subcommand("scan", "separability scan (or --perf timing study)");
    add_common(scan);
    scan->add_flag("--perf", scan_perf, "time the projection phase at d = 64, 128, 256");

    std::string method = "svd_pairing";
    auto* extract = app.add_subcommand("extract", "extract refusal directions");
    add_common(extract);
    extract->add_option("--method", method,
                        "svd_pairing | fisher_lda | logistic_probe | mean_difference");

    auto* apply = app.add_subcommand("apply", "run the full pipeline and write a new checkpoint");
    add_common(apply);

    std::string baseline_path;
    auto* eval = app.add_subcommand("eval", "refusal rate of a model on a prompt set");
    add_common(eval);
    eval->add_option("--baseline", baseline_path, "original model for the agreement metric");

    std::string methods_csv = "svd_pairing,fisher_lda,logistic_probe,mean_difference";
    auto* compare = app.add_subcommand("compare", "extraction-method ablation table");
    add_common(compare);
    compare->add_option("--methods", methods_csv, "comma-separated method list (>= 2)");

    std::string suite = "all";
    auto* verify_cmd = app.add_subcommand("verify", "numeric verification suite");
    add_common(verify_cmd, false);
    verify_cmd->add_option("--suite", suite, "\"all\" or a check-name prefix");

    std::string demo_dir;
    auto* demo = app.add_subcommand("demo", "planted-model end-to-end demonstration");
    add_common(demo, false);
    demo->add_option("--out-dir", demo_dir, "output directory (default demo_out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (scan->parsed()) return run_scan(opts, scan_perf);
        if (extract->parsed()) return run_extract(opts, method);
        if (apply->parsed()) return run_apply(opts);
        if (eval->parsed()) return run_eval(opts, baseline_path);
        if (compare->parsed()) return run_compare(opts, methods_csv);
        if (verify_cmd->parsed()) return run_verify(opts, suite);
        if (demo->parsed()) return run_demo(opts, demo_dir);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
