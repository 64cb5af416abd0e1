#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

#include "gabliteration/checkpoint.hpp"
#include "gabliteration/fsutil.hpp"
#include "gabliteration/toy_model.hpp"

using namespace gabl;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / "gabl_cli_tests";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(GABL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

// Planted model on disk, shared by the CLI cases.
struct Fixture {
    std::string model, harmful, harmless;
    Fixture() {
        const auto pm = toy::build_planted_refusal_model(32, 8, 64, 3, 0);
        model = (work_dir() / "m.safetensors").string();
        harmful = (work_dir() / "harmful.jsonl").string();
        harmless = (work_dir() / "harmless.jsonl").string();
        ckpt::save_checkpoint(pm.checkpoint, model);
        toy::save_vocabulary(pm.vocab, model + ".vocab.json");
        toy::save_prompts_jsonl(pm.harmful_prompts, harmful);
        toy::save_prompts_jsonl(pm.harmless_prompts, harmless);
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

}  // namespace

TEST_CASE("cli: missing required flags exit with code 2") {
    CHECK(run_cli("apply") == 2);
    CHECK(run_cli("scan") == 2);
    CHECK(run_cli("definitely-not-a-subcommand") == 2);
    CHECK(run_cli("apply --model x --bogus-flag 1") == 2);
}

TEST_CASE("cli: apply refuses to overwrite its input") {
    const auto& f = fixture();
    CHECK(run_cli("apply --model " + f.model + " --harmful " + f.harmful + " --harmless " +
                  f.harmless + " --out " + f.model) == 2);
}

TEST_CASE("cli: compare requires two methods") {
    const auto& f = fixture();
    const std::string out = (work_dir() / "cmp.json").string();
    CHECK(run_cli("compare --model " + f.model + " --harmful " + f.harmful + " --harmless " +
                  f.harmless + " --out " + out + " --methods svd_pairing") == 2);
}

TEST_CASE("cli: scan emits a deterministic report") {
    const auto& f = fixture();
    const std::string out1 = (work_dir() / "scan1.json").string();
    const std::string out2 = (work_dir() / "scan2.json").string();
    const std::string args = " --model " + f.model + " --harmful " + f.harmful + " --harmless " +
                             f.harmless + " --seed 0 --out ";
    REQUIRE(run_cli("scan" + args + out1) == 0);
    REQUIRE(run_cli("scan" + args + out2) == 0);
    CHECK(fsutil::read_text_file(out1) == fsutil::read_text_file(out2));
    CHECK(fsutil::read_text_file(out1).find("\"selected\": true") != std::string::npos);
    CHECK(fs::exists(out1 + ".manifest.json"));
}

TEST_CASE("cli: apply produces a working modified checkpoint and report") {
    const auto& f = fixture();
    const std::string out = (work_dir() / "modified.safetensors").string();
    const std::string args = "apply --model " + f.model + " --harmful " + f.harmful +
                             " --harmless " + f.harmless + " --manual-layers 3 --k 1 " +
                             "--alpha 0.8 --beta 0 --lambda 1e-4 --max-tokens 8 --seed 0 --out " +
                             out;
    REQUIRE(run_cli(args) == 0);
    CHECK(fs::exists(out));
    CHECK(fs::exists(out + ".report.json"));
    CHECK(fs::exists(out + ".manifest.json"));
    const std::string report = fsutil::read_text_file(out + ".report.json");
    CHECK(report.find("\"status\": \"ok\"") != std::string::npos);

    // The written checkpoint loads and differs from the input at layer 3.
    const auto modified = ckpt::load_checkpoint(out);
    const auto original = ckpt::load_checkpoint(f.model);
    CHECK_FALSE(modified.tensors.at("layers.2.mlp.down") ==
                original.tensors.at("layers.2.mlp.down"));
    CHECK(modified.tensors.at("layers.4.mlp.down") == original.tensors.at("layers.4.mlp.down"));
}

TEST_CASE("cli: eval reports the refusal rate") {
    const auto& f = fixture();
    const std::string out = (work_dir() / "eval.json").string();
    REQUIRE(run_cli("eval --model " + f.model + " --harmful " + f.harmful + " --out " + out) == 0);
    CHECK(fsutil::read_text_file(out).find("\"refusal_rate\": 1.0") != std::string::npos);
}

TEST_CASE("cli: verify subset runs clean") {
    const std::string out = (work_dir() / "verify.json").string();
    CHECK(run_cli("verify --suite condition_number --seed 0 --out " + out) == 0);
    CHECK(fsutil::read_text_file(out).find("condition_number") != std::string::npos);
}
