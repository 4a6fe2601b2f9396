#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

// Drives the installed binary end to end: exit codes, artifacts, determinism.

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code;
    std::string output;  // stdout + stderr
};

CmdResult run_cli(const std::string& args) {
    static int n = 0;
    std::string log = "cli_log_" + std::to_string(n++) + ".txt";
    std::string cmd = std::string(NFUSE_CLI_PATH) + " " + args + " > " + log + " 2>&1";
    int status = std::system(cmd.c_str());
    CmdResult r;
#ifdef _WIN32
    r.exit_code = status;
#else
    r.exit_code = WEXITSTATUS(status);
#endif
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.output = ss.str();
    std::remove(log.c_str());
    return r;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Small 2-modality setup so a train run takes seconds, not minutes.
void write_tiny_config(const std::string& path, const std::string& extra_train = "") {
    std::ofstream f(path);
    f << R"({
  "seed": 5,
  "task": {"modalities": 2, "channels": 4, "feature_shape": [3],
           "train_samples": 64, "val_samples": 32, "test_samples": 32,
           "correlation_mode": "redundant"},
  "train": {"steps": 25, "batch_size": 8, "lr": 0.001)" << extra_train << R"(},
  "block": {"depth": 1, "heads": 2, "ffn_expansion": 2}
})";
}

}  // namespace

TEST_CASE("gradcheck passes and prints one line per check") {
    CmdResult r = run_cli("gradcheck ops");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("PASS") != std::string::npos);
    CHECK(r.output.find("FAIL") == std::string::npos);
    CHECK(r.output.find("max_rel_err=") != std::string::npos);
}

TEST_CASE("gradcheck detects an injected gradient fault with exit 1") {
    CmdResult r = run_cli("gradcheck ops --corrupt mul");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("mul") != std::string::npos);
    CHECK(r.output.find("FAIL") != std::string::npos);
}

TEST_CASE("invariants run clean") {
    CmdResult r = run_cli("invariants --trials 10");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("FAIL") == std::string::npos);
    CHECK(r.output.find("PASS") != std::string::npos);
}

TEST_CASE("train writes the full artifact set and is deterministic") {
    write_tiny_config("cli_cfg.json");
    fs::remove_all("cli_out_a");
    fs::remove_all("cli_out_b");
    CmdResult a = run_cli("train --config cli_cfg.json --out cli_out_a");
    REQUIRE(a.exit_code == 0);
    for (const char* name :
         {"resolved_config.json", "checkpoint.tfmn", "loss_curve.csv", "metrics.jsonl", "table.csv"})
        CHECK(fs::exists(std::string("cli_out_a/") + name));

    // rerun into the same directory (the out path is echoed inside the
    // config record, so identical bytes require an identical destination)
    fs::copy("cli_out_a", "cli_out_b", fs::copy_options::recursive);
    CmdResult b = run_cli("train --config cli_cfg.json --out cli_out_a");
    REQUIRE(b.exit_code == 0);
    CHECK(slurp("cli_out_a/metrics.jsonl") == slurp("cli_out_b/metrics.jsonl"));
    CHECK(slurp("cli_out_a/table.csv") == slurp("cli_out_b/table.csv"));
    CHECK(slurp("cli_out_a/loss_curve.csv") == slurp("cli_out_b/loss_curve.csv"));
    CHECK(slurp("cli_out_a/resolved_config.json") == slurp("cli_out_b/resolved_config.json"));

    // 2 modalities => 3 subset rows + header + average in the table
    std::string table = slurp("cli_out_a/table.csv");
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);
    CHECK(table.substr(0, 12) == "m1,m2,accura");
}

TEST_CASE("evaluate reproduces training-time metrics from the checkpoint") {
    REQUIRE(fs::exists("cli_out_a/checkpoint.tfmn"));  // from the train test above
    fs::remove_all("cli_out_eval");
    CmdResult r = run_cli(
        "evaluate --config cli_cfg.json --checkpoint cli_out_a/checkpoint.tfmn --out cli_out_eval");
    REQUIRE(r.exit_code == 0);
    CHECK(slurp("cli_out_eval/table.csv") == slurp("cli_out_a/table.csv"));
}

TEST_CASE("a different seed changes the results") {
    fs::remove_all("cli_out_seed");
    CmdResult r = run_cli("train --config cli_cfg.json --out cli_out_seed --seed 17");
    REQUIRE(r.exit_code == 0);
    CHECK(slurp("cli_out_seed/loss_curve.csv") != slurp("cli_out_a/loss_curve.csv"));
}

TEST_CASE("config errors exit with code 2") {
    {
        std::ofstream f("cli_bad.json");
        f << R"({"task": {"modality_count": 4}})";  // unknown key
    }
    CmdResult r = run_cli("train --config cli_bad.json");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("modality_count") != std::string::npos);

    {
        std::ofstream f("cli_bad.json");
        f << "{ not json";
    }
    CHECK(run_cli("train --config cli_bad.json").exit_code == 2);
    CHECK(run_cli("train --config cli_absent.json").exit_code == 2);
    std::remove("cli_bad.json");
}

TEST_CASE("numerical blow-up exits with code 3 and names the step") {
    write_tiny_config("cli_blowup.json", ", \"eps\": 1e-8");
    // overwrite with an lr guaranteed to overflow f32 activations
    {
        std::ofstream f("cli_blowup.json");
        f << R"({
  "seed": 5,
  "task": {"modalities": 2, "channels": 4, "feature_shape": [3],
           "train_samples": 64, "val_samples": 32, "test_samples": 32,
           "correlation_mode": "redundant"},
  "train": {"steps": 50, "batch_size": 8, "lr": 1e18},
  "block": {"depth": 1, "heads": 2, "ffn_expansion": 2}
})";
    }
    CmdResult r = run_cli("train --config cli_blowup.json --out cli_out_blowup");
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("step") != std::string::npos);
    CHECK(r.output.find("lr=") != std::string::npos);
    std::remove("cli_blowup.json");
    fs::remove_all("cli_out_blowup");
}

TEST_CASE("compare requires at least two fusers") {
    CmdResult r = run_cli("compare --config cli_cfg.json --fusers mean --out cli_out_cmp0");
    CHECK(r.exit_code == 2);
    CHECK(run_cli("compare --config cli_cfg.json --fusers mean,bogus").exit_code == 2);
}

TEST_CASE("compare trains each fuser and writes comparison artifacts") {
    fs::remove_all("cli_out_cmp");
    CmdResult r =
        run_cli("compare --config cli_cfg.json --fusers mean,max --seeds 2 --out cli_out_cmp");
    REQUIRE(r.exit_code == 0);
    REQUIRE(fs::exists("cli_out_cmp/compare.csv"));
    REQUIRE(fs::exists("cli_out_cmp/wilcoxon.csv"));
    std::string table = slurp("cli_out_cmp/compare.csv");
    CHECK(table.substr(0, 6) == "m1,m2,");
    CHECK(table.find("mean") != std::string::npos);
    CHECK(table.find("max") != std::string::npos);
    CHECK(table.find("average") != std::string::npos);
    std::string wx = slurp("cli_out_cmp/wilcoxon.csv");
    CHECK(wx.find("fuser_a,fuser_b,p_value") != std::string::npos);
    CHECK(wx.find("mean,max,") != std::string::npos);
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);  // header + 3 masks + average

    fs::remove_all("cli_out_cmp");
    fs::remove_all("cli_out_a");
    fs::remove_all("cli_out_b");
    fs::remove_all("cli_out_eval");
    fs::remove_all("cli_out_seed");
    std::remove("cli_cfg.json");
}

TEST_CASE("precision flag accepts f64") {
    write_tiny_config("cli_cfg64.json");
    fs::remove_all("cli_out64");
    CmdResult r = run_cli("train --config cli_cfg64.json --out cli_out64 --precision f64");
    CHECK(r.exit_code == 0);
    CHECK(run_cli("train --config cli_cfg64.json --precision nope").exit_code != 0);
    fs::remove_all("cli_out64");
    std::remove("cli_cfg64.json");
}
