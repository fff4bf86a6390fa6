#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string bin() {
    const char* env = std::getenv("CSPR_BIN");
    REQUIRE(env != nullptr);
    return env;
}

int run(const std::string& args, std::string* out = nullptr) {
    const std::string out_file = "cli_stdout.txt";
    const int rc = std::system((bin() + " " + args + " > " + out_file + " 2> cli_stderr.txt").c_str());
    if (out) {
        std::ifstream in(out_file);
        std::stringstream ss;
        ss << in.rdbuf();
        *out = ss.str();
    }
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// small benchmark so CLI runs stay fast
const char* kTinyGen = "--scenes 3 --n-points 96 --tile 40";

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& p) const { return (path / p).string(); }
};

}  // namespace

TEST_CASE("generate is byte deterministic and honors the setting flag") {
    TempDir tmp("gen");
    CHECK(run("generate --seed 3 " + std::string(kTinyGen) + " --out " + (tmp / "a")) == 0);
    CHECK(run("generate --seed 3 " + std::string(kTinyGen) + " --out " + (tmp / "b")) == 0);
    CHECK(slurp(tmp / "a/manifest.json") == slurp(tmp / "b/manifest.json"));
    CHECK(slurp(tmp / "a/db_000000.cspc") == slurp(tmp / "b/db_000000.cspc"));

    auto manifest = nlohmann::json::parse(slurp(tmp / "a/manifest.json"));
    CHECK(manifest.at("setting") == "AerialOnly");

    CHECK(run("generate --seed 3 " + std::string(kTinyGen) + " --setting aerial-ground --out " +
              (tmp / "c")) == 0);
    auto manifest2 = nlohmann::json::parse(slurp(tmp / "c/manifest.json"));
    CHECK(manifest2.at("setting") == "AerialPlusGround");
    CHECK(manifest2.at("database").size() == 6);  // aerial + ground per scene
}

TEST_CASE("default desk preset yields 32 database entries and 32 queries") {
    TempDir tmp("desk");
    std::string out;
    CHECK(run("generate --seed 0 --out " + (tmp / "bench"), &out) == 0);
    auto manifest = nlohmann::json::parse(slurp(tmp / "bench/manifest.json"));
    CHECK(manifest.at("database").size() == 32);
    CHECK(manifest.at("queries").size() == 32);
    CHECK(out.find("database entries: 32") != std::string::npos);
    CHECK(out.find("queries: 32") != std::string::npos);
}

TEST_CASE("config round trip reproduces identical outputs") {
    TempDir tmp("roundtrip");
    CHECK(run("generate --seed 11 " + std::string(kTinyGen) + " --out " + (tmp / "a")) == 0);
    // re-feed the effective config; no other flags
    CHECK(run("generate --config " + (tmp / "a/config.txt") + " --out " + (tmp / "b")) == 0);
    CHECK(slurp(tmp / "a/manifest.json") == slurp(tmp / "b/manifest.json"));
    CHECK(slurp(tmp / "a/config.txt") == slurp(tmp / "b/config.txt"));
}

TEST_CASE("train smoke run writes one log line and a checkpoint") {
    TempDir tmp("train");
    REQUIRE(run("generate --seed 5 " + std::string(kTinyGen) + " --out " + (tmp / "bench")) == 0);
    std::ofstream cfg(tmp / "small.cfg");
    cfg << "d_v=4\nd_r=4\nd_out=8\nclusters=2\nheads=2\nmemory_slots=4\nsubsteps=1\n"
           "resolutions=0.2,0.4\nk_s=2\nbatch_init=4\nbatch_max=8\n";
    cfg.close();
    CHECK(run("train --config " + (tmp / "small.cfg") + " --bench " + (tmp / "bench/manifest.json") +
              " --epochs 1 --out " + (tmp / "run")) == 0);
    std::ifstream log(tmp / "run/train_log.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line))
        if (!line.empty()) {
            auto j = nlohmann::json::parse(line);
            CHECK(j.at("epoch") == ++lines);
        }
    CHECK(lines == 1);
    CHECK(fs::exists(tmp / "run/checkpoint.clkp"));
    CHECK(fs::exists(tmp / "run/config.txt"));
}

TEST_CASE("campus-scale and vehicle-scale preset flags are accepted") {
    TempDir tmp("presets");
    REQUIRE(run("generate --seed 6 --scenes 2 --n-points 64 --tile 40 --out " + (tmp / "bench")) == 0);
    std::ofstream cfg(tmp / "campus.cfg");
    cfg << "resolutions=0.05,0.12,0.4\nk_s=3\nsubsteps=3\nd_v=4\nd_r=4\nd_out=8\nclusters=2\n"
           "heads=2\nmemory_slots=4\nbatch_init=2\nbatch_max=4\n";
    cfg.close();
    CHECK(run("train --config " + (tmp / "campus.cfg") + " --bench " + (tmp / "bench/manifest.json") +
              " --epochs 1 --out " + (tmp / "run_campus")) == 0);

    std::ofstream cfg2(tmp / "vehicle.cfg");
    cfg2 << "resolutions=0.01,0.12,0.2\nsubsteps=2\nk_s=3\nd_v=4\nd_r=4\nd_out=8\nclusters=2\n"
            "heads=2\nmemory_slots=4\nbatch_init=2\nbatch_max=4\n";
    cfg2.close();
    CHECK(run("train --config " + (tmp / "vehicle.cfg") + " --bench " + (tmp / "bench/manifest.json") +
              " --epochs 1 --out " + (tmp / "run_vehicle")) == 0);
}

TEST_CASE("embed then eval --db reproduces the in-process evaluation") {
    TempDir tmp("evalrt");
    REQUIRE(run("generate --seed 7 " + std::string(kTinyGen) + " --out " + (tmp / "bench")) == 0);
    std::ofstream cfg(tmp / "small.cfg");
    cfg << "d_v=4\nd_r=4\nd_out=8\nclusters=2\nheads=2\nmemory_slots=4\nsubsteps=1\n"
           "resolutions=0.2,0.4\nk_s=2\nbatch_init=4\nbatch_max=8\n";
    cfg.close();
    const std::string common = "--config " + (tmp / "small.cfg") + " --bench " + (tmp / "bench/manifest.json");
    REQUIRE(run("train " + common + " --epochs 1 --out " + (tmp / "run")) == 0);
    const std::string ckpt = tmp / "run/checkpoint.clkp";

    CHECK(run("embed " + common + " --checkpoint " + ckpt + " --out " + (tmp / "db.cldb")) == 0);
    CHECK(run("eval " + common + " --checkpoint " + ckpt + " --out " + (tmp / "eval_direct")) == 0);
    CHECK(run("eval " + common + " --checkpoint " + ckpt + " --db " + (tmp / "db.cldb") + " --out " +
              (tmp / "eval_db")) == 0);
    CHECK(slurp(tmp / "eval_direct/report.json") == slurp(tmp / "eval_db/report.json"));

    auto rep = nlohmann::json::parse(slurp(tmp / "eval_direct/report.json"));
    CHECK(rep.at("ar_at_n").size() == 25);
    CHECK(rep.at("setting") == "AerialOnly");
}

TEST_CASE("retrieve prints exactly n rows") {
    TempDir tmp("retrieve");
    REQUIRE(run("generate --seed 8 " + std::string(kTinyGen) + " --out " + (tmp / "bench")) == 0);
    std::ofstream cfg(tmp / "small.cfg");
    cfg << "d_v=4\nd_r=4\nd_out=8\nclusters=2\nheads=2\nmemory_slots=4\nsubsteps=1\n"
           "resolutions=0.2,0.4\nk_s=2\nbatch_init=4\nbatch_max=8\n";
    cfg.close();
    const std::string common = "--config " + (tmp / "small.cfg") + " --bench " + (tmp / "bench/manifest.json");
    REQUIRE(run("train " + common + " --epochs 1 --out " + (tmp / "run")) == 0);
    const std::string ckpt = tmp / "run/checkpoint.clkp";
    REQUIRE(run("embed " + common + " --checkpoint " + ckpt + " --out " + (tmp / "db.cldb")) == 0);

    std::string out;
    CHECK(run("retrieve --config " + (tmp / "small.cfg") + " --db " + (tmp / "db.cldb") + " --checkpoint " +
              ckpt + " --query " + (tmp / "bench/query_000000.cspc") + " --n 3", &out) == 0);
    std::size_t rows = 0;
    std::stringstream ss(out);
    std::string line;
    while (std::getline(ss, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
}

TEST_CASE("exit codes: 2 for invalid flags, 3 for missing files") {
    TempDir tmp("exits");
    CHECK(run("generate --bogus-flag 1 --out " + (tmp / "x")) == 2);
    CHECK(run("train --bench does_not_exist/manifest.json --out " + (tmp / "y")) == 3);
    // unknown config key is a flag-level error
    std::ofstream bad(tmp / "bad.cfg");
    bad << "no_such_key=1\n";
    bad.close();
    CHECK(run("generate --config " + (tmp / "bad.cfg") + " --out " + (tmp / "z")) == 2);
}

TEST_CASE("gradcheck subcommand passes on an intact build") {
    std::string out;
    CHECK(run("gradcheck --seeds 2", &out) == 0);
    CHECK(out.find("FAIL") == std::string::npos);
    CHECK(out.find("matmul") != std::string::npos);
    CHECK(out.find("block.lazy_triplet_end_to_end") != std::string::npos);
}
