#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cspr/config.hpp"
#include "cspr/gradcheck.hpp"
#include "cspr/retrieval.hpp"
#include "cspr/train.hpp"

namespace fs = std::filesystem;
using namespace cspr;

namespace {

constexpr int kExitInvalidFlags = 2;
constexpr int kExitIo = 3;
constexpr int kExitNonFiniteLoss = 4;
constexpr int kExitGradcheckFailed = 5;

void echo_config(const cli::RunConfig& cfg, const std::string& out_dir) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    cfg.save((fs::path(out_dir) / "config.txt").string());
}

int cmd_generate(const cli::RunConfig& cfg, const std::string& out_dir) {
    if (out_dir.empty()) throw ContractError("generate: --out is required");
    geo::Benchmark bench;
    if (cfg.mode == "grid") {
        geo::Scene scene = geo::generate_scene(mix_seed(cfg.seed, 0x5ce), cfg.boxes_per_scene * 4, cfg.extent);
        bench = geo::build_benchmark(scene, cfg.grid_options());
    } else {
        bench = geo::build_site_benchmark(cfg.site_options());
    }
    geo::write_benchmark(bench, out_dir);
    echo_config(cfg, out_dir);
    std::size_t aerial_db = 0, ground_db = 0;
    for (const auto& p : bench.database) (p.source == geo::Source::Aerial ? aerial_db : ground_db) += 1;
    std::printf("benchmark written to %s\n", out_dir.c_str());
    std::printf("database entries: %zu (aerial %zu, ground %zu)\n", bench.database.size(), aerial_db,
                ground_db);
    std::printf("queries: %zu\n", bench.queries.size());
    std::printf("setting: %s, success radius: %.3f m\n", geo::setting_name(bench.setting),
                bench.success_radius);
    return 0;
}

int cmd_train(const cli::RunConfig& cfg, const std::string& bench_path, const std::string& out_dir) {
    if (out_dir.empty()) throw ContractError("train: --out is required");
    geo::Benchmark bench = geo::load_benchmark(bench_path);
    fs::create_directories(out_dir);
    echo_config(cfg, out_dir);

    model::Model model(cfg.model_config(), cfg.seed);
    train::TrainConfig tc = cfg.train_config();
    const std::string ckpt = (fs::path(out_dir) / "checkpoint.clkp").string();
    tc.best_checkpoint_path = ckpt;

    std::ofstream log((fs::path(out_dir) / "train_log.jsonl").string(), std::ios::trunc);
    if (!log) throw IoError("cannot write training log in " + out_dir);
    try {
        train::TrainResult res = train::train_model(model, bench, tc, &log);
        std::printf("trained %zu epochs; best val AR@1 = %.4f at epoch %zu\n", res.log.size(),
                    res.best_val_ar1, res.best_epoch);
        std::printf("checkpoint: %s\n", ckpt.c_str());
        return 0;
    } catch (const NumericError& e) {
        std::error_code ignore;
        fs::remove(ckpt, ignore);  // partial checkpoint is unusable
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNonFiniteLoss;
    }
}

int cmd_embed(const cli::RunConfig& cfg, const std::string& bench_path, const std::string& ckpt,
              const std::string& out_file) {
    if (out_file.empty()) throw ContractError("embed: --out is required");
    geo::Benchmark bench = geo::load_benchmark(bench_path);
    model::Model model = model::Model::load(cfg.model_config(), ckpt);
    rev::EmbeddingDatabase db = rev::embed_database(model, bench.database, std::max<std::size_t>(1, cfg.threads));
    rev::save_database(db, out_file);
    std::printf("embedded %zu database entries (dim %zu) -> %s\n", db.size(), db.dim, out_file.c_str());
    return 0;
}

int cmd_eval(const cli::RunConfig& cfg, const std::string& bench_path, const std::string& ckpt,
             const std::string& db_file, const std::string& out_dir) {
    if (out_dir.empty()) throw ContractError("eval: --out is required");
    geo::Benchmark bench = geo::load_benchmark(bench_path);
    model::Model model = model::Model::load(cfg.model_config(), ckpt);
    const std::size_t threads = std::max<std::size_t>(1, cfg.threads);

    rev::EvalReport report;
    if (db_file.empty()) {
        report = rev::evaluate(model, bench, bench.setting, threads);
    } else {
        rev::EmbeddingDatabase db = rev::load_database(db_file);
        rev::EmbeddingDatabase queries = rev::embed_database(model, bench.queries, threads);
        report = rev::evaluate_embeddings(db, queries, bench.success_radius, bench.setting);
    }
    fs::create_directories(out_dir);
    echo_config(cfg, out_dir);
    rev::save_report(report, (fs::path(out_dir) / "report.json").string(),
                     (fs::path(out_dir) / "ar_curve.csv").string());
    std::printf("queries: %zu  AR@1 = %.4f  AR@1%% = %.4f  AR@25 = %.4f\n", report.n_queries,
                report.ar_at_n[0], report.ar_at_one_percent, report.ar_at_n.back());
    std::printf("report: %s\n", (fs::path(out_dir) / "report.json").string().c_str());
    return 0;
}

int cmd_retrieve(const cli::RunConfig& cfg, const std::string& db_file, const std::string& ckpt,
                 const std::string& query_file, std::size_t n) {
    rev::EmbeddingDatabase db = rev::load_database(db_file);
    model::Model model = model::Model::load(cfg.model_config(), ckpt);
    geo::Patch query = geo::load_patch(query_file);
    query.id = std::numeric_limits<std::uint64_t>::max();  // outside any cached benchmark id
    ad::NoGradGuard ng;
    ad::Tensor emb = model.embed(query);
    std::unordered_map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < db.size(); ++i) row_of.emplace(db.ids[i], i);
    const auto hits = rev::retrieve(db, emb.data(), std::min(n, db.size()));
    for (std::size_t r = 0; r < hits.size(); ++r) {
        const std::size_t row = row_of.at(hits[r].id);
        std::printf("%zu %llu %.6f %.3f %.3f\n", r + 1, static_cast<unsigned long long>(hits[r].id),
                    hits[r].distance, db.geo[row].first, db.geo[row].second);
    }
    return 0;
}

int cmd_gradcheck(std::size_t seeds, double eps, double tolerance) {
    bool all_pass = true;
    for (const auto* catalog : {&ad::kernel_catalog(), &ad::block_catalog()}) {
        const ad::SuiteResult suite = ad::run_suite(*catalog, seeds, eps, tolerance);
        for (const auto& line : suite.lines)
            std::printf("%-34s max_rel_error=%.3e coords=%zu %s\n", line.name.c_str(), line.max_rel_error,
                        line.coords, line.pass ? "PASS" : "FAIL");
        all_pass = all_pass && suite.all_pass;
    }
    if (!all_pass) {
        std::fprintf(stderr, "gradcheck: at least one kernel or block exceeded tolerance %.1e\n", tolerance);
        return kExitGradcheckFailed;
    }
    std::printf("gradcheck: all kernels and blocks within %.1e\n", tolerance);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-source 3D place recognition pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    cli::RunConfig cfg;
    // file values load first so explicit flags override them
    std::string config_path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) config_path = argv[i + 1];
        else if (arg.rfind("--config=", 0) == 0) config_path = arg.substr(9);
    }
    try {
        if (!config_path.empty()) cfg.load_file(config_path);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInvalidFlags;
    }

    std::string out_dir, bench_path, ckpt_path, db_file, query_file;
    std::size_t retrieve_n = 5;
    std::size_t gc_seeds = 5;
    double gc_eps = 1e-6, gc_tol = 1e-4;

    app.add_option("--config", config_path, "key=value config file (flags override)");
    app.add_option("--seed", cfg.seed, "base RNG seed");
    app.add_option("--threads", cfg.threads, "worker threads for embedding");
    app.add_option("--out", out_dir, "output directory or file");

    auto* gen = app.add_subcommand("generate", "write a synthetic cross-source benchmark");
    gen->fallthrough();
    gen->add_option("--scenes", cfg.scenes, "number of scene sites");
    gen->add_option("--setting", cfg.setting, "aerial-only | aerial-ground");
    gen->add_option("--mode", cfg.mode, "sites | grid");
    gen->add_option("--n-points", cfg.n_points, "points per patch");
    gen->add_option("--tile", cfg.tile, "tile edge length in meters");
    gen->add_option("--extent", cfg.extent, "grid mode scene extent");
    gen->add_option("--spacing", cfg.spacing, "grid mode database pitch");
    gen->add_option("--n-ground", cfg.n_ground, "grid mode query count");

    auto* tr = app.add_subcommand("train", "train on a benchmark manifest");
    tr->fallthrough();
    tr->add_option("--bench", bench_path, "path to manifest.json")->required();
    tr->add_option("--epochs", cfg.epochs, "training epochs");
    tr->add_option("--lr", cfg.lr, "Adam learning rate");
    tr->add_option("--margin", cfg.margin, "triplet margin");

    auto* em = app.add_subcommand("embed", "embed the benchmark database into a CLDB file");
    em->fallthrough();
    em->add_option("--bench", bench_path, "path to manifest.json")->required();
    em->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();

    auto* ev = app.add_subcommand("eval", "evaluate recall on a benchmark");
    ev->fallthrough();
    ev->add_option("--bench", bench_path, "path to manifest.json")->required();
    ev->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    ev->add_option("--db", db_file, "precomputed embedding database (optional)");

    auto* rt = app.add_subcommand("retrieve", "print the top-N matches for one query patch");
    rt->fallthrough();
    rt->add_option("--db", db_file, "embedding database")->required();
    rt->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    rt->add_option("--query", query_file, "query patch file (.cspc or text)")->required();
    rt->add_option("--n", retrieve_n, "rows to print");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every kernel and block");
    gc->fallthrough();
    gc->add_option("--seeds", gc_seeds, "random seeds per case");
    gc->add_option("--eps", gc_eps, "base finite-difference step");
    gc->add_option("--tolerance", gc_tol, "max relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") return app.exit(e);
        app.exit(e);
        return kExitInvalidFlags;
    }

    try {
        if (gen->parsed()) return cmd_generate(cfg, out_dir);
        if (tr->parsed()) return cmd_train(cfg, bench_path, out_dir);
        if (em->parsed()) return cmd_embed(cfg, bench_path, ckpt_path, out_dir);
        if (ev->parsed()) return cmd_eval(cfg, bench_path, ckpt_path, db_file, out_dir);
        if (rt->parsed()) return cmd_retrieve(cfg, db_file, ckpt_path, query_file, retrieve_n);
        if (gc->parsed()) return cmd_gradcheck(gc_seeds, gc_eps, gc_tol);
    } catch (const ContractError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInvalidFlags;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
