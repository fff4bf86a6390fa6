#include "cspr/retrieval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace cspr::rev {

void EmbeddingDatabase::validate() const {
    if (ids.size() * dim != vectors.size() || ids.size() != geo.size() || ids.size() != sources.size())
        throw ContractError("embedding database: inconsistent column lengths");
    for (std::size_t i = 1; i < ids.size(); ++i)
        if (ids[i] <= ids[i - 1]) throw ContractError("embedding database: ids must be sorted and unique");
    for (std::size_t i = 0; i < size(); ++i) {
        real norm2 = 0.0;
        for (real v : vec(i)) norm2 += v * v;
        if (std::abs(std::sqrt(norm2) - 1.0) > 1e-5)
            throw ContractError("embedding database: entry " + std::to_string(ids[i]) + " is not unit norm");
    }
}

EmbeddingDatabase embed_database(model::Model& model, const std::vector<geo::Patch>& patches,
                                 std::size_t threads) {
    if (patches.empty()) throw ContractError("embed_database: empty patch list");
    std::vector<std::size_t> order(patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return patches[a].id < patches[b].id; });

    EmbeddingDatabase db;
    db.dim = model.config().embedding_dim();
    db.ids.resize(patches.size());
    db.vectors.assign(patches.size() * db.dim, 0.0);
    db.geo.resize(patches.size());
    db.sources.resize(patches.size());

    // Warm the voxelization cache serially; worker threads then only read.
    for (const geo::Patch& p : patches) model.cache().get_or_build(p, model.config().resolutions);

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string error_text;
    std::mutex error_mutex;
    auto worker = [&] {
        while (true) {
            const std::size_t slot = next.fetch_add(1);
            if (slot >= order.size() || failed.load()) return;
            const geo::Patch& p = patches[order[slot]];
            try {
                ad::NoGradGuard ng;
                ad::Tensor emb = model.embed(p, ad::NormMode::Eval);
                if (emb.size() != db.dim) throw ShapeError("embed_database: embedding width mismatch");
                std::copy(emb.data().begin(), emb.data().end(), db.vectors.begin() + slot * db.dim);
                db.ids[slot] = p.id;
                db.geo[slot] = {p.easting, p.northing};
                db.sources[slot] = p.source;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                error_text = e.what();
                failed.store(true);
                return;
            }
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw Error("embed_database: " + error_text);
    db.validate();
    return db;
}

std::vector<Hit> retrieve(const EmbeddingDatabase& db, std::span<const real> query, std::size_t n) {
    if (db.size() == 0) throw ContractError("retrieve: empty database");
    if (n < 1 || n > db.size()) throw ContractError("retrieve: n must be in [1, |DB|]");
    if (query.size() != db.dim) throw ShapeError("retrieve: query width does not match the database");
    std::vector<Hit> hits;
    hits.reserve(db.size());
    for (std::size_t i = 0; i < db.size(); ++i) {
        real d2 = 0.0;
        const auto v = db.vec(i);
        for (std::size_t j = 0; j < db.dim; ++j) {
            const real diff = v[j] - query[j];
            d2 += diff * diff;
        }
        hits.push_back({db.ids[i], std::sqrt(d2)});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.id < b.id;
    });
    hits.resize(n);
    return hits;
}

double recall_at_n(const std::vector<std::vector<std::uint64_t>>& rankings,
                   const std::vector<std::vector<std::uint64_t>>& truth, std::size_t n,
                   std::size_t* skipped) {
    if (rankings.size() != truth.size()) throw ContractError("recall_at_n: ranking/truth size mismatch");
    std::size_t usable = 0, hits = 0, skip = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        if (truth[q].empty()) {
            ++skip;
            continue;
        }
        ++usable;
        const std::size_t top = std::min(n, rankings[q].size());
        for (std::size_t i = 0; i < top; ++i)
            if (std::find(truth[q].begin(), truth[q].end(), rankings[q][i]) != truth[q].end()) {
                ++hits;
                break;
            }
    }
    if (skipped) *skipped = skip;
    if (usable == 0) throw ContractError("recall_at_n: no query has a non-empty truth set");
    return static_cast<double>(hits) / static_cast<double>(usable);
}

std::size_t one_percent_n(std::size_t db_size) {
    if (db_size < 1) throw ContractError("one_percent_n: database must be non-empty");
    const double x = 0.01 * static_cast<double>(db_size);
    const double fl = std::floor(x);
    const double frac = x - fl;
    std::size_t n;
    if (frac > 0.5)
        n = static_cast<std::size_t>(fl) + 1;
    else if (frac < 0.5)
        n = static_cast<std::size_t>(fl);
    else
        n = static_cast<std::size_t>(fl) + (static_cast<std::size_t>(fl) % 2);  // half to even
    return std::max<std::size_t>(1, n);
}

EvalReport evaluate_embeddings(const EmbeddingDatabase& db, const EmbeddingDatabase& queries,
                               double success_radius, geo::Setting setting) {
    db.validate();
    queries.validate();
    if (queries.dim != db.dim) throw ShapeError("evaluate: query/database embedding width mismatch");

    EvalReport rep;
    rep.setting = setting;
    rep.success_radius = success_radius;

    const std::size_t top = std::min(kTopN, db.size());
    std::vector<std::vector<std::uint64_t>> rankings, truth;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        std::vector<std::uint64_t> t;
        for (std::size_t i = 0; i < db.size(); ++i) {
            const double dist = std::hypot(db.geo[i].first - queries.geo[q].first,
                                           db.geo[i].second - queries.geo[q].second);
            if (dist <= success_radius) t.push_back(db.ids[i]);
        }
        truth.push_back(std::move(t));
        std::vector<std::uint64_t> r;
        for (const Hit& h : retrieve(db, queries.vec(q), top)) r.push_back(h.id);
        rankings.push_back(std::move(r));
    }

    rep.ar_at_n.resize(kTopN);
    for (std::size_t n = 1; n <= kTopN; ++n)
        rep.ar_at_n[n - 1] = recall_at_n(rankings, truth, std::min(n, db.size()), &rep.n_skipped);
    rep.ar_at_one_percent = recall_at_n(rankings, truth, std::min(one_percent_n(db.size()), db.size()));
    rep.n_queries = queries.size() - rep.n_skipped;
    return rep;
}

EvalReport evaluate(model::Model& model, const geo::Benchmark& bench, geo::Setting setting,
                    std::size_t threads) {
    if (bench.setting != setting)
        throw ContractError("evaluate: benchmark setting " + std::string(geo::setting_name(bench.setting)) +
                            " does not match requested " + geo::setting_name(setting));
    EmbeddingDatabase db = embed_database(model, bench.database, threads);
    EmbeddingDatabase queries = embed_database(model, bench.queries, threads);
    return evaluate_embeddings(db, queries, bench.success_radius, setting);
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    j["setting"] = geo::setting_name(report.setting);
    j["success_radius"] = report.success_radius;
    j["n_queries"] = report.n_queries;
    j["ar_at_n"] = report.ar_at_n;
    j["ar_at_one_percent"] = report.ar_at_one_percent;
    return j.dump(2);
}

void save_report(const EvalReport& report, const std::string& json_path, const std::string& csv_path) {
    {
        std::ofstream out(json_path, std::ios::trunc);
        if (!out) throw IoError("cannot write report: " + json_path);
        out << report_to_json(report) << "\n";
    }
    if (!csv_path.empty()) {
        std::ofstream out(csv_path, std::ios::trunc);
        if (!out) throw IoError("cannot write curve: " + csv_path);
        out << "N,AR\n";
        for (std::size_t n = 1; n <= report.ar_at_n.size(); ++n)
            out << n << "," << report.ar_at_n[n - 1] << "\n";
    }
}

namespace {
constexpr char kDbMagic[4] = {'C', 'L', 'D', 'B'};
constexpr std::uint32_t kDbVersion = 1;
}  // namespace

void save_database(const EmbeddingDatabase& db, const std::string& path) {
    db.validate();
    BinWriter w;
    w.bytes(kDbMagic, 4);
    w.u32(kDbVersion);
    w.u32(static_cast<std::uint32_t>(db.size()));
    w.u32(static_cast<std::uint32_t>(db.dim));
    for (std::size_t i = 0; i < db.size(); ++i) {
        w.u64(db.ids[i]);
        w.f64(db.geo[i].first);
        w.f64(db.geo[i].second);
        w.u8(static_cast<std::uint8_t>(db.sources[i]));
        for (real v : db.vec(i)) w.f32(static_cast<float>(v));
    }
    w.finish_crc();
    w.write_file(path);
}

EmbeddingDatabase load_database(const std::string& path) {
    BinReader r = BinReader::from_file(path);
    r.check_crc("embedding database " + path);
    if (r.str(4) != std::string(kDbMagic, 4)) throw FormatError("embedding database " + path + ": bad magic");
    const std::uint32_t version = r.u32();
    if (version != kDbVersion)
        throw FormatError("embedding database " + path + ": unsupported version " + std::to_string(version));
    EmbeddingDatabase db;
    const std::uint32_t count = r.u32();
    db.dim = r.u32();
    db.ids.resize(count);
    db.vectors.resize(static_cast<std::size_t>(count) * db.dim);
    db.geo.resize(count);
    db.sources.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        db.ids[i] = r.u64();
        db.geo[i].first = r.f64();
        db.geo[i].second = r.f64();
        const std::uint8_t src = r.u8();
        if (src > 1) throw FormatError("embedding database " + path + ": bad source byte");
        db.sources[i] = static_cast<geo::Source>(src);
        for (std::size_t j = 0; j < db.dim; ++j) db.vectors[i * db.dim + j] = static_cast<real>(r.f32());
    }
    db.validate();
    return db;
}

}  // namespace cspr::rev
