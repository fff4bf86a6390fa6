#pragma once

#include <span>
#include <string>
#include <vector>

#include "cspr/geometry.hpp"
#include "cspr/model.hpp"

namespace cspr::rev {

using ad::real;

// Geo-tagged unit-norm global descriptors with ids sorted ascending.
struct EmbeddingDatabase {
    std::vector<std::uint64_t> ids;
    std::size_t dim = 0;
    std::vector<real> vectors;  // size() x dim, row-major
    std::vector<std::pair<double, double>> geo;  // easting, northing
    std::vector<geo::Source> sources;

    std::size_t size() const { return ids.size(); }
    std::span<const real> vec(std::size_t row) const { return {vectors.data() + row * dim, dim}; }
    void validate() const;  // sorted unique ids, norms within 1e-5 of 1
};

// Forward pass per patch (eval mode, no autograd), optionally fanned out
// over a worker pool; the result is ordered by id and independent of the
// thread count.
EmbeddingDatabase embed_database(model::Model& model, const std::vector<geo::Patch>& patches,
                                 std::size_t threads = 1);

struct Hit {
    std::uint64_t id;
    double distance;
};

// Exhaustive exact Euclidean search, ascending distance, ties by ascending id.
std::vector<Hit> retrieve(const EmbeddingDatabase& db, std::span<const real> query, std::size_t n);

// Per query: success when any true neighbor appears in the top n. Queries
// with an empty truth set are excluded and counted in skipped.
double recall_at_n(const std::vector<std::vector<std::uint64_t>>& rankings,
                   const std::vector<std::vector<std::uint64_t>>& truth, std::size_t n,
                   std::size_t* skipped = nullptr);

// N for AR@1%: round-half-even of 1% of the database size, clamped to >= 1.
std::size_t one_percent_n(std::size_t db_size);

struct EvalReport {
    geo::Setting setting = geo::Setting::AerialOnly;
    double success_radius = 0.0;
    std::size_t n_queries = 0;
    std::size_t n_skipped = 0;
    std::vector<double> ar_at_n;  // AR@1 ... AR@25
    double ar_at_one_percent = 0.0;
};

constexpr std::size_t kTopN = 25;

// Truth by geo distance <= success_radius against the database entries.
EvalReport evaluate_embeddings(const EmbeddingDatabase& db, const EmbeddingDatabase& queries,
                               double success_radius, geo::Setting setting);

// Embeds the benchmark per its setting and scores it. The benchmark setting
// must match the requested one.
EvalReport evaluate(model::Model& model, const geo::Benchmark& bench, geo::Setting setting,
                    std::size_t threads = 1);

// Report JSON: {"setting","success_radius","n_queries","ar_at_n":[...],
// "ar_at_one_percent"}; optional "N,AR" CSV curve.
void save_report(const EvalReport& report, const std::string& json_path, const std::string& csv_path = "");
std::string report_to_json(const EvalReport& report);

// Embedding DB file: magic "CLDB", u32 version, u32 count, u32 d_emb, per
// entry u64 id, f64 easting, f64 northing, u8 source, d_emb x f32; CRC32.
void save_database(const EmbeddingDatabase& db, const std::string& path);
EmbeddingDatabase load_database(const std::string& path);

}  // namespace cspr::rev
