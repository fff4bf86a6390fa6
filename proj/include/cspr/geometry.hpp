#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cspr/common.hpp"

namespace cspr::geo {

enum class Source : std::uint8_t { Aerial = 0, Ground = 1 };

const char* source_name(Source s);
Source source_from_name(const std::string& name);

// A normalized point set with its geo-tag. Coordinates live in [-1,1] after
// normalization; the tag is the tile center in world meters.
struct Patch {
    std::vector<float> points;  // n x 3, row-major
    double easting = 0.0;
    double northing = 0.0;
    Source source = Source::Ground;
    std::uint64_t id = 0;

    std::size_t count() const { return points.size() / 3; }
};

struct AxisBox {
    std::array<double, 3> lo{0, 0, 0};
    std::array<double, 3> hi{0, 0, 0};
};

// Axis-aligned building volume sitting on the ground plane.
struct Box {
    double cx = 0, cy = 0;  // footprint center, meters
    double hx = 0, hy = 0;  // footprint half-extents
    double h = 0;           // height
};

struct Scene {
    std::uint64_t seed = 0;
    std::vector<Box> boxes;
    double ground_extent = 0.0;  // scene square is [0, extent]^2

    double max_height() const;
};

enum class Coverage : std::uint8_t { TopsAndGround = 0, FacadesAndGround = 1 };

struct SourceProfile {
    double density = 1.0;      // points per square meter
    double noise_sigma = 0.0;  // meters, isotropic Gaussian
    // Ground: sensing disc radius. Aerial: half-extent of the square scope
    // (pass tile/2 to cover the full tile).
    double scope_radius = 10.0;
    Coverage coverage = Coverage::TopsAndGround;
    bool include_ground_plane = true;
};

SourceProfile default_aerial_profile(double tile);
SourceProfile default_ground_profile(double scope_radius = 25.0);

// (p - center) / max-half-extent, uniform scale. Throws ContractError on a
// degenerate box or a point outside the bounds.
std::vector<float> normalize_points(const std::vector<double>& points_m, const AxisBox& bounds);

// Uniform subset without replacement when m >= n; otherwise keeps all m
// points and fills the remainder with replacement. Deterministic per seed.
std::vector<double> downsample(const std::vector<double>& points, std::size_t n, std::uint64_t seed);

Scene generate_scene(std::uint64_t seed, std::size_t n_boxes, double extent);

// Raw world-frame point set (meters) for one sensing event. Aerial coverage
// samples roof faces plus the ground plane across the square scope; ground
// coverage samples vertical faces visible from the sensor center plus the
// ground plane inside the scope disc. Throws GenerationError when nothing is
// visible.
std::vector<double> sample_source(const Scene& scene, double cx, double cy, const SourceProfile& profile,
                                  std::uint64_t seed);

// Full pipeline for one patch: sample, clip to the tile volume, downsample
// to n, normalize.
Patch make_patch(const Scene& scene, double cx, double cy, Source source, const SourceProfile& profile,
                 double tile, std::size_t n, std::uint64_t seed, std::uint64_t id,
                 double world_east_offset = 0.0, double world_north_offset = 0.0);

// Patch file I/O. Binary: magic "CSPC", u32 version, f64 easting,
// f64 northing, u8 source, u32 n, n x 3 f32, CRC32. Text: whitespace
// separated x y z lines.
void save_patch(const Patch& p, const std::string& path);
Patch load_patch(const std::string& path);  // sniffs binary magic, falls back to text
void save_patch_text(const Patch& p, const std::string& path);
Patch load_patch_text(const std::string& path);

enum class Setting : std::uint8_t { AerialPlusGround = 0, AerialOnly = 1 };

const char* setting_name(Setting s);
Setting setting_from_name(const std::string& name);

struct Benchmark {
    std::vector<Patch> database;
    std::vector<Patch> queries;
    double spacing_d = 0.0;
    double aoc_area = 0.0;
    double success_radius = 0.0;
    Setting setting = Setting::AerialOnly;
};

// Single-scene benchmark: aerial database tiled on a grid of pitch
// spacing_d (centers where the full tile fits), ground queries at random
// sites with a guaranteed in-radius database neighbor.
struct GridOptions {
    double spacing_d = 50.0;
    double tile = 100.0;
    std::size_t n_ground = 4;
    std::size_t n_points = 512;
    Setting setting = Setting::AerialOnly;
    std::uint64_t seed = 0;
    double success_radius = 0.0;  // 0 -> tile
    std::optional<SourceProfile> aerial_profile;
    std::optional<SourceProfile> ground_profile;
};
Benchmark build_benchmark(const Scene& scene, const GridOptions& opt);

// Multi-site benchmark: one scene per place, sites spaced far apart so the
// only in-radius neighbor of each query is its own site.
struct SiteOptions {
    std::size_t n_scenes = 32;
    double tile = 60.0;
    std::size_t n_points = 512;
    std::size_t boxes_per_scene = 6;
    Setting setting = Setting::AerialOnly;
    std::uint64_t seed = 0;
    double success_radius = 0.0;  // 0 -> tile
    double site_pitch = 0.0;      // 0 -> 10 * tile
    std::optional<SourceProfile> aerial_profile;
    std::optional<SourceProfile> ground_profile;
};
Benchmark build_site_benchmark(const SiteOptions& opt);

// Manifest I/O: JSON {"success_radius","setting","database":[...],"queries":[...]};
// patch files written next to the manifest. The loader re-validates that
// every query has an in-radius database neighbor.
void write_benchmark(const Benchmark& bench, const std::string& dir);
Benchmark load_benchmark(const std::string& manifest_path);

double geo_distance(const Patch& a, const Patch& b);

}  // namespace cspr::geo
