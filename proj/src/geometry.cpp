#include "cspr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cspr::geo {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

const char* source_name(Source s) {
    return s == Source::Aerial ? "aerial" : "ground";
}

Source source_from_name(const std::string& name) {
    if (name == "aerial") return Source::Aerial;
    if (name == "ground") return Source::Ground;
    throw FormatError("unknown source: " + name);
}

const char* setting_name(Setting s) {
    return s == Setting::AerialPlusGround ? "AerialPlusGround" : "AerialOnly";
}

Setting setting_from_name(const std::string& name) {
    if (name == "AerialPlusGround") return Setting::AerialPlusGround;
    if (name == "AerialOnly") return Setting::AerialOnly;
    throw FormatError("unknown setting: " + name);
}

double Scene::max_height() const {
    double h = 0.0;
    for (const Box& b : boxes) h = std::max(h, b.h);
    return h;
}

SourceProfile default_aerial_profile(double tile) {
    SourceProfile p;
    p.density = 2.5;
    p.noise_sigma = 0.3;
    p.scope_radius = tile / 2.0;
    p.coverage = Coverage::TopsAndGround;
    return p;
}

SourceProfile default_ground_profile(double scope_radius) {
    SourceProfile p;
    p.density = 6.0;
    p.noise_sigma = 0.03;
    p.scope_radius = scope_radius;
    p.coverage = Coverage::FacadesAndGround;
    return p;
}

std::vector<float> normalize_points(const std::vector<double>& points_m, const AxisBox& bounds) {
    if (points_m.empty() || points_m.size() % 3 != 0)
        throw ContractError("normalize_points: need a non-empty m x 3 point list");
    double half_max = 0.0;
    std::array<double, 3> center{};
    for (int a = 0; a < 3; ++a) {
        const double extent = bounds.hi[a] - bounds.lo[a];
        if (extent <= 0.0) throw ContractError("normalize_points: degenerate tile bounds on axis " + std::to_string(a));
        center[a] = 0.5 * (bounds.lo[a] + bounds.hi[a]);
        half_max = std::max(half_max, 0.5 * extent);
    }
    std::vector<float> out(points_m.size());
    for (std::size_t i = 0; i < points_m.size(); i += 3) {
        for (int a = 0; a < 3; ++a) {
            const double v = points_m[i + a];
            if (v < bounds.lo[a] - 1e-9 || v > bounds.hi[a] + 1e-9)
                throw ContractError("normalize_points: point outside tile bounds");
            out[i + a] = static_cast<float>((v - center[a]) / half_max);
        }
    }
    return out;
}

std::vector<double> downsample(const std::vector<double>& points, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ContractError("downsample: target count must be positive");
    if (points.empty() || points.size() % 3 != 0) throw ContractError("downsample: need a non-empty m x 3 point list");
    const std::size_t m = points.size() / 3;
    Rng rng(mix_seed(seed, 0xd0f));
    std::vector<double> out;
    out.reserve(n * 3);
    if (m >= n) {
        std::vector<std::size_t> idx(m);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j =
                i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(m - 1 - i)));
            std::swap(idx[i], idx[j]);
        }
        for (std::size_t i = 0; i < n; ++i)
            for (int a = 0; a < 3; ++a) out.push_back(points[idx[i] * 3 + static_cast<std::size_t>(a)]);
    } else {
        out = points;
        for (std::size_t i = m; i < n; ++i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(m - 1)));
            for (int a = 0; a < 3; ++a) out.push_back(points[j * 3 + static_cast<std::size_t>(a)]);
        }
    }
    return out;
}

namespace {

double rect_overlap_fraction(const Box& a, const Box& b) {
    const double ox = std::max(0.0, std::min(a.cx + a.hx, b.cx + b.hx) - std::max(a.cx - a.hx, b.cx - b.hx));
    const double oy = std::max(0.0, std::min(a.cy + a.hy, b.cy + b.hy) - std::max(a.cy - a.hy, b.cy - b.hy));
    const double inter = ox * oy;
    const double min_area = std::min(4.0 * a.hx * a.hy, 4.0 * b.hx * b.hy);
    return min_area > 0.0 ? inter / min_area : 0.0;
}

bool inside_footprint(const Box& b, double x, double y) {
    return std::abs(x - b.cx) <= b.hx && std::abs(y - b.cy) <= b.hy;
}

// open-segment vs footprint rectangle intersection (2D slab test)
bool segment_hits_footprint(const Box& b, double x0, double y0, double x1, double y1) {
    const double dx = x1 - x0, dy = y1 - y0;
    double tmin = 0.0, tmax = 1.0;
    const double lo[2] = {b.cx - b.hx, b.cy - b.hy};
    const double hi[2] = {b.cx + b.hx, b.cy + b.hy};
    const double o[2] = {x0, y0};
    const double d[2] = {dx, dy};
    for (int a = 0; a < 2; ++a) {
        if (std::abs(d[a]) < 1e-12) {
            if (o[a] < lo[a] || o[a] > hi[a]) return false;
        } else {
            double t0 = (lo[a] - o[a]) / d[a];
            double t1 = (hi[a] - o[a]) / d[a];
            if (t0 > t1) std::swap(t0, t1);
            tmin = std::max(tmin, t0);
            tmax = std::min(tmax, t1);
            if (tmin > tmax) return false;
        }
    }
    // endpoints sitting exactly on the rectangle boundary do not count
    return tmin < 1.0 - 1e-9 && tmax > 1e-9 && tmax - tmin > 1e-9;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, std::size_t n_boxes, double extent) {
    if (n_boxes < 1 || extent <= 0.0) throw ContractError("generate_scene: need n_boxes >= 1 and extent > 0");
    Rng rng(mix_seed(seed, 0x5ce));
    Scene scene;
    scene.seed = seed;
    scene.ground_extent = extent;
    const double lo_half = std::min(2.5, extent / 10.0);
    const double hi_half = std::max(lo_half + 0.1, std::min(8.0, extent / 4.0));
    for (std::size_t i = 0; i < n_boxes; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            Box b;
            b.hx = rng.uniform(lo_half, hi_half);
            b.hy = rng.uniform(lo_half, hi_half);
            b.h = rng.uniform(3.0, 12.0);
            b.cx = rng.uniform(b.hx, extent - b.hx);
            b.cy = rng.uniform(b.hy, extent - b.hy);
            bool ok = true;
            for (const Box& other : scene.boxes)
                if (rect_overlap_fraction(b, other) >= 0.9) {
                    ok = false;
                    break;
                }
            if (ok) {
                scene.boxes.push_back(b);
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("generate_scene: could not place box " + std::to_string(i) +
                                  " after 1000 attempts");
    }
    return scene;
}

namespace {

// deterministic fractional budget: floor(x) plus one with probability frac(x)
std::size_t budget(Rng& rng, double expected) {
    if (expected <= 0.0) return 0;
    const double fl = std::floor(expected);
    std::size_t n = static_cast<std::size_t>(fl);
    if (rng.uniform() < expected - fl) ++n;
    return n;
}

void add_noise(Rng& rng, std::vector<double>& pts, double sigma) {
    if (sigma <= 0.0) return;
    for (double& v : pts) v += rng.normal(0.0, sigma);
}

}  // namespace

std::vector<double> sample_source(const Scene& scene, double cx, double cy, const SourceProfile& profile,
                                  std::uint64_t seed) {
    if (cx < 0.0 || cx > scene.ground_extent || cy < 0.0 || cy > scene.ground_extent)
        throw ContractError("sample_source: center outside scene extent");
    if (profile.density <= 0.0 || profile.noise_sigma < 0.0)
        throw ContractError("sample_source: invalid profile");
    Rng rng(mix_seed(seed, 0x5a9));
    std::vector<double> pts;
    const double R = profile.scope_radius;

    if (profile.coverage == Coverage::TopsAndGround) {
        const double sx0 = cx - R, sx1 = cx + R, sy0 = cy - R, sy1 = cy + R;
        for (const Box& b : scene.boxes) {
            const double rx0 = std::max(sx0, b.cx - b.hx), rx1 = std::min(sx1, b.cx + b.hx);
            const double ry0 = std::max(sy0, b.cy - b.hy), ry1 = std::min(sy1, b.cy + b.hy);
            if (rx1 <= rx0 || ry1 <= ry0) continue;
            const std::size_t n = budget(rng, (rx1 - rx0) * (ry1 - ry0) * profile.density);
            for (std::size_t i = 0; i < n; ++i) {
                pts.push_back(rng.uniform(rx0, rx1));
                pts.push_back(rng.uniform(ry0, ry1));
                pts.push_back(b.h);
            }
        }
        if (profile.include_ground_plane) {
            const std::size_t n = budget(rng, (sx1 - sx0) * (sy1 - sy0) * profile.density);
            for (std::size_t i = 0; i < n; ++i) {
                const double x = rng.uniform(sx0, sx1);
                const double y = rng.uniform(sy0, sy1);
                bool hidden = false;
                for (const Box& b : scene.boxes)
                    if (inside_footprint(b, x, y)) {
                        hidden = true;
                        break;
                    }
                if (hidden) continue;
                pts.push_back(x);
                pts.push_back(y);
                pts.push_back(0.0);
            }
        }
    } else {
        // ground sensor: vertical faces visible along the horizontal sight
        // line, plus the ground disc
        for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
            const Box& b = scene.boxes[bi];
            struct Face {
                double x0, y0, x1, y1;  // footprint segment
                bool facing;
            };
            const Face faces[4] = {
                {b.cx - b.hx, b.cy - b.hy, b.cx + b.hx, b.cy - b.hy, cy < b.cy - b.hy},  // south
                {b.cx - b.hx, b.cy + b.hy, b.cx + b.hx, b.cy + b.hy, cy > b.cy + b.hy},  // north
                {b.cx - b.hx, b.cy - b.hy, b.cx - b.hx, b.cy + b.hy, cx < b.cx - b.hx},  // west
                {b.cx + b.hx, b.cy - b.hy, b.cx + b.hx, b.cy + b.hy, cx > b.cx + b.hx},  // east
            };
            for (const Face& f : faces) {
                if (!f.facing) continue;
                const double len = std::hypot(f.x1 - f.x0, f.y1 - f.y0);
                const std::size_t n = budget(rng, len * b.h * profile.density);
                for (std::size_t i = 0; i < n; ++i) {
                    const double u = rng.uniform();
                    const double x = f.x0 + u * (f.x1 - f.x0);
                    const double y = f.y0 + u * (f.y1 - f.y0);
                    if (std::hypot(x - cx, y - cy) > R) continue;
                    bool occluded = false;
                    for (std::size_t oi = 0; oi < scene.boxes.size(); ++oi) {
                        if (oi == bi) continue;
                        if (segment_hits_footprint(scene.boxes[oi], cx, cy, x, y)) {
                            occluded = true;
                            break;
                        }
                    }
                    if (occluded) continue;
                    pts.push_back(x);
                    pts.push_back(y);
                    pts.push_back(rng.uniform(0.0, b.h));
                }
            }
        }
        if (profile.include_ground_plane) {
            const std::size_t n = budget(rng, M_PI * R * R * profile.density);
            for (std::size_t i = 0; i < n; ++i) {
                const double r = R * std::sqrt(rng.uniform());
                const double th = rng.uniform(0.0, 2.0 * M_PI);
                const double x = cx + r * std::cos(th);
                const double y = cy + r * std::sin(th);
                bool hidden = false;
                for (const Box& b : scene.boxes)
                    if (inside_footprint(b, x, y)) {
                        hidden = true;
                        break;
                    }
                if (hidden) continue;
                pts.push_back(x);
                pts.push_back(y);
                pts.push_back(0.0);
            }
        }
    }

    if (pts.empty()) throw GenerationError("sample_source: empty visible surface at site");
    add_noise(rng, pts, profile.noise_sigma);
    return pts;
}

Patch make_patch(const Scene& scene, double cx, double cy, Source source, const SourceProfile& profile,
                 double tile, std::size_t n, std::uint64_t seed, std::uint64_t id, double world_east_offset,
                 double world_north_offset) {
    std::vector<double> raw = sample_source(scene, cx, cy, profile, seed);

    AxisBox bounds;
    bounds.lo = {cx - tile / 2.0, cy - tile / 2.0, -1.0};
    bounds.hi = {cx + tile / 2.0, cy + tile / 2.0, scene.max_height() + 1.0};
    std::vector<double> clipped;
    clipped.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); i += 3) {
        bool in = true;
        for (int a = 0; a < 3; ++a)
            if (raw[i + a] < bounds.lo[a] || raw[i + a] > bounds.hi[a]) {
                in = false;
                break;
            }
        if (in) clipped.insert(clipped.end(), raw.begin() + static_cast<std::ptrdiff_t>(i),
                               raw.begin() + static_cast<std::ptrdiff_t>(i + 3));
    }
    if (clipped.empty()) throw GenerationError("make_patch: no points inside tile volume");

    Patch p;
    p.points = normalize_points(downsample(clipped, n, mix_seed(seed, 0xd5)), bounds);
    p.easting = world_east_offset + cx;
    p.northing = world_north_offset + cy;
    p.source = source;
    p.id = id;
    return p;
}

namespace {
constexpr char kPatchMagic[4] = {'C', 'S', 'P', 'C'};
constexpr std::uint32_t kPatchVersion = 1;
}  // namespace

void save_patch(const Patch& p, const std::string& path) {
    BinWriter w;
    w.bytes(kPatchMagic, 4);
    w.u32(kPatchVersion);
    w.f64(p.easting);
    w.f64(p.northing);
    w.u8(static_cast<std::uint8_t>(p.source));
    w.u32(static_cast<std::uint32_t>(p.count()));
    for (float v : p.points) w.f32(v);
    w.finish_crc();
    w.write_file(path);
}

Patch load_patch(const std::string& path) {
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe) throw IoError("cannot open patch file: " + path);
        char magic[4] = {};
        probe.read(magic, 4);
        if (probe.gcount() == 4 && std::equal(magic, magic + 4, kPatchMagic)) {
            BinReader r = BinReader::from_file(path);
            r.check_crc("patch " + path);
            r.str(4);  // magic
            const std::uint32_t version = r.u32();
            if (version != kPatchVersion)
                throw FormatError("patch " + path + ": unsupported version " + std::to_string(version));
            Patch p;
            p.easting = r.f64();
            p.northing = r.f64();
            const std::uint8_t src = r.u8();
            if (src > 1) throw FormatError("patch " + path + ": bad source byte");
            p.source = static_cast<Source>(src);
            const std::uint32_t n = r.u32();
            if (r.remaining() != static_cast<std::size_t>(n) * 12 + 4)
                throw FormatError("patch " + path + ": expected " + std::to_string(n * 12 + 4) +
                                  " payload bytes at offset " + std::to_string(r.offset()) + ", have " +
                                  std::to_string(r.remaining()));
            p.points.resize(static_cast<std::size_t>(n) * 3);
            for (auto& v : p.points) {
                v = r.f32();
                if (!std::isfinite(v))
                    throw FormatError("patch " + path + ": non-finite coordinate at byte " +
                                      std::to_string(r.offset() - 4));
            }
            return p;
        }
    }
    return load_patch_text(path);
}

void save_patch_text(const Patch& p, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    char line[96];
    for (std::size_t i = 0; i < p.count(); ++i) {
        std::snprintf(line, sizeof line, "%.6f %.6f %.6f\n", p.points[i * 3], p.points[i * 3 + 1],
                      p.points[i * 3 + 2]);
        out << line;
    }
}

Patch load_patch_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open patch file: " + path);
    Patch p;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        double x, y, z;
        if (!(ss >> x >> y >> z))
            throw FormatError("patch " + path + ": malformed line " + std::to_string(line_no));
        if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
            throw FormatError("patch " + path + ": non-finite coordinate at line " + std::to_string(line_no));
        p.points.push_back(static_cast<float>(x));
        p.points.push_back(static_cast<float>(y));
        p.points.push_back(static_cast<float>(z));
    }
    if (p.points.empty()) throw FormatError("patch " + path + ": no points");
    return p;
}

double geo_distance(const Patch& a, const Patch& b) {
    return std::hypot(a.easting - b.easting, a.northing - b.northing);
}

namespace {

void ensure_neighbor(const Benchmark& bench, const char* context) {
    for (const Patch& q : bench.queries) {
        bool ok = false;
        for (const Patch& d : bench.database)
            if (geo_distance(q, d) <= bench.success_radius) {
                ok = true;
                break;
            }
        if (!ok)
            throw ContractError(std::string(context) + ": query " + std::to_string(q.id) +
                                " has no database entry within success radius");
    }
}

}  // namespace

Benchmark build_benchmark(const Scene& scene, const GridOptions& opt) {
    if (opt.tile > scene.ground_extent) throw ContractError("build_benchmark: tile larger than scene extent");
    if (opt.spacing_d <= 0.0) throw ContractError("build_benchmark: spacing must be positive");
    Benchmark bench;
    bench.spacing_d = opt.spacing_d;
    bench.aoc_area = opt.tile * opt.tile;
    bench.success_radius = opt.success_radius > 0.0 ? opt.success_radius : opt.tile;
    bench.setting = opt.setting;

    const SourceProfile aerial = opt.aerial_profile.value_or(default_aerial_profile(opt.tile));
    const SourceProfile ground = opt.ground_profile.value_or(default_ground_profile(opt.tile / 4.0));

    std::uint64_t next_id = 0;
    std::vector<double> centers;
    for (double off = 0.0; off <= scene.ground_extent - opt.tile + 1e-9; off += opt.spacing_d)
        centers.push_back(off + opt.tile / 2.0);
    for (double cxv : centers)
        for (double cyv : centers)
            bench.database.push_back(make_patch(scene, cxv, cyv, Source::Aerial, aerial, opt.tile, opt.n_points,
                                                mix_seed(opt.seed, next_id), next_id)),
                ++next_id;

    Rng rng(mix_seed(opt.seed, 0xbe7c));
    auto random_site = [&](double& x, double& y) {
        x = rng.uniform(opt.tile / 2.0, scene.ground_extent - opt.tile / 2.0);
        y = rng.uniform(opt.tile / 2.0, scene.ground_extent - opt.tile / 2.0);
    };
    auto nearest_db_within = [&](double x, double y) {
        for (const Patch& d : bench.database)
            if (d.source == Source::Aerial && std::hypot(d.easting - x, d.northing - y) <= bench.success_radius)
                return true;
        return false;
    };

    if (opt.setting == Setting::AerialPlusGround) {
        for (std::size_t i = 0; i < opt.n_ground; ++i) {
            for (int attempt = 0;; ++attempt) {
                if (attempt >= 100)
                    throw GenerationError("build_benchmark: cannot site database ground patch " +
                                          std::to_string(i));
                double x, y;
                random_site(x, y);
                try {
                    bench.database.push_back(make_patch(scene, x, y, Source::Ground, ground, opt.tile,
                                                        opt.n_points, mix_seed(opt.seed, next_id), next_id));
                    ++next_id;
                    break;
                } catch (const GenerationError&) {
                }
            }
        }
    }

    for (std::size_t i = 0; i < opt.n_ground; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 100)
                throw GenerationError("build_benchmark: cannot site query " + std::to_string(i) +
                                      " with an in-radius database neighbor");
            double x, y;
            random_site(x, y);
            if (!nearest_db_within(x, y)) continue;
            try {
                bench.queries.push_back(make_patch(scene, x, y, Source::Ground, ground, opt.tile, opt.n_points,
                                                   mix_seed(opt.seed, next_id), next_id));
                ++next_id;
                break;
            } catch (const GenerationError&) {
            }
        }
    }

    ensure_neighbor(bench, "build_benchmark");
    return bench;
}

Benchmark build_site_benchmark(const SiteOptions& opt) {
    if (opt.n_scenes < 1) throw ContractError("build_site_benchmark: need at least one scene");
    Benchmark bench;
    bench.success_radius = opt.success_radius > 0.0 ? opt.success_radius : opt.tile;
    const double pitch = opt.site_pitch > 0.0 ? opt.site_pitch : 10.0 * opt.tile;
    bench.spacing_d = pitch;
    bench.aoc_area = opt.tile * opt.tile;
    bench.setting = opt.setting;

    const SourceProfile aerial = opt.aerial_profile.value_or(default_aerial_profile(opt.tile));
    const SourceProfile ground = opt.ground_profile.value_or(default_ground_profile(opt.tile / 2.5));

    const double center = opt.tile / 2.0;
    const double max_jitter = opt.tile / 8.0;
    std::uint64_t next_id = 0;

    std::vector<Patch> ground_db;
    for (std::size_t s = 0; s < opt.n_scenes; ++s) {
        const Scene scene = generate_scene(mix_seed(opt.seed, 0x5ce0 + s), opt.boxes_per_scene, opt.tile);
        const double east_off = static_cast<double>(s) * pitch;
        Rng site_rng(mix_seed(opt.seed, 0x9176 + s));

        bench.database.push_back(make_patch(scene, center, center, Source::Aerial, aerial, opt.tile,
                                            opt.n_points, mix_seed(opt.seed, next_id), next_id, east_off));
        ++next_id;

        auto jittered_ground = [&](std::uint64_t id) {
            for (int attempt = 0;; ++attempt) {
                if (attempt >= 100)
                    throw GenerationError("build_site_benchmark: cannot site ground patch at scene " +
                                          std::to_string(s));
                const double x = center + site_rng.uniform(-max_jitter, max_jitter);
                const double y = center + site_rng.uniform(-max_jitter, max_jitter);
                try {
                    return make_patch(scene, x, y, Source::Ground, ground, opt.tile, opt.n_points,
                                      mix_seed(opt.seed, id), id, east_off);
                } catch (const GenerationError&) {
                }
            }
        };

        if (opt.setting == Setting::AerialPlusGround) {
            ground_db.push_back(jittered_ground(next_id));
            ++next_id;
        }
        bench.queries.push_back(jittered_ground(next_id));
        ++next_id;
    }
    for (Patch& p : ground_db) bench.database.push_back(std::move(p));

    ensure_neighbor(bench, "build_site_benchmark");
    return bench;
}

void write_benchmark(const Benchmark& bench, const std::string& dir) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["success_radius"] = bench.success_radius;
    manifest["setting"] = setting_name(bench.setting);

    auto emit = [&](const std::vector<Patch>& patches, const char* prefix) {
        ordered_json arr = ordered_json::array();
        for (std::size_t i = 0; i < patches.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "%s_%06zu.cspc", prefix, i);
            save_patch(patches[i], (fs::path(dir) / name).string());
            ordered_json e;
            e["path"] = name;
            e["easting"] = patches[i].easting;
            e["northing"] = patches[i].northing;
            e["source"] = source_name(patches[i].source);
            arr.push_back(std::move(e));
        }
        return arr;
    };
    manifest["database"] = emit(bench.database, "db");
    manifest["queries"] = emit(bench.queries, "query");

    std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

Benchmark load_benchmark(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest: " + manifest_path);
    ordered_json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw FormatError("manifest " + manifest_path + ": " + e.what());
    }
    const fs::path base = fs::path(manifest_path).parent_path();

    Benchmark bench;
    bench.success_radius = manifest.at("success_radius").get<double>();
    bench.setting = setting_from_name(manifest.at("setting").get<std::string>());

    std::uint64_t next_id = 0;
    auto load_list = [&](const ordered_json& arr) {
        std::vector<Patch> out;
        for (const auto& e : arr) {
            Patch p = load_patch((base / e.at("path").get<std::string>()).string());
            p.easting = e.at("easting").get<double>();
            p.northing = e.at("northing").get<double>();
            p.source = source_from_name(e.at("source").get<std::string>());
            p.id = next_id++;
            for (float v : p.points)
                if (v < -1.0f - 1e-6f || v > 1.0f + 1e-6f)
                    throw FormatError("patch " + e.at("path").get<std::string>() +
                                      ": coordinate outside [-1,1]");
            out.push_back(std::move(p));
        }
        return out;
    };
    bench.database = load_list(manifest.at("database"));
    bench.queries = load_list(manifest.at("queries"));
    if (bench.setting == Setting::AerialOnly)
        for (const Patch& d : bench.database)
            if (d.source == Source::Ground)
                throw ContractError("load_benchmark: AerialOnly manifest contains ground database entries");
    ensure_neighbor(bench, "load_benchmark");
    return bench;
}

}  // namespace cspr::geo
