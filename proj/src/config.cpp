#include "cspr/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cspr::cli {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ContractError("config: bad numeric value for " + key + ": '" + v + "'");
    }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ContractError("config: bad integer value for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ContractError("config: bad boolean value for " + key + ": '" + v + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
    if (out.empty()) throw ContractError("config: empty list for " + key);
    return out;
}

}  // namespace

geo::Setting RunConfig::parsed_setting() const {
    if (setting == "aerial-only") return geo::Setting::AerialOnly;
    if (setting == "aerial-ground") return geo::Setting::AerialPlusGround;
    throw ContractError("config: setting must be aerial-only or aerial-ground, got '" + setting + "'");
}

model::ModelConfig RunConfig::model_config() const {
    model::ModelConfig m;
    m.resolutions = resolutions;
    m.k_s = k_s;
    m.d_v = d_v;
    m.d_r = d_r;
    m.d_out = d_out;
    m.clusters = clusters;
    m.alpha_init = alpha_init;
    m.d_final = d_final;
    m.order = refine::order_from_name(order);
    m.substeps = substeps;
    m.heads = heads;
    m.memory_slots = memory_slots;
    m.use_time_embedding = time_embedding;
    m.share_substep_params = share_substep_params;
    m.validate();
    return m;
}

train::TrainConfig RunConfig::train_config() const {
    train::TrainConfig t;
    t.lr = lr;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.margin = margin;
    t.exclusion_factor = exclusion_factor;
    t.n_pos = n_pos;
    t.n_neg = n_neg;
    t.epochs = epochs;
    t.sampler.batch_size = batch_init;
    t.sampler.batch_max = batch_max;
    t.sampler.growth_factor = growth_factor;
    t.sampler.active_fraction_threshold = active_threshold;
    t.seed = seed;
    t.threads = threads;
    return t;
}

namespace {

geo::SourceProfile aerial_profile_from(const RunConfig& c, double tile) {
    geo::SourceProfile p = geo::default_aerial_profile(tile);
    p.density = c.aerial_density;
    p.noise_sigma = c.aerial_noise;
    p.include_ground_plane = c.include_ground_plane;
    return p;
}

geo::SourceProfile ground_profile_from(const RunConfig& c) {
    geo::SourceProfile p = geo::default_ground_profile(c.ground_scope);
    p.density = c.ground_density;
    p.noise_sigma = c.ground_noise;
    p.include_ground_plane = c.include_ground_plane;
    return p;
}

}  // namespace

geo::SiteOptions RunConfig::site_options() const {
    geo::SiteOptions o;
    o.n_scenes = scenes;
    o.tile = tile;
    o.n_points = n_points;
    o.boxes_per_scene = boxes_per_scene;
    o.setting = parsed_setting();
    o.seed = seed;
    o.success_radius = success_radius;
    o.aerial_profile = aerial_profile_from(*this, tile);
    o.ground_profile = ground_profile_from(*this);
    return o;
}

geo::GridOptions RunConfig::grid_options() const {
    geo::GridOptions o;
    o.spacing_d = spacing;
    o.tile = tile;
    o.n_ground = n_ground;
    o.n_points = n_points;
    o.setting = parsed_setting();
    o.seed = seed;
    o.success_radius = success_radius;
    o.aerial_profile = aerial_profile_from(*this, tile);
    o.ground_profile = ground_profile_from(*this);
    return o;
}

void RunConfig::set(const std::string& key, const std::string& v) {
    if (key == "resolutions") {
        resolutions = parse_list(key, v);
    } else if (key == "k_s") {
        k_s = parse_uint(key, v);
    } else if (key == "d_v") {
        d_v = parse_uint(key, v);
    } else if (key == "d_r") {
        d_r = parse_uint(key, v);
    } else if (key == "d_out") {
        d_out = parse_uint(key, v);
    } else if (key == "clusters") {
        clusters = parse_uint(key, v);
    } else if (key == "alpha_init") {
        alpha_init = parse_double(key, v);
    } else if (key == "d_final") {
        d_final = parse_uint(key, v);
    } else if (key == "order") {
        refine::order_from_name(v);
        order = v;
    } else if (key == "substeps") {
        substeps = parse_uint(key, v);
    } else if (key == "heads") {
        heads = parse_uint(key, v);
    } else if (key == "memory_slots") {
        memory_slots = parse_uint(key, v);
    } else if (key == "time_embedding") {
        time_embedding = parse_bool(key, v);
    } else if (key == "share_substep_params") {
        share_substep_params = parse_bool(key, v);
    } else if (key == "margin") {
        margin = parse_double(key, v);
    } else if (key == "lr") {
        lr = parse_double(key, v);
    } else if (key == "beta1") {
        beta1 = parse_double(key, v);
    } else if (key == "beta2") {
        beta2 = parse_double(key, v);
    } else if (key == "batch_init") {
        batch_init = parse_uint(key, v);
    } else if (key == "batch_max") {
        batch_max = parse_uint(key, v);
    } else if (key == "growth_factor") {
        growth_factor = parse_double(key, v);
    } else if (key == "active_threshold") {
        active_threshold = parse_double(key, v);
    } else if (key == "epochs") {
        epochs = parse_uint(key, v);
    } else if (key == "n_pos") {
        n_pos = parse_uint(key, v);
    } else if (key == "n_neg") {
        n_neg = parse_uint(key, v);
    } else if (key == "exclusion_factor") {
        exclusion_factor = parse_double(key, v);
    } else if (key == "mode") {
        if (v != "sites" && v != "grid") throw ContractError("config: mode must be sites or grid");
        mode = v;
    } else if (key == "scenes") {
        scenes = parse_uint(key, v);
    } else if (key == "tile") {
        tile = parse_double(key, v);
    } else if (key == "n_points") {
        n_points = parse_uint(key, v);
    } else if (key == "boxes_per_scene") {
        boxes_per_scene = parse_uint(key, v);
    } else if (key == "setting") {
        if (v != "aerial-only" && v != "aerial-ground")
            throw ContractError("config: setting must be aerial-only or aerial-ground");
        setting = v;
    } else if (key == "success_radius") {
        success_radius = parse_double(key, v);
    } else if (key == "extent") {
        extent = parse_double(key, v);
    } else if (key == "spacing") {
        spacing = parse_double(key, v);
    } else if (key == "n_ground") {
        n_ground = parse_uint(key, v);
    } else if (key == "aerial_density") {
        aerial_density = parse_double(key, v);
    } else if (key == "aerial_noise") {
        aerial_noise = parse_double(key, v);
    } else if (key == "ground_density") {
        ground_density = parse_double(key, v);
    } else if (key == "ground_noise") {
        ground_noise = parse_double(key, v);
    } else if (key == "ground_scope") {
        ground_scope = parse_double(key, v);
    } else if (key == "include_ground_plane") {
        include_ground_plane = parse_bool(key, v);
    } else if (key == "seed") {
        seed = parse_uint(key, v);
    } else if (key == "threads") {
        threads = parse_uint(key, v);
    } else {
        throw ContractError("config: unknown key '" + key + "'");
    }
}

std::string RunConfig::serialize() const {
    std::ostringstream out;
    out << "# model\n";
    out << "resolutions=";
    for (std::size_t i = 0; i < resolutions.size(); ++i) out << (i ? "," : "") << fmt_double(resolutions[i]);
    out << "\n";
    out << "k_s=" << k_s << "\n";
    out << "d_v=" << d_v << "\n";
    out << "d_r=" << d_r << "\n";
    out << "d_out=" << d_out << "\n";
    out << "clusters=" << clusters << "\n";
    out << "alpha_init=" << fmt_double(alpha_init) << "\n";
    out << "d_final=" << d_final << "\n";
    out << "order=" << order << "\n";
    out << "substeps=" << substeps << "\n";
    out << "heads=" << heads << "\n";
    out << "memory_slots=" << memory_slots << "\n";
    out << "time_embedding=" << (time_embedding ? "true" : "false") << "\n";
    out << "share_substep_params=" << (share_substep_params ? "true" : "false") << "\n";
    out << "# training\n";
    out << "margin=" << fmt_double(margin) << "\n";
    out << "lr=" << fmt_double(lr) << "\n";
    out << "beta1=" << fmt_double(beta1) << "\n";
    out << "beta2=" << fmt_double(beta2) << "\n";
    out << "batch_init=" << batch_init << "\n";
    out << "batch_max=" << batch_max << "\n";
    out << "growth_factor=" << fmt_double(growth_factor) << "\n";
    out << "active_threshold=" << fmt_double(active_threshold) << "\n";
    out << "epochs=" << epochs << "\n";
    out << "n_pos=" << n_pos << "\n";
    out << "n_neg=" << n_neg << "\n";
    out << "exclusion_factor=" << fmt_double(exclusion_factor) << "\n";
    out << "# generation\n";
    out << "mode=" << mode << "\n";
    out << "scenes=" << scenes << "\n";
    out << "tile=" << fmt_double(tile) << "\n";
    out << "n_points=" << n_points << "\n";
    out << "boxes_per_scene=" << boxes_per_scene << "\n";
    out << "setting=" << setting << "\n";
    out << "success_radius=" << fmt_double(success_radius) << "\n";
    out << "extent=" << fmt_double(extent) << "\n";
    out << "spacing=" << fmt_double(spacing) << "\n";
    out << "n_ground=" << n_ground << "\n";
    out << "aerial_density=" << fmt_double(aerial_density) << "\n";
    out << "aerial_noise=" << fmt_double(aerial_noise) << "\n";
    out << "ground_density=" << fmt_double(ground_density) << "\n";
    out << "ground_noise=" << fmt_double(ground_noise) << "\n";
    out << "ground_scope=" << fmt_double(ground_scope) << "\n";
    out << "include_ground_plane=" << (include_ground_plane ? "true" : "false") << "\n";
    out << "# misc\n";
    out << "seed=" << seed << "\n";
    out << "threads=" << threads << "\n";
    return out.str();
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write config: " + path);
    out << serialize();
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config " + path + ": missing '=' at line " + std::to_string(line_no));
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

}  // namespace cspr::cli
