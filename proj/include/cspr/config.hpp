#pragma once

#include <string>
#include <vector>

#include "cspr/geometry.hpp"
#include "cspr/model.hpp"
#include "cspr/train.hpp"

namespace cspr::cli {

// Every knob of the pipeline in one flat structure. Persisted as key=value
// lines; flags override file values; an effective-config echo is written
// next to every command's outputs so any run can be replayed from it.
struct RunConfig {
    // model
    std::vector<double> resolutions{0.1, 0.2, 0.4};
    std::size_t k_s = 3;
    std::size_t d_v = 16;
    std::size_t d_r = 16;
    std::size_t d_out = 64;
    std::size_t clusters = 8;
    double alpha_init = 1.0;
    std::size_t d_final = 0;
    std::string order = "coarse-to-fine";
    std::size_t substeps = 3;
    std::size_t heads = 4;
    std::size_t memory_slots = 16;
    bool time_embedding = true;
    bool share_substep_params = false;

    // training
    double margin = 0.2;
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t batch_init = 16;
    std::size_t batch_max = 32;
    double growth_factor = 1.4;
    double active_threshold = 0.7;
    std::size_t epochs = 48;
    std::size_t n_pos = 2;
    std::size_t n_neg = 4;
    double exclusion_factor = 2.0;

    // generation
    std::string mode = "sites";  // sites | grid
    std::size_t scenes = 32;
    double tile = 60.0;
    std::size_t n_points = 512;
    std::size_t boxes_per_scene = 6;
    std::string setting = "aerial-only";  // aerial-only | aerial-ground
    double success_radius = 0.0;          // 0 -> tile
    double extent = 200.0;                // grid mode scene extent
    double spacing = 50.0;                // grid mode database pitch
    std::size_t n_ground = 4;             // grid mode query count
    double aerial_density = 2.5;
    double aerial_noise = 0.3;
    double ground_density = 6.0;
    double ground_noise = 0.03;
    double ground_scope = 24.0;
    bool include_ground_plane = true;

    // misc
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    geo::Setting parsed_setting() const;
    model::ModelConfig model_config() const;
    train::TrainConfig train_config() const;
    geo::SiteOptions site_options() const;
    geo::GridOptions grid_options() const;

    void set(const std::string& key, const std::string& value);  // throws on unknown key / bad value
    std::string serialize() const;
    void save(const std::string& path) const;
    void load_file(const std::string& path);  // applies keys over current values
};

}  // namespace cspr::cli
