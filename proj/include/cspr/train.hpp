#pragma once

#include <iosfwd>
#include <optional>

#include "cspr/retrieval.hpp"

namespace cspr::train {

using ad::Tensor;
using ad::real;

// Euclidean distance between two embedding vectors as a graph scalar.
Tensor embedding_distance(const Tensor& a, const Tensor& b);

// max(0, max(d_pos) - min(d_neg) + margin); the hinge takes subgradient 0 at
// its kink and the extrema route gradient to the hardest pair only.
Tensor lazy_triplet_loss(const std::vector<Tensor>& d_pos, const std::vector<Tensor>& d_neg, real margin);

struct TripletBatch {
    struct Entry {
        std::uint64_t anchor;
        std::vector<std::uint64_t> positives;  // hardest first (descending embedding distance)
        std::vector<std::uint64_t> negatives;  // hardest first (ascending embedding distance)
    };
    std::vector<Entry> entries;
    std::size_t skipped = 0;  // anchors without an in-radius positive
};

struct MiningConfig {
    double positive_radius = 0.0;
    double exclusion_radius = 0.0;  // >= positive_radius; candidates beyond it are negatives
    std::size_t n_pos = 2;
    std::size_t n_neg = 4;
};

// Positives/negatives by geo distance over the candidate pool (the table),
// hardest instances by current embedding distance, ties broken by ascending
// id. Anchors with no positive are skipped; an all-skipped batch is an
// error.
TripletBatch mine_batch(const rev::EmbeddingDatabase& table, const std::vector<std::uint64_t>& anchors,
                        const MiningConfig& cfg);

struct SamplerState {
    std::size_t batch_size = 16;
    std::size_t batch_max = 32;
    double growth_factor = 1.4;
    double active_fraction_threshold = 0.7;
};

// Expansion rule: when the active-triplet fraction drops below the
// threshold, grow batch_size by growth_factor up to batch_max.
SamplerState sampler_step(SamplerState state, double active_fraction);

class Adam {
  public:
    Adam(std::vector<Tensor> params, real lr = 0.005, real beta1 = 0.9, real beta2 = 0.999, real eps = 1e-8);
    void step();
    void zero_grad();
    std::size_t steps_taken() const { return t_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<real>> m_, v_;
    real lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    real lr = 0.005;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real margin = 0.2;
    double exclusion_factor = 2.0;  // exclusion radius = factor * success radius
    std::size_t n_pos = 2;
    std::size_t n_neg = 4;
    std::size_t epochs = 60;
    SamplerState sampler{};
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    real bn_momentum = 0.1;
    // written whenever validation AR@1 improves; empty disables
    std::string best_checkpoint_path;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double active_fraction = 0.0;
    std::size_t batch_size = 0;
    double val_ar1 = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val_ar1 = 0.0;
    std::size_t best_epoch = 0;
};

// Training loop: per epoch embed everything in eval mode (mining table and
// validation AR@1), mine a batch of anchors, rebuild the mined patches with
// gradients, take one Adam step on the mean lazy triplet loss, then let the
// sampler react to the active fraction. Aborts with NumericError on a
// non-finite loss. One JSON object per epoch goes to log_stream when given.
TrainResult train_model(model::Model& model, const geo::Benchmark& bench, const TrainConfig& cfg,
                  std::ostream* log_stream = nullptr);

}  // namespace cspr::train
