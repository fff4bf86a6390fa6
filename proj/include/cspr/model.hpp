#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cspr/refine.hpp"
#include "cspr/vlad.hpp"
#include "cspr/voxel.hpp"

namespace cspr::model {

using ad::Tensor;

struct ModelConfig {
    std::vector<double> resolutions{0.1, 0.2, 0.4};
    std::size_t k_s = 3;
    std::size_t d_v = 16;
    std::size_t d_r = 16;
    std::size_t d_out = 64;
    std::size_t clusters = 8;
    double alpha_init = 1.0;
    std::size_t d_final = 0;  // 0 disables the post-VLAD projection

    refine::Order order = refine::Order::CoarseToFine;
    std::size_t substeps = 3;
    std::size_t heads = 4;
    std::size_t memory_slots = 16;
    bool use_time_embedding = true;
    bool share_substep_params = false;

    std::size_t n_grains() const { return resolutions.size(); }
    std::size_t d_g() const { return k_s * d_r * n_grains(); }
    std::size_t embedding_dim() const { return d_final ? d_final : d_out * clusters; }
    refine::RefineConfig refine_config() const;
    void validate() const;
};

// The embedding function: multi-grained sparse backbone, iterative
// attention refinement, projection, VLAD aggregation to a unit-norm global
// descriptor.
class Model {
  public:
    Model(ModelConfig cfg, std::uint64_t seed);
    Model(ModelConfig cfg, ad::ParamStore store);  // from checkpoint

    const ModelConfig& config() const { return cfg_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }
    vox::BackboneCache& cache() { return *cache_; }

    Tensor embed(const geo::Patch& patch, ad::NormMode mode = ad::NormMode::Eval,
                 std::vector<std::pair<std::string, ad::BnStats>>* bn_stats = nullptr,
                 refine::RefineTrace* trace = nullptr);

    // Joint forward: batch-norm statistics span all patches in the call, the
    // way batched training normalizes. embed() is the single-patch case.
    std::vector<Tensor> embed_batch(const std::vector<const geo::Patch*>& patches,
                                    ad::NormMode mode = ad::NormMode::Eval,
                                    std::vector<std::pair<std::string, ad::BnStats>>* bn_stats = nullptr,
                                    refine::RefineTrace* trace = nullptr);

    void save(const std::string& path) const { params_.save(path); }
    static Model load(ModelConfig cfg, const std::string& path);

  private:
    ModelConfig cfg_;
    ad::ParamStore params_;
    std::unique_ptr<vox::BackboneCache> cache_;
};

}  // namespace cspr::model
