#include "cspr/model.hpp"

namespace cspr::model {

refine::RefineConfig ModelConfig::refine_config() const {
    refine::RefineConfig rc;
    rc.order = order;
    rc.substeps = substeps;
    rc.d_r = d_r;
    rc.heads = heads;
    rc.memory_slots = memory_slots;
    rc.use_time_embedding = use_time_embedding;
    rc.share_substep_params = share_substep_params;
    return rc;
}

void ModelConfig::validate() const {
    if (resolutions.empty()) throw ContractError("config: need at least one voxel resolution");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        if (resolutions[i] <= 0.0) throw ContractError("config: resolutions must be positive");
        if (i > 0 && resolutions[i] <= resolutions[i - 1])
            throw ContractError("config: resolutions must be strictly increasing");
    }
    if (k_s < 1 || k_s > 5) throw ContractError("config: k_s must be in [1,5]");
    if (d_v == 0 || d_r == 0 || d_out == 0 || clusters == 0 || substeps == 0)
        throw ContractError("config: counts must be positive");
    if (heads == 0 || d_r % heads != 0) throw ContractError("config: heads must divide d_r");
    if (memory_slots == 0) throw ContractError("config: memory_slots must be positive");
    if (alpha_init <= 0.0) throw ContractError("config: alpha_init must be positive");
}

namespace {

ad::ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ad::ParamStore store(seed);
    vox::init_backbone_params(store, cfg.n_grains(), cfg.d_v, cfg.d_r);
    refine::init_refine_params(store, cfg.refine_config(), cfg.n_grains(), cfg.d_g(), cfg.d_out);
    vlad::init_vlad_params(store, cfg.clusters, cfg.d_out, cfg.alpha_init, cfg.d_final);
    return store;
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), params_(build_params(cfg_, seed)), cache_(std::make_unique<vox::BackboneCache>()) {}

Model::Model(ModelConfig cfg, ad::ParamStore store)
    : cfg_(std::move(cfg)), params_(std::move(store)), cache_(std::make_unique<vox::BackboneCache>()) {
    cfg_.validate();
}

Model Model::load(ModelConfig cfg, const std::string& path) {
    Model m(cfg, std::uint64_t(0));
    m.params_.load_into(path);
    return m;
}

Tensor Model::embed(const geo::Patch& patch, ad::NormMode mode,
                    std::vector<std::pair<std::string, ad::BnStats>>* bn_stats,
                    refine::RefineTrace* trace) {
    return embed_batch({&patch}, mode, bn_stats, trace)[0];
}

std::vector<Tensor> Model::embed_batch(const std::vector<const geo::Patch*>& patches, ad::NormMode mode,
                                       std::vector<std::pair<std::string, ad::BnStats>>* bn_stats,
                                       refine::RefineTrace* trace) {
    vox::FwdCtx ctx{&params_, mode, bn_stats};
    auto stacks = vox::backbone_forward_batch(patches, cfg_.resolutions, cfg_.k_s, ctx, cache_.get());
    std::vector<Tensor> fbars;
    fbars.reserve(patches.size());
    for (const auto& s : stacks) fbars.push_back(refine::refine_stacks(s, cfg_.refine_config(), ctx, trace));
    std::vector<Tensor> projected = refine::project_batch(fbars, ctx);
    const vlad::VladParams vp = vlad::vlad_params(params_);
    std::vector<Tensor> out;
    out.reserve(patches.size());
    for (std::size_t i = 0; i < patches.size(); ++i) {
        try {
            out.push_back(vlad::netvlad(projected[i], vp));
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (patch id " + std::to_string(patches[i]->id) + ")");
        }
    }
    return out;
}

}  // namespace cspr::model
