#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "cspr/geometry.hpp"
#include "cspr/ops.hpp"
#include "cspr/param_store.hpp"

namespace cspr::vox {

using ad::Tensor;
using ad::real;

using Coord = std::array<std::int32_t, 3>;

inline std::int32_t floor_div2(std::int32_t v) {
    return v >= 0 ? v / 2 : (v - 1) / 2;
}

// Sparse voxel grid: unique lexicographically sorted integer coordinates with
// a row of features per voxel.
struct VoxelSet {
    double resolution = 0.0;
    std::vector<Coord> coords;
    Tensor feats;  // N x D

    std::size_t count() const { return coords.size(); }
};

// floor(p / r) per axis, duplicates merged, initial feature is the occupancy
// constant 1.
VoxelSet voxelize(const geo::Patch& patch, double resolution);

// Precomputed (input row, output row) pair lists per kernel offset. A map
// built for kernel size k serves every smaller odd kernel via its centered
// offset sub-cube, which lets the five multi-scale convolutions share one
// map.
struct KernelMap {
    int k = 1;
    int stride = 1;
    std::vector<Coord> out_coords;
    std::size_t n_in = 0;
    // indexed by ((dx+k/2)*k + (dy+k/2))*k + (dz+k/2)
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> pairs;
};

std::shared_ptr<const KernelMap> build_kernel_map(const std::vector<Coord>& in_coords, int k, int stride);

// Differentiable generalized sparse convolution over a prebuilt map.
// weights: (k_use^3, D_in, D_out); k_use must be odd and <= map k.
Tensor sparse_conv_apply(const std::shared_ptr<const KernelMap>& map, int k_use, const Tensor& in_feats,
                         const Tensor& weights, const Tensor& bias = Tensor());

// out(c) = sum over offsets o in [-K/2, K/2]^3 of W[o] * in(c*stride + o).
// Stride 1 preserves the coordinate set; stride 2 emits unique floor(c/2).
VoxelSet sparse_conv(const VoxelSet& input, const Tensor& weights, int kernel_size, int stride,
                     const Tensor& bias = Tensor());

// Forward context: parameter store plus normalization mode. Batch-norm batch
// statistics are collected (not applied) so the trainer can update running
// stats in a deterministic order.
struct FwdCtx {
    const ad::ParamStore* params = nullptr;
    ad::NormMode mode = ad::NormMode::Eval;
    std::vector<std::pair<std::string, ad::BnStats>>* bn_stats = nullptr;
};

Tensor bn_layer(const Tensor& x, const std::string& prefix, const FwdCtx& ctx);

// Joint batch norm over several row blocks (one per patch): statistics are
// shared across the whole batch, matching how batched training normalizes.
std::vector<Tensor> bn_layer_batch(const std::vector<Tensor>& xs, const std::string& prefix,
                                   const FwdCtx& ctx);

// Multi-scale feature block over one voxel grain.
struct ScaleStack {
    std::vector<int> scales{1, 3, 5, 7, 9};
    std::vector<Tensor> block;  // one N x D_v slice per scale
    std::vector<Coord> coords;
    // filled by select_features
    std::vector<int> selected_scales;   // ascending receptive field
    std::vector<Tensor> selected;       // k_s slices, N x D_r
    Tensor probs;                       // softmax over the 5 scale scores
};

struct GrainCache {
    VoxelSet voxels;
    std::shared_ptr<const KernelMap> stem1;  // k=5 s=1 on the raw voxels
    std::shared_ptr<const KernelMap> stem2;  // k=3 s=2
    std::shared_ptr<const KernelMap> multi;  // k=9 s=1 on the stem output
};

// Per-patch cache of voxelizations and kernel maps (weight independent, so
// it persists across training epochs). Keyed by patch id.
class BackboneCache {
  public:
    std::shared_ptr<const std::vector<GrainCache>> get_or_build(const geo::Patch& patch,
                                                                const std::vector<double>& resolutions);

  private:
    std::mutex mutex_;
    std::unordered_map<std::uint64_t, std::shared_ptr<const std::vector<GrainCache>>> map_;
};

std::vector<GrainCache> build_grain_caches(const geo::Patch& patch, const std::vector<double>& resolutions);

// conv(k=5,s=1) + BN + ReLU + conv(k=3,s=2) + BN + ReLU, feature width d_v.
// Returns the stem output features; coords are grain.stem2->out_coords.
// The batch variant shares BN statistics across every patch in the call.
std::vector<Tensor> stem_batch(const std::vector<const GrainCache*>& grains, const std::string& prefix,
                               const FwdCtx& ctx);
Tensor stem(const GrainCache& grain, const std::string& prefix, const FwdCtx& ctx);

// Five stride-1 convolutions with receptive fields {1,3,5,7,9} on the shared
// stem output.
ScaleStack multi_scale(const GrainCache& grain, const Tensor& stem_feats, const std::string& prefix,
                       const FwdCtx& ctx);

// top-k by probability with ties broken toward the smaller index, returned
// in ascending index order
std::vector<std::size_t> topk_scale_indices(std::span<const real> probs, std::size_t k);

// Top-k over softmax-scored scale slices; ties break toward the smaller
// receptive field and the survivors stay in ascending receptive-field order,
// each mapped to D_r by a shared linear layer.
void select_features(ScaleStack& stack, std::size_t k_s, const std::string& prefix, const FwdCtx& ctx);

struct SelectedStack {
    std::vector<Tensor> streams;  // k_s tensors, N x D_r
    std::size_t n_voxels = 0;
    std::vector<int> selected_scales;
    Tensor probs;
};

// Full per-grain pipeline: voxelize -> stem -> multi_scale -> select, for
// every resolution in ascending order. The batch variant runs the patches
// jointly so stem BN statistics span the whole batch.
std::vector<std::vector<SelectedStack>> backbone_forward_batch(const std::vector<const geo::Patch*>& patches,
                                                               const std::vector<double>& resolutions,
                                                               std::size_t k_s, const FwdCtx& ctx,
                                                               BackboneCache* cache = nullptr);
std::vector<SelectedStack> backbone_forward(const geo::Patch& patch, const std::vector<double>& resolutions,
                                            std::size_t k_s, const FwdCtx& ctx, BackboneCache* cache = nullptr);

// Parameter construction for one grain under "backbone.grain{i}.*".
void init_backbone_params(ad::ParamStore& store, std::size_t n_grains, std::size_t d_v, std::size_t d_r);

}  // namespace cspr::vox
