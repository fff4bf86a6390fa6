#include "cspr/voxel.hpp"

#include <algorithm>
#include <cmath>

namespace cspr::vox {

namespace {

std::uint64_t pack(const Coord& c) {
    // 21 bits per axis, biased; resolutions >= 0.005 on [-1,1] stay well inside
    const std::uint64_t bias = 1u << 20;
    return ((static_cast<std::uint64_t>(static_cast<std::int64_t>(c[0]) + bias) & 0x1FFFFF) << 42) |
           ((static_cast<std::uint64_t>(static_cast<std::int64_t>(c[1]) + bias) & 0x1FFFFF) << 21) |
           (static_cast<std::uint64_t>(static_cast<std::int64_t>(c[2]) + bias) & 0x1FFFFF);
}

using CoordIndex = std::unordered_map<std::uint64_t, std::uint32_t>;

CoordIndex index_coords(const std::vector<Coord>& coords) {
    CoordIndex idx;
    idx.reserve(coords.size() * 2);
    for (std::uint32_t i = 0; i < coords.size(); ++i) idx.emplace(pack(coords[i]), i);
    return idx;
}

}  // namespace

VoxelSet voxelize(const geo::Patch& patch, double resolution) {
    if (resolution <= 0.0) throw ContractError("voxelize: resolution must be positive");
    if (patch.count() == 0) throw ContractError("voxelize: empty patch yields an empty voxel set");
    std::vector<Coord> coords;
    coords.reserve(patch.count());
    for (std::size_t i = 0; i < patch.count(); ++i) {
        Coord c;
        for (int a = 0; a < 3; ++a)
            c[static_cast<std::size_t>(a)] = static_cast<std::int32_t>(
                std::floor(static_cast<double>(patch.points[i * 3 + static_cast<std::size_t>(a)]) / resolution));
        coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end());
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    VoxelSet vs;
    vs.resolution = resolution;
    vs.feats = Tensor::full({coords.size(), 1}, 1.0);
    vs.coords = std::move(coords);
    return vs;
}

std::shared_ptr<const KernelMap> build_kernel_map(const std::vector<Coord>& in_coords, int k, int stride) {
    if (k < 1 || k % 2 == 0) throw ContractError("build_kernel_map: kernel size must be odd");
    if (stride != 1 && stride != 2) throw ContractError("build_kernel_map: stride must be 1 or 2");
    auto map = std::make_shared<KernelMap>();
    map->k = k;
    map->stride = stride;
    map->n_in = in_coords.size();
    if (stride == 1) {
        map->out_coords = in_coords;
    } else {
        std::vector<Coord> half;
        half.reserve(in_coords.size());
        for (const Coord& c : in_coords) half.push_back({floor_div2(c[0]), floor_div2(c[1]), floor_div2(c[2])});
        std::sort(half.begin(), half.end());
        half.erase(std::unique(half.begin(), half.end()), half.end());
        map->out_coords = std::move(half);
    }
    const CoordIndex in_index = index_coords(in_coords);
    const int h = k / 2;
    map->pairs.assign(static_cast<std::size_t>(k) * k * k, {});
    for (std::uint32_t out_row = 0; out_row < map->out_coords.size(); ++out_row) {
        const Coord& c = map->out_coords[out_row];
        for (int dx = -h; dx <= h; ++dx)
            for (int dy = -h; dy <= h; ++dy)
                for (int dz = -h; dz <= h; ++dz) {
                    const Coord probe{c[0] * stride + dx, c[1] * stride + dy, c[2] * stride + dz};
                    auto it = in_index.find(pack(probe));
                    if (it == in_index.end()) continue;
                    const std::size_t oi =
                        (static_cast<std::size_t>(dx + h) * static_cast<std::size_t>(k) +
                         static_cast<std::size_t>(dy + h)) *
                            static_cast<std::size_t>(k) +
                        static_cast<std::size_t>(dz + h);
                    map->pairs[oi].emplace_back(it->second, out_row);
                }
    }
    return map;
}

Tensor sparse_conv_apply(const std::shared_ptr<const KernelMap>& map, int k_use, const Tensor& in_feats,
                         const Tensor& weights, const Tensor& bias) {
    if (k_use < 1 || k_use % 2 == 0 || k_use > map->k)
        throw ContractError("sparse_conv_apply: kernel size must be odd and within the map");
    if (weights.rank() != 3)
        throw ShapeError("sparse_conv_apply: weights must be rank-3 (K^3, D_in, D_out)");
    const std::size_t taps = static_cast<std::size_t>(k_use) * k_use * k_use;
    const std::size_t din = in_feats.dim(1), dout = weights.dim(2);
    if (weights.dim(0) != taps || weights.dim(1) != din)
        throw ShapeError("sparse_conv_apply: weight shape " + ad::shape_str(weights.shape()) +
                             " does not match K=" + std::to_string(k_use) + ", D_in=" + std::to_string(din));
    if (in_feats.dim(0) != map->n_in)
        throw ShapeError("sparse_conv_apply: feature rows do not match the kernel map");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout))
        throw ShapeError("sparse_conv_apply: bias must be length D_out");

    const std::size_t n_out = map->out_coords.size();
    const int h_use = k_use / 2;
    const int h_map = map->k / 2;
    const int km = map->k;

    // offset index in this kernel -> offset index in the map
    std::vector<std::pair<std::size_t, std::size_t>> live;  // (w offset idx, map offset idx)
    for (int dx = -h_use; dx <= h_use; ++dx)
        for (int dy = -h_use; dy <= h_use; ++dy)
            for (int dz = -h_use; dz <= h_use; ++dz) {
                const std::size_t wi =
                    (static_cast<std::size_t>(dx + h_use) * static_cast<std::size_t>(k_use) +
                     static_cast<std::size_t>(dy + h_use)) *
                        static_cast<std::size_t>(k_use) +
                    static_cast<std::size_t>(dz + h_use);
                const std::size_t mi = (static_cast<std::size_t>(dx + h_map) * static_cast<std::size_t>(km) +
                                        static_cast<std::size_t>(dy + h_map)) *
                                           static_cast<std::size_t>(km) +
                                       static_cast<std::size_t>(dz + h_map);
                if (!map->pairs[mi].empty()) live.emplace_back(wi, mi);
            }

    std::vector<real> out(n_out * dout, 0.0);
    {
        const auto in = in_feats.data();
        const auto w = weights.data();
        for (const auto& [wi, mi] : live) {
            const real* wo = &w[wi * din * dout];
            for (const auto& [in_row, out_row] : map->pairs[mi]) {
                const real* x = &in[in_row * din];
                real* y = &out[out_row * dout];
                for (std::size_t i = 0; i < din; ++i) {
                    const real xv = x[i];
                    if (xv == 0.0) continue;
                    const real* wrow = &wo[i * dout];
                    for (std::size_t j = 0; j < dout; ++j) y[j] += xv * wrow[j];
                }
            }
        }
        if (bias.defined())
            for (std::size_t r = 0; r < n_out; ++r)
                for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bias.at(j);
    }

    std::vector<Tensor> parents{in_feats, weights};
    if (bias.defined()) parents.push_back(bias);
    const bool has_bias = bias.defined();
    return ad::make_op(
        {n_out, dout}, std::move(out), std::move(parents),
        [map, live, din, dout, n_out, has_bias](ad::Node& o) {
            ad::Node& pin = *o.parents[0];
            ad::Node& pw = *o.parents[1];
            if (pin.requires_grad) {
                auto& g = ad::ensure_grad(pin);
                for (const auto& [wi, mi] : live) {
                    const real* wo = &pw.value[wi * din * dout];
                    for (const auto& [in_row, out_row] : map->pairs[mi]) {
                        const real* gy = &o.grad[out_row * dout];
                        real* gx = &g[in_row * din];
                        for (std::size_t i = 0; i < din; ++i) {
                            real acc = 0.0;
                            const real* wrow = &wo[i * dout];
                            for (std::size_t j = 0; j < dout; ++j) acc += gy[j] * wrow[j];
                            gx[i] += acc;
                        }
                    }
                }
            }
            if (pw.requires_grad) {
                auto& g = ad::ensure_grad(pw);
                for (const auto& [wi, mi] : live) {
                    real* gw = &g[wi * din * dout];
                    for (const auto& [in_row, out_row] : map->pairs[mi]) {
                        const real* x = &pin.value[in_row * din];
                        const real* gy = &o.grad[out_row * dout];
                        for (std::size_t i = 0; i < din; ++i) {
                            const real xv = x[i];
                            if (xv == 0.0) continue;
                            real* grow = &gw[i * dout];
                            for (std::size_t j = 0; j < dout; ++j) grow[j] += xv * gy[j];
                        }
                    }
                }
            }
            if (has_bias) {
                ad::Node& pb = *o.parents[2];
                if (pb.requires_grad) {
                    auto& g = ad::ensure_grad(pb);
                    for (std::size_t r = 0; r < n_out; ++r)
                        for (std::size_t j = 0; j < dout; ++j) g[j] += o.grad[r * dout + j];
                }
            }
        });
}

VoxelSet sparse_conv(const VoxelSet& input, const Tensor& weights, int kernel_size, int stride,
                     const Tensor& bias) {
    auto map = build_kernel_map(input.coords, kernel_size, stride);
    VoxelSet out;
    out.resolution = input.resolution * (stride == 2 ? 2.0 : 1.0);
    out.coords = map->out_coords;
    out.feats = sparse_conv_apply(map, kernel_size, input.feats, weights, bias);
    return out;
}

Tensor bn_layer(const Tensor& x, const std::string& prefix, const FwdCtx& ctx) {
    const ad::ParamStore& p = *ctx.params;
    ad::BnStats stats;
    Tensor out = ad::batch_norm(x, p.get(prefix + ".gamma"), p.get(prefix + ".beta"), ctx.mode,
                                p.get(prefix + ".running_mean"), p.get(prefix + ".running_var"), 1e-5,
                                ctx.bn_stats ? &stats : nullptr);
    if (ctx.bn_stats && ctx.mode == ad::NormMode::Train) ctx.bn_stats->emplace_back(prefix, std::move(stats));
    return out;
}

std::vector<Tensor> bn_layer_batch(const std::vector<Tensor>& xs, const std::string& prefix,
                                   const FwdCtx& ctx) {
    if (xs.empty()) throw ContractError("bn_layer_batch: empty batch");
    if (xs.size() == 1) return {bn_layer(xs[0], prefix, ctx)};
    Tensor joint = bn_layer(ad::concat(xs, 0), prefix, ctx);
    std::vector<Tensor> out;
    out.reserve(xs.size());
    std::size_t row = 0;
    for (const Tensor& x : xs) {
        out.push_back(ad::slice_rows(joint, row, row + x.dim(0)));
        row += x.dim(0);
    }
    return out;
}

std::vector<GrainCache> build_grain_caches(const geo::Patch& patch, const std::vector<double>& resolutions) {
    std::vector<GrainCache> grains;
    grains.reserve(resolutions.size());
    for (double r : resolutions) {
        GrainCache g;
        try {
            g.voxels = voxelize(patch, r);
        } catch (const ContractError&) {
            throw ContractError("backbone: empty voxel set at grain resolution " + std::to_string(r));
        }
        g.stem1 = build_kernel_map(g.voxels.coords, 5, 1);
        g.stem2 = build_kernel_map(g.voxels.coords, 3, 2);
        g.multi = build_kernel_map(g.stem2->out_coords, 9, 1);
        grains.push_back(std::move(g));
    }
    return grains;
}

std::shared_ptr<const std::vector<GrainCache>> BackboneCache::get_or_build(
    const geo::Patch& patch, const std::vector<double>& resolutions) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = map_.find(patch.id);
    if (it != map_.end()) return it->second;
    auto built = std::make_shared<const std::vector<GrainCache>>(build_grain_caches(patch, resolutions));
    map_.emplace(patch.id, built);
    return built;
}

std::vector<Tensor> stem_batch(const std::vector<const GrainCache*>& grains, const std::string& prefix,
                               const FwdCtx& ctx) {
    if (grains.empty()) throw ContractError("stem_batch: empty batch");
    const ad::ParamStore& p = *ctx.params;
    std::vector<Tensor> h;
    h.reserve(grains.size());
    for (const GrainCache* g : grains)
        h.push_back(sparse_conv_apply(g->stem1, 5, g->voxels.feats, p.get(prefix + ".conv1.weight")));
    h = bn_layer_batch(h, prefix + ".conv1.bn", ctx);
    for (std::size_t i = 0; i < h.size(); ++i)
        h[i] = sparse_conv_apply(grains[i]->stem2, 3, ad::relu(h[i]), p.get(prefix + ".conv2.weight"));
    h = bn_layer_batch(h, prefix + ".conv2.bn", ctx);
    for (Tensor& t : h) t = ad::relu(t);
    return h;
}

Tensor stem(const GrainCache& grain, const std::string& prefix, const FwdCtx& ctx) {
    return stem_batch({&grain}, prefix, ctx)[0];
}

ScaleStack multi_scale(const GrainCache& grain, const Tensor& stem_feats, const std::string& prefix,
                       const FwdCtx& ctx) {
    const ad::ParamStore& p = *ctx.params;
    ScaleStack stack;
    stack.coords = grain.multi->out_coords;
    for (int k : stack.scales) {
        const std::string name = prefix + ".scale" + std::to_string(k);
        stack.block.push_back(
            sparse_conv_apply(grain.multi, k, stem_feats, p.get(name + ".weight"), p.get(name + ".bias")));
    }
    return stack;
}

std::vector<std::size_t> topk_scale_indices(std::span<const real> probs, std::size_t k) {
    std::vector<std::size_t> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

void select_features(ScaleStack& stack, std::size_t k_s, const std::string& prefix, const FwdCtx& ctx) {
    if (k_s < 1 || k_s > stack.block.size())
        throw ContractError("select_features: k_s must be between 1 and " + std::to_string(stack.block.size()));
    const ad::ParamStore& p = *ctx.params;
    const Tensor score_w = p.get(prefix + ".score.weight");
    const Tensor score_b = p.get(prefix + ".score.bias");

    std::vector<Tensor> scores;
    scores.reserve(stack.block.size());
    for (const Tensor& slice : stack.block)
        scores.push_back(ad::mean_all(ad::add_rowvec(ad::matmul(slice, score_w), score_b)));
    stack.probs = ad::softmax(ad::concat(scores, 0));

    const std::vector<std::size_t> order = topk_scale_indices(stack.probs.data(), k_s);

    const Tensor reduce_w = p.get(prefix + ".reduce.weight");
    const Tensor reduce_b = p.get(prefix + ".reduce.bias");
    stack.selected.clear();
    stack.selected_scales.clear();
    for (std::size_t idx : order) {
        stack.selected_scales.push_back(stack.scales[idx]);
        stack.selected.push_back(ad::add_rowvec(ad::matmul(stack.block[idx], reduce_w), reduce_b));
    }
}

std::vector<std::vector<SelectedStack>> backbone_forward_batch(const std::vector<const geo::Patch*>& patches,
                                                               const std::vector<double>& resolutions,
                                                               std::size_t k_s, const FwdCtx& ctx,
                                                               BackboneCache* cache) {
    if (patches.empty()) throw ContractError("backbone_forward: empty patch batch");
    if (resolutions.empty()) throw ContractError("backbone_forward: need at least one resolution");
    for (std::size_t i = 1; i < resolutions.size(); ++i)
        if (resolutions[i] <= resolutions[i - 1])
            throw ContractError("backbone_forward: resolutions must be strictly increasing");

    std::vector<std::shared_ptr<const std::vector<GrainCache>>> grains;
    grains.reserve(patches.size());
    for (const geo::Patch* p : patches)
        grains.push_back(cache ? cache->get_or_build(*p, resolutions)
                               : std::make_shared<const std::vector<GrainCache>>(
                                     build_grain_caches(*p, resolutions)));

    std::vector<std::vector<SelectedStack>> out(patches.size());
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        const std::string prefix = "backbone.grain" + std::to_string(i);
        std::vector<const GrainCache*> grain_ptrs;
        grain_ptrs.reserve(patches.size());
        for (const auto& g : grains) grain_ptrs.push_back(&(*g)[i]);
        std::vector<Tensor> stem_feats = stem_batch(grain_ptrs, prefix + ".stem", ctx);
        for (std::size_t pi = 0; pi < patches.size(); ++pi) {
            ScaleStack stack = multi_scale(*grain_ptrs[pi], stem_feats[pi], prefix, ctx);
            select_features(stack, k_s, prefix, ctx);
            SelectedStack sel;
            sel.streams = std::move(stack.selected);
            sel.n_voxels = grain_ptrs[pi]->multi->out_coords.size();
            sel.selected_scales = std::move(stack.selected_scales);
            sel.probs = stack.probs;
            out[pi].push_back(std::move(sel));
        }
    }
    return out;
}

std::vector<SelectedStack> backbone_forward(const geo::Patch& patch, const std::vector<double>& resolutions,
                                            std::size_t k_s, const FwdCtx& ctx, BackboneCache* cache) {
    return std::move(backbone_forward_batch({&patch}, resolutions, k_s, ctx, cache)[0]);
}

void init_backbone_params(ad::ParamStore& store, std::size_t n_grains, std::size_t d_v, std::size_t d_r) {
    using ad::Init;
    for (std::size_t i = 0; i < n_grains; ++i) {
        const std::string g = "backbone.grain" + std::to_string(i);
        store.create(g + ".stem.conv1.weight", {125, 1, d_v}, Init::xavier(125, d_v));
        store.create(g + ".stem.conv1.bn.gamma", {d_v}, Init::ones());
        store.create(g + ".stem.conv1.bn.beta", {d_v}, Init::zeros());
        store.create(g + ".stem.conv1.bn.running_mean", {d_v}, Init::zeros(), false);
        store.create(g + ".stem.conv1.bn.running_var", {d_v}, Init::ones(), false);
        store.create(g + ".stem.conv2.weight", {27, d_v, d_v}, Init::xavier(27 * d_v, d_v));
        store.create(g + ".stem.conv2.bn.gamma", {d_v}, Init::ones());
        store.create(g + ".stem.conv2.bn.beta", {d_v}, Init::zeros());
        store.create(g + ".stem.conv2.bn.running_mean", {d_v}, Init::zeros(), false);
        store.create(g + ".stem.conv2.bn.running_var", {d_v}, Init::ones(), false);
        for (int k : {1, 3, 5, 7, 9}) {
            const std::string s = g + ".scale" + std::to_string(k);
            const std::size_t taps = static_cast<std::size_t>(k) * k * k;
            store.create(s + ".weight", {taps, d_v, d_v}, Init::xavier(taps * d_v, d_v));
            store.create(s + ".bias", {d_v}, Init::zeros());
        }
        store.create(g + ".score.weight", {d_v, 1}, Init::xavier(d_v, 1));
        store.create(g + ".score.bias", {1}, Init::zeros());
        store.create(g + ".reduce.weight", {d_v, d_r}, Init::xavier(d_v, d_r));
        store.create(g + ".reduce.bias", {d_r}, Init::zeros());
    }
}

}  // namespace cspr::vox
