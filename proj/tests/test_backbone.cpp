#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cspr/gradcheck.hpp"
#include "cspr/voxel.hpp"

using namespace cspr;
using namespace cspr::vox;
using ad::Tensor;
using ad::real;

namespace {

geo::Patch patch_from(std::vector<float> pts, std::uint64_t id = 0) {
    geo::Patch p;
    p.points = std::move(pts);
    p.id = id;
    return p;
}

geo::Patch random_patch(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    std::vector<float> pts(n * 3);
    for (auto& v : pts) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return patch_from(std::move(pts), seed);
}

Tensor random_tensor(Rng& rng, ad::Shape shape, bool requires_grad = false) {
    std::vector<real> v(ad::shape_numel(shape));
    for (real& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

ad::ParamStore tiny_params(std::size_t n_grains, std::size_t d_v, std::size_t d_r, std::uint64_t seed = 11) {
    ad::ParamStore store(seed);
    init_backbone_params(store, n_grains, d_v, d_r);
    return store;
}

}  // namespace

TEST_CASE("voxelize quantizes with floor and merges duplicates") {
    geo::Patch p = patch_from({0.05f, 0.05f, 0.05f});
    VoxelSet vs = voxelize(p, 0.05);
    REQUIRE(vs.count() == 1);
    CHECK(vs.coords[0] == Coord{1, 1, 1});
    CHECK(vs.feats.at(0) == 1.0);

    geo::Patch two = patch_from({0.11f, 0.0f, 0.0f, 0.13f, 0.02f, 0.01f});
    VoxelSet merged = voxelize(two, 0.2);
    REQUIRE(merged.count() == 1);
    CHECK(merged.feats.at(0) == 1.0);

    CHECK_THROWS_AS(voxelize(patch_from({}), 0.1), ContractError);
}

TEST_CASE("voxel count is bounded by the exhaustive cell count at r=0.4") {
    geo::Patch p = random_patch(3, 4096);
    VoxelSet vs = voxelize(p, 0.4);
    // grid spans floor(-1/0.4) = -3 ... floor(0.999/0.4) = 2 per axis
    CHECK(vs.count() <= std::min<std::size_t>(4096, 6 * 6 * 6));
    for (const Coord& c : vs.coords)
        for (int a = 0; a < 3; ++a) {
            CHECK(c[static_cast<std::size_t>(a)] >= -3);
            CHECK(c[static_cast<std::size_t>(a)] <= 2);
        }
}

TEST_CASE("voxelize is permutation invariant bit-exactly") {
    geo::Patch p = random_patch(4, 500);
    geo::Patch shuffled = p;
    Rng rng(9);
    for (std::size_t i = shuffled.count(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
        for (int a = 0; a < 3; ++a) std::swap(shuffled.points[(i - 1) * 3 + a], shuffled.points[j * 3 + a]);
    }
    VoxelSet v1 = voxelize(p, 0.13);
    VoxelSet v2 = voxelize(shuffled, 0.13);
    CHECK(v1.coords == v2.coords);
}

TEST_CASE("voxel nesting: coarse voxels are floor-halved fine voxels") {
    geo::Patch p = random_patch(5, 800);
    VoxelSet fine = voxelize(p, 0.07);
    VoxelSet coarse = voxelize(p, 0.14);
    std::set<Coord> halved;
    for (const Coord& c : fine.coords) halved.insert({floor_div2(c[0]), floor_div2(c[1]), floor_div2(c[2])});
    for (const Coord& c : coarse.coords) CHECK(halved.count(c) == 1);
    CHECK(halved.size() == coarse.count());
}

TEST_CASE("K=1 identity weights reproduce the input exactly") {
    geo::Patch p = random_patch(6, 60);
    VoxelSet vs = voxelize(p, 0.3);
    const std::size_t d = 4;
    Rng rng(7);
    vs.feats = random_tensor(rng, {vs.count(), d});
    std::vector<real> eye(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    Tensor w = Tensor::from({1, d, d}, std::move(eye));
    VoxelSet out = sparse_conv(vs, w, 1, 1);
    CHECK(out.coords == vs.coords);
    for (std::size_t i = 0; i < out.feats.size(); ++i) CHECK(out.feats.at(i) == vs.feats.at(i));
}

TEST_CASE("single voxel with only the center tap set") {
    VoxelSet vs;
    vs.resolution = 0.1;
    vs.coords = {{0, 0, 0}};
    vs.feats = Tensor::from({1, 2}, {1.5, -2.0});
    Rng rng(8);
    std::vector<real> w(27 * 2 * 3, 0.0);
    // center offset index of a 3x3x3 kernel is 13
    std::vector<real> center{0.5, 1.0, -1.0, 2.0, 0.0, 3.0};
    std::copy(center.begin(), center.end(), w.begin() + 13 * 6);
    VoxelSet out = sparse_conv(vs, Tensor::from({27, 2, 3}, std::move(w)), 3, 1);
    REQUIRE(out.count() == 1);
    // [1.5, -2] * [[0.5,1,-1],[2,0,3]]
    CHECK(out.feats.at(0) == doctest::Approx(1.5 * 0.5 - 2.0 * 2.0));
    CHECK(out.feats.at(1) == doctest::Approx(1.5 * 1.0));
    CHECK(out.feats.at(2) == doctest::Approx(1.5 * -1.0 - 2.0 * 3.0));
}

TEST_CASE("sparse conv equals dense 3D convolution on a 4^3 region") {
    Rng rng(12);
    const std::size_t din = 3, dout = 2;
    // random occupancy over the 4^3 grid
    std::vector<Coord> coords;
    for (std::int32_t x = 0; x < 4; ++x)
        for (std::int32_t y = 0; y < 4; ++y)
            for (std::int32_t z = 0; z < 4; ++z)
                if (rng.uniform() < 0.55) coords.push_back({x, y, z});
    REQUIRE(!coords.empty());
    std::sort(coords.begin(), coords.end());

    VoxelSet vs;
    vs.resolution = 1.0;
    vs.coords = coords;
    vs.feats = random_tensor(rng, {coords.size(), din});
    Tensor w = random_tensor(rng, {27, din, dout});
    VoxelSet out = sparse_conv(vs, w, 3, 1);

    // dense oracle: out[c] = sum_o W[o] * in[c + o]
    auto dense_at = [&](const Coord& c, std::size_t j) {
        real acc = 0.0;
        for (int dx = -1; dx <= 1; ++dx)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dz = -1; dz <= 1; ++dz) {
                    const Coord probe{c[0] + dx, c[1] + dy, c[2] + dz};
                    auto it = std::lower_bound(coords.begin(), coords.end(), probe);
                    if (it == coords.end() || *it != probe) continue;
                    const std::size_t row = static_cast<std::size_t>(it - coords.begin());
                    const std::size_t oi =
                        static_cast<std::size_t>((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1));
                    for (std::size_t i = 0; i < din; ++i)
                        acc += w.at((oi * din + i) * dout + j) * vs.feats.at(row * din + i);
                }
        return acc;
    };
    real max_diff = 0.0;
    for (std::size_t r = 0; r < out.count(); ++r)
        for (std::size_t j = 0; j < dout; ++j)
            max_diff = std::max(max_diff, std::abs(out.feats.at(r * dout + j) - dense_at(out.coords[r], j)));
    CHECK(max_diff <= 1e-6);
}

TEST_CASE("sparse conv is linear in its input") {
    geo::Patch p = random_patch(14, 80);
    VoxelSet base = voxelize(p, 0.25);
    Rng rng(15);
    Tensor fx = random_tensor(rng, {base.count(), 3});
    Tensor fy = random_tensor(rng, {base.count(), 3});
    Tensor w = random_tensor(rng, {27, 3, 3});
    const real a = 0.7, b = -1.3;

    auto map = build_kernel_map(base.coords, 3, 1);
    Tensor lhs = sparse_conv_apply(map, 3, ad::add(ad::scale(fx, a), ad::scale(fy, b)), w);
    Tensor rhs = ad::add(ad::scale(sparse_conv_apply(map, 3, fx, w), a),
                         ad::scale(sparse_conv_apply(map, 3, fy, w), b));
    for (std::size_t i = 0; i < lhs.size(); ++i)
        CHECK(std::abs(lhs.at(i) - rhs.at(i)) <= 1e-6);
}

TEST_CASE("sparse conv gradient matches finite differences on a 10-voxel instance") {
    Rng rng(16);
    std::vector<Coord> coords;
    while (coords.size() < 10) {
        Coord c{static_cast<std::int32_t>(rng.uniform_int(-2, 2)),
                static_cast<std::int32_t>(rng.uniform_int(-2, 2)),
                static_cast<std::int32_t>(rng.uniform_int(-2, 2))};
        if (std::find(coords.begin(), coords.end(), c) == coords.end()) coords.push_back(c);
    }
    std::sort(coords.begin(), coords.end());
    auto map = build_kernel_map(coords, 3, 1);
    Tensor feats = random_tensor(rng, {10, 2}, true);
    Tensor w = random_tensor(rng, {27, 2, 2}, true);
    Tensor bias = random_tensor(rng, {2}, true);

    ad::CheckInstance inst;
    inst.leaves = {feats, w, bias};
    inst.loss = [map, feats, w, bias] {
        Tensor out = sparse_conv_apply(map, 3, feats, w, bias);
        Rng prng(99);
        std::vector<real> pv(out.size());
        for (real& v : pv) v = prng.uniform(-1, 1);
        return ad::sum_all(ad::mul(out, Tensor::from(out.shape(), std::move(pv))));
    };
    auto rep = ad::run_check(inst, 1e-5, 16);
    CHECK(rep.max_rel_error < 1e-4);

    // stride-2 path too
    auto map2 = build_kernel_map(coords, 3, 2);
    ad::CheckInstance inst2;
    inst2.leaves = {feats, w};
    inst2.loss = [map2, feats, w] { return ad::sum_all(sparse_conv_apply(map2, 3, feats, w)); };
    auto rep2 = ad::run_check(inst2, 1e-5, 17);
    CHECK(rep2.max_rel_error < 1e-4);
}

TEST_CASE("stride-1 closure and stride-2 coordinate rule") {
    geo::Patch p = random_patch(18, 300);
    VoxelSet vs = voxelize(p, 0.11);
    Rng rng(19);
    Tensor w = random_tensor(rng, {27, 1, 2});
    VoxelSet s1 = sparse_conv(vs, w, 3, 1);
    CHECK(s1.coords == vs.coords);

    VoxelSet s2 = sparse_conv(vs, w, 3, 2);
    std::set<Coord> expected;
    for (const Coord& c : vs.coords) expected.insert({floor_div2(c[0]), floor_div2(c[1]), floor_div2(c[2])});
    CHECK(s2.count() == expected.size());
    for (const Coord& c : s2.coords) CHECK(expected.count(c) == 1);
    CHECK(s2.count() <= s1.count());
}

TEST_CASE("stem contract: stride-2 coords, configured width, voxel count shrinks") {
    const std::size_t d_v = 6, d_r = 4;
    ad::ParamStore store = tiny_params(1, d_v, d_r);
    FwdCtx ctx{&store, ad::NormMode::Train, nullptr};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        geo::Patch p = random_patch(100 + seed, 120);
        auto grains = build_grain_caches(p, {0.2});
        Tensor out = stem(grains[0], "backbone.grain0.stem", ctx);
        CHECK(out.dim(1) == d_v);
        CHECK(grains[0].stem2->out_coords.size() <= grains[0].voxels.count());
        std::set<Coord> expected;
        for (const Coord& c : grains[0].voxels.coords)
            expected.insert({floor_div2(c[0]), floor_div2(c[1]), floor_div2(c[2])});
        CHECK(grains[0].stem2->out_coords.size() == expected.size());
    }
}

TEST_CASE("multi-scale slices share the coordinate set and honor zero weights") {
    const std::size_t d_v = 4;
    ad::ParamStore store = tiny_params(1, d_v, 3);
    FwdCtx ctx{&store, ad::NormMode::Train, nullptr};
    geo::Patch p = random_patch(21, 150);
    auto grains = build_grain_caches(p, {0.2});
    Tensor stem_out = stem(grains[0], "backbone.grain0.stem", ctx);
    ScaleStack stack = multi_scale(grains[0], stem_out, "backbone.grain0", ctx);
    REQUIRE(stack.block.size() == 5);
    const std::size_t n = grains[0].multi->out_coords.size();
    for (const Tensor& slice : stack.block) CHECK(slice.dim(0) == n);

    // zero weights -> zero block
    for (int k : {1, 3, 5, 7, 9}) {
        Tensor w = store.get("backbone.grain0.scale" + std::to_string(k) + ".weight");
        auto wd = w.mutable_data();
        std::fill(wd.begin(), wd.end(), 0.0);
    }
    ScaleStack zero_stack = multi_scale(grains[0], stem_out, "backbone.grain0", ctx);
    for (const Tensor& slice : zero_stack.block)
        for (std::size_t i = 0; i < slice.size(); ++i) CHECK(slice.at(i) == 0.0);
}

TEST_CASE("K=1 multi-scale slice equals a per-voxel linear map (matmul oracle)") {
    const std::size_t d_v = 5;
    ad::ParamStore store = tiny_params(1, d_v, 3);
    FwdCtx ctx{&store, ad::NormMode::Train, nullptr};
    geo::Patch p = random_patch(22, 90);
    auto grains = build_grain_caches(p, {0.25});
    Tensor stem_out = stem(grains[0], "backbone.grain0.stem", ctx);
    ScaleStack stack = multi_scale(grains[0], stem_out, "backbone.grain0", ctx);

    Tensor w1 = store.get("backbone.grain0.scale1.weight");  // (1, d_v, d_v)
    Tensor b1 = store.get("backbone.grain0.scale1.bias");
    Tensor oracle = ad::add_rowvec(ad::matmul(stem_out, ad::reshape(w1, {d_v, d_v})), b1);
    for (std::size_t i = 0; i < oracle.size(); ++i)
        CHECK(stack.block[0].at(i) == doctest::Approx(oracle.at(i)).epsilon(1e-9));
}

TEST_CASE("top-k selection rule: tie breaking and sort oracle") {
    // k=5 keeps everything in order
    std::vector<real> uniform{0.2, 0.2, 0.2, 0.2, 0.2};
    CHECK(topk_scale_indices(uniform, 5) == std::vector<std::size_t>{0, 1, 2, 3, 4});
    // tie at 0.1 broken toward the smallest index
    std::vector<real> probs{0.4, 0.3, 0.1, 0.1, 0.1};
    CHECK(topk_scale_indices(probs, 3) == std::vector<std::size_t>{0, 1, 2});
    // uniform tie: smallest indices win
    CHECK(topk_scale_indices(uniform, 3) == std::vector<std::size_t>{0, 1, 2});

    // random probabilities agree with a full-sort oracle
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<real> v(5);
        for (real& x : v) x = rng.uniform();
        auto got = topk_scale_indices(v, 3);
        std::vector<std::size_t> order{0, 1, 2, 3, 4};
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (v[a] != v[b]) return v[a] > v[b];
            return a < b;
        });
        order.resize(3);
        std::sort(order.begin(), order.end());
        CHECK(got == order);
    }
}

TEST_CASE("select_features output shape and ascending scale order") {
    const std::size_t d_v = 4, d_r = 3;
    ad::ParamStore store = tiny_params(1, d_v, d_r);
    FwdCtx ctx{&store, ad::NormMode::Train, nullptr};
    geo::Patch p = random_patch(24, 100);
    auto grains = build_grain_caches(p, {0.2});
    Tensor stem_out = stem(grains[0], "backbone.grain0.stem", ctx);
    ScaleStack stack = multi_scale(grains[0], stem_out, "backbone.grain0", ctx);
    select_features(stack, 3, "backbone.grain0", ctx);
    REQUIRE(stack.selected.size() == 3);
    CHECK(std::is_sorted(stack.selected_scales.begin(), stack.selected_scales.end()));
    for (const Tensor& s : stack.selected) {
        CHECK(s.dim(0) == grains[0].multi->out_coords.size());
        CHECK(s.dim(1) == d_r);
    }
    real prob_sum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) prob_sum += stack.probs.at(i);
    CHECK(prob_sum == doctest::Approx(1.0));

    ScaleStack all = multi_scale(grains[0], stem_out, "backbone.grain0", ctx);
    select_features(all, 5, "backbone.grain0", ctx);
    CHECK(all.selected_scales == std::vector<int>{1, 3, 5, 7, 9});
    CHECK_THROWS_AS(select_features(all, 0, "backbone.grain0", ctx), ContractError);
    CHECK_THROWS_AS(select_features(all, 6, "backbone.grain0", ctx), ContractError);
}

TEST_CASE("backbone_forward presets and degenerate single grain") {
    const std::size_t d_v = 4, d_r = 3;
    FwdCtx ctx;
    // campus- and vehicle-scale resolution presets are accepted
    {
        ad::ParamStore store = tiny_params(3, d_v, d_r);
        FwdCtx c3{&store, ad::NormMode::Train, nullptr};
        geo::Patch p = random_patch(25, 400);
        auto stacks = backbone_forward(p, {0.05, 0.12, 0.4}, 3, c3);
        CHECK(stacks.size() == 3);
        auto oxford = backbone_forward(p, {0.01, 0.12, 0.2}, 3, c3);
        CHECK(oxford.size() == 3);
    }
    // L = 1 degenerates to a single stack
    {
        ad::ParamStore store = tiny_params(1, d_v, d_r);
        FwdCtx c1{&store, ad::NormMode::Train, nullptr};
        geo::Patch p = random_patch(26, 200);
        auto stacks = backbone_forward(p, {0.2}, 2, c1);
        REQUIRE(stacks.size() == 1);
        CHECK(stacks[0].streams.size() == 2);
    }
    // resolutions must increase strictly
    {
        ad::ParamStore store = tiny_params(2, d_v, d_r);
        FwdCtx c2{&store, ad::NormMode::Train, nullptr};
        geo::Patch p = random_patch(27, 100);
        CHECK_THROWS_AS(backbone_forward(p, {0.2, 0.2}, 1, c2), ContractError);
        CHECK_THROWS_AS(backbone_forward(p, {}, 1, c2), ContractError);
    }
}

TEST_CASE("backbone cache reuses voxelizations per patch id") {
    const std::size_t d_v = 4, d_r = 3;
    ad::ParamStore store = tiny_params(1, d_v, d_r);
    FwdCtx ctx{&store, ad::NormMode::Eval, nullptr};
    BackboneCache cache;
    geo::Patch p = random_patch(28, 150);
    auto a = cache.get_or_build(p, {0.2});
    auto b = cache.get_or_build(p, {0.2});
    CHECK(a.get() == b.get());
    auto s1 = backbone_forward(p, {0.2}, 2, ctx, &cache);
    auto s2 = backbone_forward(p, {0.2}, 2, ctx, &cache);
    for (std::size_t k = 0; k < s1[0].streams.size(); ++k)
        for (std::size_t i = 0; i < s1[0].streams[k].size(); ++i)
            CHECK(s1[0].streams[k].at(i) == s2[0].streams[k].at(i));
}
