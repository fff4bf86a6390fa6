#include <cmath>

#include "cspr/gradcheck.hpp"
#include "cspr/model.hpp"
#include "cspr/train.hpp"

namespace cspr::ad {

namespace {

Tensor projected(const Tensor& out, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x70a1));
    std::vector<real> w(out.size());
    for (real& v : w) v = rng.uniform(-1.0, 1.0);
    return sum_all(mul(out, Tensor::from(out.shape(), std::move(w))));
}

geo::Patch random_patch(std::uint64_t seed, std::size_t n) {
    Rng rng(mix_seed(seed, 0xbadc));
    geo::Patch p;
    p.points.resize(n * 3);
    for (auto& v : p.points) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    p.id = seed;
    return p;
}

std::vector<Tensor> trainable_leaves(const ParamStore& store) {
    return store.trainable_tensors();
}

model::ModelConfig tiny_model_config() {
    model::ModelConfig cfg;
    cfg.resolutions = {0.3, 0.5};
    cfg.k_s = 2;
    cfg.d_v = 2;
    cfg.d_r = 4;
    cfg.d_out = 4;
    cfg.clusters = 2;
    cfg.heads = 2;
    cfg.memory_slots = 3;
    cfg.substeps = 1;
    return cfg;
}

}  // namespace

const std::vector<CheckCase>& block_catalog() {
    static const std::vector<CheckCase> cases = [] {
        std::vector<CheckCase> cs;

        cs.push_back({"block.stem", [](std::uint64_t seed) {
                          auto store = std::make_shared<ParamStore>(seed);
                          vox::init_backbone_params(*store, 1, 2, 2);
                          auto grains = std::make_shared<std::vector<vox::GrainCache>>(
                              vox::build_grain_caches(random_patch(seed, 40), {0.4}));
                          CheckInstance inst;
                          inst.leaves = trainable_leaves(*store);
                          // keep only stem parameters
                          std::vector<Tensor> stem_leaves;
                          for (const auto& name : store->names())
                              if (name.find(".stem.") != std::string::npos && store->trainable(name))
                                  stem_leaves.push_back(store->get(name));
                          inst.leaves = stem_leaves;
                          inst.loss = [store, grains, seed] {
                              vox::FwdCtx ctx{store.get(), NormMode::Train, nullptr};
                              return projected(vox::stem((*grains)[0], "backbone.grain0.stem", ctx), seed);
                          };
                          return inst;
                      }});

        cs.push_back({"block.multi_scale", [](std::uint64_t seed) {
                          auto store = std::make_shared<ParamStore>(seed);
                          vox::init_backbone_params(*store, 1, 2, 2);
                          auto grains = std::make_shared<std::vector<vox::GrainCache>>(
                              vox::build_grain_caches(random_patch(seed, 40), {0.4}));
                          Rng rng(mix_seed(seed, 5));
                          const std::size_t n = (*grains)[0].multi->out_coords.size();
                          std::vector<real> fv(n * 2);
                          for (real& v : fv) v = rng.uniform(-1.0, 1.0);
                          Tensor feats = Tensor::from({n, 2}, std::move(fv), true);
                          CheckInstance inst;
                          for (int k : {1, 3, 5, 7, 9}) {
                              inst.leaves.push_back(
                                  store->get("backbone.grain0.scale" + std::to_string(k) + ".weight"));
                              inst.leaves.push_back(
                                  store->get("backbone.grain0.scale" + std::to_string(k) + ".bias"));
                          }
                          inst.leaves.push_back(feats);
                          inst.coord_cap = 400;
                          inst.loss = [store, grains, feats, seed] {
                              vox::FwdCtx ctx{store.get(), NormMode::Train, nullptr};
                              vox::ScaleStack stack =
                                  vox::multi_scale((*grains)[0], feats, "backbone.grain0", ctx);
                              Tensor acc = projected(stack.block[0], seed);
                              for (std::size_t i = 1; i < stack.block.size(); ++i)
                                  acc = add(acc, projected(stack.block[i], mix_seed(seed, i)));
                              return acc;
                          };
                          return inst;
                      }});

        cs.push_back({"block.select_features", [](std::uint64_t seed) {
                          auto store = std::make_shared<ParamStore>(seed);
                          vox::init_backbone_params(*store, 1, 3, 2);
                          auto grains = std::make_shared<std::vector<vox::GrainCache>>(
                              vox::build_grain_caches(random_patch(seed, 40), {0.4}));
                          Rng rng(mix_seed(seed, 6));
                          const std::size_t n = (*grains)[0].multi->out_coords.size();
                          std::vector<real> fv(n * 3);
                          for (real& v : fv) v = rng.uniform(-1.0, 1.0);
                          Tensor feats = Tensor::from({n, 3}, std::move(fv), true);
                          CheckInstance inst;
                          inst.leaves = {feats, store->get("backbone.grain0.reduce.weight"),
                                         store->get("backbone.grain0.reduce.bias"),
                                         store->get("backbone.grain0.score.weight"),
                                         store->get("backbone.grain0.score.bias")};
                          inst.coord_cap = 400;
                          inst.loss = [store, grains, feats, seed] {
                              vox::FwdCtx ctx{store.get(), NormMode::Train, nullptr};
                              vox::ScaleStack stack =
                                  vox::multi_scale((*grains)[0], feats, "backbone.grain0", ctx);
                              vox::select_features(stack, 2, "backbone.grain0", ctx);
                              return add(projected(stack.selected[0], seed),
                                         projected(stack.selected[1], mix_seed(seed, 9)));
                          };
                          return inst;
                      }});

        cs.push_back({"block.ea_block", [](std::uint64_t seed) {
                          refine::RefineConfig rc;
                          rc.d_r = 4;
                          rc.heads = 2;
                          rc.memory_slots = 3;
                          rc.substeps = 1;
                          auto store = std::make_shared<ParamStore>(seed);
                          refine::init_refine_params(*store, rc, 1, 4, 4);
                          Rng rng(mix_seed(seed, 7));
                          std::vector<real> tv(5 * 4);
                          for (real& v : tv) v = rng.uniform(-1.0, 1.0);
                          Tensor tokens = Tensor::from({5, 4}, std::move(tv), true);
                          CheckInstance inst;
                          inst.leaves = trainable_leaves(*store);
                          inst.leaves.push_back(tokens);
                          inst.coord_cap = 400;
                          inst.loss = [store, tokens, rc, seed] {
                              vox::FwdCtx ctx{store.get(), NormMode::Train, nullptr};
                              return projected(refine::ea_block(tokens, 1, "refine.step0.sub0", rc, ctx), seed);
                          };
                          return inst;
                      }});

        cs.push_back({"block.refine", [](std::uint64_t seed) {
                          refine::RefineConfig rc;
                          rc.d_r = 4;
                          rc.heads = 2;
                          rc.memory_slots = 3;
                          rc.substeps = 2;
                          auto store = std::make_shared<ParamStore>(seed);
                          refine::init_refine_params(*store, rc, 2, 2 * 4 * 2, 4);
                          Rng rng(mix_seed(seed, 8));
                          auto stacks = std::make_shared<std::vector<vox::SelectedStack>>();
                          std::vector<Tensor> stream_leaves;
                          for (std::size_t g = 0; g < 2; ++g) {
                              vox::SelectedStack s;
                              const std::size_t n = 3 + g;
                              s.n_voxels = n;
                              for (std::size_t k = 0; k < 2; ++k) {
                                  std::vector<real> v(n * 4);
                                  for (real& x : v) x = rng.uniform(-1.0, 1.0);
                                  Tensor t = Tensor::from({n, 4}, std::move(v), true);
                                  s.streams.push_back(t);
                                  stream_leaves.push_back(t);
                              }
                              stacks->push_back(std::move(s));
                          }
                          CheckInstance inst;
                          inst.leaves = trainable_leaves(*store);
                          for (const Tensor& t : stream_leaves) inst.leaves.push_back(t);
                          inst.coord_cap = 250;
                          inst.loss = [store, stacks, rc, seed] {
                              vox::FwdCtx ctx{store.get(), NormMode::Train, nullptr};
                              return projected(refine::refine_stacks(*stacks, rc, ctx), seed);
                          };
                          return inst;
                      }});

        cs.push_back({"block.netvlad", [](std::uint64_t seed) {
                          Rng rng(mix_seed(seed, 9));
                          std::vector<real> xv(4 * 3), cv(2 * 3);
                          for (real& v : xv) v = rng.uniform(-1.0, 1.0);
                          for (real& v : cv) v = rng.uniform(-1.0, 1.0);
                          Tensor x = Tensor::from({4, 3}, std::move(xv), true);
                          Tensor centroids = Tensor::from({2, 3}, std::move(cv), true);
                          Tensor alpha = Tensor::scalar(rng.uniform(0.5, 2.0), true);
                          CheckInstance inst;
                          inst.leaves = {x, centroids, alpha};
                          inst.loss = [x, centroids, alpha, seed] {
                              vlad::VladParams p;
                              p.centroids = centroids;
                              p.alpha = alpha;
                              return projected(vlad::netvlad(x, p), seed);
                          };
                          return inst;
                      }});

        cs.push_back({"block.lazy_triplet_end_to_end", [](std::uint64_t seed) {
                          auto model = std::make_shared<model::Model>(tiny_model_config(), seed);
                          auto anchor = std::make_shared<geo::Patch>(random_patch(mix_seed(seed, 1), 24));
                          auto pos = std::make_shared<geo::Patch>(random_patch(mix_seed(seed, 2), 24));
                          auto neg = std::make_shared<geo::Patch>(random_patch(mix_seed(seed, 3), 24));
                          anchor->id = 1;
                          pos->id = 2;
                          neg->id = 3;
                          CheckInstance inst;
                          inst.leaves = model->params().trainable_tensors();
                          inst.coord_cap = 48;
                          inst.loss = [model, anchor, pos, neg] {
                              auto embs = model->embed_batch({anchor.get(), pos.get(), neg.get()},
                                                             NormMode::Train);
                              // margin large enough to keep the hinge active
                              return train::lazy_triplet_loss(
                                  {train::embedding_distance(embs[0], embs[1])},
                                  {train::embedding_distance(embs[0], embs[2])}, 2.5);
                          };
                          return inst;
                      }});

        return cs;
    }();
    return cases;
}

}  // namespace cspr::ad
