#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cspr/train.hpp"

using namespace cspr;
using namespace cspr::train;
using ad::Tensor;
using ad::real;

namespace {

Tensor scalars(std::vector<real> v) {
    return Tensor::from({v.size()}, std::move(v));
}

real lazy_value(std::vector<real> pos, std::vector<real> neg, real margin) {
    std::vector<Tensor> dp, dn;
    for (real p : pos) dp.push_back(Tensor::scalar(p));
    for (real n : neg) dn.push_back(Tensor::scalar(n));
    return lazy_triplet_loss(dp, dn, margin).item();
}

// unit-norm 2D embedding at angle theta
void push_vec(rev::EmbeddingDatabase& t, std::uint64_t id, double theta, double e, double n,
              geo::Source src = geo::Source::Aerial) {
    t.ids.push_back(id);
    t.vectors.push_back(std::cos(theta));
    t.vectors.push_back(std::sin(theta));
    t.geo.push_back({e, n});
    t.sources.push_back(src);
}

model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.resolutions = {0.25, 0.5};
    cfg.k_s = 2;
    cfg.d_v = 4;
    cfg.d_r = 4;
    cfg.d_out = 8;
    cfg.clusters = 2;
    cfg.heads = 2;
    cfg.memory_slots = 4;
    cfg.substeps = 1;
    return cfg;
}

geo::Benchmark tiny_bench(std::uint64_t seed, std::size_t scenes = 2) {
    geo::SiteOptions opt;
    opt.n_scenes = scenes;
    opt.tile = 40;
    opt.n_points = 64;
    opt.boxes_per_scene = 3;
    opt.setting = geo::Setting::AerialOnly;
    opt.seed = seed;
    geo::SourceProfile aerial = geo::default_aerial_profile(40);
    aerial.density = 0.15;
    geo::SourceProfile ground = geo::default_ground_profile(16);
    ground.density = 1.0;
    opt.aerial_profile = aerial;
    opt.ground_profile = ground;
    return geo::build_site_benchmark(opt);
}

}  // namespace

TEST_CASE("lazy triplet loss arithmetic") {
    CHECK(lazy_value({1}, {2}, 0.5) == 0.0);
    CHECK(lazy_value({2}, {1}, 0.5) == doctest::Approx(1.5));
    CHECK(lazy_value({1, 2}, {3, 4}, 0.5) == 0.0);  // max(0, 2 - 3 + 0.5)
    CHECK_THROWS_AS(lazy_value({}, {1}, 0.5), ContractError);
    CHECK_THROWS_AS(lazy_value({1}, {2}, -0.1), ContractError);
}

TEST_CASE("lazy loss nonnegativity and exact zero condition") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<real> pos(1 + static_cast<std::size_t>(rng.uniform_int(0, 3)));
        std::vector<real> neg(1 + static_cast<std::size_t>(rng.uniform_int(0, 3)));
        for (real& v : pos) v = rng.uniform(0, 2);
        for (real& v : neg) v = rng.uniform(0, 2);
        const real margin = rng.uniform(0, 0.5);
        const real loss = lazy_value(pos, neg, margin);
        CHECK(loss >= 0.0);
        const real dpos = *std::max_element(pos.begin(), pos.end());
        const real dneg = *std::min_element(neg.begin(), neg.end());
        CHECK((loss == 0.0) == (dneg >= dpos + margin));
    }
}

TEST_CASE("lazy loss monotonicity in the distance sets") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<real> pos{rng.uniform(0, 2), rng.uniform(0, 2)};
        std::vector<real> neg{rng.uniform(0, 2), rng.uniform(0, 2)};
        const real margin = 0.3;
        const real base = lazy_value(pos, neg, margin);
        std::vector<real> neg_up = neg;
        neg_up[0] += rng.uniform(0, 1);
        CHECK(lazy_value(pos, neg_up, margin) <= base + 1e-12);
        std::vector<real> pos_up = pos;
        pos_up[1] += rng.uniform(0, 1);
        CHECK(lazy_value(pos_up, neg, margin) >= base - 1e-12);
    }
}

TEST_CASE("lazy loss gradient routes to the hardest pair with hinge subgradient zero") {
    Tensor p1 = Tensor::scalar(1.0, true), p2 = Tensor::scalar(2.0, true);
    Tensor n1 = Tensor::scalar(0.5, true), n2 = Tensor::scalar(3.0, true);
    Tensor loss = lazy_triplet_loss({p1, p2}, {n1, n2}, 0.2);
    CHECK(loss.item() == doctest::Approx(1.7));
    auto res = ad::forward_backward(loss, std::vector<Tensor>{p1, p2, n1, n2});
    CHECK(res.grads[0].at(0) == 0.0);
    CHECK(res.grads[1].at(0) == 1.0);   // hardest positive
    CHECK(res.grads[2].at(0) == -1.0);  // hardest negative
    CHECK(res.grads[3].at(0) == 0.0);

    // inactive hinge: zero everywhere
    Tensor q = Tensor::scalar(0.1, true), m = Tensor::scalar(5.0, true);
    auto res2 = ad::forward_backward(lazy_triplet_loss({q}, {m}, 0.2), std::vector<Tensor>{q, m});
    CHECK(res2.grads[0].at(0) == 0.0);
    CHECK(res2.grads[1].at(0) == 0.0);
}

TEST_CASE("mining: mutual positives and hardest selection") {
    rev::EmbeddingDatabase t;
    t.dim = 2;
    push_vec(t, 0, 0.00, 0, 0);    // anchor
    push_vec(t, 1, 0.30, 5, 0);    // positive (10 m radius)
    push_vec(t, 2, 1.00, 4, 3);    // positive, farther in embedding
    push_vec(t, 3, 0.10, 500, 0);  // negative, nearest embedding
    push_vec(t, 4, 2.50, 600, 0);  // negative
    MiningConfig cfg;
    cfg.positive_radius = 10;
    cfg.exclusion_radius = 20;
    cfg.n_pos = 1;
    cfg.n_neg = 1;
    TripletBatch batch = mine_batch(t, {0, 1}, cfg);
    REQUIRE(batch.entries.size() == 2);
    CHECK(batch.entries[0].anchor == 0);
    CHECK(batch.entries[0].positives == std::vector<std::uint64_t>{2});  // hardest positive
    CHECK(batch.entries[0].negatives == std::vector<std::uint64_t>{3});  // hardest negative
    // 0 and 1 are mutual positives: anchor 1 with room for two positives
    // lists both, hardest (largest embedding distance) first
    MiningConfig cfg2 = cfg;
    cfg2.n_pos = 2;
    TripletBatch wide = mine_batch(t, {0, 1}, cfg2);
    CHECK(wide.entries[1].positives == std::vector<std::uint64_t>{2, 0});
    bool contains_zero = false;
    for (std::uint64_t id : wide.entries[1].positives) contains_zero |= (id == 0);
    CHECK(contains_zero);

    // anchor with no positive is skipped; all skipped is an error
    rev::EmbeddingDatabase lonely;
    lonely.dim = 2;
    push_vec(lonely, 0, 0.0, 0, 0);
    push_vec(lonely, 1, 1.0, 1000, 0);
    CHECK_THROWS_AS(mine_batch(lonely, {0}, cfg), ContractError);
}

TEST_CASE("mining agrees with an exhaustive scan oracle on a batch of 16") {
    Rng rng(7);
    rev::EmbeddingDatabase t;
    t.dim = 2;
    for (std::uint64_t i = 0; i < 16; ++i) {
        // two geographic clusters
        const double base_e = (i % 2 == 0) ? 0.0 : 1000.0;
        push_vec(t, i, rng.uniform(0, 6.28), base_e + rng.uniform(-5, 5), rng.uniform(-5, 5));
    }
    MiningConfig cfg;
    cfg.positive_radius = 50;
    cfg.exclusion_radius = 100;
    cfg.n_pos = 2;
    cfg.n_neg = 3;
    std::vector<std::uint64_t> anchors(16);
    for (std::uint64_t i = 0; i < 16; ++i) anchors[i] = i;
    TripletBatch batch = mine_batch(t, anchors, cfg);
    REQUIRE(batch.entries.size() == 16);

    for (const auto& e : batch.entries) {
        // oracle: full O(n^2) scan
        const std::size_t arow = e.anchor;
        std::vector<std::pair<double, std::uint64_t>> pos, neg;
        for (std::size_t i = 0; i < 16; ++i) {
            if (i == arow) continue;
            const double gd = std::hypot(t.geo[i].first - t.geo[arow].first, t.geo[i].second - t.geo[arow].second);
            double d2 = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                const double diff = t.vectors[i * 2 + j] - t.vectors[arow * 2 + j];
                d2 += diff * diff;
            }
            if (gd <= 50) pos.push_back({std::sqrt(d2), t.ids[i]});
            if (gd > 100) neg.push_back({std::sqrt(d2), t.ids[i]});
        }
        std::sort(pos.begin(), pos.end(), [](auto& a, auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::sort(neg.begin(), neg.end());
        REQUIRE(e.positives.size() == std::min<std::size_t>(2, pos.size()));
        for (std::size_t i = 0; i < e.positives.size(); ++i) CHECK(e.positives[i] == pos[i].second);
        for (std::size_t i = 0; i < e.negatives.size(); ++i) CHECK(e.negatives[i] == neg[i].second);
    }
}

TEST_CASE("expansion sampler rule") {
    SamplerState s;
    s.batch_size = 64;
    s.batch_max = 128;
    s.growth_factor = 1.4;
    s.active_fraction_threshold = 0.7;
    CHECK(sampler_step(s, 0.9).batch_size == 64);
    CHECK(sampler_step(s, 0.1).batch_size == 90);  // round(64 * 1.4)
    s.batch_size = 128;
    CHECK(sampler_step(s, 0.0).batch_size == 128);  // capped

    // never shrinks, never exceeds the cap
    Rng rng(3);
    SamplerState t;
    t.batch_size = 8;
    t.batch_max = 100;
    for (int i = 0; i < 50; ++i) {
        const std::size_t before = t.batch_size;
        t = sampler_step(t, rng.uniform());
        CHECK(t.batch_size >= before);
        CHECK(t.batch_size <= t.batch_max);
    }
}

TEST_CASE("toy two-cluster problem: Adam and a plain-GD oracle both reach zero loss") {
    // learnable embedding row per patch id; clusters (0,1) and (2,3)
    auto run = [](bool use_adam) {
        Tensor table = Tensor::from({4, 2}, {0.9, 0.1, 0.7, -0.2, -0.6, 0.3, -0.8, -0.1}, true);
        auto loss_fn = [&] {
            std::vector<Tensor> losses;
            const std::vector<std::array<std::size_t, 3>> triplets{
                {0, 1, 2}, {1, 0, 3}, {2, 3, 0}, {3, 2, 1}};
            for (const auto& tr : triplets) {
                Tensor a = ad::gather_rows(table, {tr[0]});
                Tensor p = ad::gather_rows(table, {tr[1]});
                Tensor n = ad::gather_rows(table, {tr[2]});
                losses.push_back(lazy_triplet_loss({embedding_distance(a, p)}, {embedding_distance(a, n)}, 0.2));
            }
            return ad::mean_all(ad::concat(losses, 0));
        };
        Adam adam({table}, 0.05);
        real final_loss = 1e9;
        for (int step = 0; step < 200; ++step) {
            table.zero_grad();
            Tensor loss = loss_fn();
            final_loss = loss.item();
            if (final_loss == 0.0) break;
            ad::backward(loss);
            if (use_adam) {
                adam.step();
            } else {
                auto v = table.mutable_data();
                auto g = table.grad();
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * g[i];
            }
        }
        return final_loss;
    };
    CHECK(run(true) == 0.0);
    CHECK(run(false) == 0.0);  // direct gradient-descent oracle
}

TEST_CASE("eval-mode batched embedding equals per-patch embedding bit-exactly") {
    geo::Benchmark bench = tiny_bench(41, 3);
    model::Model m(tiny_config(), 11);
    std::vector<const geo::Patch*> ptrs;
    for (const auto& p : bench.database) ptrs.push_back(&p);
    ad::NoGradGuard ng;
    auto joint = m.embed_batch(ptrs, ad::NormMode::Eval);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
        Tensor single = m.embed(*ptrs[i], ad::NormMode::Eval);
        REQUIRE(single.size() == joint[i].size());
        for (std::size_t j = 0; j < single.size(); ++j) CHECK(single.at(j) == joint[i].at(j));
    }
}

TEST_CASE("train-mode batched embedding shares batch-norm statistics") {
    geo::Benchmark bench = tiny_bench(42, 2);
    model::Model m(tiny_config(), 12);
    std::vector<const geo::Patch*> ptrs{&bench.database[0], &bench.database[1], &bench.queries[0]};
    std::vector<std::pair<std::string, ad::BnStats>> stats;
    auto embs = m.embed_batch(ptrs, ad::NormMode::Train, &stats);
    CHECK(embs.size() == 3);
    // one stats record per BN layer per batch, not per patch:
    // 2 grains x 2 stem layers + 1 projection layer
    CHECK(stats.size() == 5);
    std::set<std::string> names;
    for (const auto& [name, st] : stats) names.insert(name);
    CHECK(names.size() == stats.size());

    // joint statistics differ from the single-patch statistics
    std::vector<std::pair<std::string, ad::BnStats>> solo_stats;
    m.embed(*ptrs[0], ad::NormMode::Train, &solo_stats);
    REQUIRE(solo_stats.size() == 5);
    bool any_diff = false;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < stats[i].second.mean.size(); ++c)
            if (stats[i].second.mean[c] != solo_stats[i].second.mean[c]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("one-epoch training smoke test writes a parsable log") {
    geo::Benchmark bench = tiny_bench(21);
    model::Model m(tiny_config(), 5);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 5;
    cfg.sampler.batch_size = 4;
    cfg.sampler.batch_max = 8;
    std::ostringstream log;
    TrainResult res = train_model(m, bench, cfg, &log);
    REQUIRE(res.log.size() == 1);
    CHECK(res.log[0].epoch == 1);
    CHECK(std::isfinite(res.log[0].mean_loss));

    auto j = nlohmann::json::parse(log.str());
    CHECK(j.at("epoch") == 1);
    CHECK(j.contains("mean_loss"));
    CHECK(j.contains("active_fraction"));
    CHECK(j.contains("batch_size"));
    CHECK(j.contains("val_ar1"));
}

TEST_CASE("training is deterministic: identical seeds give identical epoch-1 loss") {
    geo::Benchmark bench = tiny_bench(22);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 9;
    cfg.threads = 2;
    cfg.sampler.batch_size = 4;

    model::Model m1(tiny_config(), 17);
    TrainResult r1 = train_model(m1, bench, cfg);
    model::Model m2(tiny_config(), 17);
    TrainResult r2 = train_model(m2, bench, cfg);
    REQUIRE(r1.log.size() == r2.log.size());
    CHECK(std::abs(r1.log[0].mean_loss - r2.log[0].mean_loss) <= 1e-6);
    CHECK(std::abs(r1.log[1].mean_loss - r2.log[1].mean_loss) <= 1e-6);
}
