#include "cspr/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <unordered_map>

#include <json.hpp>

namespace cspr::train {

Tensor embedding_distance(const Tensor& a, const Tensor& b) {
    Tensor diff = ad::sub(a, b);
    return ad::sqrt_t(ad::sum_all(ad::mul(diff, diff)));
}

Tensor lazy_triplet_loss(const std::vector<Tensor>& d_pos, const std::vector<Tensor>& d_neg, real margin) {
    if (d_pos.empty() || d_neg.empty())
        throw ContractError("lazy_triplet_loss: positive and negative distance sets must be non-empty");
    if (margin < 0.0) throw ContractError("lazy_triplet_loss: margin must be nonnegative");
    Tensor hardest_pos = max_all(d_pos.size() == 1 ? d_pos[0] : ad::concat(d_pos, 0));
    Tensor hardest_neg = min_all(d_neg.size() == 1 ? d_neg[0] : ad::concat(d_neg, 0));
    Tensor hinge = ad::add(ad::sub(hardest_pos, hardest_neg), Tensor::scalar(margin));
    return ad::relu(hinge);
}

namespace {

double table_distance(const rev::EmbeddingDatabase& t, std::size_t a, std::size_t b) {
    real d2 = 0.0;
    const auto va = t.vec(a);
    const auto vb = t.vec(b);
    for (std::size_t j = 0; j < t.dim; ++j) {
        const real diff = va[j] - vb[j];
        d2 += diff * diff;
    }
    return std::sqrt(d2);
}

}  // namespace

TripletBatch mine_batch(const rev::EmbeddingDatabase& table, const std::vector<std::uint64_t>& anchors,
                        const MiningConfig& cfg) {
    if (cfg.exclusion_radius < cfg.positive_radius)
        throw ContractError("mine_batch: exclusion radius must not be smaller than the positive radius");
    if (cfg.n_pos < 1 || cfg.n_neg < 1) throw ContractError("mine_batch: need n_pos, n_neg >= 1");
    std::unordered_map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < table.size(); ++i) row_of.emplace(table.ids[i], i);

    TripletBatch batch;
    for (std::uint64_t anchor : anchors) {
        auto it = row_of.find(anchor);
        if (it == row_of.end()) throw ContractError("mine_batch: anchor " + std::to_string(anchor) + " not in table");
        const std::size_t arow = it->second;

        struct Cand {
            std::uint64_t id;
            double emb_dist;
        };
        std::vector<Cand> pos, neg;
        for (std::size_t i = 0; i < table.size(); ++i) {
            if (i == arow) continue;
            const double gdist = std::hypot(table.geo[i].first - table.geo[arow].first,
                                            table.geo[i].second - table.geo[arow].second);
            if (gdist <= cfg.positive_radius)
                pos.push_back({table.ids[i], table_distance(table, arow, i)});
            else if (gdist > cfg.exclusion_radius)
                neg.push_back({table.ids[i], table_distance(table, arow, i)});
        }
        if (pos.empty() || neg.empty()) {
            ++batch.skipped;
            continue;
        }
        std::sort(pos.begin(), pos.end(), [](const Cand& a, const Cand& b) {
            if (a.emb_dist != b.emb_dist) return a.emb_dist > b.emb_dist;  // hardest positive = farthest
            return a.id < b.id;
        });
        std::sort(neg.begin(), neg.end(), [](const Cand& a, const Cand& b) {
            if (a.emb_dist != b.emb_dist) return a.emb_dist < b.emb_dist;  // hardest negative = nearest
            return a.id < b.id;
        });
        TripletBatch::Entry entry;
        entry.anchor = anchor;
        for (std::size_t i = 0; i < std::min(cfg.n_pos, pos.size()); ++i) entry.positives.push_back(pos[i].id);
        for (std::size_t i = 0; i < std::min(cfg.n_neg, neg.size()); ++i) entry.negatives.push_back(neg[i].id);
        batch.entries.push_back(std::move(entry));
    }
    if (batch.entries.empty()) throw ContractError("mine_batch: every anchor was skipped (empty batch)");
    return batch;
}

SamplerState sampler_step(SamplerState state, double active_fraction) {
    if (active_fraction < 0.0 || active_fraction > 1.0)
        throw ContractError("sampler_step: active fraction must be in [0,1]");
    if (active_fraction < state.active_fraction_threshold) {
        const auto grown = static_cast<std::size_t>(
            std::llround(static_cast<double>(state.batch_size) * state.growth_factor));
        state.batch_size = std::min(state.batch_max, std::max(grown, state.batch_size));
    }
    return state;
}

Adam::Adam(std::vector<Tensor> params, real lr, real beta1, real beta2, real eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, static_cast<real>(t_));
    const real bc2 = 1.0 - std::pow(beta2_, static_cast<real>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        const auto g = p.grad();
        if (g.empty()) continue;
        auto value = p.mutable_data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < value.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            value[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

namespace {

// AR@1 of the benchmark queries against the benchmark database, computed on
// an embedding table that covers both.
double validation_ar1(const rev::EmbeddingDatabase& table, const geo::Benchmark& bench) {
    std::unordered_map<std::uint64_t, std::size_t> row_of;
    for (std::size_t i = 0; i < table.size(); ++i) row_of.emplace(table.ids[i], i);

    rev::EmbeddingDatabase db;
    db.dim = table.dim;
    for (const geo::Patch& p : bench.database) {
        const std::size_t row = row_of.at(p.id);
        db.ids.push_back(table.ids[row]);
        db.geo.push_back(table.geo[row]);
        db.sources.push_back(table.sources[row]);
        const auto v = table.vec(row);
        db.vectors.insert(db.vectors.end(), v.begin(), v.end());
    }
    std::size_t hits = 0;
    for (const geo::Patch& q : bench.queries) {
        const std::size_t row = row_of.at(q.id);
        const auto top = rev::retrieve(db, table.vec(row), 1);
        for (const geo::Patch& d : bench.database)
            if (d.id == top[0].id) {
                if (geo::geo_distance(q, d) <= bench.success_radius) ++hits;
                break;
            }
    }
    return bench.queries.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(bench.queries.size());
}

void apply_bn_updates(ad::ParamStore& params, const std::vector<std::pair<std::string, ad::BnStats>>& stats,
                      real momentum) {
    for (const auto& [prefix, st] : stats) {
        Tensor mean = params.get(prefix + ".running_mean");
        Tensor var = params.get(prefix + ".running_var");
        auto md = mean.mutable_data();
        auto vd = var.mutable_data();
        for (std::size_t i = 0; i < md.size(); ++i) {
            md[i] = (1.0 - momentum) * md[i] + momentum * st.mean[i];
            vd[i] = (1.0 - momentum) * vd[i] + momentum * st.var[i];
        }
    }
}

void write_log_line(std::ostream* out, const EpochLog& e) {
    if (!out) return;
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["mean_loss"] = e.mean_loss;
    j["active_fraction"] = e.active_fraction;
    j["batch_size"] = e.batch_size;
    j["val_ar1"] = e.val_ar1;
    (*out) << j.dump() << "\n";
    out->flush();
}

}  // namespace

TrainResult train_model(model::Model& model, const geo::Benchmark& bench, const TrainConfig& cfg,
                  std::ostream* log_stream) {
    std::vector<geo::Patch> pool = bench.database;
    pool.insert(pool.end(), bench.queries.begin(), bench.queries.end());
    if (pool.size() < 2) throw ContractError("train: need at least two patches");
    std::unordered_map<std::uint64_t, const geo::Patch*> patch_of;
    for (const geo::Patch& p : pool) {
        if (!patch_of.emplace(p.id, &p).second) throw ContractError("train: duplicate patch id in benchmark");
    }

    MiningConfig mine_cfg;
    mine_cfg.positive_radius = bench.success_radius;
    mine_cfg.exclusion_radius = cfg.exclusion_factor * bench.success_radius;
    mine_cfg.n_pos = cfg.n_pos;
    mine_cfg.n_neg = cfg.n_neg;

    Adam adam(model.params().trainable_tensors(), cfg.lr, cfg.beta1, cfg.beta2);
    SamplerState sampler = cfg.sampler;

    TrainResult result;
    result.best_val_ar1 = -1.0;

    auto consider_best = [&](double val, std::size_t epoch) {
        if (val > result.best_val_ar1) {
            result.best_val_ar1 = val;
            result.best_epoch = epoch;
            if (!cfg.best_checkpoint_path.empty()) model.save(cfg.best_checkpoint_path);
        }
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rev::EmbeddingDatabase table = rev::embed_database(model, pool, cfg.threads);
        const double val = validation_ar1(table, bench);
        consider_best(val, epoch - 1);

        // anchor sample for this epoch
        std::vector<std::uint64_t> anchors;
        anchors.reserve(pool.size());
        for (const geo::Patch& p : pool) anchors.push_back(p.id);
        std::sort(anchors.begin(), anchors.end());
        Rng rng(mix_seed(cfg.seed, 0x8e0c + epoch));
        for (std::size_t i = anchors.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
            std::swap(anchors[i - 1], anchors[j]);
        }
        if (anchors.size() > sampler.batch_size) anchors.resize(sampler.batch_size);

        TripletBatch batch = mine_batch(table, anchors, mine_cfg);

        // rebuild the involved patches with gradients, ascending id
        std::vector<std::uint64_t> involved;
        for (const auto& e : batch.entries) {
            involved.push_back(e.anchor);
            involved.insert(involved.end(), e.positives.begin(), e.positives.end());
            involved.insert(involved.end(), e.negatives.begin(), e.negatives.end());
        }
        std::sort(involved.begin(), involved.end());
        involved.erase(std::unique(involved.begin(), involved.end()), involved.end());

        std::vector<std::pair<std::string, ad::BnStats>> bn_stats;
        std::vector<const geo::Patch*> involved_patches;
        involved_patches.reserve(involved.size());
        for (std::uint64_t id : involved) involved_patches.push_back(patch_of.at(id));
        std::vector<Tensor> batch_embs = model.embed_batch(involved_patches, ad::NormMode::Train, &bn_stats);
        std::unordered_map<std::uint64_t, Tensor> emb;
        for (std::size_t i = 0; i < involved.size(); ++i) emb.emplace(involved[i], batch_embs[i]);

        std::vector<Tensor> losses;
        std::size_t active = 0;
        for (const auto& e : batch.entries) {
            std::vector<Tensor> d_pos, d_neg;
            for (std::uint64_t p : e.positives) d_pos.push_back(embedding_distance(emb.at(e.anchor), emb.at(p)));
            for (std::uint64_t n : e.negatives) d_neg.push_back(embedding_distance(emb.at(e.anchor), emb.at(n)));
            Tensor l = lazy_triplet_loss(d_pos, d_neg, cfg.margin);
            if (l.item() > 0.0) ++active;
            losses.push_back(l);
        }
        Tensor loss = ad::mean_all(ad::concat(losses, 0));
        if (!std::isfinite(loss.item()))
            throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch of " +
                               std::to_string(batch.entries.size()) + " anchors");

        adam.zero_grad();
        ad::backward(loss);
        adam.step();
        apply_bn_updates(model.params(), bn_stats, cfg.bn_momentum);

        EpochLog entry;
        entry.epoch = epoch;
        entry.mean_loss = loss.item();
        entry.active_fraction =
            static_cast<double>(active) / static_cast<double>(batch.entries.size());
        entry.batch_size = sampler.batch_size;
        entry.val_ar1 = val;
        result.log.push_back(entry);
        write_log_line(log_stream, entry);

        sampler = sampler_step(sampler, entry.active_fraction);
    }

    // final validation after the last update
    rev::EmbeddingDatabase table = rev::embed_database(model, pool, cfg.threads);
    consider_best(validation_ar1(table, bench), cfg.epochs);
    return result;
}

}  // namespace cspr::train
