#include "cspr/refine.hpp"

#include <algorithm>
#include <cmath>

namespace cspr::refine {

const char* order_name(Order o) {
    return o == Order::CoarseToFine ? "coarse-to-fine" : "fine-to-coarse";
}

Order order_from_name(const std::string& name) {
    if (name == "coarse-to-fine") return Order::CoarseToFine;
    if (name == "fine-to-coarse") return Order::FineToCoarse;
    throw FormatError("unknown refinement order: " + name);
}

Tensor time_embed_raw(int t, const Tensor& w) {
    if (t < 0) throw ContractError("time_embed: step counter must be nonnegative");
    Tensor angle = ad::scale(w, 2.0 * M_PI * static_cast<real>(t));
    return ad::concat({Tensor::scalar(static_cast<real>(t)), ad::sin_t(angle), ad::cos_t(angle)}, 0);
}

Tensor time_embed(int t, const vox::FwdCtx& ctx) {
    const ad::ParamStore& p = *ctx.params;
    Tensor raw = ad::reshape(time_embed_raw(t, p.get("refine.time.w")), {1, kTimeRawDim});
    Tensor h = ad::gelu(ad::add_rowvec(ad::matmul(raw, p.get("refine.time.fc1.weight")), p.get("refine.time.fc1.bias")));
    Tensor out = ad::add_rowvec(ad::matmul(h, p.get("refine.time.fc2.weight")), p.get("refine.time.fc2.bias"));
    return ad::reshape(out, {out.dim(1)});
}

Tensor ea_block(const Tensor& tokens, int t, const std::string& prefix, const RefineConfig& cfg,
                const vox::FwdCtx& ctx, std::vector<Tensor>* attn_probe) {
    if (tokens.rank() != 2 || tokens.dim(0) == 0) throw ContractError("ea_block: need a non-empty token matrix");
    if (tokens.dim(1) != cfg.d_r) throw ShapeError("ea_block: token width does not match d_r");
    if (cfg.heads == 0 || cfg.d_r % cfg.heads != 0)
        throw ContractError("ea_block: head count must divide d_r");
    const ad::ParamStore& p = *ctx.params;

    Tensor x = cfg.use_time_embedding ? ad::add_rowvec(tokens, time_embed(t, ctx)) : tokens;

    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + ".head" + std::to_string(h);
        Tensor q = ad::matmul(x, p.get(hp + ".wq"));
        Tensor logits = ad::matmul(q, ad::transpose(p.get(hp + ".mk")));
        // double normalization: softmax down the token axis, then L1 per row
        Tensor attn = ad::l1_normalize(ad::softmax(logits, 0), 1);
        for (std::size_t i = 0; i < attn.size(); ++i)
            if (!std::isfinite(attn.at(i)))
                throw NumericError("ea_block " + prefix + ": non-finite attention value");
        if (attn_probe) attn_probe->push_back(attn);
        head_outs.push_back(ad::matmul(attn, p.get(hp + ".mv")));
    }
    Tensor merged = cfg.heads == 1 ? head_outs[0] : ad::concat(head_outs, 1);
    Tensor mapped = ad::add_rowvec(ad::matmul(merged, p.get(prefix + ".wo")), p.get(prefix + ".wo_bias"));
    return ad::layer_norm(ad::add(x, mapped), p.get(prefix + ".ln.gamma"), p.get(prefix + ".ln.beta"));
}

namespace {

std::string block_prefix(const RefineConfig& cfg, std::size_t step, std::size_t sub) {
    if (cfg.share_substep_params) return "refine.shared.sub" + std::to_string(sub);
    return "refine.step" + std::to_string(step) + ".sub" + std::to_string(sub);
}

}  // namespace

Tensor refine_stacks(const std::vector<vox::SelectedStack>& stacks, const RefineConfig& cfg, const vox::FwdCtx& ctx,
              RefineTrace* trace) {
    if (stacks.empty()) throw ContractError("refine: need at least one grain stack");
    const std::size_t k_s = stacks[0].streams.size();
    for (const auto& s : stacks) {
        if (s.streams.size() != k_s) throw ShapeError("refine: mismatched k_s across grains");
        for (const Tensor& st : s.streams)
            if (st.dim(1) != cfg.d_r) throw ShapeError("refine: mismatched D_r across grains");
    }

    // processing order over the ascending-resolution list
    std::vector<std::size_t> perm(stacks.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    if (cfg.order == Order::CoarseToFine) std::reverse(perm.begin(), perm.end());

    const std::size_t n_steps = stacks.size();
    // refined[s] carries the running concatenation per stream; bars[s][i] the
    // per-step padded outputs
    std::vector<Tensor> running(k_s);
    std::vector<std::vector<Tensor>> bars(k_s);

    for (std::size_t i = 0; i < n_steps; ++i) {
        const vox::SelectedStack& cur = stacks[perm[i]];
        for (std::size_t s = 0; s < k_s; ++s) {
            Tensor input = (i == 0) ? cur.streams[s] : ad::concat({running[s], cur.streams[s]}, 0);
            running[s] = input;
        }
        for (std::size_t j = 0; j < cfg.substeps; ++j) {
            const int t = static_cast<int>(i * cfg.substeps + j);
            const std::string prefix = block_prefix(cfg, i, j);
            if (trace) trace->t_values.push_back(t);
            for (std::size_t s = 0; s < k_s; ++s)
                running[s] = ea_block(running[s], t, prefix, cfg, ctx,
                                      trace ? &trace->attention_rows : nullptr);
        }
        for (std::size_t s = 0; s < k_s; ++s) {
            std::vector<Tensor> parts{running[s]};
            for (std::size_t rest = i + 1; rest < n_steps; ++rest)
                parts.push_back(stacks[perm[rest]].streams[s]);
            bars[s].push_back(parts.size() == 1 ? parts[0] : ad::concat(parts, 0));
        }
    }

    // concatenate the L step outputs along features, then merge the streams
    std::vector<Tensor> merged_streams;
    merged_streams.reserve(k_s);
    for (std::size_t s = 0; s < k_s; ++s)
        merged_streams.push_back(bars[s].size() == 1 ? bars[s][0] : ad::concat(bars[s], 1));
    return merged_streams.size() == 1 ? merged_streams[0] : ad::concat(merged_streams, 1);
}

std::vector<Tensor> project_batch(const std::vector<Tensor>& fbars, const vox::FwdCtx& ctx) {
    const ad::ParamStore& p = *ctx.params;
    std::vector<Tensor> h;
    h.reserve(fbars.size());
    for (const Tensor& fbar : fbars)
        h.push_back(ad::add_rowvec(ad::matmul(fbar, p.get("refine.project.weight")),
                                   p.get("refine.project.bias")));
    h = vox::bn_layer_batch(h, "refine.project.bn", ctx);
    for (Tensor& t : h) t = ad::relu(t);
    return h;
}

Tensor project(const Tensor& fbar, const vox::FwdCtx& ctx) {
    return project_batch({fbar}, ctx)[0];
}

void init_refine_params(ad::ParamStore& store, const RefineConfig& cfg, std::size_t n_steps, std::size_t d_g,
                        std::size_t d_out) {
    using ad::Init;
    if (cfg.heads == 0 || cfg.d_r % cfg.heads != 0)
        throw ContractError("init_refine_params: head count must divide d_r");
    const std::size_t d_h = cfg.d_r / cfg.heads;

    Tensor w = store.create("refine.time.w", {kTimeFrequencies}, Init::zeros());
    {
        // geometric frequency ladder covering periods of a few steps
        auto wd = w.mutable_data();
        real f = 0.5;
        for (std::size_t i = 0; i < kTimeFrequencies; ++i, f *= 0.5) wd[i] = f;
    }
    store.create("refine.time.fc1.weight", {kTimeRawDim, cfg.d_r}, Init::xavier(kTimeRawDim, cfg.d_r));
    store.create("refine.time.fc1.bias", {cfg.d_r}, Init::zeros());
    store.create("refine.time.fc2.weight", {cfg.d_r, cfg.d_r}, Init::xavier(cfg.d_r, cfg.d_r));
    store.create("refine.time.fc2.bias", {cfg.d_r}, Init::zeros());

    const std::size_t step_sets = cfg.share_substep_params ? 1 : n_steps;
    for (std::size_t i = 0; i < step_sets; ++i)
        for (std::size_t j = 0; j < cfg.substeps; ++j) {
            const std::string prefix = cfg.share_substep_params
                                           ? "refine.shared.sub" + std::to_string(j)
                                           : "refine.step" + std::to_string(i) + ".sub" + std::to_string(j);
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                const std::string hp = prefix + ".head" + std::to_string(h);
                store.create(hp + ".wq", {cfg.d_r, d_h}, Init::xavier(cfg.d_r, d_h));
                store.create(hp + ".mk", {cfg.memory_slots, d_h}, Init::normal(0.1));
                store.create(hp + ".mv", {cfg.memory_slots, d_h}, Init::normal(0.1));
            }
            store.create(prefix + ".wo", {cfg.d_r, cfg.d_r}, Init::xavier(cfg.d_r, cfg.d_r));
            store.create(prefix + ".wo_bias", {cfg.d_r}, Init::zeros());
            store.create(prefix + ".ln.gamma", {cfg.d_r}, Init::ones());
            store.create(prefix + ".ln.beta", {cfg.d_r}, Init::zeros());
        }

    store.create("refine.project.weight", {d_g, d_out}, Init::xavier(d_g, d_out));
    store.create("refine.project.bias", {d_out}, Init::zeros());
    store.create("refine.project.bn.gamma", {d_out}, Init::ones());
    store.create("refine.project.bn.beta", {d_out}, Init::zeros());
    store.create("refine.project.bn.running_mean", {d_out}, Init::zeros(), false);
    store.create("refine.project.bn.running_var", {d_out}, Init::ones(), false);
}

}  // namespace cspr::refine
