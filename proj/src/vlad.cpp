#include "cspr/vlad.hpp"

#include <cmath>

namespace cspr::vlad {

void init_vlad_params(ad::ParamStore& store, std::size_t clusters, std::size_t d, real alpha_init,
                      std::size_t d_final) {
    if (clusters < 1) throw ContractError("init_vlad_params: need at least one cluster");
    if (alpha_init <= 0.0) throw ContractError("init_vlad_params: alpha must be positive");
    store.create("vlad.centroids", {clusters, d}, ad::Init::normal(0.1));
    store.create("vlad.alpha", {1}, ad::Init::constant(alpha_init));
    if (d_final > 0)
        store.create("vlad.final_proj.weight", {clusters * d, d_final},
                     ad::Init::xavier(clusters * d, d_final));
}

VladParams vlad_params(const ad::ParamStore& store) {
    VladParams p;
    p.centroids = store.get("vlad.centroids");
    p.alpha = store.get("vlad.alpha");
    if (store.has("vlad.final_proj.weight")) p.final_proj = store.get("vlad.final_proj.weight");
    if (p.alpha.item() <= 0.0) throw ContractError("vlad: temperature must stay positive");
    return p;
}

Tensor soft_assign(const Tensor& x, const VladParams& params) {
    const bool vector_in = x.rank() == 1;
    Tensor rows = vector_in ? ad::reshape(x, {1, x.dim(0)}) : x;
    if (rows.dim(1) != params.centroids.dim(1))
        throw ShapeError("soft_assign: descriptor width does not match centroids");
    Tensor sq_x = ad::sum_axis(ad::mul(rows, rows), 1);                             // N
    Tensor sq_c = ad::sum_axis(ad::mul(params.centroids, params.centroids), 1);    // K
    Tensor cross = ad::matmul(rows, ad::transpose(params.centroids));              // N x K
    Tensor d2 = ad::add_rowvec(ad::add_colvec(ad::scale(cross, -2.0), sq_x), sq_c);
    Tensor logits = ad::scale(ad::smul(params.alpha, d2), -1.0);
    Tensor probs = ad::softmax(logits, 1);
    return vector_in ? ad::reshape(probs, {probs.dim(1)}) : probs;
}

Tensor netvlad_raw(const Tensor& fproj, const VladParams& params) {
    if (fproj.rank() != 2 || fproj.dim(0) == 0)
        throw ContractError("netvlad: need a non-empty N x d descriptor matrix");
    Tensor assign = soft_assign(fproj, params);                       // N x K
    Tensor weighted = ad::matmul(ad::transpose(fproj), assign);       // d x K
    Tensor mass = ad::sum_axis(assign, 0);                            // K
    Tensor centered = ad::mul_rowvec(ad::transpose(params.centroids), mass);
    return ad::sub(weighted, centered);
}

Tensor netvlad(const Tensor& fproj, const VladParams& params, bool intra_norm) {
    Tensor fg = netvlad_raw(fproj, params);
    if (intra_norm) fg = ad::l2_normalize(fg, 0);
    Tensor flat = ad::reshape(fg, {fg.dim(0) * fg.dim(1)});
    real norm2 = 0.0;
    for (std::size_t i = 0; i < flat.size(); ++i) norm2 += flat.at(i) * flat.at(i);
    if (norm2 < 1e-24) throw NumericError("netvlad: degenerate all-zero descriptor before normalization");
    Tensor emb = ad::l2_normalize(flat);
    if (params.final_proj.defined()) {
        Tensor projected = ad::matmul(ad::reshape(emb, {1, emb.dim(0)}), params.final_proj);
        emb = ad::l2_normalize(ad::reshape(projected, {projected.dim(1)}));
    }
    return emb;
}

}  // namespace cspr::vlad
