#pragma once

#include "cspr/ops.hpp"
#include "cspr/param_store.hpp"

namespace cspr::vlad {

using ad::Tensor;
using ad::real;

struct VladParams {
    Tensor centroids;  // K x d
    Tensor alpha;      // scalar temperature, > 0
    Tensor final_proj; // optional (d*K) x d_final map; undefined when disabled
};

void init_vlad_params(ad::ParamStore& store, std::size_t clusters, std::size_t d, real alpha_init = 1.0,
                      std::size_t d_final = 0);
VladParams vlad_params(const ad::ParamStore& store);

// a_k(x) = exp(-alpha ||x - c_k||^2) / sum_k' exp(-alpha ||x - c_k'||^2),
// computed through a max-shifted softmax. Accepts a single d-vector (returns
// K probabilities) or an N x d matrix (returns N x K).
Tensor soft_assign(const Tensor& x, const VladParams& params);

// Pre-normalization global feature: F_g(j,k) = sum_i a_k(x_i) (x_i(j) - c_k(j)),
// shape d x K.
Tensor netvlad_raw(const Tensor& fproj, const VladParams& params);

// Full aggregation: per-cluster column L2 normalization, flatten, global L2
// normalization (then the optional learnable projection, re-normalized).
// Throws NumericError if the descriptor is all zero before normalization.
Tensor netvlad(const Tensor& fproj, const VladParams& params, bool intra_norm = true);

}  // namespace cspr::vlad
