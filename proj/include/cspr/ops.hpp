#pragma once

#include <vector>

#include "cspr/tensor.hpp"

namespace cspr::ad {

// Elementwise / broadcast arithmetic --------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
// m: N x K plus a length-K vector broadcast across rows
Tensor add_rowvec(const Tensor& m, const Tensor& v);
// m: N x K plus a length-N vector broadcast across columns
Tensor add_colvec(const Tensor& m, const Tensor& v);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// m[i,k] * v[k]
Tensor mul_rowvec(const Tensor& m, const Tensor& v);
// scalar tensor times arbitrary tensor
Tensor smul(const Tensor& s, const Tensor& m);
// compile-time constant times tensor
Tensor scale(const Tensor& m, real c);

// Linear algebra ------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Nonlinearities ------------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor sin_t(const Tensor& x);
Tensor cos_t(const Tensor& x);
Tensor sqrt_t(const Tensor& x);

// softmax over `axis` of a rank-2 tensor, or over the whole of a rank-1
// tensor (axis ignored). Max-shifted for stability.
Tensor softmax(const Tensor& x, int axis = -1);

// Normalization layers -------------------------------------------------------
enum class NormMode { Train, Eval };

struct BnStats {
    std::vector<real> mean;  // per channel, biased batch statistics
    std::vector<real> var;
};

// x: N x C, per-channel statistics over the N axis. Train mode uses batch
// stats (optionally reported through stats_out, never applied here so the
// caller controls update order); Eval mode uses the provided running stats
// as constants.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                  const Tensor& running_mean, const Tensor& running_var, real eps = 1e-5,
                  BnStats* stats_out = nullptr);

// x: N x C, per-row statistics.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps = 1e-5);

// 1D convolution, same padding, odd kernel width.
// x: T x C_in, w: (Kw, C_in, C_out) as rank-3, bias: C_out (optional, pass
// undefined Tensor to skip).
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

// Index ops -------------------------------------------------------------------
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx);
// out has out_rows rows; out[idx[i]] += x[i]
Tensor scatter_add_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t out_rows);
// rank-1 concat, or rank-2 concat along axis 0 / 1
Tensor concat(const std::vector<Tensor>& parts, int axis = 0);
// rows [begin, end) of a rank-2 tensor
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape new_shape);

// Reductions -------------------------------------------------------------------
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// rank-2 only; axis 0 collapses rows (K result), axis 1 collapses cols (N result)
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean_axis(const Tensor& x, int axis);
// rank-1 only, first-extremum subgradient
Tensor max_all(const Tensor& x);
Tensor min_all(const Tensor& x);

// Normalizers -------------------------------------------------------------------
// rank-1: whole vector; rank-2: axis 1 normalizes each row, axis 0 each column.
Tensor l1_normalize(const Tensor& x, int axis = -1, real eps = 1e-12);
Tensor l2_normalize(const Tensor& x, int axis = -1, real eps = 1e-12);

}  // namespace cspr::ad
