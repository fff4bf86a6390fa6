#pragma once

#include <string>
#include <vector>

#include "cspr/voxel.hpp"

namespace cspr::refine {

using ad::Tensor;
using ad::real;

enum class Order { FineToCoarse, CoarseToFine };

const char* order_name(Order o);
Order order_from_name(const std::string& name);

struct RefineConfig {
    Order order = Order::CoarseToFine;
    std::size_t substeps = 3;
    std::size_t d_r = 16;
    std::size_t heads = 4;
    std::size_t memory_slots = 64;
    bool use_time_embedding = true;
    bool share_substep_params = false;  // ablation: one block set reused across steps
};

// number of learnable sinusoid frequencies; raw embedding is [t, sin(2*pi*w*t),
// cos(2*pi*w*t)] with 1 + 2F entries
constexpr std::size_t kTimeFrequencies = 4;
constexpr std::size_t kTimeRawDim = 1 + 2 * kTimeFrequencies;

// raw concatenation before the head; exposed for testing
Tensor time_embed_raw(int t, const Tensor& w);

// two linear layers with one GELU mapping the raw embedding to d_r, params
// under "refine.time.*"
Tensor time_embed(int t, const vox::FwdCtx& ctx);

struct RefineTrace {
    std::vector<int> t_values;            // one entry per schedule block
    std::vector<Tensor> attention_rows;   // double-normalized maps, per block x stream x head
};

// Single external-attention block on an N x d_r token matrix: add the time
// embedding, per head correlate queries against learnable memories, double
// normalization (softmax over tokens then L1 per token row), value read,
// output map, residual, layer norm.
Tensor ea_block(const Tensor& tokens, int t, const std::string& prefix, const RefineConfig& cfg,
                const vox::FwdCtx& ctx, std::vector<Tensor>* attn_probe = nullptr);

// Iterative refinement over the grain stacks: permute by order, chain
// substeps of ea_block per step over a growing token concatenation, pad each
// step's output with the untouched finer stacks, then concatenate the L step
// outputs along features and merge the k_s streams. Output is N x D_g with
// N = sum of grain token counts and D_g = k_s * d_r * L.
Tensor refine_stacks(const std::vector<vox::SelectedStack>& stacks, const RefineConfig& cfg, const vox::FwdCtx& ctx,
              RefineTrace* trace = nullptr);

// kernel-1 convolution to d_out with BN and ReLU, params "refine.project.*".
// The batch variant shares BN statistics across the patches in the call.
std::vector<Tensor> project_batch(const std::vector<Tensor>& fbars, const vox::FwdCtx& ctx);
Tensor project(const Tensor& fbar, const vox::FwdCtx& ctx);

void init_refine_params(ad::ParamStore& store, const RefineConfig& cfg, std::size_t n_steps, std::size_t d_g,
                        std::size_t d_out);

}  // namespace cspr::refine
