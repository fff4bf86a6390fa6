#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cspr/tensor.hpp"

namespace cspr::ad {

// A self-contained differentiation test case: leaf tensors to probe and a
// loss closure that rebuilds the graph from the leaves' current values. The
// closure must be a pure function of the leaf values so central differences
// are a valid oracle.
struct CheckInstance {
    std::vector<Tensor> leaves;
    std::function<Tensor()> loss;
    // Cap on probed coordinates per leaf (0 = all). Composite blocks with
    // large convolution kernels use a seeded subsample; primitives probe
    // every coordinate.
    std::size_t coord_cap = 0;
};

struct CheckCase {
    std::string name;
    std::function<CheckInstance(std::uint64_t seed)> make;
};

struct CheckReport {
    real max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

// max over probed coordinates of |analytic - central| / max(1e-8, |analytic| + |central|)
CheckReport run_check(CheckInstance& inst, real eps, std::uint64_t seed);

// The differentiable kernel catalog (every primitive with an analytic
// backward rule, instantiated on small random shapes away from kinks).
const std::vector<CheckCase>& kernel_catalog();

// Composite blocks assembled from the kernels (backbone stem, multi-scale
// extractor, feature selection, attention block, refinement schedule, VLAD
// aggregation, and the full embedding + triplet loss pipeline).
const std::vector<CheckCase>& block_catalog();

struct SuiteResult {
    struct Line {
        std::string name;
        real max_rel_error;
        std::size_t coords;
        bool pass;
    };
    std::vector<Line> lines;
    bool all_pass = true;
};

SuiteResult run_suite(const std::vector<CheckCase>& cases, std::size_t n_seeds, real eps, real tolerance,
                      std::uint64_t seed0 = 1234);

}  // namespace cspr::ad
