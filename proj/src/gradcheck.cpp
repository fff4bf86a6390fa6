#include "cspr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cspr/ops.hpp"

namespace cspr::ad {

CheckReport run_check(CheckInstance& inst, real eps, std::uint64_t seed) {
    if (eps <= 0) throw ContractError("run_check: eps must be positive");
    for (Tensor& l : inst.leaves) l.zero_grad();
    Tensor root = inst.loss();
    if (!std::isfinite(root.item())) throw NumericError("run_check: non-finite forward value");
    backward(root);

    std::vector<std::vector<real>> analytic;
    analytic.reserve(inst.leaves.size());
    for (Tensor& l : inst.leaves) {
        std::vector<real> g(l.grad().begin(), l.grad().end());
        if (g.empty()) g.assign(l.size(), 0.0);
        analytic.push_back(std::move(g));
    }

    Rng pick(mix_seed(seed, 0x9d5c));
    CheckReport rep;
    for (std::size_t li = 0; li < inst.leaves.size(); ++li) {
        Tensor& leaf = inst.leaves[li];
        std::vector<std::size_t> coords(leaf.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (inst.coord_cap > 0 && coords.size() > inst.coord_cap) {
            // seeded partial Fisher-Yates: take the first coord_cap of a shuffle
            for (std::size_t i = 0; i < inst.coord_cap; ++i) {
                const std::size_t j =
                    i + static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(coords.size() - 1 - i)));
                std::swap(coords[i], coords[j]);
            }
            coords.resize(inst.coord_cap);
        }
        auto vals = leaf.mutable_data();
        for (std::size_t ci : coords) {
            const real saved = vals[ci];
            const real an = analytic[li][ci];
            ++rep.coords_checked;
            // Divided differences trade truncation against cancellation
            // noise, so each coordinate is scored by its best step on a
            // small ladder; a wrong analytic gradient disagrees at every
            // step, while a small-magnitude gradient resolves once the
            // noise shrinks below it.
            real best = std::numeric_limits<real>::infinity();
            for (const real step : {eps, 8.0 * eps, 64.0 * eps}) {
                vals[ci] = saved + step;
                const real up = [&] {
                    NoGradGuard ng;
                    return inst.loss().item();
                }();
                vals[ci] = saved - step;
                const real down = [&] {
                    NoGradGuard ng;
                    return inst.loss().item();
                }();
                vals[ci] = saved;
                if (!std::isfinite(up) || !std::isfinite(down))
                    throw NumericError("run_check: non-finite forward value during probing");
                const real fd = (up - down) / (2.0 * step);
                // both below the oracle's cancellation noise: agreement
                const real l_ref = std::max({real(1.0), std::abs(up), std::abs(down)});
                const real noise_floor = 512.0 * 2.220446049250313e-16 * l_ref / (2.0 * step);
                if (std::abs(an) < noise_floor && std::abs(fd) < noise_floor) {
                    best = 0.0;
                    break;
                }
                const real denom = std::max(real(1e-8), std::abs(an) + std::abs(fd));
                best = std::min(best, std::abs(an - fd) / denom);
                if (best < 1e-7) break;  // already resolved
            }
            rep.max_rel_error = std::max(rep.max_rel_error, best);
        }
    }
    return rep;
}

SuiteResult run_suite(const std::vector<CheckCase>& cases, std::size_t n_seeds, real eps, real tolerance,
                      std::uint64_t seed0) {
    SuiteResult out;
    for (const CheckCase& c : cases) {
        real worst = 0.0;
        std::size_t coords = 0;
        for (std::size_t s = 0; s < n_seeds; ++s) {
            CheckInstance inst = c.make(mix_seed(seed0, s * 131 + 7));
            CheckReport rep;
            try {
                rep = run_check(inst, eps, mix_seed(seed0, s));
            } catch (const NumericError& e) {
                throw NumericError("kernel " + c.name + ": " + e.what());
            }
            worst = std::max(worst, rep.max_rel_error);
            coords += rep.coords_checked;
        }
        const bool pass = worst < tolerance;
        out.lines.push_back({c.name, worst, coords, pass});
        if (!pass) out.all_pass = false;
    }
    return out;
}

namespace {

constexpr real kKinkMargin = 0.05;

std::vector<real> sample_vec(Rng& rng, std::size_t n, real lo = -1.0, real hi = 1.0) {
    std::vector<real> v(n);
    for (real& x : v) x = rng.uniform(lo, hi);
    return v;
}

// uniform in [-1,-margin] U [margin, 1]
std::vector<real> sample_vec_away_from_zero(Rng& rng, std::size_t n, real margin = kKinkMargin) {
    std::vector<real> v(n);
    for (real& x : v) {
        const real u = rng.uniform(margin, 1.0);
        x = rng.uniform() < 0.5 ? -u : u;
    }
    return v;
}

Tensor leaf(Rng& rng, Shape shape, bool away_from_zero = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor::from(std::move(shape),
                        away_from_zero ? sample_vec_away_from_zero(rng, n) : sample_vec(rng, n), true);
}

// Fixed random projection so the scalar loss exercises every output
// coordinate with distinct weights (a plain sum would null out softmax-type
// Jacobians).
Tensor project_loss(const Tensor& out, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x70a1));
    Tensor w = Tensor::from(out.shape(), sample_vec(rng, out.size(), -1.0, 1.0));
    return sum_all(mul(out, w));
}

CheckCase unary_case(std::string name, std::function<Tensor(const Tensor&)> f, bool away_from_zero) {
    return {std::move(name), [f = std::move(f), away_from_zero](std::uint64_t seed) {
                Rng rng(seed);
                Tensor x = leaf(rng, {3, 5}, away_from_zero);
                CheckInstance inst;
                inst.leaves = {x};
                inst.loss = [f, x, seed] { return project_loss(f(x), seed); };
                return inst;
            }};
}

}  // namespace

const std::vector<CheckCase>& kernel_catalog() {
    static const std::vector<CheckCase> cases = [] {
        std::vector<CheckCase> cs;

        cs.push_back({"add", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {4, 3});
                          Tensor b = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {a, b};
                          inst.loss = [a, b, seed] { return project_loss(add(a, b), seed); };
                          return inst;
                      }});
        cs.push_back({"add_rowvec", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor m = leaf(rng, {4, 3});
                          Tensor v = leaf(rng, {3});
                          CheckInstance inst;
                          inst.leaves = {m, v};
                          inst.loss = [m, v, seed] { return project_loss(add_rowvec(m, v), seed); };
                          return inst;
                      }});
        cs.push_back({"add_colvec", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor m = leaf(rng, {4, 3});
                          Tensor v = leaf(rng, {4});
                          CheckInstance inst;
                          inst.leaves = {m, v};
                          inst.loss = [m, v, seed] { return project_loss(add_colvec(m, v), seed); };
                          return inst;
                      }});
        cs.push_back({"mul", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {4, 3});
                          Tensor b = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {a, b};
                          inst.loss = [a, b, seed] { return project_loss(mul(a, b), seed); };
                          return inst;
                      }});
        cs.push_back({"mul_rowvec", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor m = leaf(rng, {4, 3});
                          Tensor v = leaf(rng, {3});
                          CheckInstance inst;
                          inst.leaves = {m, v};
                          inst.loss = [m, v, seed] { return project_loss(mul_rowvec(m, v), seed); };
                          return inst;
                      }});
        cs.push_back({"smul", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor s = leaf(rng, {1});
                          Tensor m = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {s, m};
                          inst.loss = [s, m, seed] { return project_loss(smul(s, m), seed); };
                          return inst;
                      }});
        cs.push_back({"matmul", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {3, 4});
                          Tensor b = leaf(rng, {4, 2});
                          CheckInstance inst;
                          inst.leaves = {a, b};
                          inst.loss = [a, b, seed] { return project_loss(matmul(a, b), seed); };
                          return inst;
                      }});
        cs.push_back({"transpose", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {3, 4});
                          CheckInstance inst;
                          inst.leaves = {a};
                          inst.loss = [a, seed] { return project_loss(transpose(a), seed); };
                          return inst;
                      }});
        cs.push_back(unary_case("relu", [](const Tensor& x) { return relu(x); }, true));
        cs.push_back(unary_case("gelu", [](const Tensor& x) { return gelu(x); }, false));
        cs.push_back(unary_case("exp", [](const Tensor& x) { return exp_t(x); }, false));
        cs.push_back(unary_case("sin", [](const Tensor& x) { return sin_t(x); }, false));
        cs.push_back(unary_case("cos", [](const Tensor& x) { return cos_t(x); }, false));
        cs.push_back({"sqrt", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = Tensor::from({3, 5}, sample_vec(rng, 15, 0.1, 2.0), true);
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(sqrt_t(x), seed); };
                          return inst;
                      }});
        cs.push_back({"softmax_rows", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 5});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(softmax(x, 1), seed); };
                          return inst;
                      }});
        cs.push_back({"softmax_cols", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 5});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(softmax(x, 0), seed); };
                          return inst;
                      }});
        cs.push_back({"batchnorm", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {8, 4});
                          Tensor gamma = Tensor::from({4}, sample_vec(rng, 4, 0.5, 1.5), true);
                          Tensor beta = leaf(rng, {4});
                          CheckInstance inst;
                          inst.leaves = {x, gamma, beta};
                          inst.loss = [x, gamma, beta, seed] {
                              return project_loss(
                                  batch_norm(x, gamma, beta, NormMode::Train, Tensor(), Tensor()), seed);
                          };
                          return inst;
                      }});
        cs.push_back({"layernorm", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {5, 6});
                          Tensor gamma = Tensor::from({6}, sample_vec(rng, 6, 0.5, 1.5), true);
                          Tensor beta = leaf(rng, {6});
                          CheckInstance inst;
                          inst.leaves = {x, gamma, beta};
                          inst.loss = [x, gamma, beta, seed] {
                              return project_loss(layer_norm(x, gamma, beta), seed);
                          };
                          return inst;
                      }});
        cs.push_back({"conv1d", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {7, 3});
                          Tensor w = leaf(rng, {3, 3, 2});
                          Tensor b = leaf(rng, {2});
                          CheckInstance inst;
                          inst.leaves = {x, w, b};
                          inst.loss = [x, w, b, seed] { return project_loss(conv1d(x, w, b), seed); };
                          return inst;
                      }});
        cs.push_back({"gather", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {6, 3});
                          std::vector<std::size_t> idx;
                          for (int i = 0; i < 5; ++i)
                              idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, 5)));
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, idx, seed] { return project_loss(gather_rows(x, idx), seed); };
                          return inst;
                      }});
        cs.push_back({"scatter_add", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {5, 3});
                          std::vector<std::size_t> idx;
                          for (int i = 0; i < 5; ++i)
                              idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, 3)));
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, idx, seed] {
                              return project_loss(scatter_add_rows(x, idx, 4), seed);
                          };
                          return inst;
                      }});
        cs.push_back({"concat_rows", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {2, 3});
                          Tensor b = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {a, b};
                          inst.loss = [a, b, seed] { return project_loss(concat({a, b}, 0), seed); };
                          return inst;
                      }});
        cs.push_back({"concat_cols", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor a = leaf(rng, {3, 2});
                          Tensor b = leaf(rng, {3, 4});
                          CheckInstance inst;
                          inst.leaves = {a, b};
                          inst.loss = [a, b, seed] { return project_loss(concat({a, b}, 1), seed); };
                          return inst;
                      }});
        cs.push_back({"sum", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x] { return sum_all(x); };
                          return inst;
                      }});
        cs.push_back({"mean", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x] { return mean_all(x); };
                          return inst;
                      }});
        cs.push_back({"sum_axis", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] {
                              return add(project_loss(sum_axis(x, 0), seed),
                                         project_loss(sum_axis(x, 1), mix_seed(seed, 3)));
                          };
                          return inst;
                      }});
        cs.push_back({"mean_axis", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(mean_axis(x, 0), seed); };
                          return inst;
                      }});
        cs.push_back({"l1_normalize", [](std::uint64_t seed) {
                          Rng rng(seed);
                          // positive inputs keep |x| smooth (matches its use on
                          // post-softmax attention maps)
                          Tensor x = Tensor::from({3, 4}, sample_vec(rng, 12, 0.1, 1.0), true);
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(l1_normalize(x, 1), seed); };
                          return inst;
                      }});
        cs.push_back({"l2_normalize", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {3, 4}, true);
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] {
                              return add(project_loss(l2_normalize(x, 1), seed),
                                         project_loss(l2_normalize(x, 0), mix_seed(seed, 5)));
                          };
                          return inst;
                      }});
        cs.push_back({"max", [](std::uint64_t seed) {
                          Rng rng(seed);
                          // spread values so the argmax cannot flip under eps probes
                          std::vector<real> v(6);
                          for (std::size_t i = 0; i < v.size(); ++i)
                              v[i] = rng.uniform(0.0, 0.3) + 0.5 * static_cast<real>(i);
                          Tensor x = Tensor::from({6}, std::move(v), true);
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x] { return max_all(x); };
                          return inst;
                      }});
        cs.push_back({"min", [](std::uint64_t seed) {
                          Rng rng(seed);
                          std::vector<real> v(6);
                          for (std::size_t i = 0; i < v.size(); ++i)
                              v[i] = rng.uniform(0.0, 0.3) + 0.5 * static_cast<real>(i);
                          Tensor x = Tensor::from({6}, std::move(v), true);
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x] { return min_all(x); };
                          return inst;
                      }});
        cs.push_back({"reshape", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {4, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(reshape(x, {2, 6}), seed); };
                          return inst;
                      }});
        cs.push_back({"slice_rows", [](std::uint64_t seed) {
                          Rng rng(seed);
                          Tensor x = leaf(rng, {5, 3});
                          CheckInstance inst;
                          inst.leaves = {x};
                          inst.loss = [x, seed] { return project_loss(slice_rows(x, 1, 4), seed); };
                          return inst;
                      }});
        return cs;
    }();
    return cases;
}

}  // namespace cspr::ad
