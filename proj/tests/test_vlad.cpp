#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cspr/gradcheck.hpp"
#include "cspr/vlad.hpp"

using namespace cspr;
using namespace cspr::vlad;
using ad::Tensor;
using ad::real;

namespace {

VladParams make_params(std::vector<real> centroids, std::size_t k, std::size_t d, real alpha = 1.0,
                       bool requires_grad = false) {
    VladParams p;
    p.centroids = Tensor::from({k, d}, std::move(centroids), requires_grad);
    p.alpha = Tensor::scalar(alpha, requires_grad);
    return p;
}

Tensor rand_t(Rng& rng, ad::Shape shape, bool rg = false) {
    std::vector<real> v(ad::shape_numel(shape));
    for (real& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("soft assignment analytic cases") {
    // single cluster
    VladParams k1 = make_params({0.3, -0.2}, 1, 2);
    Tensor a = soft_assign(Tensor::from({2}, {1.0, 1.0}), k1);
    REQUIRE(a.size() == 1);
    CHECK(a.at(0) == doctest::Approx(1.0));

    // equidistant centroids split evenly
    VladParams sym = make_params({-1.0, 1.0}, 2, 1);
    Tensor b = soft_assign(Tensor::from({1}, {0.0}), sym);
    CHECK(b.at(0) == doctest::Approx(0.5));
    CHECK(b.at(1) == doctest::Approx(0.5));

    // direct evaluation of the formula
    VladParams off = make_params({0.0, 2.0}, 2, 1);
    Tensor c = soft_assign(Tensor::from({1}, {0.0}), off);
    CHECK(c.at(0) == doctest::Approx(0.9820).epsilon(1e-4));
    CHECK(c.at(1) == doctest::Approx(0.0180).epsilon(1e-2));
    CHECK(std::abs(c.at(0) - 1.0 / (1.0 + std::exp(-4.0))) < 1e-12);
}

TEST_CASE("soft assignment rows sum to one within 1e-9") {
    Rng rng(2);
    VladParams p = make_params(
        [&] {
            std::vector<real> v(5 * 3);
            for (real& x : v) x = rng.uniform(-1, 1);
            return v;
        }(),
        5, 3, 2.3);
    Tensor x = rand_t(rng, {40, 3});
    Tensor a = soft_assign(x, p);
    for (std::size_t i = 0; i < 40; ++i) {
        real s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) s += a.at(i * 5 + k);
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    // extreme magnitudes stay finite thanks to the max shift
    Tensor far = Tensor::from({1, 3}, {1e3, -1e3, 1e3});
    Tensor af = soft_assign(far, p);
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::isfinite(af.at(k)));
}

TEST_CASE("raw VLAD columns match hand-computed residuals") {
    // N=1, K=1: a=1, residual = x - c
    VladParams k1 = make_params({0.5}, 1, 1);
    Tensor fg = netvlad_raw(Tensor::from({1, 1}, {2.0}), k1);
    REQUIRE(fg.shape() == ad::Shape{1, 1});
    CHECK(fg.at(0) == doctest::Approx(1.5));

    // x=0 between centroids -1 and 1: columns [0.5] and [-0.5]
    VladParams sym = make_params({-1.0, 1.0}, 2, 1);
    Tensor fg2 = netvlad_raw(Tensor::from({1, 1}, {0.0}), sym);
    REQUIRE(fg2.shape() == ad::Shape{1, 2});
    CHECK(fg2.at(0) == doctest::Approx(0.5));
    CHECK(fg2.at(1) == doctest::Approx(-0.5));
}

TEST_CASE("raw VLAD equals the double-loop evaluation") {
    Rng rng(3);
    const std::size_t n = 4, k = 3, d = 2;
    VladParams p = make_params(
        [&] {
            std::vector<real> v(k * d);
            for (real& x : v) x = rng.uniform(-1, 1);
            return v;
        }(),
        k, d, 1.7);
    Tensor x = rand_t(rng, {n, d});
    Tensor fg = netvlad_raw(x, p);

    // brute-force double loop
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t c = 0; c < k; ++c) {
            real acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                // assignment of x_i
                real denom = 0.0;
                real num = 0.0;
                for (std::size_t cc = 0; cc < k; ++cc) {
                    real d2 = 0.0;
                    for (std::size_t jj = 0; jj < d; ++jj) {
                        const real diff = x.at(i * d + jj) - p.centroids.at(cc * d + jj);
                        d2 += diff * diff;
                    }
                    const real e = std::exp(-1.7 * d2);
                    denom += e;
                    if (cc == c) num = e;
                }
                acc += (num / denom) * (x.at(i * d + j) - p.centroids.at(c * d + j));
            }
            CHECK(std::abs(fg.at(j * k + c) - acc) <= 1e-6);
        }
}

TEST_CASE("netvlad embedding is unit norm and permutation invariant") {
    Rng rng(4);
    const std::size_t n = 12, k = 4, d = 3;
    VladParams p = make_params(
        [&] {
            std::vector<real> v(k * d);
            for (real& x : v) x = rng.uniform(-1, 1);
            return v;
        }(),
        k, d);
    Tensor x = rand_t(rng, {n, d});
    Tensor e1 = netvlad(x, p);
    REQUIRE(e1.size() == k * d);
    real norm = 0.0;
    for (std::size_t i = 0; i < e1.size(); ++i) norm += e1.at(i) * e1.at(i);
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);

    // permute rows
    std::vector<real> shuffled(n * d);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = (i * 7 + 3) % n;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) shuffled[i * d + j] = x.at(order[i] * d + j);
    Tensor e2 = netvlad(Tensor::from({n, d}, std::move(shuffled)), p);
    for (std::size_t i = 0; i < e1.size(); ++i) CHECK(std::abs(e1.at(i) - e2.at(i)) <= 1e-6);
}

TEST_CASE("large temperature converges to the one-hot nearest assignment") {
    VladParams p = make_params({-2.0, 0.0, 3.0}, 3, 1, 1e4);
    Tensor a = soft_assign(Tensor::from({1}, {0.4}), p);
    CHECK(a.at(1) == doctest::Approx(1.0));
    CHECK(a.at(0) == doctest::Approx(0.0));
    CHECK(a.at(2) == doctest::Approx(0.0));
}

TEST_CASE("netvlad gradient matches finite differences including alpha and centroids") {
    Rng rng(5);
    const std::size_t n = 3, k = 2, d = 2;
    Tensor x = rand_t(rng, {n, d}, true);
    Tensor centroids = rand_t(rng, {k, d}, true);
    Tensor alpha = Tensor::scalar(1.2, true);

    ad::CheckInstance inst;
    inst.leaves = {x, centroids, alpha};
    inst.loss = [=] {
        VladParams p;
        p.centroids = centroids;
        p.alpha = alpha;
        Tensor emb = netvlad(x, p);
        Rng prng(77);
        std::vector<real> w(emb.size());
        for (real& v : w) v = prng.uniform(-1, 1);
        return ad::sum_all(ad::mul(emb, Tensor::from(emb.shape(), std::move(w))));
    };
    auto rep = ad::run_check(inst, 1e-6, 5);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("degenerate all-zero descriptor is rejected") {
    // every row equals the single centroid: residuals vanish
    VladParams p = make_params({0.7, -0.3}, 1, 2);
    Tensor x = Tensor::from({2, 2}, {0.7, -0.3, 0.7, -0.3});
    CHECK_THROWS_AS(netvlad(x, p), NumericError);
}

TEST_CASE("param store integration applies the optional final projection") {
    ad::ParamStore store(9);
    init_vlad_params(store, 4, 3, 1.0, 0);
    VladParams p = vlad_params(store);
    CHECK_FALSE(p.final_proj.defined());
    Rng rng(6);
    Tensor emb = netvlad(rand_t(rng, {10, 3}), p);
    CHECK(emb.size() == 12);

    ad::ParamStore store2(9);
    init_vlad_params(store2, 4, 3, 1.0, 5);
    VladParams p2 = vlad_params(store2);
    REQUIRE(p2.final_proj.defined());
    Tensor emb2 = netvlad(rand_t(rng, {10, 3}), p2);
    CHECK(emb2.size() == 5);
    real norm = 0.0;
    for (std::size_t i = 0; i < emb2.size(); ++i) norm += emb2.at(i) * emb2.at(i);
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
}
