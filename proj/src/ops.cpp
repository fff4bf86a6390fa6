#include "cspr/ops.hpp"

#include <algorithm>
#include <cmath>

namespace cspr::ad {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void check_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<real> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
        Node& pa = *out.parents[0];
        Node& pb = *out.parents[1];
        if (pa.requires_grad) {
            auto& ga = ensure_grad(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i) ga[i] += out.grad[i];
        }
        if (pb.requires_grad) {
            auto& gb = ensure_grad(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i) gb[i] += out.grad[i];
        }
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    check_rank2(m, "add_rowvec");
    if (v.rank() != 1 || v.dim(0) != m.dim(1))
        throw ShapeError("add_rowvec: vector length " + shape_str(v.shape()) + " vs matrix " + shape_str(m.shape()));
    const std::size_t n = m.dim(0), k = m.dim(1);
    std::vector<real> out(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = m.at(i * k + j) + v.at(j);
    return make_op(m.shape(), std::move(out), {m, v}, [n, k](Node& o) {
        Node& pm = *o.parents[0];
        Node& pv = *o.parents[1];
        if (pm.requires_grad) {
            auto& g = ensure_grad(pm);
            for (std::size_t i = 0; i < n * k; ++i) g[i] += o.grad[i];
        }
        if (pv.requires_grad) {
            auto& g = ensure_grad(pv);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) g[j] += o.grad[i * k + j];
        }
    });
}

Tensor add_colvec(const Tensor& m, const Tensor& v) {
    check_rank2(m, "add_colvec");
    if (v.rank() != 1 || v.dim(0) != m.dim(0))
        throw ShapeError("add_colvec: vector length " + shape_str(v.shape()) + " vs matrix " + shape_str(m.shape()));
    const std::size_t n = m.dim(0), k = m.dim(1);
    std::vector<real> out(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = m.at(i * k + j) + v.at(i);
    return make_op(m.shape(), std::move(out), {m, v}, [n, k](Node& o) {
        Node& pm = *o.parents[0];
        Node& pv = *o.parents[1];
        if (pm.requires_grad) {
            auto& g = ensure_grad(pm);
            for (std::size_t i = 0; i < n * k; ++i) g[i] += o.grad[i];
        }
        if (pv.requires_grad) {
            auto& g = ensure_grad(pv);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) g[i] += o.grad[i * k + j];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<real> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
        Node& pa = *out.parents[0];
        Node& pb = *out.parents[1];
        if (pa.requires_grad) {
            auto& g = ensure_grad(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = ensure_grad(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<real> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
    return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
        Node& pa = *out.parents[0];
        Node& pb = *out.parents[1];
        if (pa.requires_grad) {
            auto& g = ensure_grad(pa);
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = ensure_grad(pb);
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pa.value[i];
        }
    });
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
    check_rank2(m, "mul_rowvec");
    if (v.rank() != 1 || v.dim(0) != m.dim(1))
        throw ShapeError("mul_rowvec: vector length " + shape_str(v.shape()) + " vs matrix " + shape_str(m.shape()));
    const std::size_t n = m.dim(0), k = m.dim(1);
    std::vector<real> out(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = m.at(i * k + j) * v.at(j);
    return make_op(m.shape(), std::move(out), {m, v}, [n, k](Node& o) {
        Node& pm = *o.parents[0];
        Node& pv = *o.parents[1];
        if (pm.requires_grad) {
            auto& g = ensure_grad(pm);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) g[i * k + j] += o.grad[i * k + j] * pv.value[j];
        }
        if (pv.requires_grad) {
            auto& g = ensure_grad(pv);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) g[j] += o.grad[i * k + j] * pm.value[i * k + j];
        }
    });
}

Tensor smul(const Tensor& s, const Tensor& m) {
    if (s.size() != 1) throw ShapeError("smul: first argument must be scalar");
    const real sv = s.at(0);
    std::vector<real> out(m.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * m.at(i);
    return make_op(m.shape(), std::move(out), {s, m}, [sv](Node& o) {
        Node& ps = *o.parents[0];
        Node& pm = *o.parents[1];
        if (ps.requires_grad) {
            auto& g = ensure_grad(ps);
            real acc = 0.0;
            for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * pm.value[i];
            g[0] += acc;
        }
        if (pm.requires_grad) {
            auto& g = ensure_grad(pm);
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * sv;
        }
    });
}

Tensor scale(const Tensor& m, real c) {
    std::vector<real> out(m.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * m.at(i);
    return make_op(m.shape(), std::move(out), {m}, [c](Node& o) {
        Node& pm = *o.parents[0];
        if (pm.requires_grad) {
            auto& g = ensure_grad(pm);
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += c * o.grad[i];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<real> out(m * n, 0.0);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const real aip = av[i * k + p];
            if (aip == 0.0) continue;
            const real* brow = &bv[p * n];
            real* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](Node& o) {
        Node& pa = *o.parents[0];
        Node& pb = *o.parents[1];
        if (pa.requires_grad) {
            auto& g = ensure_grad(pa);
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    real acc = 0.0;
                    const real* grow = &o.grad[i * n];
                    const real* brow = &pb.value[p * n];
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    g[i * k + p] += acc;
                }
        }
        if (pb.requires_grad) {
            auto& g = ensure_grad(pb);
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const real aip = pa.value[i * k + p];
                    if (aip == 0.0) continue;
                    const real* grow = &o.grad[i * n];
                    real* grow_b = &g[p * n];
                    for (std::size_t j = 0; j < n; ++j) grow_b[j] += aip * grow[j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    check_rank2(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<real> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
    return make_op({n, m}, std::move(out), {a}, [m, n](Node& o) {
        Node& pa = *o.parents[0];
        if (!pa.requires_grad) return;
        auto& g = ensure_grad(pa);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    });
}

Tensor relu(const Tensor& x) {
    std::vector<real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (px.value[i] > 0.0) g[i] += o.grad[i];
    });
}

Tensor gelu(const Tensor& x) {
    static const real inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const real inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    std::vector<real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const real v = x.at(i);
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return make_op(x.shape(), std::move(out), {x}, [](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const real v = px.value[i];
            const real cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const real pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            g[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
    std::vector<real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.at(i));
    return make_op(x.shape(), std::move(out), {x}, [df](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(px.value[i], o.value[i]);
    });
}

}  // namespace

Tensor exp_t(const Tensor& x) {
    return unary_op(
        x, [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor sin_t(const Tensor& x) {
    return unary_op(
        x, [](real v) { return std::sin(v); }, [](real v, real) { return std::cos(v); });
}

Tensor cos_t(const Tensor& x) {
    return unary_op(
        x, [](real v) { return std::cos(v); }, [](real v, real) { return -std::sin(v); });
}

Tensor sqrt_t(const Tensor& x) {
    return unary_op(
        x, [](real v) { return std::sqrt(v); },
        [](real, real y) { return 0.5 / std::max(y, real(1e-12)); });
}

namespace {

// softmax along contiguous or strided lanes; lane l has `len` entries at
// base + i*stride.
void softmax_lanes(const std::vector<real>& x, std::vector<real>& y, std::size_t lanes, std::size_t len,
                   std::size_t lane_stride, std::size_t elem_stride) {
    for (std::size_t l = 0; l < lanes; ++l) {
        const std::size_t base = l * lane_stride;
        real mx = x[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[base + i * elem_stride]);
        real sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const real e = std::exp(x[base + i * elem_stride] - mx);
            y[base + i * elem_stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < len; ++i) y[base + i * elem_stride] /= sum;
    }
}

void softmax_lanes_backward(const std::vector<real>& y, const std::vector<real>& go, std::vector<real>& gx,
                            std::size_t lanes, std::size_t len, std::size_t lane_stride,
                            std::size_t elem_stride) {
    for (std::size_t l = 0; l < lanes; ++l) {
        const std::size_t base = l * lane_stride;
        real dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * elem_stride;
            dot += go[k] * y[k];
        }
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * elem_stride;
            gx[k] += y[k] * (go[k] - dot);
        }
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    std::size_t lanes, len, lane_stride, elem_stride;
    if (x.rank() == 1) {
        lanes = 1;
        len = x.dim(0);
        lane_stride = 0;
        elem_stride = 1;
    } else if (x.rank() == 2) {
        const std::size_t n = x.dim(0), k = x.dim(1);
        int a = axis < 0 ? 1 : axis;
        if (a == 1) {
            lanes = n;
            len = k;
            lane_stride = k;
            elem_stride = 1;
        } else if (a == 0) {
            lanes = k;
            len = n;
            lane_stride = 1;
            elem_stride = k;
        } else {
            throw ContractError("softmax: axis out of range");
        }
    } else {
        throw ShapeError("softmax: rank must be 1 or 2");
    }
    std::vector<real> y(x.size());
    const std::vector<real> xv(x.data().begin(), x.data().end());
    softmax_lanes(xv, y, lanes, len, lane_stride, elem_stride);
    return make_op(x.shape(), std::move(y), {x}, [lanes, len, lane_stride, elem_stride](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        softmax_lanes_backward(o.value, o.grad, g, lanes, len, lane_stride, elem_stride);
    });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode,
                  const Tensor& running_mean, const Tensor& running_var, real eps, BnStats* stats_out) {
    check_rank2(x, "batch_norm");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw ShapeError("batch_norm: affine params must be length-" + std::to_string(c) + " vectors");

    std::vector<real> mean(c, 0.0), var(c, 0.0);
    if (mode == NormMode::Train) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) mean[j] += x.at(i * c + j);
        for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<real>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const real d = x.at(i * c + j) - mean[j];
                var[j] += d * d;
            }
        for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<real>(n);
        if (stats_out) {
            stats_out->mean = mean;
            stats_out->var = var;
        }
    } else {
        if (!running_mean.defined() || !running_var.defined())
            throw ContractError("batch_norm: eval mode requires running statistics");
        mean.assign(running_mean.data().begin(), running_mean.data().end());
        var.assign(running_var.data().begin(), running_var.data().end());
    }

    std::vector<real> invstd(c);
    for (std::size_t j = 0; j < c; ++j) invstd[j] = 1.0 / std::sqrt(var[j] + eps);

    std::vector<real> xhat(n * c), out(n * c);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const real h = (x.at(i * c + j) - mean[j]) * invstd[j];
            xhat[i * c + j] = h;
            out[i * c + j] = gamma.at(j) * h + beta.at(j);
        }

    const bool train = mode == NormMode::Train;
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [n, c, train, invstd = std::move(invstd), xhat = std::move(xhat)](Node& o) {
                       Node& px = *o.parents[0];
                       Node& pg = *o.parents[1];
                       Node& pb = *o.parents[2];
                       if (pg.requires_grad) {
                           auto& g = ensure_grad(pg);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
                       }
                       if (pb.requires_grad) {
                           auto& g = ensure_grad(pb);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
                       }
                       if (!px.requires_grad) return;
                       auto& g = ensure_grad(px);
                       if (!train) {
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] += o.grad[i * c + j] * pg.value[j] * invstd[j];
                           return;
                       }
                       // training: gradients flow through batch mean/var
                       for (std::size_t j = 0; j < c; ++j) {
                           real sum_dh = 0.0, sum_dh_h = 0.0;
                           for (std::size_t i = 0; i < n; ++i) {
                               const real dh = o.grad[i * c + j] * pg.value[j];
                               sum_dh += dh;
                               sum_dh_h += dh * xhat[i * c + j];
                           }
                           const real inv_n = 1.0 / static_cast<real>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               const real dh = o.grad[i * c + j] * pg.value[j];
                               g[i * c + j] +=
                                   invstd[j] * (dh - inv_n * sum_dh - xhat[i * c + j] * inv_n * sum_dh_h);
                           }
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
    check_rank2(x, "layer_norm");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw ShapeError("layer_norm: affine params must be length-" + std::to_string(c) + " vectors");
    std::vector<real> xhat(n * c), out(n * c), invstd(n);
    for (std::size_t i = 0; i < n; ++i) {
        real mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x.at(i * c + j);
        mean /= static_cast<real>(c);
        real var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const real d = x.at(i * c + j) - mean;
            var += d * d;
        }
        var /= static_cast<real>(c);
        invstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            const real h = (x.at(i * c + j) - mean) * invstd[i];
            xhat[i * c + j] = h;
            out[i * c + j] = gamma.at(j) * h + beta.at(j);
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [n, c, invstd = std::move(invstd), xhat = std::move(xhat)](Node& o) {
                       Node& px = *o.parents[0];
                       Node& pg = *o.parents[1];
                       Node& pb = *o.parents[2];
                       if (pg.requires_grad) {
                           auto& g = ensure_grad(pg);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xhat[i * c + j];
                       }
                       if (pb.requires_grad) {
                           auto& g = ensure_grad(pb);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
                       }
                       if (!px.requires_grad) return;
                       auto& g = ensure_grad(px);
                       const real inv_c = 1.0 / static_cast<real>(c);
                       for (std::size_t i = 0; i < n; ++i) {
                           real sum_dh = 0.0, sum_dh_h = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                               const real dh = o.grad[i * c + j] * pg.value[j];
                               sum_dh += dh;
                               sum_dh_h += dh * xhat[i * c + j];
                           }
                           for (std::size_t j = 0; j < c; ++j) {
                               const real dh = o.grad[i * c + j] * pg.value[j];
                               g[i * c + j] +=
                                   invstd[i] * (dh - inv_c * sum_dh - xhat[i * c + j] * inv_c * sum_dh_h);
                           }
                       }
                   });
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_rank2(x, "conv1d");
    if (w.rank() != 3) throw ShapeError("conv1d: weight must be rank-3 (Kw, C_in, C_out)");
    const std::size_t t = x.dim(0), cin = x.dim(1);
    const std::size_t kw = w.dim(0), cout = w.dim(2);
    if (w.dim(1) != cin) throw ShapeError("conv1d: C_in mismatch");
    if (kw % 2 == 0) throw ContractError("conv1d: kernel width must be odd");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw ShapeError("conv1d: bias must be length C_out");
    const std::size_t half = kw / 2;
    std::vector<real> out(t * cout, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t k = 0; k < kw; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(half);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const real xv = x.at(static_cast<std::size_t>(src) * cin + ci);
                if (xv == 0.0) continue;
                const real* wrow = &w.data()[(k * cin + ci) * cout];
                real* orow = &out[i * cout];
                for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wrow[co];
            }
        }
        if (bias.defined())
            for (std::size_t co = 0; co < cout; ++co) out[i * cout + co] += bias.at(co);
    }
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    const bool has_bias = bias.defined();
    return make_op({t, cout}, std::move(out), std::move(parents), [t, cin, kw, cout, half, has_bias](Node& o) {
        Node& px = *o.parents[0];
        Node& pw = *o.parents[1];
        if (px.requires_grad) {
            auto& g = ensure_grad(px);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t k = 0; k < kw; ++k) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(half);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        real acc = 0.0;
                        const real* wrow = &pw.value[(k * cin + ci) * cout];
                        const real* grow = &o.grad[i * cout];
                        for (std::size_t co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
                        g[static_cast<std::size_t>(src) * cin + ci] += acc;
                    }
                }
        }
        if (pw.requires_grad) {
            auto& g = ensure_grad(pw);
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t k = 0; k < kw; ++k) {
                    const std::ptrdiff_t src =
                        static_cast<std::ptrdiff_t>(i + k) - static_cast<std::ptrdiff_t>(half);
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const real xv = px.value[static_cast<std::size_t>(src) * cin + ci];
                        if (xv == 0.0) continue;
                        real* grow = &g[(k * cin + ci) * cout];
                        const real* orow = &o.grad[i * cout];
                        for (std::size_t co = 0; co < cout; ++co) grow[co] += xv * orow[co];
                    }
                }
        }
        if (has_bias) {
            Node& pb = *o.parents[2];
            if (pb.requires_grad) {
                auto& g = ensure_grad(pb);
                for (std::size_t i = 0; i < t; ++i)
                    for (std::size_t co = 0; co < cout; ++co) g[co] += o.grad[i * cout + co];
            }
        }
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    check_rank2(x, "gather_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    for (std::size_t i : idx)
        if (i >= n) throw ContractError("gather_rows: index " + std::to_string(i) + " out of range");
    std::vector<real> out(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(&x.data()[idx[r] * d], d, &out[r * d]);
    return make_op({idx.size(), d}, std::move(out), {x}, [idx, d](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += o.grad[r * d + j];
    });
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t out_rows) {
    check_rank2(x, "scatter_add_rows");
    const std::size_t m = x.dim(0), d = x.dim(1);
    if (idx.size() != m) throw ContractError("scatter_add_rows: index list length must equal row count");
    for (std::size_t i : idx)
        if (i >= out_rows) throw ContractError("scatter_add_rows: index out of range");
    std::vector<real> out(out_rows * d, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < d; ++j) out[idx[r] * d + j] += x.at(r * d + j);
    return make_op({out_rows, d}, std::move(out), {x}, [idx, d](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[idx[r] * d + j];
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty part list");
    const std::size_t rank = parts[0].rank();
    for (const Tensor& p : parts)
        if (p.rank() != rank) throw ShapeError("concat: mixed ranks");

    if (rank == 1) {
        std::size_t total = 0;
        for (const Tensor& p : parts) total += p.dim(0);
        std::vector<real> out;
        out.reserve(total);
        std::vector<std::size_t> sizes;
        for (const Tensor& p : parts) {
            out.insert(out.end(), p.data().begin(), p.data().end());
            sizes.push_back(p.dim(0));
        }
        return make_op({total}, std::move(out), parts, [sizes](Node& o) {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < sizes.size(); ++pi) {
                Node& p = *o.parents[pi];
                if (p.requires_grad) {
                    auto& g = ensure_grad(p);
                    for (std::size_t i = 0; i < sizes[pi]; ++i) g[i] += o.grad[off + i];
                }
                off += sizes[pi];
            }
        });
    }
    if (rank != 2) throw ShapeError("concat: rank must be 1 or 2");

    if (axis == 0) {
        const std::size_t d = parts[0].dim(1);
        std::size_t total = 0;
        std::vector<std::size_t> rows;
        for (const Tensor& p : parts) {
            if (p.dim(1) != d) throw ShapeError("concat axis 0: column mismatch");
            total += p.dim(0);
            rows.push_back(p.dim(0));
        }
        std::vector<real> out;
        out.reserve(total * d);
        for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
        return make_op({total, d}, std::move(out), parts, [rows, d](Node& o) {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < rows.size(); ++pi) {
                Node& p = *o.parents[pi];
                if (p.requires_grad) {
                    auto& g = ensure_grad(p);
                    for (std::size_t i = 0; i < rows[pi] * d; ++i) g[i] += o.grad[off + i];
                }
                off += rows[pi] * d;
            }
        });
    }
    if (axis == 1) {
        const std::size_t n = parts[0].dim(0);
        std::size_t total = 0;
        std::vector<std::size_t> cols;
        for (const Tensor& p : parts) {
            if (p.dim(0) != n) throw ShapeError("concat axis 1: row mismatch");
            total += p.dim(1);
            cols.push_back(p.dim(1));
        }
        std::vector<real> out(n * total);
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const std::size_t c = cols[pi];
            for (std::size_t i = 0; i < n; ++i)
                std::copy_n(&parts[pi].data()[i * c], c, &out[i * total + off]);
            off += c;
        }
        return make_op({n, total}, std::move(out), parts, [cols, n, total](Node& o) {
            std::size_t offc = 0;
            for (std::size_t pi = 0; pi < cols.size(); ++pi) {
                Node& p = *o.parents[pi];
                const std::size_t c = cols[pi];
                if (p.requires_grad) {
                    auto& g = ensure_grad(p);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * total + offc + j];
                }
                offc += c;
            }
        });
    }
    throw ContractError("concat: axis out of range");
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    check_rank2(x, "slice_rows");
    if (begin >= end || end > x.dim(0)) throw ContractError("slice_rows: bad row range");
    const std::size_t d = x.dim(1);
    std::vector<real> out(x.data().begin() + begin * d, x.data().begin() + end * d);
    return make_op({end - begin, d}, std::move(out), {x}, [begin, d](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * d + i] += o.grad[i];
    });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    std::vector<real> out(x.data().begin(), x.data().end());
    return make_op(std::move(new_shape), std::move(out), {x}, [](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor sum_all(const Tensor& x) {
    real acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    return make_op({1}, {acc}, {x}, [](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
    });
}

Tensor mean_all(const Tensor& x) {
    real acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.at(i);
    const real inv = 1.0 / static_cast<real>(x.size());
    return make_op({1}, {acc * inv}, {x}, [inv](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * inv;
    });
}

namespace {

Tensor axis_reduce(const Tensor& x, int axis, bool mean) {
    check_rank2(x, "axis reduction");
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (axis != 0 && axis != 1) throw ContractError("axis reduction: axis out of range");
    const std::size_t out_len = axis == 0 ? k : n;
    const real inv = mean ? (axis == 0 ? 1.0 / static_cast<real>(n) : 1.0 / static_cast<real>(k)) : 1.0;
    std::vector<real> out(out_len, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[axis == 0 ? j : i] += x.at(i * k + j);
    for (real& v : out) v *= inv;
    return make_op({out_len}, std::move(out), {x}, [n, k, axis, inv](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) g[i * k + j] += o.grad[axis == 0 ? j : i] * inv;
    });
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis) {
    return axis_reduce(x, axis, false);
}

Tensor mean_axis(const Tensor& x, int axis) {
    return axis_reduce(x, axis, true);
}

namespace {

Tensor extremum(const Tensor& x, bool is_max) {
    if (x.rank() != 1 || x.dim(0) == 0) throw ContractError("extremum: non-empty rank-1 tensor required");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.dim(0); ++i) {
        const bool better = is_max ? x.at(i) > x.at(arg) : x.at(i) < x.at(arg);
        if (better) arg = i;
    }
    return make_op({1}, {x.at(arg)}, {x}, [arg](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        ensure_grad(px)[arg] += o.grad[0];
    });
}

}  // namespace

Tensor max_all(const Tensor& x) {
    return extremum(x, true);
}

Tensor min_all(const Tensor& x) {
    return extremum(x, false);
}

namespace {

struct LaneSpec {
    std::size_t lanes, len, lane_stride, elem_stride;
};

LaneSpec lanes_for(const Tensor& x, int axis, const char* op) {
    if (x.rank() == 1) return {1, x.dim(0), 0, 1};
    if (x.rank() != 2) throw ShapeError(std::string(op) + ": rank must be 1 or 2");
    const std::size_t n = x.dim(0), k = x.dim(1);
    int a = axis < 0 ? 1 : axis;
    if (a == 1) return {n, k, k, 1};
    if (a == 0) return {k, n, 1, k};
    throw ContractError(std::string(op) + ": axis out of range");
}

}  // namespace

Tensor l1_normalize(const Tensor& x, int axis, real eps) {
    const LaneSpec ls = lanes_for(x, axis, "l1_normalize");
    std::vector<real> out(x.size());
    std::vector<real> norms(ls.lanes);
    for (std::size_t l = 0; l < ls.lanes; ++l) {
        const std::size_t base = l * ls.lane_stride;
        real s = 0.0;
        for (std::size_t i = 0; i < ls.len; ++i) s += std::abs(x.at(base + i * ls.elem_stride));
        s = std::max(s, eps);
        norms[l] = s;
        for (std::size_t i = 0; i < ls.len; ++i) {
            const std::size_t idx = base + i * ls.elem_stride;
            out[idx] = x.at(idx) / s;
        }
    }
    return make_op(x.shape(), std::move(out), {x}, [ls, norms = std::move(norms)](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t l = 0; l < ls.lanes; ++l) {
            const std::size_t base = l * ls.lane_stride;
            real dot = 0.0;
            for (std::size_t i = 0; i < ls.len; ++i) {
                const std::size_t idx = base + i * ls.elem_stride;
                dot += o.grad[idx] * o.value[idx];
            }
            for (std::size_t i = 0; i < ls.len; ++i) {
                const std::size_t idx = base + i * ls.elem_stride;
                const real sign = px.value[idx] > 0.0 ? 1.0 : (px.value[idx] < 0.0 ? -1.0 : 0.0);
                g[idx] += (o.grad[idx] - sign * dot) / norms[l];
            }
        }
    });
}

Tensor l2_normalize(const Tensor& x, int axis, real eps) {
    const LaneSpec ls = lanes_for(x, axis, "l2_normalize");
    std::vector<real> out(x.size());
    std::vector<real> norms(ls.lanes);
    for (std::size_t l = 0; l < ls.lanes; ++l) {
        const std::size_t base = l * ls.lane_stride;
        real s = 0.0;
        for (std::size_t i = 0; i < ls.len; ++i) {
            const real v = x.at(base + i * ls.elem_stride);
            s += v * v;
        }
        s = std::max(std::sqrt(s), eps);
        norms[l] = s;
        for (std::size_t i = 0; i < ls.len; ++i) {
            const std::size_t idx = base + i * ls.elem_stride;
            out[idx] = x.at(idx) / s;
        }
    }
    return make_op(x.shape(), std::move(out), {x}, [ls, norms = std::move(norms)](Node& o) {
        Node& px = *o.parents[0];
        if (!px.requires_grad) return;
        auto& g = ensure_grad(px);
        for (std::size_t l = 0; l < ls.lanes; ++l) {
            const std::size_t base = l * ls.lane_stride;
            real dot = 0.0;
            for (std::size_t i = 0; i < ls.len; ++i) {
                const std::size_t idx = base + i * ls.elem_stride;
                dot += o.grad[idx] * o.value[idx];
            }
            for (std::size_t i = 0; i < ls.len; ++i) {
                const std::size_t idx = base + i * ls.elem_stride;
                g[idx] += (o.grad[idx] - o.value[idx] * dot) / norms[l];
            }
        }
    });
}

}  // namespace cspr::ad
