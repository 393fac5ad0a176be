// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations on tec::Tensor. Broadcasting is limited to the
// right operand being a scalar or a trailing-suffix of the left operand's
// shape (bias / per-channel scale over leading batch dims).
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "tec/tensor.hpp"

namespace tec {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline std::size_t normalize_axis(int axis, std::size_t ndim) {
    const int d = static_cast<int>(ndim);
    const int a = axis < 0 ? axis + d : axis;
    if (a < 0 || a >= d) throw DimensionError("axis " + std::to_string(axis) + " out of range");
    return static_cast<std::size_t>(a);
}

/// True when `small` is a scalar or equals the trailing dims of `big`.
inline bool broadcastable(const Shape& big, const Shape& small) {
    if (shape_numel(small) == 1) return true;
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename Fwd, typename Back>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Back back) {
    if (!broadcastable(a.shape(), b.shape()))
        throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t n = a.numel(), nb = b.numel();
    std::vector<double> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % nb]);
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return make_result(name, a.shape(), std::move(out), {&a, &b}, [pa, pb, back, n, nb](TensorImpl& self) {
        double* ga = grad_of(pa);
        double* gb = grad_of(pb);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < n; ++i) {
            double da = 0.0, db = 0.0;
            back(pa->data[i], pb->data[i % nb], g[i], da, db);
            if (ga) ga[i] += da;
            if (gb) gb[i % nb] += db;
        }
    });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
    auto px = x.impl_ptr();
    return make_result(name, x.shape(), std::move(out), {&x}, [px, deriv, n](TensorImpl& self) {
        double* gx = grad_of(px);
        if (!gx) return;
        for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i] * deriv(px->data[i], self.data[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    return a.numel() >= b.numel() ? add(a, b) : add(b, a);
}
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) {
    return a.numel() >= b.numel() ? mul(a, b) : mul(b, a);
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary_op(
        "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
    return detail::unary_op(
        "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
    return detail::unary_op(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary_op(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary_op(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary_op(
        "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

// ----------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto px = x.impl_ptr();
    return detail::make_result("sum", {1}, {s}, {&x}, [px](detail::TensorImpl& self) {
        double* gx = detail::grad_of(px);
        if (!gx) return;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += g;
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ------------------------------------------------------------- linear algebra

/// a[..., m, k] x b[k, n] with b shared across leading dims, or
/// a[..., m, k] x b[..., k, n] with identical leading dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() < 2) throw DimensionError("matmul needs rank >= 2 operands");
    const std::size_t k = a.size(-1);
    if (b.size(-2) != k)
        throw DimensionError("matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t n = b.size(-1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    auto pa = a.impl_ptr(), pb = b.impl_ptr();

    if (b.dim() == 2) {
        const std::size_t m = a.numel() / k;
        std::vector<double> out(m * n);
        detail::Map(out.data(), m, n).noalias() =
            detail::MapC(a.values().data(), m, k) * detail::MapC(b.values().data(), k, n);
        return detail::make_result("matmul", out_shape, std::move(out), {&a, &b},
                                   [pa, pb, m, k, n](detail::TensorImpl& self) {
                                       detail::MapC g(self.grad.data(), m, n);
                                       if (double* ga = detail::grad_of(pa))
                                           detail::Map(ga, m, k).noalias() +=
                                               g * detail::MapC(pb->data.data(), k, n).transpose();
                                       if (double* gb = detail::grad_of(pb))
                                           detail::Map(gb, k, n).noalias() +=
                                               detail::MapC(pa->data.data(), m, k).transpose() * g;
                                   });
    }

    if (a.dim() != b.dim() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        throw DimensionError("matmul batch dims differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t m = a.size(-2);
    const std::size_t batch = a.numel() / (m * k);
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
        detail::Map(out.data() + i * m * n, m, n).noalias() =
            detail::MapC(a.values().data() + i * m * k, m, k) *
            detail::MapC(b.values().data() + i * k * n, k, n);
    return detail::make_result(
        "matmul", out_shape, std::move(out), {&a, &b}, [pa, pb, batch, m, k, n](detail::TensorImpl& self) {
            double* ga = detail::grad_of(pa);
            double* gb = detail::grad_of(pb);
            for (std::size_t i = 0; i < batch; ++i) {
                detail::MapC g(self.grad.data() + i * m * n, m, n);
                if (ga)
                    detail::Map(ga + i * m * k, m, k).noalias() +=
                        g * detail::MapC(pb->data.data() + i * k * n, k, n).transpose();
                if (gb)
                    detail::Map(gb + i * k * n, k, n).noalias() +=
                        detail::MapC(pa->data.data() + i * m * k, m, k).transpose() * g;
            }
        });
}

/// Batched a[..., m, d] x b[..., n, d]^T -> [..., m, n].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || a.dim() != b.dim() || a.size(-1) != b.size(-1) ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    const std::size_t m = a.size(-2), d = a.size(-1), n = b.size(-2);
    const std::size_t batch = a.numel() / (m * d);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
        detail::Map(out.data() + i * m * n, m, n).noalias() =
            detail::MapC(a.values().data() + i * m * d, m, d) *
            detail::MapC(b.values().data() + i * n * d, n, d).transpose();
    auto pa = a.impl_ptr(), pb = b.impl_ptr();
    return detail::make_result(
        "matmul_nt", out_shape, std::move(out), {&a, &b}, [pa, pb, batch, m, d, n](detail::TensorImpl& self) {
            double* ga = detail::grad_of(pa);
            double* gb = detail::grad_of(pb);
            for (std::size_t i = 0; i < batch; ++i) {
                detail::MapC g(self.grad.data() + i * m * n, m, n);
                if (ga)
                    detail::Map(ga + i * m * d, m, d).noalias() +=
                        g * detail::MapC(pb->data.data() + i * n * d, n, d);
                if (gb)
                    detail::Map(gb + i * n * d, n, d).noalias() +=
                        g.transpose() * detail::MapC(pa->data.data() + i * m * d, m, d);
            }
        });
}

/// x[..., in] W[in, out] + b[out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add(matmul(x, weight), bias);
}

// -------------------------------------------------------------- normalization

/// Softmax of x / tau along `axis`, stabilised by max subtraction.
inline Tensor softmax(const Tensor& x, int axis = -1, double tau = 1.0) {
    if (!(tau > 0.0)) throw ParameterError("softmax temperature must be positive");
    const std::size_t ax = detail::normalize_axis(axis, x.dim());
    const Shape& s = x.shape();
    const std::size_t len = s[ax];
    std::size_t inner = 1;
    for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t outer = x.numel() / (len * inner);
    const auto& xv = x.values();
    std::vector<double> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = xv[base];
            for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp((xv[base + j * inner] - mx) / tau);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    auto px = x.impl_ptr();
    return detail::make_result(
        "softmax", s, std::move(out), {&x}, [px, outer, inner, len, tau](detail::TensorImpl& self) {
            double* gx = detail::grad_of(px);
            if (!gx) return;
            const auto& y = self.data;
            const auto& g = self.grad;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        gx[idx] += y[idx] * (g[idx] - dot) / tau;
                    }
                }
        });
}

/// Normalizes each row over the last axis with population variance,
/// (x - mu) / sqrt(var + eps). No affine transform.
inline Tensor layer_norm(const Tensor& x, double eps = 1e-6) {
    const std::size_t c = x.size(-1);
    const std::size_t rows = x.numel() / c;
    const auto& xv = x.values();
    std::vector<double> out(x.numel());
    std::vector<double> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (row[j] - mu) * rstd[r];
    }
    auto px = x.impl_ptr();
    return detail::make_result(
        "layer_norm", x.shape(), std::move(out), {&x},
        [px, rows, c, rstd = std::move(rstd)](detail::TensorImpl& self) {
            double* gx = detail::grad_of(px);
            if (!gx) return;
            const double inv_c = 1.0 / static_cast<double>(c);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xh = self.data.data() + r * c;
                const double* g = self.grad.data() + r * c;
                double mg = 0.0, mgx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    mg += g[j];
                    mgx += g[j] * xh[j];
                }
                mg *= inv_c;
                mgx *= inv_c;
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += rstd[r] * (g[j] - mg - xh[j] * mgx);
            }
        });
}

/// Layer norm followed by per-channel affine gamma * xhat + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6) {
    return add(mul(layer_norm(x, eps), gamma), beta);
}

// -------------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto px = x.impl_ptr();
    return detail::make_result("reshape", std::move(shape), x.values(), {&x}, [px](detail::TensorImpl& self) {
        if (double* gx = detail::grad_of(px))
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

/// Generic axis permutation: out.shape[i] = x.shape[perm[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t nd = x.dim();
    if (perm.size() != nd) throw DimensionError("permute rank mismatch");
    std::vector<bool> used(nd, false);
    for (auto p : perm) {
        if (p >= nd || used[p]) throw DimensionError("permute: invalid permutation");
        used[p] = true;
    }
    const Shape& s = x.shape();
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = s[perm[i]];
    std::vector<std::size_t> in_strides(nd, 1);
    for (std::size_t i = nd - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * s[i + 1];
    // src[i] is the input flat index of output element i
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < nd; ++d) off += idx[d] * in_strides[perm[d]];
        src[i] = off;
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<double> out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
    auto px = x.impl_ptr();
    return detail::make_result("permute", out_shape, std::move(out), {&x},
                               [px, src = std::move(src)](detail::TensorImpl& self) {
                                   if (double* gx = detail::grad_of(px))
                                       for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += self.grad[i];
                               });
}

/// Swap of the last two axes.
inline Tensor transpose(const Tensor& x) {
    std::vector<std::size_t> perm(x.dim());
    std::iota(perm.begin(), perm.end(), 0);
    if (perm.size() < 2) throw DimensionError("transpose needs rank >= 2");
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(x, perm);
}

/// Rows of x (axis 0) at `index`; repeated indices accumulate in backward.
inline Tensor index_select(const Tensor& x, const std::vector<std::size_t>& index) {
    if (index.empty()) throw DimensionError("index_select with empty index");
    const std::size_t rows = x.size(0);
    const std::size_t w = x.numel() / rows;
    for (auto i : index)
        if (i >= rows)
            throw DimensionError("index " + std::to_string(i) + " out of range for " + std::to_string(rows) +
                                 " rows");
    Shape out_shape = x.shape();
    out_shape[0] = index.size();
    std::vector<double> out(index.size() * w);
    const auto& xv = x.values();
    for (std::size_t r = 0; r < index.size(); ++r)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[r] * w), w, out.begin() + static_cast<std::ptrdiff_t>(r * w));
    auto px = x.impl_ptr();
    return detail::make_result("index_select", out_shape, std::move(out), {&x},
                               [px, index, w](detail::TensorImpl& self) {
                                   double* gx = detail::grad_of(px);
                                   if (!gx) return;
                                   for (std::size_t r = 0; r < index.size(); ++r)
                                       for (std::size_t j = 0; j < w; ++j)
                                           gx[index[r] * w + j] += self.grad[r * w + j];
                               });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw DimensionError("concat of nothing");
    const std::size_t ax = detail::normalize_axis(axis, xs[0].dim());
    Shape out_shape = xs[0].shape();
    out_shape[ax] = 0;
    for (const auto& t : xs) {
        if (t.dim() != xs[0].dim()) throw DimensionError("concat rank mismatch");
        for (std::size_t d = 0; d < t.dim(); ++d)
            if (d != ax && t.shape()[d] != xs[0].shape()[d])
                throw DimensionError("concat extent mismatch: " + shape_str(t.shape()) + " vs " +
                                     shape_str(xs[0].shape()));
        out_shape[ax] += t.shape()[ax];
    }
    std::size_t outer = 1;
    for (std::size_t d = 0; d < ax; ++d) outer *= out_shape[d];
    std::size_t inner = 1;
    for (std::size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    const std::size_t out_block = out_shape[ax] * inner;
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& t : xs) {
        const std::size_t blk = t.shape()[ax] * inner;
        offsets.push_back(off);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(o * blk), blk,
                        out.begin() + static_cast<std::ptrdiff_t>(o * out_block + off));
        off += blk;
    }
    std::vector<detail::ImplPtr> parents;
    for (const auto& t : xs) parents.push_back(t.impl_ptr());
    return detail::make_result_n(
        "concat", out_shape, std::move(out), xs,
        [parents, offsets, outer, out_block, inner, ax](detail::TensorImpl& self) {
            for (std::size_t p = 0; p < parents.size(); ++p) {
                double* gp = detail::grad_of(parents[p]);
                if (!gp) continue;
                const std::size_t blk = parents[p]->shape[ax] * inner;
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < blk; ++j)
                        gp[o * blk + j] += self.grad[o * out_block + offsets[p] + j];
            }
        });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = detail::normalize_axis(axis, x.dim());
    const Shape& s = x.shape();
    if (begin >= end || end > s[ax]) throw DimensionError("slice range out of bounds");
    std::size_t outer = 1;
    for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
    std::size_t inner = 1;
    for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
    Shape out_shape = s;
    out_shape[ax] = end - begin;
    const std::size_t in_block = s[ax] * inner, out_block = (end - begin) * inner;
    std::vector<double> out(outer * out_block);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(o * in_block + begin * inner), out_block,
                    out.begin() + static_cast<std::ptrdiff_t>(o * out_block));
    auto px = x.impl_ptr();
    return detail::make_result("slice", out_shape, std::move(out), {&x},
                               [px, outer, in_block, out_block, begin, inner](detail::TensorImpl& self) {
                                   double* gx = detail::grad_of(px);
                                   if (!gx) return;
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t j = 0; j < out_block; ++j)
                                           gx[o * in_block + begin * inner + j] += self.grad[o * out_block + j];
                               });
}

/// Stacks `times` copies of x along a new leading axis.
inline Tensor repeat_batch(const Tensor& x, std::size_t times) {
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin(), times);
    const std::size_t n = x.numel();
    std::vector<double> out(n * times);
    for (std::size_t t = 0; t < times; ++t)
        std::copy(x.values().begin(), x.values().end(), out.begin() + static_cast<std::ptrdiff_t>(t * n));
    auto px = x.impl_ptr();
    return detail::make_result("repeat_batch", out_shape, std::move(out), {&x},
                               [px, n, times](detail::TensorImpl& self) {
                                   double* gx = detail::grad_of(px);
                                   if (!gx) return;
                                   for (std::size_t t = 0; t < times; ++t)
                                       for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[t * n + i];
                               });
}

} // namespace tec
