// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit suites. The reference implementations here
// are deliberately naive (plain loops over std::vector) so they stay
// independent of the library code they check.
#pragma once

#include <cmath>
#include <vector>

#include "tec/tec.hpp"

namespace tec::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool rg = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), rg);
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

inline std::vector<double> naive_softmax(const std::vector<double>& x, double tau = 1.0) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp((x[i] - mx) / tau);
    for (auto& v : out) v /= z;
    return out;
}

/// Column mean / population std normalization of an L x C matrix.
inline std::vector<double> naive_patch_norm(const std::vector<double>& y, std::size_t l, std::size_t c,
                                            double eps = 1e-6) {
    std::vector<double> out(y.size());
    for (std::size_t j = 0; j < c; ++j) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < l; ++i) mu += y[i * c + j];
        mu /= static_cast<double>(l);
        for (std::size_t i = 0; i < l; ++i) var += (y[i * c + j] - mu) * (y[i * c + j] - mu);
        var /= static_cast<double>(l);
        for (std::size_t i = 0; i < l; ++i) out[i * c + j] = (y[i * c + j] - mu) / std::sqrt(var + eps);
    }
    return out;
}

inline double naive_cosine(const double* a, const double* b, std::size_t c) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Small encoder used across suites.
inline ViTConfig tiny_vit(std::size_t depth = 2, std::size_t image = 8, std::size_t patch = 4, std::size_t dim = 8,
                          std::size_t heads = 2) {
    ViTConfig c;
    c.image_size = image;
    c.patch_size = patch;
    c.channels = 1;
    c.depth = depth;
    c.heads = heads;
    c.embed_dim = dim;
    c.mlp_ratio = 2.0;
    return c;
}

inline void zero_param(Tensor t) {
    for (auto& v : t.mutable_data()) v = 0.0;
}

inline void jitter(const NamedTensors& params, Rng& rng, double s = 0.1) {
    for (auto [_, t] : params)
        for (auto& v : t.mutable_data()) v = to_storage(v + rng.normal(0.0, s));
}

} // namespace tec::testing
