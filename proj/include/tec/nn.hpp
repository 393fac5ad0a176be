// SPDX-License-Identifier: Apache-2.0
//
// Layers shared by the encoder, adapters and decoders. Layers are plain
// aggregates of parameter tensors; `collect` appends (name, tensor) pairs so a
// model's parameters can be enumerated for optimizers and checkpoints.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tec/ops.hpp"
#include "tec/rng.hpp"

namespace tec {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Parameters are kept exactly representable in f32 so that f32 checkpoints
/// reproduce them bit for bit; arithmetic stays in f64.
inline double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

inline Tensor make_param(Shape shape, std::vector<double> values) {
    for (auto& v : values) v = to_storage(v);
    return Tensor(std::move(shape), std::move(values), true);
}

inline Tensor normal_param(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return make_param(std::move(shape), std::move(v));
}

inline Tensor constant_param(Shape shape, double value) {
    return make_param(shape, std::vector<double>(shape_numel(shape), value));
}

/// Deep copy of values from `src` into the same-named tensors of `dst`.
inline void copy_parameters(const NamedTensors& src, NamedTensors& dst) {
    if (src.size() != dst.size()) throw ConfigError("parameter sets differ in size");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
            throw ConfigError("parameter mismatch at " + src[i].first);
        auto d = dst[i].second.mutable_data();
        std::copy(src[i].second.data().begin(), src[i].second.data().end(), d.begin());
    }
}

inline std::size_t parameter_count(const NamedTensors& params) {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.numel();
    return n;
}

struct Linear {
    Tensor weight; // [in, out]
    Tensor bias;   // [out]

    Linear() = default;

    /// Xavier-uniform weight, zero bias.
    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        std::vector<double> w(in * out);
        for (auto& x : w) x = rng.uniform(-limit, limit);
        weight = make_param({in, out}, std::move(w));
        bias = constant_param({out}, 0.0);
    }

    std::size_t in_features() const { return weight.size(0); }
    std::size_t out_features() const { return weight.size(1); }

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

    void collect(const std::string& prefix, NamedTensors& out) const {
        out.emplace_back(prefix + "weight", weight);
        out.emplace_back(prefix + "bias", bias);
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim) : gamma(constant_param({dim}, 1.0)), beta(constant_param({dim}, 0.0)) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-6); }

    void collect(const std::string& prefix, NamedTensors& out) const {
        out.emplace_back(prefix + "gamma", gamma);
        out.emplace_back(prefix + "beta", beta);
    }
};

/// fc1 -> GELU -> fc2.
struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

    void collect(const std::string& prefix, NamedTensors& out) const {
        fc1.collect(prefix + "fc1.", out);
        fc2.collect(prefix + "fc2.", out);
    }
};

/// [B, T, H*d] -> [B, H, T, d]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.size(0), t = x.size(1), c = x.size(2);
    if (c % heads != 0) throw DimensionError("width not divisible by head count");
    return permute(reshape(x, {b, t, heads, c / heads}), {0, 2, 1, 3});
}

/// [B, H, T, d] -> [B, T, H*d]
inline Tensor merge_heads(const Tensor& x) {
    const std::size_t b = x.size(0), h = x.size(1), t = x.size(2), d = x.size(3);
    return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * d});
}

struct AttentionOutput {
    Tensor out;    // [B, T, C]
    Tensor probs;  // [B, H, T, T] post-softmax
    Tensor logits; // [B, H, T, T] q.k / sqrt(d_head), pre-softmax
};

struct MultiHeadAttention {
    std::size_t heads = 1;
    Linear q, k, v, proj;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t num_heads, Rng& rng)
        : heads(num_heads), q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), proj(dim, dim, rng) {
        if (dim % num_heads != 0) throw ConfigError("embedding width must be divisible by head count");
    }

    AttentionOutput operator()(const Tensor& x) const {
        const std::size_t head_dim = x.size(2) / heads;
        Tensor qh = split_heads(q(x), heads);
        Tensor kh = split_heads(k(x), heads);
        Tensor vh = split_heads(v(x), heads);
        Tensor logits = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        Tensor probs = softmax(logits, -1);
        Tensor out = proj(merge_heads(matmul(probs, vh)));
        return {out, probs, logits};
    }

    void collect(const std::string& prefix, NamedTensors& out) const {
        q.collect(prefix + "q.", out);
        k.collect(prefix + "k.", out);
        v.collect(prefix + "v.", out);
        proj.collect(prefix + "proj.", out);
    }
};

/// Pre-norm transformer block: x + attn(ln1(x)), then + mlp(ln2(.)).
struct TransformerBlock {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Mlp mlp;

    TransformerBlock() = default;
    TransformerBlock(std::size_t dim, std::size_t heads, double mlp_ratio, Rng& rng)
        : ln1(dim),
          attn(dim, heads, rng),
          ln2(dim),
          mlp(dim, static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio), dim, rng) {}

    AttentionOutput operator()(const Tensor& x) const {
        AttentionOutput a = attn(ln1(x));
        Tensor h = add(x, a.out);
        Tensor y = add(h, mlp(ln2(h)));
        return {y, a.probs, a.logits};
    }

    void collect(const std::string& prefix, NamedTensors& out) const {
        ln1.collect(prefix + "ln1.", out);
        attn.collect(prefix + "attn.", out);
        ln2.collect(prefix + "ln2.", out);
        mlp.collect(prefix + "mlp.", out);
    }
};

} // namespace tec
