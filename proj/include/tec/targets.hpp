// SPDX-License-Identifier: Apache-2.0
//
// Reconstruction targets computed from a frozen base encoder: patch-dim
// normalized features and semantic attention maps. Everything here is
// constant w.r.t. the trainable model and runs without graph recording.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tec/vit.hpp"

namespace tec {

struct TargetConfig {
    double tau = 1.8;
    std::size_t k = 15;
    std::vector<std::size_t> feature_blocks; // 0-based; empty = last two blocks

    /// Resolved block list for a depth-D base.
    std::vector<std::size_t> blocks_for(std::size_t depth) const {
        if (feature_blocks.empty()) {
            if (depth >= 2) return {depth - 2, depth - 1};
            return {depth - 1};
        }
        for (auto b : feature_blocks)
            if (b >= depth) throw ParameterError("feature block " + std::to_string(b) + " out of range");
        return feature_blocks;
    }

    void validate(std::size_t L) const {
        if (!(tau > 0.0)) throw ParameterError("tau must be positive");
        if (k < 1 || k >= L) throw ParameterError("k must satisfy 1 <= k < L");
    }
};

inline void to_json(nlohmann::json& j, const TargetConfig& c) {
    j = {{"tau", c.tau}, {"k", c.k}, {"feature_blocks", c.feature_blocks}};
}

inline void from_json(const nlohmann::json& j, TargetConfig& c) {
    j.at("tau").get_to(c.tau);
    j.at("k").get_to(c.k);
    j.at("feature_blocks").get_to(c.feature_blocks);
}

/// Mean of the patch-token rows of the selected block outputs, [B, L, C].
inline Tensor average_block_features(const BlockOutputs& outs, const std::vector<std::size_t>& which) {
    if (which.empty()) throw ParameterError("no feature blocks selected");
    const Tensor& first = outs.X.at(which.front());
    const std::size_t b = first.size(0), t = first.size(1), c = first.size(2), l = t - 1;
    std::vector<double> y(b * l * c, 0.0);
    for (auto blk : which) {
        if (blk >= outs.X.size()) throw ParameterError("feature block out of range");
        const auto& xv = outs.X[blk].values();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t r = 0; r < l * c; ++r) y[i * l * c + r] += xv[i * t * c + c + r];
    }
    const double inv = 1.0 / static_cast<double>(which.size());
    for (auto& v : y) v *= inv;
    return Tensor({b, l, c}, std::move(y));
}

/// Base feature target Y [B, L, C] from full images.
inline Tensor base_features(const ViT& base, const Tensor& tokens, const std::vector<std::size_t>& blocks = {}) {
    NoGradGuard no_grad;
    TargetConfig cfg;
    cfg.feature_blocks = blocks;
    const auto which = cfg.blocks_for(base.config.depth);
    return average_block_features(base.encode(tokens).blocks, which);
}

struct FeatureTarget {
    Tensor Y;                   // [L, C]
    Tensor Y_f;                 // [L, C]
    std::vector<double> mu_L;    // [C]
    std::vector<double> sigma_L; // [C]
};

/// Standardizes each channel over the patch axis (population variance,
/// sqrt(var + eps)). Accepts [L, C] or [B, L, C]; batches normalize per image.
inline Tensor patch_dim_normalize(const Tensor& Y, double eps = 1e-6) {
    if (Y.dim() < 2) throw DimensionError("patch_dim_normalize expects [.., L, C]");
    const std::size_t l = Y.size(-2), c = Y.size(-1);
    if (l < 2) throw ParameterError("patch_dim_normalize needs L >= 2");
    const std::size_t b = Y.numel() / (l * c);
    const auto& yv = Y.values();
    std::vector<double> out(Y.numel());
    for (std::size_t i = 0; i < b; ++i) {
        const double* y = yv.data() + i * l * c;
        double* o = out.data() + i * l * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double mu = 0.0;
            for (std::size_t p = 0; p < l; ++p) mu += y[p * c + ch];
            mu /= static_cast<double>(l);
            double var = 0.0;
            for (std::size_t p = 0; p < l; ++p) var += (y[p * c + ch] - mu) * (y[p * c + ch] - mu);
            var /= static_cast<double>(l);
            const double sd = std::sqrt(var + eps);
            for (std::size_t p = 0; p < l; ++p) o[p * c + ch] = (y[p * c + ch] - mu) / sd;
        }
    }
    return Tensor(Y.shape(), std::move(out));
}

inline FeatureTarget feature_target(const Tensor& Y, double eps = 1e-6) {
    FeatureTarget ft;
    ft.Y = Y;
    ft.Y_f = patch_dim_normalize(Y, eps);
    const std::size_t l = Y.size(0), c = Y.size(1);
    ft.mu_L.assign(c, 0.0);
    ft.sigma_L.assign(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < l; ++p) ft.mu_L[ch] += Y[p * c + ch];
        ft.mu_L[ch] /= static_cast<double>(l);
        double var = 0.0;
        for (std::size_t p = 0; p < l; ++p) var += (Y[p * c + ch] - ft.mu_L[ch]) * (Y[p * c + ch] - ft.mu_L[ch]);
        ft.sigma_L[ch] = std::sqrt(var / static_cast<double>(l) + eps);
    }
    return ft;
}

/// Comparison mode: standardizes each patch row over its channels.
inline Tensor channel_dim_normalize(const Tensor& Y, double eps = 1e-6) {
    NoGradGuard no_grad;
    return layer_norm(Y.detach(), eps);
}

struct CosineStats {
    double mean = 0.0;
    std::size_t pairs = 0;
    std::size_t skipped = 0;      // pairs involving a zero-norm row
    std::vector<std::size_t> histogram; // 50 bins over [-1, 1]

    static constexpr std::size_t kBins = 50;
    static double bin_left(std::size_t i) { return -1.0 + 2.0 * static_cast<double>(i) / kBins; }
    static double bin_right(std::size_t i) { return -1.0 + 2.0 * static_cast<double>(i + 1) / kBins; }
};

/// Mean cosine similarity over unordered pairs of rows of Y [L, C].
inline CosineStats mean_pairwise_cosine(const Tensor& Y) {
    if (Y.dim() != 2) throw DimensionError("mean_pairwise_cosine expects [L, C]");
    const std::size_t l = Y.size(0), c = Y.size(1);
    if (l < 2) throw ParameterError("mean_pairwise_cosine needs L >= 2");
    const auto& yv = Y.values();
    std::vector<double> norms(l);
    for (std::size_t i = 0; i < l; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += yv[i * c + j] * yv[i * c + j];
        norms[i] = std::sqrt(s);
    }
    CosineStats st;
    st.histogram.assign(CosineStats::kBins, 0);
    double total = 0.0;
    for (std::size_t a = 0; a < l; ++a)
        for (std::size_t b = a + 1; b < l; ++b) {
            if (norms[a] == 0.0 || norms[b] == 0.0) {
                ++st.skipped;
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += yv[a * c + j] * yv[b * c + j];
            const double cs = std::clamp(dot / (norms[a] * norms[b]), -1.0, 1.0);
            total += cs;
            ++st.pairs;
            auto bin = static_cast<std::size_t>((cs + 1.0) / 2.0 * CosineStats::kBins);
            st.histogram[std::min(bin, CosineStats::kBins - 1)]++;
        }
    st.mean = st.pairs ? total / static_cast<double>(st.pairs) : 0.0;
    return st;
}

/// Head-averaged class attention A_c' [L] from A_c [H, L].
inline std::vector<double> head_average(const Tensor& A_c) {
    const std::size_t h = A_c.size(-2), l = A_c.size(-1);
    std::vector<double> avg(l, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < l; ++j) avg[j] += A_c[i * l + j];
    for (auto& v : avg) v /= static_cast<double>(h);
    return avg;
}

/// Indices of the k largest head-averaged values, ties to the lower index,
/// returned in ascending order.
inline std::vector<std::size_t> select_top_k(const std::vector<double>& scores, std::size_t k) {
    if (k < 1 || k >= scores.size()) throw ParameterError("k must satisfy 1 <= k < L");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<std::size_t> select_semantic_patches(const Tensor& A_c, std::size_t k) {
    if (A_c.dim() != 2) throw DimensionError("select_semantic_patches expects A_c [H, L]");
    return select_top_k(head_average(A_c), k);
}

struct AttentionTarget {
    std::vector<double> A_c_prime;       // [L]
    std::vector<std::size_t> selected_index; // k sorted indices
    Tensor A_s;                          // [H, k+1, L], class row last
};

/// Rows of A_s from one image's last-block logits [H, T, T] (already scaled
/// by 1/sqrt(d_head)): the selected patch queries then the class query, each
/// over the L patch keys, softmaxed at temperature tau.
inline Tensor attention_rows(const double* logits, std::size_t heads, std::size_t t,
                             const std::vector<std::size_t>& selected, double tau) {
    const std::size_t l = t - 1, rows = selected.size() + 1;
    std::vector<double> out(heads * rows * l);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t q = r < selected.size() ? selected[r] + 1 : 0;
            const double* row = logits + (h * t + q) * t + 1;
            double mx = row[0];
            for (std::size_t j = 1; j < l; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            double* o = out.data() + (h * rows + r) * l;
            for (std::size_t j = 0; j < l; ++j) {
                o[j] = std::exp((row[j] - mx) / tau);
                z += o[j];
            }
            for (std::size_t j = 0; j < l; ++j) o[j] /= z;
        }
    return Tensor({heads, rows, l}, std::move(out));
}

/// Single-image attention target from a full (unmasked) base forward.
inline AttentionTarget build_attention_target(const ViT& base, const Tensor& image_tokens, const TargetConfig& cfg) {
    NoGradGuard no_grad;
    const std::size_t l = base.config.num_patches(), h = base.config.heads;
    cfg.validate(l);
    Tensor tokens = image_tokens.dim() == 2 ? reshape(image_tokens, {1, l, base.config.patch_dim()}) : image_tokens;
    EncodeResult r = base.encode(tokens);
    Tensor a_c = class_patch_attention(r.attention.probs.back());
    AttentionTarget at;
    at.A_c_prime = head_average(reshape(a_c, {h, l}));
    at.selected_index = select_top_k(at.A_c_prime, cfg.k);
    at.A_s = attention_rows(r.attention.logits.back().values().data(), h, l + 1, at.selected_index, cfg.tau);
    return at;
}

/// Batched targets for one training step.
struct BaseTargets {
    Tensor Y;   // [B, L, C] raw averaged features
    Tensor Y_f; // [B, L, C] patch-dim normalized
    std::vector<std::vector<std::size_t>> selected; // B lists of k indices
    Tensor A_s; // [B, H, k+1, L]
    Tensor A_c; // [B, H, L]
};

inline BaseTargets compute_targets(const ViT& base, const Tensor& tokens, const TargetConfig& cfg) {
    NoGradGuard no_grad;
    const std::size_t b = tokens.size(0), l = base.config.num_patches(), h = base.config.heads, t = l + 1;
    cfg.validate(l);
    EncodeResult r = base.encode(tokens);
    BaseTargets out;
    out.Y = average_block_features(r.blocks, cfg.blocks_for(base.config.depth));
    out.Y_f = patch_dim_normalize(out.Y);
    out.A_c = class_patch_attention(r.attention.probs.back());
    const auto& logits = r.attention.logits.back().values();
    std::vector<double> a_s;
    a_s.reserve(b * h * (cfg.k + 1) * l);
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> ac(out.A_c.values().begin() + static_cast<std::ptrdiff_t>(i * h * l),
                               out.A_c.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * h * l));
        auto sel = select_top_k(head_average(Tensor({h, l}, std::move(ac))), cfg.k);
        Tensor rows = attention_rows(logits.data() + i * h * t * t, h, t, sel, cfg.tau);
        a_s.insert(a_s.end(), rows.values().begin(), rows.values().end());
        out.selected.push_back(std::move(sel));
    }
    out.A_s = Tensor({b, h, cfg.k + 1, l}, std::move(a_s));
    return out;
}

} // namespace tec
