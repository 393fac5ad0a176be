// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "tec/ops.hpp"
#include "tec/rng.hpp"

namespace tec {

struct MaskSpec {
    std::size_t L = 0;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> masked_index;  // sorted
    std::vector<std::size_t> visible_index; // sorted
    std::vector<std::uint8_t> M;            // 1 = masked

    std::size_t masked_count() const { return masked_index.size(); }
    std::size_t visible_count() const { return visible_index.size(); }
    bool is_masked(std::size_t i) const { return M.at(i) != 0; }
};

/// round(ratio * L), halves rounded up.
inline std::size_t masked_count_for(std::size_t L, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("mask ratio must lie in (0, 1)");
    const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(L) + 0.5));
    if (n < 1 || n >= L) throw ParameterError("mask ratio leaves no masked or no visible patch");
    return n;
}

/// Builds the bookkeeping for an explicit masked set (may be empty).
inline MaskSpec mask_from_indices(std::size_t L, std::vector<std::size_t> masked, double ratio = 0.0,
                                  std::uint64_t seed = 0) {
    MaskSpec m;
    m.L = L;
    m.ratio = ratio;
    m.seed = seed;
    m.M.assign(L, 0);
    std::sort(masked.begin(), masked.end());
    for (auto i : masked) {
        if (i >= L) throw DimensionError("masked index out of range");
        if (m.M[i]) throw DimensionError("duplicate masked index");
        m.M[i] = 1;
    }
    m.masked_index = std::move(masked);
    for (std::size_t i = 0; i < L; ++i)
        if (!m.M[i]) m.visible_index.push_back(i);
    return m;
}

/// Diagnostic mode: every patch visible.
inline MaskSpec no_mask(std::size_t L) { return mask_from_indices(L, {}); }

/// Uniform random subset of round(ratio*L) patches, drawn without replacement.
inline MaskSpec sample_mask(std::size_t L, double ratio, Rng& rng) {
    const std::size_t n = masked_count_for(L, ratio);
    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 0; i < n; ++i) std::swap(perm[i], perm[i + rng.below(L - i)]);
    perm.resize(n);
    return mask_from_indices(L, std::move(perm), ratio);
}

inline MaskSpec sample_mask(std::size_t L, double ratio, std::uint64_t seed) {
    Rng rng(seed);
    MaskSpec m = sample_mask(L, ratio, rng);
    m.seed = seed;
    return m;
}

struct SplitTokens {
    Tensor visible;                         // [V, d]
    std::vector<std::size_t> visible_index; // original positions
};

inline SplitTokens split_tokens(const Tensor& tokens, const MaskSpec& mask) {
    if (tokens.dim() != 2 || tokens.size(0) != mask.L)
        throw DimensionError("split_tokens: expected " + std::to_string(mask.L) + " rows, got " +
                             shape_str(tokens.shape()));
    return {index_select(tokens, mask.visible_index), mask.visible_index};
}

/// Inverse of split_tokens: visible rows return to their positions, masked
/// positions take `fill` (a [1, d] row, e.g. a mask token).
inline Tensor scatter_tokens(const Tensor& visible, const Tensor& fill, const MaskSpec& mask) {
    if (visible.dim() != 2 || visible.size(0) != mask.visible_count() || fill.numel() != visible.size(1))
        throw DimensionError("scatter_tokens: shape mismatch");
    const std::size_t v = mask.visible_count();
    std::vector<std::size_t> map(mask.L);
    std::size_t r = 0;
    for (std::size_t i = 0; i < mask.L; ++i) map[i] = mask.M[i] ? v : r++;
    return index_select(concat({visible, reshape(fill, {1, visible.size(1)})}, 0), map);
}

/// Batched un-shuffle: x [B, V+1, D] holds a class row followed by each
/// image's visible rows; returns [B, L+1, D] with visible rows at their patch
/// positions (offset by the class row) and `token` [1, D] at masked ones.
inline Tensor fill_masked(const Tensor& x, const Tensor& token, const std::vector<MaskSpec>& masks) {
    if (x.dim() != 3 || masks.size() != x.size(0) || token.numel() != x.size(2))
        throw DimensionError("fill_masked: shape mismatch");
    const std::size_t b = x.size(0), rows = x.size(1), d = x.size(2), l = masks.front().L;
    const std::size_t fill_row = b * rows;
    std::vector<std::size_t> map;
    map.reserve(b * (l + 1));
    for (std::size_t i = 0; i < b; ++i) {
        if (masks[i].L != l || masks[i].visible_count() + 1 != rows)
            throw DimensionError("fill_masked: mask inconsistent with row count");
        map.push_back(i * rows);
        std::size_t r = 1;
        for (std::size_t p = 0; p < l; ++p) map.push_back(masks[i].M[p] ? fill_row : i * rows + r++);
    }
    Tensor all = concat({reshape(x, {b * rows, d}), reshape(token, {1, d})}, 0);
    return reshape(index_select(all, map), {b, l + 1, d});
}

/// Per-image visible indices for ViT::encode.
inline std::vector<std::vector<std::size_t>> visible_lists(const std::vector<MaskSpec>& masks) {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(masks.size());
    for (const auto& m : masks) out.push_back(m.visible_index);
    return out;
}

} // namespace tec
