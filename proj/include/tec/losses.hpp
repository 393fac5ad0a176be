// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "tec/masking.hpp"

namespace tec {

struct LossReport {
    double l_fea = 0.0;
    double l_att = 0.0;
    double total = 0.0;
    double lambda_att = 1.0;
    std::size_t masked_count = 0;
};

/// Mean squared error over masked rows only:
/// sum_{i masked} ||Y_f[i] - Z_f[i]||^2 / (masked_count * C), pooled over the batch.
/// Accepts [L, C] with one mask or [B, L, C] with B masks.
inline Tensor feature_loss(const Tensor& Y_f, const Tensor& Z_f, const std::vector<MaskSpec>& masks) {
    if (Y_f.shape() != Z_f.shape())
        throw DimensionError("feature_loss: shapes " + shape_str(Y_f.shape()) + " and " + shape_str(Z_f.shape()));
    const std::size_t l = Z_f.size(-2), c = Z_f.size(-1), b = Z_f.numel() / (l * c);
    if (masks.size() != b) throw DimensionError("feature_loss: one mask per image required");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < b; ++i) {
        if (masks[i].L != l) throw DimensionError("feature_loss: mask length differs from L");
        for (auto m : masks[i].masked_index) rows.push_back(i * l + m);
    }
    if (rows.empty()) throw ParameterError("feature_loss: no masked patches");
    Tensor pred = index_select(reshape(Z_f, {b * l, c}), rows);
    Tensor target = index_select(reshape(Y_f.detach(), {b * l, c}), rows);
    return scale(sum(square(sub(pred, target))), 1.0 / static_cast<double>(rows.size() * c));
}

inline Tensor feature_loss(const Tensor& Y_f, const Tensor& Z_f, const MaskSpec& mask) {
    return feature_loss(Y_f, Z_f, std::vector<MaskSpec>{mask});
}

/// Mean over rows of the cross-entropy -sum_l A_s log(Z_a + 1e-12).
inline Tensor attention_loss(const Tensor& A_s, const Tensor& Z_a) {
    if (A_s.shape() != Z_a.shape())
        throw DimensionError("attention_loss: shapes " + shape_str(A_s.shape()) + " and " + shape_str(Z_a.shape()));
    const std::size_t rows = A_s.numel() / A_s.size(-1);
    Tensor ce = sum(mul(log(add_scalar(Z_a, 1e-12)), A_s.detach()));
    return scale(ce, -1.0 / static_cast<double>(rows));
}

inline Tensor total_loss(const Tensor& l_fea, const Tensor& l_att, double lambda_att = 1.0) {
    if (!(lambda_att >= 0.0)) throw ParameterError("lambda_att must be nonnegative");
    return add(l_fea, scale(l_att, lambda_att));
}

} // namespace tec
